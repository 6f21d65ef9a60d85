"""A small SMT-LIB 2 reader for the QF_BV subset the emitter produces.

It tokenizes, builds s-expressions and type-checks every term against the
declared bitvector widths.  Anything outside the subset is a syntax error.
"""

from __future__ import annotations

import re

_TOKEN = re.compile(r"\s*(?:(;[^\n]*)|(\()|(\))|(#x[0-9a-fA-F]+|#b[01]+)|(\d+)|([A-Za-z_~!@$%^&*+=<>.?/\-][A-Za-z0-9_~!@$%^&*+=<>.?/\-]*))")

BINARY_BV = {"bvadd", "bvsub", "bvmul", "bvudiv", "bvurem", "bvand", "bvor", "bvxor", "bvshl", "bvlshr"}


class SmtSyntaxError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    out = []
    pos = 0
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise SmtSyntaxError(f"bad token at offset {pos}: {text[pos:pos + 10]!r}")
        pos = m.end()
        if m.group(1) is None:
            out.append(next(g for g in m.groups()[1:] if g is not None))
    return out


def parse(tokens: list[str]) -> list:
    stack: list[list] = [[]]
    for tok in tokens:
        if tok == "(":
            stack.append([])
        elif tok == ")":
            if len(stack) == 1:
                raise SmtSyntaxError("unbalanced ')'")
            done = stack.pop()
            stack[-1].append(done)
        else:
            stack[-1].append(tok)
    if len(stack) != 1:
        raise SmtSyntaxError("unbalanced '('")
    return stack[0]


def _literal_width(tok: str) -> int | None:
    if tok.startswith("#x"):
        return 4 * (len(tok) - 2)
    if tok.startswith("#b"):
        return len(tok) - 2
    return None


def sort_of(term, env: dict[str, int]) -> int | str:
    """Bit width of a bitvector term, or ``"Bool"``."""
    if isinstance(term, str):
        w = _literal_width(term)
        if w is not None:
            return w
        if term in env:
            return env[term]
        raise SmtSyntaxError(f"undeclared symbol {term!r}")
    if not term or not isinstance(term[0], str):
        raise SmtSyntaxError(f"malformed term {term!r}")
    head, args = term[0], term[1:]
    sorts = [sort_of(a, env) for a in args]
    if head in BINARY_BV:
        if len(args) != 2 or sorts[0] != sorts[1] or sorts[0] == "Bool":
            raise SmtSyntaxError(f"bad operands for {head}")
        return sorts[0]
    if head == "bvneg":
        if len(args) != 1 or sorts[0] == "Bool":
            raise SmtSyntaxError("bad bvneg")
        return sorts[0]
    if head == "bvslt":
        if len(args) != 2 or sorts[0] != sorts[1] or sorts[0] == "Bool":
            raise SmtSyntaxError("bad bvslt")
        return "Bool"
    if head == "ite":
        if len(args) != 3 or sorts[0] != "Bool" or sorts[1] != sorts[2]:
            raise SmtSyntaxError("bad ite")
        return sorts[1]
    if head == "distinct":
        if len(args) < 2 or len(set(sorts)) != 1 or sorts[0] == "Bool":
            raise SmtSyntaxError("bad distinct")
        return "Bool"
    if head in ("or", "and"):
        if not args or any(s != "Bool" for s in sorts):
            raise SmtSyntaxError(f"bad {head}")
        return "Bool"
    raise SmtSyntaxError(f"unknown function {head!r}")


def validate(text: str) -> dict[str, int]:
    """Check a whole script; returns the declared constants and widths."""
    commands = parse(tokenize(text))
    if not commands or commands[0] != ["set-logic", "QF_BV"]:
        raise SmtSyntaxError("script must start with (set-logic QF_BV)")
    env: dict[str, int] = {}
    asserts = 0
    for cmd in commands[1:]:
        if not isinstance(cmd, list) or not cmd:
            raise SmtSyntaxError(f"top-level item {cmd!r} is not a command")
        head = cmd[0]
        if head == "declare-const":
            if len(cmd) != 3 or not isinstance(cmd[1], str) or cmd[2][:2] != ["_", "BitVec"] or len(cmd[2]) != 3:
                raise SmtSyntaxError(f"bad declaration {cmd!r}")
            if cmd[1] in env:
                raise SmtSyntaxError(f"{cmd[1]} declared twice")
            env[cmd[1]] = int(cmd[2][2])
        elif head == "assert":
            if len(cmd) != 2 or sort_of(cmd[1], env) != "Bool":
                raise SmtSyntaxError("assert needs one Boolean term")
            asserts += 1
        elif head in ("check-sat", "get-model"):
            if len(cmd) != 1:
                raise SmtSyntaxError(f"{head} takes no arguments")
        else:
            raise SmtSyntaxError(f"unsupported command {head!r}")
    if asserts == 0:
        raise SmtSyntaxError("no assertion")
    return env
