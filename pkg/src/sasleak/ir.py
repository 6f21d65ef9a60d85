"""Three-address intermediate representation.

The textual format is line oriented::

    entry main                     # optional, defaults to the first function
    func main params=0
    @secret ebx
    @secret_region esi size=64
      assign eax, ebx + 1
      load ecx, [esi+4]
    loop:
      jcc ecx, loop
      call helper
      ret

Opcodes are ``assign``, ``load``, ``store``, ``iszero``, ``jcc``, ``call`` and
``ret``; ``jmp L`` is accepted as shorthand for ``jcc 1, L``.  Expressions are
infix over ``+ - * / % & | ^`` and ``<<>>`` (the bidirectional shift: a
positive amount shifts left, a negative one shifts right).  ``@label`` inside
an expression denotes the pc of that label, which is how indirect jump
targets (``jcc c, *reg [L1, L2]``) get their values.

Instructions before any ``func`` line form an implicit function ``main``, and
a body whose last instruction can fall through gets an implicit ``ret``.

Immediate addressing is desugared while parsing: ``load r, 0x40`` becomes
``assign r, 0x40`` followed by ``load r, [r]``, and literal store operands are
first moved into fresh ``_immN`` registers.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from typing import Iterator, Union

DEFAULT_WIDTH = 32
STACK_REGISTER = "esp"
RETURN_REGISTER = "eax"
WORD_BYTES = 4


class BinOp(enum.Enum):
    ADD = "+"
    SUB = "-"
    MUL = "*"
    DIV = "/"
    MOD = "%"
    AND = "&"
    OR = "|"
    XOR = "^"
    BSH = "<<>>"


@dataclass(frozen=True)
class Reg:
    name: str

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class Lit:
    value: int

    def __str__(self) -> str:
        return str(self.value) if self.value < 10 else hex(self.value)


@dataclass(frozen=True)
class BinExpr:
    op: BinOp
    left: "Expr"
    right: "Expr"

    def __str__(self) -> str:
        return f"({self.left} {self.op.value} {self.right})"


Expr = Union[Reg, Lit, BinExpr]
Operand = Union[Reg, Lit]


@dataclass(frozen=True)
class Assign:
    dst: str
    rhs: Expr


@dataclass(frozen=True)
class Load:
    dst: str
    addr: str
    offset: int = 0


@dataclass(frozen=True)
class Store:
    src: str
    addr: str
    offset: int = 0


@dataclass(frozen=True)
class IsZero:
    dst: str
    src: str


@dataclass(frozen=True)
class Jcc:
    """Conditional jump.

    ``labels`` holds the static target for a direct jump, or the declared
    target set when ``register`` names an indirect target.
    """

    cond: Operand
    labels: tuple[str, ...]
    register: str | None = None


@dataclass(frozen=True)
class Call:
    callee: str


@dataclass(frozen=True)
class Ret:
    pass


Instr = Union[Assign, Load, Store, IsZero, Jcc, Call, Ret]


@dataclass(frozen=True)
class RegisterSecret:
    register: str


@dataclass(frozen=True)
class SecretRegionBase:
    register: str
    size: int


SecretAnnotation = Union[RegisterSecret, SecretRegionBase]


@dataclass(frozen=True)
class Function:
    name: str
    param_count: int
    entry_pc: int
    end_pc: int  # exclusive
    annotations: tuple[SecretAnnotation, ...] = ()

    @property
    def body(self) -> range:
        return range(self.entry_pc, self.end_pc)


@dataclass(frozen=True)
class Diagnostic:
    message: str
    line: int | None = None
    column: int | None = None
    pc: int | None = None
    severity: str = "error"

    def __str__(self) -> str:
        where = []
        if self.line is not None:
            where.append(f"{self.line}:{self.column or 1}")
        if self.pc is not None:
            where.append(f"pc {self.pc}")
        prefix = " ".join(where)
        return f"{prefix}: {self.severity}: {self.message}" if prefix else f"{self.severity}: {self.message}"


class IRError(Exception):
    def __init__(self, diagnostics: list[Diagnostic]):
        self.diagnostics = diagnostics
        super().__init__("\n".join(str(d) for d in diagnostics))


@dataclass(frozen=True)
class Program:
    instrs: tuple[Instr, ...]
    functions: tuple[Function, ...]
    labels: dict[str, int]
    entry: str
    width: int = DEFAULT_WIDTH
    lines: tuple[int, ...] = field(default=(), compare=False)

    def __len__(self) -> int:
        return len(self.instrs)

    def function(self, name: str) -> Function:
        for fn in self.functions:
            if fn.name == name:
                return fn
        raise KeyError(name)

    def function_at(self, pc: int) -> Function:
        for fn in self.functions:
            if fn.entry_pc <= pc < fn.end_pc:
                return fn
        raise KeyError(pc)

    @property
    def entry_function(self) -> Function:
        return self.function(self.entry)

    @property
    def secret_annotations(self) -> tuple[SecretAnnotation, ...]:
        return self.entry_function.annotations

    def jump_targets(self, pc: int) -> tuple[int, ...]:
        instr = self.instrs[pc]
        assert isinstance(instr, Jcc)
        return tuple(sorted({self.labels[l] for l in instr.labels}))


def successors(program: Program, pc: int) -> frozenset[int]:
    """CFG successors of ``pc`` within its function.

    Calls fall through; the callee is entered by the interprocedural engine.
    A jump on a literal condition only keeps the edge it can take.
    """
    instr = program.instrs[pc]
    if isinstance(instr, Ret):
        return frozenset()
    if isinstance(instr, Jcc):
        targets = set(program.jump_targets(pc))
        if isinstance(instr.cond, Lit):
            return frozenset(targets if instr.cond.value else {pc + 1})
        return frozenset(targets | {pc + 1})
    return frozenset({pc + 1})


def registers_of(instr: Instr) -> tuple[set[str], set[str]]:
    """Registers read and written by one instruction."""
    if isinstance(instr, Assign):
        return set(_expr_regs(instr.rhs)), {instr.dst}
    if isinstance(instr, Load):
        return {instr.addr}, {instr.dst}
    if isinstance(instr, Store):
        return {instr.src, instr.addr}, set()
    if isinstance(instr, IsZero):
        return {instr.src}, {instr.dst}
    if isinstance(instr, Jcc):
        reads = {instr.cond.name} if isinstance(instr.cond, Reg) else set()
        if instr.register:
            reads.add(instr.register)
        return reads, set()
    return set(), set()


def _expr_regs(expr: Expr) -> Iterator[str]:
    if isinstance(expr, Reg):
        yield expr.name
    elif isinstance(expr, BinExpr):
        yield from _expr_regs(expr.left)
        yield from _expr_regs(expr.right)


# --------------------------------------------------------------------------
# Parsing
# --------------------------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:(?P<num>0[xX][0-9a-fA-F_]+|\d[\d_]*)"
    r"|(?P<ident>[A-Za-z_][A-Za-z0-9_.]*)"
    r"|(?P<op><<>>|[-+*/%&|^()\[\],:@=*]))"
)
_IDENT = re.compile(r"[A-Za-z_][A-Za-z0-9_.]*\Z")


@dataclass
class _Tok:
    kind: str
    text: str
    col: int


class _SyntaxError(Exception):
    def __init__(self, message: str, col: int):
        super().__init__(message)
        self.col = col


def _tokenize(text: str, col0: int) -> list[_Tok]:
    toks: list[_Tok] = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise _SyntaxError(f"unexpected character {text[pos:].lstrip()[:1]!r}", col0 + pos)
        kind = m.lastgroup or "op"
        toks.append(_Tok(kind, m.group(kind), col0 + m.start(kind)))
        pos = m.end()
    return toks


class _LabelRef:
    """Placeholder for ``@label`` until labels are resolved."""

    def __init__(self, name: str, col: int):
        self.name = name
        self.col = col


_PRECEDENCE = [
    {"|": BinOp.OR},
    {"^": BinOp.XOR},
    {"&": BinOp.AND},
    {"<<>>": BinOp.BSH},
    {"+": BinOp.ADD, "-": BinOp.SUB},
    {"*": BinOp.MUL, "/": BinOp.DIV, "%": BinOp.MOD},
]


class _ExprParser:
    def __init__(self, toks: list[_Tok], width: int, end_col: int):
        self.toks = toks
        self.i = 0
        self.width = width
        self.end_col = end_col

    def peek(self) -> _Tok | None:
        return self.toks[self.i] if self.i < len(self.toks) else None

    def take(self, text: str | None = None) -> _Tok:
        tok = self.peek()
        if tok is None:
            raise _SyntaxError(f"expected {text or 'operand'}, found end of line", self.end_col)
        if text is not None and tok.text != text:
            raise _SyntaxError(f"expected {text!r}, found {tok.text!r}", tok.col)
        self.i += 1
        return tok

    def expr(self, level: int = 0):
        if level == len(_PRECEDENCE):
            return self.unary()
        left = self.expr(level + 1)
        while (tok := self.peek()) is not None and tok.kind == "op" and tok.text in _PRECEDENCE[level]:
            self.i += 1
            right = self.expr(level + 1)
            left = BinExpr(_PRECEDENCE[level][tok.text], left, right)
        return left

    def unary(self):
        tok = self.peek()
        if tok is not None and tok.text == "-":
            self.i += 1
            inner = self.unary()
            if isinstance(inner, Lit):
                return Lit((-inner.value) % (1 << self.width))
            return BinExpr(BinOp.SUB, Lit(0), inner)
        return self.atom()

    def atom(self):
        tok = self.take()
        if tok.kind == "num":
            return self.literal(tok)
        if tok.kind == "ident":
            return Reg(tok.text)
        if tok.text == "(":
            inner = self.expr()
            self.take(")")
            return inner
        if tok.text == "@":
            name = self.take()
            if name.kind != "ident":
                raise _SyntaxError("expected label name after '@'", name.col)
            return _LabelRef(name.text, name.col)
        raise _SyntaxError(f"unexpected {tok.text!r}", tok.col)

    def literal(self, tok: _Tok) -> Lit:
        value = int(tok.text.replace("_", ""), 0)
        if value >= 1 << self.width:
            raise _SyntaxError(f"literal {tok.text} overflows {self.width} bits", tok.col)
        return Lit(value)

    def done(self) -> None:
        tok = self.peek()
        if tok is not None:
            raise _SyntaxError(f"unexpected trailing {tok.text!r}", tok.col)


@dataclass
class _PendingFn:
    name: str
    params: int
    line: int
    entry_pc: int
    annotations: list = field(default_factory=list)


def parse_program(text: str, width: int = DEFAULT_WIDTH) -> Program:
    """Parse and validate IR source; raises :class:`IRError` listing every problem."""
    diags: list[Diagnostic] = []
    instrs: list = []
    lines: list[int] = []
    labels: dict[str, int] = {}
    label_lines: dict[str, int] = {}
    functions: list[_PendingFn] = []
    entry: str | None = None
    pending_labels: list[tuple[str, int, int]] = []
    imm_counter = 0

    def error(msg: str, line: int, col: int = 1) -> None:
        diags.append(Diagnostic(msg, line, col))

    def emit(instr, line: int) -> None:
        instrs.append(instr)
        lines.append(line)

    def close_function() -> None:
        # a body that can fall off its end gets an implicit ret
        if functions and len(instrs) > functions[-1].entry_pc and _falls_through(instrs[-1]):
            emit(Ret(), lines[-1])

    def fresh_temp() -> str:
        nonlocal imm_counter
        name = f"_imm{imm_counter}"
        imm_counter += 1
        return name

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0]
        if not line.strip():
            continue
        stripped = line.strip()
        col0 = len(line) - len(line.lstrip()) + 1
        words = stripped.split()
        try:
            if words[0] == "entry" and len(words) == 2 and not line[0].isspace():
                entry = words[1]
                continue
            if words[0] == "func":
                if pending_labels:
                    error(f"label {pending_labels[0][0]!r} not attached to an instruction", pending_labels[0][1])
                    pending_labels.clear()
                close_function()
                functions.append(_parse_func_header(words, lineno, col0, len(instrs)))
                continue
            if words[0].startswith("@"):
                if not functions or len(instrs) != functions[-1].entry_pc:
                    raise _SyntaxError("annotations must directly follow a 'func' line", col0)
                functions[-1].annotations.append(_parse_annotation(words, col0))
                continue
            if not functions:
                if entry is not None and entry != "main":
                    raise _SyntaxError("instruction outside of a function", col0)
                functions.append(_PendingFn("main", 0, lineno, len(instrs)))

            toks = _tokenize(line, 1)
            if len(toks) >= 2 and toks[0].kind == "ident" and toks[1].text == ":":
                pending_labels.append((toks[0].text, lineno, toks[0].col))
                toks = toks[2:]
                if not toks:
                    continue
            for name, lno, col in pending_labels:
                if name in labels:
                    error(f"duplicate label {name!r} (first defined on line {label_lines[name]})", lno, col)
                else:
                    labels[name] = len(instrs)
                    label_lines[name] = lno
            pending_labels.clear()
            for instr in _parse_instr(toks, width, len(line) + 1, fresh_temp):
                emit(instr, lineno)
        except _SyntaxError as exc:
            error(str(exc), lineno, exc.col)

    for name, lno, col in pending_labels:
        error(f"label {name!r} not attached to an instruction", lno, col)
    close_function()

    # function table
    fns: list[Function] = []
    seen: dict[str, int] = {}
    for i, pf in enumerate(functions):
        end = functions[i + 1].entry_pc if i + 1 < len(functions) else len(instrs)
        if pf.name in seen:
            error(f"duplicate function name {pf.name!r} (first defined on line {seen[pf.name]})", pf.line)
            continue
        seen[pf.name] = pf.line
        if end == pf.entry_pc:
            error(f"function {pf.name!r} has no instructions", pf.line)
            continue
        fns.append(Function(pf.name, pf.params, pf.entry_pc, end, tuple(pf.annotations)))
    if not fns and not diags:
        error("program defines no functions", 1)

    # resolve @label references inside expressions
    resolved = []
    for pc, instr in enumerate(instrs):
        if isinstance(instr, Assign):
            try:
                instr = Assign(instr.dst, _resolve_labels(instr.rhs, labels))
            except _SyntaxError as exc:
                error(str(exc), lines[pc], exc.col)
        resolved.append(instr)

    if diags:
        raise IRError(diags)

    if entry is None:
        entry = fns[0].name
    program = Program(tuple(resolved), tuple(fns), labels, entry, width, tuple(lines))
    errors = [d for d in validate(program) if d.severity == "error"]
    if errors:
        raise IRError(errors)
    return program


def _falls_through(instr) -> bool:
    if isinstance(instr, Ret):
        return False
    return not (isinstance(instr, Jcc) and isinstance(instr.cond, Lit) and instr.cond.value)


def _parse_func_header(words: list[str], lineno: int, col: int, pc: int) -> _PendingFn:
    if len(words) < 2 or not _IDENT.match(words[1]):
        raise _SyntaxError("expected 'func <name> [params=<k>]'", col)
    params = 0
    for w in words[2:]:
        key, _, val = w.partition("=")
        if key != "params" or not val.isdigit():
            raise _SyntaxError(f"unknown function attribute {w!r}", col)
        params = int(val)
    return _PendingFn(words[1], params, lineno, pc)


def _parse_annotation(words: list[str], col: int) -> SecretAnnotation:
    kind = words[0]
    if kind == "@secret" and len(words) == 2 and _IDENT.match(words[1]):
        return RegisterSecret(words[1])
    if kind == "@secret_region" and len(words) == 3 and _IDENT.match(words[1]):
        key, _, val = words[2].partition("=")
        if key == "size":
            try:
                size = int(val, 0)
            except ValueError:
                size = 0
            if size > 0:
                return SecretRegionBase(words[1], size)
        raise _SyntaxError("expected 'size=<bytes>' with a positive size", col)
    raise _SyntaxError(f"malformed annotation {' '.join(words)!r}", col)


def _split_operands(toks: list[_Tok]) -> list[list[_Tok]]:
    parts: list[list[_Tok]] = [[]]
    depth = 0
    for tok in toks:
        if tok.text in "([":
            depth += 1
        elif tok.text in ")]":
            depth -= 1
        if tok.text == "," and depth == 0:
            parts.append([])
        else:
            parts[-1].append(tok)
    return parts


def _register(toks: list[_Tok], what: str, end_col: int) -> str:
    if len(toks) != 1 or toks[0].kind != "ident":
        col = toks[0].col if toks else end_col
        raise _SyntaxError(f"{what} must be a register", col)
    return toks[0].text


def _address(toks: list[_Tok], width: int, end_col: int):
    """Parse ``reg``, ``[reg]``, ``[reg+off]``, ``[reg-off]`` or a literal."""
    if toks and toks[0].text == "[":
        if toks[-1].text != "]":
            raise _SyntaxError("unterminated '['", toks[0].col)
        toks = toks[1:-1]
    if len(toks) == 1 and toks[0].kind == "num":
        return _ExprParser(toks, width, end_col).literal(toks[0]), 0
    if not toks or toks[0].kind != "ident":
        raise _SyntaxError("address must be a register, [reg+off] or a literal", toks[0].col if toks else end_col)
    reg = toks[0].text
    if len(toks) == 1:
        return reg, 0
    if len(toks) == 3 and toks[1].text in "+-" and toks[2].kind == "num":
        off = int(toks[2].text.replace("_", ""), 0)
        return reg, off if toks[1].text == "+" else -off
    raise _SyntaxError("address offset must be a literal", toks[1].col)


def _parse_instr(toks: list[_Tok], width: int, end_col: int, fresh_temp) -> list:
    head = toks[0]
    if head.kind != "ident":
        raise _SyntaxError(f"expected opcode, found {head.text!r}", head.col)
    op = head.text
    ops = _split_operands(toks[1:]) if len(toks) > 1 else []

    def arity(n: int) -> None:
        if len(ops) != n or any(not o for o in ops):
            raise _SyntaxError(f"'{op}' takes {n} operand(s)", head.col)

    if op == "assign":
        arity(2)
        dst = _register(ops[0], "destination", end_col)
        parser = _ExprParser(ops[1], width, end_col)
        rhs = parser.expr()
        parser.done()
        return [Assign(dst, rhs)]
    if op == "load":
        arity(2)
        dst = _register(ops[0], "destination", end_col)
        addr, off = _address(ops[1], width, end_col)
        if isinstance(addr, Lit):
            return [Assign(dst, addr), Load(dst, dst)]
        return [Load(dst, addr, off)]
    if op == "store":
        arity(2)
        out = []
        src_toks = ops[0]
        if len(src_toks) == 1 and src_toks[0].kind == "num":
            tmp = fresh_temp()
            out.append(Assign(tmp, _ExprParser(src_toks, width, end_col).literal(src_toks[0])))
            src = tmp
        else:
            src = _register(src_toks, "store source", end_col)
        addr, off = _address(ops[1], width, end_col)
        if isinstance(addr, Lit):
            tmp = fresh_temp()
            out.append(Assign(tmp, addr))
            addr = tmp
        out.append(Store(src, addr, off))
        return out
    if op == "iszero":
        arity(2)
        return [IsZero(_register(ops[0], "destination", end_col), _register(ops[1], "source", end_col))]
    if op in ("jcc", "jmp"):
        if op == "jmp":
            arity(1)
            cond: Operand = Lit(1)
            target = ops[0]
        else:
            arity(2)
            ctoks = ops[0]
            if len(ctoks) == 1 and ctoks[0].kind == "num":
                cond = _ExprParser(ctoks, width, end_col).literal(ctoks[0])
            else:
                cond = Reg(_register(ctoks, "jump condition", end_col))
            target = ops[1]
        return [_parse_target(cond, target, end_col)]
    if op == "call":
        arity(1)
        return [Call(_register(ops[0], "callee", end_col))]
    if op == "ret":
        arity(0)
        return [Ret()]
    raise _SyntaxError(f"unknown opcode {op!r}", head.col)


def _parse_target(cond: Operand, toks: list[_Tok], end_col: int) -> Jcc:
    if toks[0].text == "*":
        if len(toks) < 2 or toks[1].kind != "ident":
            raise _SyntaxError("expected register after '*'", toks[0].col)
        reg = toks[1].text
        rest = toks[2:]
        if not rest:
            return Jcc(cond, (), reg)
        if rest[0].text != "[" or rest[-1].text != "]":
            raise _SyntaxError("indirect targets are declared as [L1, L2, ...]", rest[0].col)
        names = [t.text for t in rest[1:-1] if t.text != ","]
        if not names or any(not _IDENT.match(n) for n in names):
            raise _SyntaxError("malformed indirect target list", rest[0].col)
        return Jcc(cond, tuple(names), reg)
    if len(toks) != 1 or toks[0].kind != "ident":
        raise _SyntaxError("jump target must be a label", toks[0].col)
    return Jcc(cond, (toks[0].text,))


def _resolve_labels(expr, labels: dict[str, int]):
    if isinstance(expr, _LabelRef):
        if expr.name not in labels:
            raise _SyntaxError(f"unresolved label {expr.name!r}", expr.col)
        return Lit(labels[expr.name])
    if isinstance(expr, BinExpr):
        return BinExpr(expr.op, _resolve_labels(expr.left, labels), _resolve_labels(expr.right, labels))
    return expr


# --------------------------------------------------------------------------
# Validation
# --------------------------------------------------------------------------


def validate(program: Program) -> list[Diagnostic]:
    """Check structural invariants; problems are reported, never raised."""
    diags: list[Diagnostic] = []
    n = len(program.instrs)
    names = [fn.name for fn in program.functions]

    def report(msg: str, pc: int | None = None, severity: str = "error") -> None:
        line = program.lines[pc] if pc is not None and pc < len(program.lines) else None
        diags.append(Diagnostic(msg, line, None, pc, severity))

    covered = sorted((fn.entry_pc, fn.end_pc) for fn in program.functions)
    pos = 0
    for start, end in covered:
        if start != pos:
            report(f"pcs {pos}..{start - 1} belong to no function")
        pos = end
    if pos != n:
        report(f"pcs {pos}..{n - 1} belong to no function")
    if len(set(names)) != len(names):
        report("duplicate function names")
    if program.entry not in names:
        report(f"entry function {program.entry!r} is not defined")

    width_mask = (1 << program.width) - 1
    for pc, instr in enumerate(program.instrs):
        fn = _owner(program, pc)
        if fn is None:
            continue
        for lit in _literals(instr):
            if lit.value < 0 or lit.value > width_mask:
                report(f"literal {lit.value} does not fit in {program.width} bits", pc)
        if isinstance(instr, Call) and instr.callee not in names:
            report(f"call to unknown function {instr.callee!r}", pc)
        if isinstance(instr, Jcc):
            if instr.register is not None and not instr.labels:
                report(f"indirect jump via {instr.register!r} has no declared label set", pc)
            for label in instr.labels:
                if label not in program.labels:
                    report(f"unresolved label {label!r}", pc)
                elif not fn.entry_pc <= program.labels[label] < fn.end_pc:
                    report(f"label {label!r} lies outside function {fn.name!r}", pc)
        if _falls_through(instr) and pc + 1 >= fn.end_pc:
            report(f"control falls off the end of function {fn.name!r}", pc)

    for fn in program.functions:
        region_regs: set[str] = set()
        used: set[str] = {STACK_REGISTER}
        for pc in fn.body:
            reads, writes = registers_of(program.instrs[pc])
            used |= reads | writes
        for ann in fn.annotations:
            if fn.name != program.entry:
                report(f"secret annotation on non-entry function {fn.name!r}", fn.entry_pc)
            if ann.register not in used:
                report(f"annotated register {ann.register!r} is never used in {fn.name!r}", fn.entry_pc)
            if isinstance(ann, SecretRegionBase):
                if ann.register in region_regs:
                    report(f"register {ann.register!r} annotated as a secret region twice", fn.entry_pc)
                region_regs.add(ann.register)

    if any(d.severity == "error" for d in diags):
        return diags
    for fn in program.functions:
        reachable = _reachable(program, fn)
        dead = [pc for pc in fn.body if pc not in reachable]
        if dead:
            report(f"unreachable code in {fn.name!r}: pcs {dead}", dead[0], severity="warning")
    return diags


def _owner(program: Program, pc: int) -> Function | None:
    try:
        return program.function_at(pc)
    except KeyError:
        return None


def _literals(instr: Instr) -> Iterator[Lit]:
    def walk(e):
        if isinstance(e, Lit):
            yield e
        elif isinstance(e, BinExpr):
            yield from walk(e.left)
            yield from walk(e.right)

    if isinstance(instr, Assign):
        yield from walk(instr.rhs)
    elif isinstance(instr, Jcc) and isinstance(instr.cond, Lit):
        yield instr.cond


def _reachable(program: Program, fn: Function) -> set[int]:
    seen = {fn.entry_pc}
    stack = [fn.entry_pc]
    while stack:
        pc = stack.pop()
        for nxt in successors(program, pc):
            if nxt not in seen and fn.entry_pc <= nxt < fn.end_pc:
                seen.add(nxt)
                stack.append(nxt)
    return seen


# --------------------------------------------------------------------------
# Pretty printing
# --------------------------------------------------------------------------


def format_expr(expr: Expr) -> str:
    if isinstance(expr, BinExpr):
        return f"({format_expr(expr.left)} {expr.op.value} {format_expr(expr.right)})"
    return str(expr)


def _format_addr(reg: str, off: int) -> str:
    if off == 0:
        return f"[{reg}]"
    return f"[{reg}{'+' if off > 0 else '-'}{abs(off)}]"


def format_instr(instr: Instr) -> str:
    if isinstance(instr, Assign):
        rhs = instr.rhs
        text = format_expr(rhs)
        if isinstance(rhs, BinExpr):
            text = text[1:-1]
        return f"assign {instr.dst}, {text}"
    if isinstance(instr, Load):
        return f"load {instr.dst}, {_format_addr(instr.addr, instr.offset)}"
    if isinstance(instr, Store):
        return f"store {instr.src}, {_format_addr(instr.addr, instr.offset)}"
    if isinstance(instr, IsZero):
        return f"iszero {instr.dst}, {instr.src}"
    if isinstance(instr, Jcc):
        if instr.register is not None:
            target = f"*{instr.register} [{', '.join(instr.labels)}]"
        else:
            target = instr.labels[0]
        return f"jcc {instr.cond}, {target}"
    if isinstance(instr, Call):
        return f"call {instr.callee}"
    return "ret"


def format_program(program: Program) -> str:
    by_pc: dict[int, list[str]] = {}
    for name, pc in sorted(program.labels.items()):
        by_pc.setdefault(pc, []).append(name)
    out = [f"entry {program.entry}"]
    for fn in program.functions:
        header = f"func {fn.name}"
        if fn.param_count:
            header += f" params={fn.param_count}"
        out.append(header)
        for ann in fn.annotations:
            if isinstance(ann, RegisterSecret):
                out.append(f"@secret {ann.register}")
            else:
                out.append(f"@secret_region {ann.register} size={ann.size}")
        for pc in fn.body:
            for label in by_pc.get(pc, []):
                out.append(f"{label}:")
            out.append(f"  {format_instr(program.instrs[pc])}")
    return "\n".join(out) + "\n"
