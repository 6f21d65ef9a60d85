"""Leak checking: abstract formulas as bitvector constraints.

A secret-dependent address ``f`` leaks through the cache when two secrets can
put it on different cache lines, i.e. ``(f >> L) != (f' >> L)`` is
satisfiable, where ``f'`` is ``f`` with every secret variable renamed.  A
branch condition leaks when ``f != f'`` is satisfiable.  Public data, the
stack base and the secret-region base become variables shared by both copies.

Constraints are decided by a vectorized enumerative search that is complete
when the variables are narrow enough, and can be exported as SMT-LIB for
external solvers.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Union

import numpy as np

from .absint import SiteKind, SiteRecord
from .domain import HEADER, PUBLIC, STACK, TOP, AbsOp, AbstractValue, Const, Node, Secret, bsh, to_signed

log = logging.getLogger(__name__)

DEFAULT_LINE_BITS = 6
DEFAULT_EXHAUSTIVE_CAP = 24
DEFAULT_ENUM_BUDGET = 20_000
_CHUNK = 1 << 18


# --------------------------------------------------------------------------
# Bitvector formulas
# --------------------------------------------------------------------------


@dataclass(frozen=True, order=True)
class BVVar:
    """A W-bit variable; ``cls`` is one of secret, pub, stk, hdr."""

    cls: str
    id: int = 0
    primed: bool = False

    @property
    def name(self) -> str:
        if self.cls == "secret":
            return f"{'sp' if self.primed else 's'}{self.id}"
        return self.cls

    @property
    def is_secret(self) -> bool:
        return self.cls == "secret"

    def sort_key(self) -> tuple:
        return (0 if self.is_secret else 1, self.cls, self.id, self.primed)


PUB = BVVar("pub")
STK = BVVar("stk")
HDR = BVVar("hdr")


@dataclass(frozen=True)
class BVConst:
    value: int


@dataclass(frozen=True)
class BVOp:
    """Binary bitvector operation; ``op`` names the SMT-LIB operator."""

    op: str
    left: "BVFormula"
    right: "BVFormula"


BVFormula = Union[BVVar, BVConst, BVOp]

_SMT_OPS = {
    AbsOp.ADD: "bvadd",
    AbsOp.SUB: "bvsub",
    AbsOp.MUL: "bvmul",
    AbsOp.DIV: "bvudiv",
    AbsOp.MOD: "bvurem",
    AbsOp.AND: "bvand",
    AbsOp.OR: "bvor",
    AbsOp.XOR: "bvxor",
}


def translate(av: AbstractValue, width: int) -> BVFormula:
    """Map an abstract value to a bitvector term; ⊤ has no translation."""
    if av is TOP:
        raise ValueError("⊤ cannot be translated; check for TOP_ACCESS first")
    if av is PUBLIC:
        return PUB
    if av is STACK:
        return STK
    if av is HEADER:
        return HDR
    if isinstance(av, Secret):
        return BVVar("secret", av.id)
    if isinstance(av, Const):
        return BVConst(av.n)
    assert isinstance(av, Node)
    left = translate(av.left, width)
    right = translate(av.right, width)
    if av.op is AbsOp.SHIFT:
        if isinstance(right, BVConst):
            amt = to_signed(right.value, width)
            if amt >= 0:
                return BVOp("bvshl", left, BVConst(amt))
            return BVOp("bvlshr", left, BVConst(-amt))
        return BVOp("bsh", left, right)
    return BVOp(_SMT_OPS[av.op], left, right)


def variables(f: BVFormula) -> set[BVVar]:
    if isinstance(f, BVVar):
        return {f}
    if isinstance(f, BVOp):
        return variables(f.left) | variables(f.right)
    return set()


def rename(f: BVFormula) -> BVFormula:
    """Prime every secret variable, leaving shared variables alone."""
    if isinstance(f, BVVar):
        return BVVar(f.cls, f.id, True) if f.is_secret else f
    if isinstance(f, BVOp):
        return BVOp(f.op, rename(f.left), rename(f.right))
    return f


def eval_scalar(f: BVFormula, env: dict[str, int], width: int) -> int:
    """Reference evaluator on Python integers."""
    mask = (1 << width) - 1
    if isinstance(f, BVVar):
        return env[f.name] & mask
    if isinstance(f, BVConst):
        return f.value & mask
    a = eval_scalar(f.left, env, width)
    b = eval_scalar(f.right, env, width)
    op = f.op
    if op == "bvadd":
        return (a + b) & mask
    if op == "bvsub":
        return (a - b) & mask
    if op == "bvmul":
        return (a * b) & mask
    if op == "bvudiv":
        return a // b if b else mask
    if op == "bvurem":
        return a % b if b else a
    if op == "bvand":
        return a & b
    if op == "bvor":
        return a | b
    if op == "bvxor":
        return a ^ b
    if op == "bvshl":
        return (a << b) & mask if b < width else 0
    if op == "bvlshr":
        return a >> b if b < width else 0
    return bsh(a, b, width)


def eval_vector(f: BVFormula, env: dict[str, np.ndarray], width: int, size: int) -> np.ndarray:
    """Evaluate on uint64 arrays (W <= 32, so products never overflow 64 bits)."""
    mask = np.uint64((1 << width) - 1)
    if isinstance(f, BVVar):
        return env[f.name]
    if isinstance(f, BVConst):
        return np.full(size, f.value & int(mask), dtype=np.uint64)
    a = eval_vector(f.left, env, width, size)
    b = eval_vector(f.right, env, width, size)
    op = f.op
    if op == "bvadd":
        return (a + b) & mask
    if op == "bvsub":
        return (a - b) & mask
    if op == "bvmul":
        return (a * b) & mask
    if op == "bvudiv":
        safe = np.where(b == 0, np.uint64(1), b)
        return np.where(b == 0, mask, a // safe)
    if op == "bvurem":
        safe = np.where(b == 0, np.uint64(1), b)
        return np.where(b == 0, a, a % safe)
    if op == "bvand":
        return a & b
    if op == "bvor":
        return a | b
    if op == "bvxor":
        return a ^ b
    w = np.uint64(width)
    if op == "bvshl":
        return np.where(b < w, (a << np.minimum(b, w - np.uint64(1))) & mask, np.uint64(0))
    if op == "bvlshr":
        return np.where(b < w, a >> np.minimum(b, w - np.uint64(1)), np.uint64(0))
    # bidirectional shift on a signed amount
    half = np.uint64(1 << (width - 1))
    negative = b >= half
    left_amt = b
    right_amt = (np.uint64(1 << width) - b) & mask
    shl = np.where(left_amt < w, (a << np.minimum(left_amt, w - np.uint64(1))) & mask, np.uint64(0))
    shr = np.where(right_amt < w, a >> np.minimum(right_amt, w - np.uint64(1)), np.uint64(0))
    return np.where(negative, shr, shl)


# --------------------------------------------------------------------------
# Constraints and verdicts
# --------------------------------------------------------------------------


class LeakKind(enum.Enum):
    CACHE_LINE = "CacheLine"
    BRANCH = "Branch"


@dataclass(frozen=True)
class LeakConstraint:
    kind: LeakKind
    original: BVFormula
    renamed: BVFormula
    width: int
    line_bits: int = DEFAULT_LINE_BITS

    @property
    def variables(self) -> list[BVVar]:
        return sorted(variables(self.original) | variables(self.renamed), key=BVVar.sort_key)

    def holds(self, env: dict[str, int]) -> bool:
        a = eval_scalar(self.original, env, self.width)
        b = eval_scalar(self.renamed, env, self.width)
        if self.kind is LeakKind.CACHE_LINE:
            return (a >> self.line_bits) != (b >> self.line_bits)
        return a != b

    def holds_vector(self, env: dict[str, np.ndarray], size: int) -> np.ndarray:
        a = eval_vector(self.original, env, self.width, size)
        b = eval_vector(self.renamed, env, self.width, size)
        if self.kind is LeakKind.CACHE_LINE:
            shift = np.uint64(self.line_bits)
            return (a >> shift) != (b >> shift)
        return a != b


def _has_secret(f: BVFormula) -> bool:
    return any(v.is_secret for v in variables(f))


def make_cache_constraint(f: BVFormula, line_bits: int, width: int) -> LeakConstraint:
    if not 0 <= line_bits < width:
        raise ValueError(f"line bits must be in [0, {width})")
    if not _has_secret(f):
        raise ValueError("formula has no secret variable")
    return LeakConstraint(LeakKind.CACHE_LINE, f, rename(f), width, line_bits)


def make_branch_constraint(f: BVFormula, width: int) -> LeakConstraint:
    if not _has_secret(f):
        raise ValueError("formula has no secret variable")
    return LeakConstraint(LeakKind.BRANCH, f, rename(f), width)


class Outcome(enum.Enum):
    SAT = "SAT"
    TOP_ACCESS = "TOP_ACCESS"
    UNKNOWN = "UNKNOWN"
    UNSAT = "UNSAT"
    NOT_APPLICABLE = "NOT_APPLICABLE"


_PRIORITY = {
    Outcome.SAT: 4,
    Outcome.TOP_ACCESS: 3,
    Outcome.UNKNOWN: 2,
    Outcome.UNSAT: 1,
    Outcome.NOT_APPLICABLE: 0,
}


@dataclass(frozen=True)
class Verdict:
    outcome: Outcome
    witness: tuple[tuple[str, int], ...] | None = None
    reason: str | None = None
    definitive: bool = False

    def to_json(self) -> dict:
        out: dict = {"verdict": self.outcome.value}
        if self.witness is not None:
            out["witness"] = dict(self.witness)
        if self.reason:
            out["reason"] = self.reason
        return out


def strongest(outcomes: Iterable[Outcome]) -> Outcome:
    return max(outcomes, key=_PRIORITY.__getitem__, default=Outcome.NOT_APPLICABLE)


# --------------------------------------------------------------------------
# Demanded bits
# --------------------------------------------------------------------------


def _below(mask: int, width: int) -> int:
    """All bits up to and including the highest bit of ``mask``."""
    return (1 << mask.bit_length()) - 1 if mask else 0


def demanded_bits(f: BVFormula, demanded: int, width: int, acc: dict[str, int] | None = None) -> dict[str, int]:
    """Which bits of each variable can affect the ``demanded`` bits of ``f``.

    Bits outside the returned masks can be fixed to zero without changing
    the demanded part of the result, so enumerating the masked bits only is
    still exhaustive.
    """
    full = (1 << width) - 1
    acc = {} if acc is None else acc
    if not demanded:
        return acc
    if isinstance(f, BVVar):
        acc[f.name] = acc.get(f.name, 0) | demanded
        return acc
    if isinstance(f, BVConst):
        return acc
    op, left, right = f.op, f.left, f.right
    if op in ("bvand", "bvor"):
        for a, b in ((left, right), (right, left)):
            if isinstance(b, BVConst):
                keep = b.value if op == "bvand" else ~b.value
                return demanded_bits(a, demanded & keep & full, width, acc)
        demanded_bits(left, demanded, width, acc)
        return demanded_bits(right, demanded, width, acc)
    if op == "bvxor":
        demanded_bits(left, demanded, width, acc)
        return demanded_bits(right, demanded, width, acc)
    if op in ("bvadd", "bvsub", "bvmul"):
        low = _below(demanded, width)
        demanded_bits(left, low, width, acc)
        return demanded_bits(right, low, width, acc)
    if op in ("bvshl", "bvlshr") and isinstance(right, BVConst):
        k = right.value
        if k >= width:
            return acc
        inner = demanded >> k if op == "bvshl" else (demanded << k) & full
        return demanded_bits(left, inner, width, acc)
    demanded_bits(left, full, width, acc)
    return demanded_bits(right, full, width, acc)


def constraint_masks(c: LeakConstraint) -> dict[str, int]:
    full = (1 << c.width) - 1
    root = full & ~((1 << c.line_bits) - 1) if c.kind is LeakKind.CACHE_LINE else full
    acc: dict[str, int] = {}
    demanded_bits(c.original, root, c.width, acc)
    demanded_bits(c.renamed, root, c.width, acc)
    return acc


def _deposit(index: np.ndarray, mask: int) -> np.ndarray:
    """Scatter the low bits of ``index`` into the set positions of ``mask``."""
    out = np.zeros_like(index)
    src = 0
    for bit in range(mask.bit_length()):
        if mask >> bit & 1:
            out |= ((index >> np.uint64(src)) & np.uint64(1)) << np.uint64(bit)
            src += 1
    return out


# --------------------------------------------------------------------------
# Enumerative solver
# --------------------------------------------------------------------------


def structured_values(width: int, line_bits: int) -> list[int]:
    """Zero, single bits, cache-line multiples and the all-ones word."""
    mask = (1 << width) - 1
    vals = [0] + [1 << k for k in range(width)]
    vals += [k << line_bits for k in range(2, 9)]
    vals.append(mask)
    out: list[int] = []
    for v in vals:
        v &= mask
        if v not in out:
            out.append(v)
    return out


def _witness(c: LeakConstraint, names: list[str], row: Iterable[int]) -> Verdict:
    env = {n: int(x) for n, x in zip(names, row)}
    if not c.holds(env):
        raise AssertionError(f"witness {env} does not satisfy the constraint")
    return Verdict(Outcome.SAT, tuple(sorted(env.items())), definitive=True)


def _first_hit(c: LeakConstraint, names: list[str], columns: list[np.ndarray]) -> int | None:
    size = len(columns[0]) if columns else 1
    env = {n: col for n, col in zip(names, columns)}
    hits = c.holds_vector(env, size)
    if hits.any():
        return int(np.argmax(hits))
    return None


def solve_enum(
    c: LeakConstraint,
    budget: int = DEFAULT_ENUM_BUDGET,
    seed: int = 0,
    exhaustive_cap: int = DEFAULT_EXHAUSTIVE_CAP,
) -> Verdict:
    """Decide ``c`` by search: structured candidates, random samples, then
    full enumeration when the relevant variable bits total at most
    ``exhaustive_cap``."""
    vars_ = c.variables
    names = [v.name for v in vars_]
    width = c.width
    masks = constraint_masks(c)
    widths = [bin(masks.get(name, 0)).count("1") for name in names]
    total_bits = sum(widths)

    # phase 1: structured candidates, full product if it fits the budget
    cands = structured_values(width, c.line_bits)
    n = len(vars_)
    if len(cands) ** n <= budget:
        idx = np.indices((len(cands),) * n).reshape(n, -1)
        table = np.asarray(cands, dtype=np.uint64)
        columns = [table[i] for i in idx]
    else:
        rng = np.random.default_rng(seed)
        table = np.asarray(cands, dtype=np.uint64)
        columns = [table[rng.integers(0, len(cands), budget // 2)] for _ in range(n)]
    hit = _first_hit(c, names, columns)
    if hit is not None:
        return _witness(c, names, (col[hit] for col in columns))

    # phase 2: seeded uniform sampling
    rng = np.random.default_rng(seed + 1)
    remaining = budget
    while remaining > 0:
        size = min(remaining, _CHUNK)
        columns = [rng.integers(0, 1 << width, size, dtype=np.uint64) for _ in range(n)]
        hit = _first_hit(c, names, columns)
        if hit is not None:
            return _witness(c, names, (col[hit] for col in columns))
        remaining -= size

    # phase 3: exhaustive
    if total_bits <= exhaustive_cap:
        space = 1 << total_bits
        shifts = [sum(widths[i + 1 :]) for i in range(n)]
        for start in range(0, space, _CHUNK):
            index = np.arange(start, min(space, start + _CHUNK), dtype=np.uint64)
            columns = [
                _deposit((index >> np.uint64(shifts[i])) & np.uint64((1 << widths[i]) - 1), masks.get(names[i], 0))
                for i in range(n)
            ]
            hit = _first_hit(c, names, columns)
            if hit is not None:
                return _witness(c, names, (col[hit] for col in columns))
        return Verdict(Outcome.UNSAT, definitive=True)
    return Verdict(Outcome.UNKNOWN, reason=f"{total_bits} relevant variable bits exceed the exhaustive cap of {exhaustive_cap}")


# --------------------------------------------------------------------------
# SMT-LIB emission
# --------------------------------------------------------------------------


def _smt_const(value: int, width: int) -> str:
    value &= (1 << width) - 1
    if width % 4 == 0:
        return f"#x{value:0{width // 4}x}"
    return f"#b{value:0{width}b}"


def smt_term(f: BVFormula, width: int) -> str:
    if isinstance(f, BVVar):
        return f.name
    if isinstance(f, BVConst):
        return _smt_const(f.value, width)
    a = smt_term(f.left, width)
    b = smt_term(f.right, width)
    if f.op == "bsh":
        zero = _smt_const(0, width)
        return f"(ite (bvslt {b} {zero}) (bvlshr {a} (bvneg {b})) (bvshl {a} {b}))"
    return f"({f.op} {a} {b})"


def _distinct(c: LeakConstraint) -> str:
    a = smt_term(c.original, c.width)
    b = smt_term(c.renamed, c.width)
    if c.kind is LeakKind.CACHE_LINE:
        shift = _smt_const(c.line_bits, c.width)
        return f"(distinct (bvlshr {a} {shift}) (bvlshr {b} {shift}))"
    return f"(distinct {a} {b})"


def emit_smtlib(constraints: LeakConstraint | list[LeakConstraint], comment: str | None = None) -> str:
    """SMT-LIB 2 script; several constraints are asserted as a disjunction."""
    cs = [constraints] if isinstance(constraints, LeakConstraint) else list(constraints)
    if not cs:
        raise ValueError("nothing to emit")
    width = cs[0].width
    vars_: set[BVVar] = set()
    for c in cs:
        vars_ |= set(c.variables)
    lines = []
    if comment:
        lines.append(f"; {comment}")
    lines.append("(set-logic QF_BV)")
    for v in sorted(vars_, key=BVVar.sort_key):
        lines.append(f"(declare-const {v.name} (_ BitVec {width}))")
    if len(cs) == 1:
        lines.append(f"(assert {_distinct(cs[0])})")
    else:
        lines.append(f"(assert (or {' '.join(_distinct(c) for c in cs)}))")
    lines.append("(check-sat)")
    lines.append("(get-model)")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# Site checking
# --------------------------------------------------------------------------


@dataclass
class CheckOptions:
    line_bits: int = DEFAULT_LINE_BITS
    check_branches: bool = True
    enum_budget: int = DEFAULT_ENUM_BUDGET
    exhaustive_cap: int = DEFAULT_EXHAUSTIVE_CAP
    seed: int = 0


@dataclass
class SiteVerdict:
    site: SiteRecord
    outcome: Outcome
    details: list[tuple[str, Verdict]] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "pc": self.site.pc,
            "kind": self.site.kind,
            "verdict": self.outcome.value,
            "formulas": [dict(formula=f, **v.to_json()) for f, v in self.details],
        }


def constraint_for(site: SiteRecord, av: AbstractValue, width: int, options: CheckOptions) -> LeakConstraint:
    f = translate(av, width)
    if site.kind == SiteKind.BRANCH:
        return make_branch_constraint(f, width)
    return make_cache_constraint(f, options.line_bits, width)


def site_constraints(site: SiteRecord, width: int, options: CheckOptions) -> list[LeakConstraint]:
    if site.kind == SiteKind.BRANCH and not options.check_branches:
        return []
    return [constraint_for(site, av, width, options) for av in site.formulas if av is not TOP and av.has_secret]


def check_site(site: SiteRecord, width: int, options: CheckOptions | None = None) -> SiteVerdict:
    options = options or CheckOptions()
    details: list[tuple[str, Verdict]] = []
    if site.kind == SiteKind.BRANCH and not options.check_branches:
        details = [(str(av), Verdict(Outcome.NOT_APPLICABLE, reason="branch checks disabled")) for av in site.formulas]
        return SiteVerdict(site, Outcome.NOT_APPLICABLE, details)
    for av in site.formulas:
        if av is TOP:
            verdict = Verdict(Outcome.TOP_ACCESS, definitive=True)
        elif not av.has_secret:
            verdict = Verdict(Outcome.NOT_APPLICABLE)
        else:
            verdict = solve_enum(
                constraint_for(site, av, width, options),
                options.enum_budget,
                options.seed,
                options.exhaustive_cap,
            )
        details.append((str(av), verdict))
    return SiteVerdict(site, strongest(v.outcome for _, v in details), details)


def check_sites(sites: Iterable[SiteRecord], width: int, options: CheckOptions | None = None) -> list[SiteVerdict]:
    verdicts = [check_site(site, width, options) for site in sites]
    return sorted(verdicts, key=lambda v: (v.site.pc, v.site.kind))


def witness_json(verdict: SiteVerdict) -> Iterator[dict]:
    for _, v in verdict.details:
        if v.outcome is Outcome.SAT and v.witness is not None:
            yield {"pc": verdict.site.pc, "kind": verdict.site.kind, "assignment": dict(v.witness)}
