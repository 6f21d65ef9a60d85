"""Abstract values and the secret-augmented symbolic lattice.

An abstract value is a formula tree over the atoms ``⊤``, ``p`` (all public
data), ``s<i>`` (one piece of secret), ``u`` (base address of a secret
region), ``e`` (initial stack pointer) and W-bit constants.  A lattice element
is a finite set of such trees, kept canonical by collapsing (``col``) and
bounding (``bou``) after every union.

Trees are built only through :func:`reduce`, which enforces the structural
invariants: ``⊤`` and ``p`` never occur below an operator, stack addresses
stay in the ``e ± c`` shape, and commutative operands are sorted so that
equal formulas compare equal.
"""

from __future__ import annotations

import enum
import re
from typing import Iterable, Iterator

DEFAULT_BOUND = 50

ValueSet = frozenset  # frozenset[AbstractValue]; empty set is bottom


class AbsOp(enum.Enum):
    ADD = "+"
    SUB = "-"
    MUL = "×"
    DIV = "÷"
    MOD = "%"
    AND = "AND"
    OR = "OR"
    XOR = "XOR"
    SHIFT = "SHIFT"


COMMUTATIVE = frozenset({AbsOp.ADD, AbsOp.MUL, AbsOp.AND, AbsOp.OR, AbsOp.XOR})
_OP_ORDER = {op: i for i, op in enumerate(AbsOp)}


class Category(enum.Enum):
    TOP = "TOP"
    P = "P"
    S = "S"
    U = "U"
    E = "E"
    N = "N"
    SYM = "SYM"


# sort ranks; constants sort after symbols so ``s1 + 4`` prints symbol first
_R_SECRET, _R_HEADER, _R_STACK, _R_NODE, _R_CONST, _R_PUBLIC, _R_TOP = range(7)


class AbstractValue:
    __slots__ = ("_key", "_hash", "has_secret", "has_stack", "has_header")

    def __eq__(self, other: object) -> bool:
        return self is other or (isinstance(other, AbstractValue) and self._key == other._key)

    def __hash__(self) -> int:
        return self._hash

    def __lt__(self, other: "AbstractValue") -> bool:
        return self._key < other._key

    @property
    def sort_key(self) -> tuple:
        return self._key

    def __repr__(self) -> str:
        return f"<{format_value(self)}>"

    def __str__(self) -> str:
        return format_value(self)

    def _init(self, key: tuple, secret: bool, stack: bool, header: bool) -> None:
        self._key = key
        self._hash = hash(key)
        self.has_secret = secret
        self.has_stack = stack
        self.has_header = header


class _Singleton(AbstractValue):
    __slots__ = ("symbol",)

    def __init__(self, rank: int, symbol: str, stack: bool = False, header: bool = False):
        self._init((rank,), False, stack, header)
        self.symbol = symbol


TOP = _Singleton(_R_TOP, "⊤")
PUBLIC = _Singleton(_R_PUBLIC, "p")
HEADER = _Singleton(_R_HEADER, "u", header=True)
STACK = _Singleton(_R_STACK, "e", stack=True)


class Secret(AbstractValue):
    __slots__ = ("id",)

    def __init__(self, id: int):
        self.id = id
        self._init((_R_SECRET, id), True, False, False)


class Const(AbstractValue):
    __slots__ = ("n",)

    def __init__(self, n: int):
        if n < 0:
            raise ValueError("constants are unsigned")
        self.n = n
        self._init((_R_CONST, n), False, False, False)


class Node(AbstractValue):
    __slots__ = ("op", "left", "right")

    def __init__(self, op: AbsOp, left: AbstractValue, right: AbstractValue):
        if op in COMMUTATIVE and right._key < left._key:
            left, right = right, left
        self.op = op
        self.left = left
        self.right = right
        self._init(
            (_R_NODE, _OP_ORDER[op], left._key, right._key),
            left.has_secret or right.has_secret,
            left.has_stack or right.has_stack,
            left.has_header or right.has_header,
        )


def is_secret(av: AbstractValue) -> bool:
    return av.has_secret


def secret_ids(av: AbstractValue) -> set[int]:
    return {a.id for a in atoms(av) if isinstance(a, Secret)}


def atoms(av: AbstractValue) -> Iterator[AbstractValue]:
    if isinstance(av, Node):
        yield from atoms(av.left)
        yield from atoms(av.right)
    else:
        yield av


def stack_offset(av: AbstractValue) -> int | None:
    """Offset ``c`` if ``av`` is ``e``, ``e + c`` or ``e - c``; otherwise None."""
    if av is STACK:
        return 0
    if isinstance(av, Node) and av.left is STACK and isinstance(av.right, Const):
        if av.op is AbsOp.ADD:
            return av.right.n
        if av.op is AbsOp.SUB:
            return -av.right.n
    return None


def classify(av: AbstractValue) -> Category:
    if av is TOP:
        return Category.TOP
    if av is PUBLIC:
        return Category.P
    if av.has_secret:
        return Category.S
    if av.has_stack:
        return Category.E if stack_offset(av) is not None else Category.SYM
    if av.has_header:
        return Category.U
    if isinstance(av, Const) or all(isinstance(a, Const) for a in atoms(av)):
        return Category.N
    return Category.SYM


# --------------------------------------------------------------------------
# Reduction of binary operations
# --------------------------------------------------------------------------


def to_signed(n: int, width: int) -> int:
    n &= (1 << width) - 1
    return n - (1 << width) if n >> (width - 1) else n


def bsh(x: int, amount: int, width: int) -> int:
    """Bidirectional shift: non-negative (signed) amounts shift left, negative shift right."""
    mask = (1 << width) - 1
    amt = to_signed(amount, width)
    if amt >= 0:
        return (x << amt) & mask if amt < width else 0
    return (x & mask) >> -amt if -amt < width else 0


def fold(op: AbsOp, a: int, b: int, width: int) -> int | None:
    """W-bit machine arithmetic; None where the result is undefined (x / 0, x % 0)."""
    mask = (1 << width) - 1
    if op is AbsOp.ADD:
        return (a + b) & mask
    if op is AbsOp.SUB:
        return (a - b) & mask
    if op is AbsOp.MUL:
        return (a * b) & mask
    if op is AbsOp.DIV:
        return a // b if b else None
    if op is AbsOp.MOD:
        return a % b if b else None
    if op is AbsOp.AND:
        return a & b
    if op is AbsOp.OR:
        return a | b
    if op is AbsOp.XOR:
        return a ^ b
    return bsh(a, b, width)


def stack_value(offset: int, width: int) -> AbstractValue:
    """Canonical ``e ± c`` for a (wrapped, signed) stack offset."""
    c = to_signed(offset, width)
    if c == 0:
        return STACK
    if c > 0:
        return Node(AbsOp.ADD, STACK, Const(c))
    return Node(AbsOp.SUB, STACK, Const(-c))


def reduce(op: AbsOp, a: AbstractValue, b: AbstractValue, width: int = 32) -> AbstractValue:
    """Apply ``op`` to two abstract values, collapsing to ⊤/p where required."""
    if a is TOP or b is TOP:
        return TOP
    if a is PUBLIC or b is PUBLIC:
        other = b if a is PUBLIC else a
        return TOP if other.has_secret else PUBLIC
    if isinstance(a, Const) and isinstance(b, Const):
        n = fold(op, a.n, b.n, width)
        return TOP if n is None else Const(n)
    if op in (AbsOp.DIV, AbsOp.MOD) and isinstance(b, Const) and b.n == 0:
        return TOP
    secret = a.has_secret or b.has_secret
    if not secret:
        off_a, off_b = stack_offset(a), stack_offset(b)
        if off_a is not None and isinstance(b, Const) and op in (AbsOp.ADD, AbsOp.SUB):
            return stack_value(off_a + b.n if op is AbsOp.ADD else off_a - b.n, width)
        if off_b is not None and isinstance(a, Const) and op is AbsOp.ADD:
            return stack_value(off_b + a.n, width)
        if off_a is not None and off_b is not None and op is AbsOp.SUB:
            return Const((off_a - off_b) & ((1 << width) - 1))
        if a.has_stack or b.has_stack:
            # only e ± c is tracked exactly; anything else about e is public
            return PUBLIC
        if a.has_header or b.has_header:
            if not (isinstance(a, Const) or isinstance(b, Const)):
                return PUBLIC
    return Node(op, a, b)


# --------------------------------------------------------------------------
# Lattice operations on value sets
# --------------------------------------------------------------------------

BOTTOM: ValueSet = frozenset()
TOP_SET: ValueSet = frozenset({TOP})
PUBLIC_SET: ValueSet = frozenset({PUBLIC})


def has_secret(values: Iterable[AbstractValue]) -> bool:
    return any(v.has_secret for v in values)


def col(values: frozenset) -> frozenset:
    if TOP in values:
        return TOP_SET
    if PUBLIC in values:
        return TOP_SET if has_secret(values) else PUBLIC_SET
    return values


def bou(values: frozenset, bound: int = DEFAULT_BOUND) -> frozenset:
    if len(values) > bound:
        return TOP_SET if has_secret(values) else PUBLIC_SET
    return values


def canon(values: Iterable[AbstractValue], bound: int = DEFAULT_BOUND) -> frozenset:
    return bou(col(frozenset(values)), bound)


def join(x: frozenset, y: frozenset, bound: int = DEFAULT_BOUND) -> frozenset:
    if x == y:
        return x
    return bou(col(x | y), bound)


def covers(y: frozenset, v: AbstractValue) -> bool:
    return v in y or TOP in y or (PUBLIC in y and not v.has_secret)


def leq_vs(x: frozenset, y: frozenset) -> bool:
    return all(covers(y, v) for v in x)


def reduce_sets(op: AbsOp, xs: frozenset, ys: frozenset, width: int = 32, bound: int = DEFAULT_BOUND) -> frozenset:
    return canon((reduce(op, a, b, width) for a in xs for b in ys), bound)


# --------------------------------------------------------------------------
# Prefix notation
# --------------------------------------------------------------------------

_SYMBOL_OPS = {op.value: op for op in AbsOp}


def format_value(av: AbstractValue) -> str:
    if isinstance(av, _Singleton):
        return av.symbol
    if isinstance(av, Secret):
        return f"s{av.id}"
    if isinstance(av, Const):
        return str(av.n)
    assert isinstance(av, Node)
    return f"({av.op.value} {format_value(av.left)} {format_value(av.right)})"


def format_set(values: Iterable[AbstractValue]) -> list[str]:
    return [format_value(v) for v in sorted(values)]


_TOKENS = re.compile(r"\s*(\(|\)|[^\s()]+)")


def parse_value(text: str) -> AbstractValue:
    """Inverse of :func:`format_value` (builds nodes verbatim, no reduction)."""
    toks = [m.group(1) for m in _TOKENS.finditer(text)]
    pos = 0

    def walk() -> AbstractValue:
        nonlocal pos
        tok = toks[pos]
        pos += 1
        if tok == "(":
            op = _SYMBOL_OPS[toks[pos]]
            pos += 1
            left = walk()
            right = walk()
            if toks[pos] != ")":
                raise ValueError(f"expected ')' in {text!r}")
            pos += 1
            return Node(op, left, right)
        if tok in ("⊤", "T", "top"):
            return TOP
        if tok == "p":
            return PUBLIC
        if tok == "u":
            return HEADER
        if tok == "e":
            return STACK
        if tok.isdigit():
            return Const(int(tok))
        if tok[0] == "s" and tok[1:].isdigit():
            return Secret(int(tok[1:]))
        raise ValueError(f"bad abstract value token {tok!r}")

    value = walk()
    if pos != len(toks):
        raise ValueError(f"trailing input in {text!r}")
    return value
