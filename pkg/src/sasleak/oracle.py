"""Concrete semantics with hi/lo labels, used to cross-check the analyzer.

Every value carries a security label.  Arithmetic joins labels, loads from
the secret region are ``hi`` and ``iszero`` always yields ``lo``.

The address space is split into three disjoint areas, scaled to the width W:

* public data ``D = [0, 2^W/8)``, where unannotated registers point,
* secret regions ``U`` starting at ``2^W/4``, one per ``@secret_region``,
* the stack ``S = [2^W/2 - 2^W/16, 2^W/2)``.

Any access outside those areas is a fault, which ends the run.  Faults are
reported but are not soundness violations.
"""

from __future__ import annotations

import enum
import hashlib
import logging
import random
from dataclasses import dataclass, field
from typing import Callable, Iterable

from . import ir
from .absint import AbsState, AccessKey, AnalysisResult, RegKey, SlotKey
from .domain import (
    HEADER,
    PUBLIC,
    STACK,
    TOP,
    AbsOp,
    AbstractValue,
    Const,
    Node,
    Secret,
    bsh,
    format_set,
    secret_ids,
)

log = logging.getLogger(__name__)


class Label(enum.Enum):
    LO = "lo"
    HI = "hi"

    def join(self, other: "Label") -> "Label":
        return Label.HI if Label.HI in (self, other) else Label.LO


LO, HI = Label.LO, Label.HI


@dataclass(frozen=True)
class CVal:
    n: int
    label: Label = LO

    def __str__(self) -> str:
        return f"{self.n:#x}/{self.label.value}"


def smt_fold(op: ir.BinOp | AbsOp, a: int, b: int, width: int) -> int:
    """Machine arithmetic with the SMT-LIB conventions for division by zero."""
    mask = (1 << width) - 1
    name = op.name
    if name == "ADD":
        return (a + b) & mask
    if name == "SUB":
        return (a - b) & mask
    if name == "MUL":
        return (a * b) & mask
    if name == "DIV":
        return a // b if b else mask
    if name == "MOD":
        return a % b if b else a
    if name == "AND":
        return a & b
    if name == "OR":
        return a | b
    if name == "XOR":
        return a ^ b
    return bsh(a, b, width)


# --------------------------------------------------------------------------
# Memory layout and secrets
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Layout:
    width: int
    regions: tuple[tuple[str, int, int], ...]  # (register, base, size)

    @classmethod
    def for_program(cls, program: ir.Program) -> "Layout":
        w = program.width
        if w < 16:
            raise ValueError("the concrete oracle needs W >= 16 to lay out memory")
        base = 1 << (w - 2)
        regions = []
        for ann in program.secret_annotations:
            if isinstance(ann, ir.SecretRegionBase):
                regions.append((ann.register, base, ann.size))
                base += (ann.size + 63) // 64 * 64 or 64
        return cls(w, tuple(regions))

    @property
    def data(self) -> range:
        return range(0, 1 << (self.width - 3))

    @property
    def stack(self) -> range:
        top = 1 << (self.width - 1)
        return range(top - (1 << (self.width - 4)), top)

    @property
    def initial_esp(self) -> int:
        return (1 << (self.width - 1)) - (1 << (self.width - 6))

    def region_of(self, addr: int) -> tuple[str, int, int] | None:
        for reg in self.regions:
            if reg[1] <= addr < reg[1] + reg[2]:
                return reg
        return None

    def in_secret(self, addr: int) -> bool:
        return self.region_of(addr) is not None

    def in_stack(self, addr: int) -> bool:
        return addr in self.stack

    def valid(self, addr: int) -> bool:
        return addr in self.data or addr in self.stack or self.in_secret(addr)


@dataclass
class SecretAssignment:
    """Values of the annotated secrets (by id) and of secret-region bytes."""

    values: dict[int, int] = field(default_factory=dict)
    regions: dict[str, tuple[int, ...]] = field(default_factory=dict)

    @classmethod
    def random(cls, program: ir.Program, secret_ids: dict[str, int], rng: random.Random) -> "SecretAssignment":
        mask = (1 << program.width) - 1
        values = {sid: rng.randint(0, mask) for _, sid in sorted(secret_ids.items(), key=lambda kv: kv[1])}
        regions = {}
        for ann in program.secret_annotations:
            if isinstance(ann, ir.SecretRegionBase):
                regions[ann.register] = tuple(rng.randint(0, mask) for _ in range(ann.size))
        return cls(values, regions)

    def to_json(self) -> dict:
        return {
            "secrets": {f"s{k}": v for k, v in sorted(self.values.items())},
            "regions": {k: list(v) for k, v in sorted(self.regions.items())},
        }

    @classmethod
    def from_json(cls, data: dict) -> "SecretAssignment":
        values = {int(k.lstrip("s")): int(v) for k, v in data.get("secrets", {}).items()}
        regions = {k: tuple(int(x) for x in v) for k, v in data.get("regions", {}).items()}
        return cls(values, regions)


def _hash_word(tag: str, n: int, width: int) -> int:
    digest = hashlib.blake2b(f"{tag}:{n}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") & ((1 << width) - 1)


# --------------------------------------------------------------------------
# Execution
# --------------------------------------------------------------------------


@dataclass
class Frame:
    function: str
    base: int  # esp at function entry: the concrete value of e
    ret_pc: int | None
    written: set[str] = field(default_factory=set)


@dataclass
class CState:
    regs: dict[str, CVal]
    memory: dict[int, CVal]
    pc: int
    frames: list[Frame]
    written_cells: set[int] = field(default_factory=set)

    @property
    def frame(self) -> Frame:
        return self.frames[-1]


class Status(enum.Enum):
    HALTED = "halted"
    FAULT = "fault"
    FUEL = "fuel-exhausted"


@dataclass(frozen=True)
class TraceStep:
    pc: int
    delta: tuple[tuple[str, CVal], ...]

    def format(self) -> str:
        parts = [f"pc={self.pc}"] + [f"{k}={v.n:#x}/{v.label.value}" for k, v in self.delta]
        return " ".join(parts)


@dataclass
class Trace:
    steps: list[TraceStep]
    status: Status
    final: CState
    fault: str | None = None

    def __len__(self) -> int:
        return len(self.steps)

    def dump(self) -> str:
        return "\n".join(step.format() for step in self.steps)


class Fault(Exception):
    pass


class Machine:
    """Concrete interpreter for one program run."""

    def __init__(
        self,
        program: ir.Program,
        secrets: SecretAssignment,
        secret_regs: dict[str, int],
        registers: dict[str, int] | None = None,
        memory: dict[int, int] | None = None,
        seed: int = 0,
    ):
        self.program = program
        self.width = program.width
        self.mask = (1 << self.width) - 1
        self.layout = Layout.for_program(program)
        self.secrets = secrets
        self.seed = seed
        rng = random.Random(f"regs:{seed}")
        lo_min, lo_max = 1 << (self.width - 4), (1 << (self.width - 3)) - 1024
        regs: dict[str, CVal] = {}
        for name in sorted(_all_registers(program)):
            regs[name] = CVal(rng.randrange(lo_min, lo_max) & ~3, LO)
        regs[ir.STACK_REGISTER] = CVal(self.layout.initial_esp, LO)
        for reg, base, _ in self.layout.regions:
            regs[reg] = CVal(base, LO)
        for reg, sid in secret_regs.items():
            regs[reg] = CVal(secrets.values[sid], HI)
        for name, n in (registers or {}).items():
            regs[name] = CVal(n & self.mask, LO)
        entry = program.entry_function
        self.state = CState(
            regs=regs,
            memory={a: CVal(v & self.mask, LO) for a, v in (memory or {}).items()},
            pc=entry.entry_pc,
            frames=[Frame(entry.name, regs[ir.STACK_REGISTER].n, None)],
        )

    # ---------------------------------------------------------------- memory

    def read(self, addr: int) -> CVal:
        addr &= self.mask
        region = self.layout.region_of(addr)
        if region is not None:
            cell = self.state.memory.get(addr)
            n = cell.n if cell is not None else self.secrets.regions[region[0]][addr - region[1]]
            return CVal(n, HI)
        if not self.layout.valid(addr):
            raise Fault(f"load from unmapped address {addr:#x}")
        cell = self.state.memory.get(addr)
        if cell is not None:
            return cell
        return CVal(_hash_word("mem", addr, self.width), LO)

    def write(self, addr: int, value: CVal) -> None:
        addr &= self.mask
        if not self.layout.valid(addr):
            raise Fault(f"store to unmapped address {addr:#x}")
        self.state.memory[addr] = value
        self.state.written_cells.add(addr)

    def reg(self, name: str) -> CVal:
        return self.state.regs[name]

    def set_reg(self, name: str, value: CVal, delta: list) -> None:
        self.state.regs[name] = value
        self.state.frame.written.add(name)
        delta.append((name, value))

    def eval(self, expr: ir.Expr) -> CVal:
        if isinstance(expr, ir.Lit):
            return CVal(expr.value & self.mask, LO)
        if isinstance(expr, ir.Reg):
            return self.reg(expr.name)
        a, b = self.eval(expr.left), self.eval(expr.right)
        return CVal(smt_fold(expr.op, a.n, b.n, self.width), a.label.join(b.label))

    # ------------------------------------------------------------------ step

    def step(self) -> TraceStep | None:
        """Execute one instruction; returns None once the entry function returns."""
        st = self.state
        pc = st.pc
        instr = self.program.instrs[pc]
        delta: list[tuple[str, CVal]] = []
        nxt = pc + 1
        if isinstance(instr, ir.Assign):
            self.set_reg(instr.dst, self.eval(instr.rhs), delta)
        elif isinstance(instr, ir.Load):
            addr = (self.reg(instr.addr).n + instr.offset) & self.mask
            self.set_reg(instr.dst, self.read(addr), delta)
        elif isinstance(instr, ir.Store):
            addr = (self.reg(instr.addr).n + instr.offset) & self.mask
            value = self.reg(instr.src)
            self.write(addr, value)
            delta.append((f"[{addr:#x}]", value))
        elif isinstance(instr, ir.IsZero):
            self.set_reg(instr.dst, CVal(int(self.reg(instr.src).n == 0), LO), delta)
        elif isinstance(instr, ir.Jcc):
            cond = self.eval(instr.cond)
            if cond.n != 0:
                targets = self.program.jump_targets(pc)
                if instr.register is None:
                    nxt = targets[0]
                else:
                    dest = self.reg(instr.register).n
                    if dest not in targets:
                        raise Fault(f"indirect jump to undeclared target {dest:#x}")
                    nxt = dest
        elif isinstance(instr, ir.Call):
            esp = (self.reg(ir.STACK_REGISTER).n - ir.WORD_BYTES) & self.mask
            self.write(esp, CVal(pc + 1, LO))
            st.regs[ir.STACK_REGISTER] = CVal(esp, LO)
            callee = self.program.function(instr.callee)
            st.frames.append(Frame(callee.name, esp, pc + 1))
            nxt = callee.entry_pc
        elif isinstance(instr, ir.Ret):
            frame = st.frames.pop()
            if not st.frames:
                st.frames.append(frame)
                return None
            st.regs[ir.STACK_REGISTER] = CVal((frame.base + ir.WORD_BYTES) & self.mask, LO)
            st.frame.written |= frame.written - {ir.STACK_REGISTER}
            nxt = frame.ret_pc
        st.pc = nxt
        return TraceStep(pc, tuple(delta))


def _all_registers(program: ir.Program) -> set[str]:
    regs: set[str] = set()
    for instr in program.instrs:
        reads, writes = ir.registers_of(instr)
        regs |= reads | writes
    return regs


def crun(
    program: ir.Program,
    secrets: SecretAssignment,
    fuel: int = 100_000,
    *,
    secret_regs: dict[str, int] | None = None,
    registers: dict[str, int] | None = None,
    memory: dict[int, int] | None = None,
    seed: int = 0,
    observer: Callable[[Machine], None] | None = None,
) -> Trace:
    """Run ``program`` from its entry until the entry function returns.

    ``observer`` sees the machine before every instruction.  The trace has
    one step per executed instruction, including the final ``ret``.
    """
    if secret_regs is None:
        secret_regs = {}
        for ann in program.secret_annotations:
            if isinstance(ann, ir.RegisterSecret):
                secret_regs.setdefault(ann.register, len(secret_regs) + 1)
    m = Machine(program, secrets, secret_regs, registers, memory, seed)
    steps: list[TraceStep] = []
    while len(steps) < fuel:
        if observer is not None:
            observer(m)
        pc = m.state.pc
        try:
            step = m.step()
        except Fault as exc:
            return Trace(steps, Status.FAULT, m.state, f"pc {pc}: {exc}")
        if step is None:
            steps.append(TraceStep(pc, ()))
            return Trace(steps, Status.HALTED, m.state)
        steps.append(step)
    return Trace(steps, Status.FUEL, m.state)


# --------------------------------------------------------------------------
# Concretization
# --------------------------------------------------------------------------


@dataclass
class Valuation:
    """What a composite abstract value needs to be evaluated concretely."""

    width: int
    layout: Layout
    secrets: dict[int, int] = field(default_factory=dict)
    frame_base: int | None = None


def _evaluate(av: AbstractValue, env: Valuation, header: int) -> int | None:
    if isinstance(av, Const):
        return av.n
    if av is STACK:
        return env.frame_base
    if av is HEADER:
        return header
    if isinstance(av, Secret):
        return env.secrets.get(av.id)
    if isinstance(av, Node):
        a = _evaluate(av.left, env, header)
        b = _evaluate(av.right, env, header)
        if a is None or b is None:
            return None
        return smt_fold(av.op, a, b, env.width)
    return None


def gamma_member(av: AbstractValue, v: CVal, env: Valuation) -> bool:
    """Is the concrete value ``v`` in the concretization of ``av``?

    Atoms follow the value-level concretization: ``p`` is any ``lo`` value,
    ``e`` any stack address and ``u`` any secret-region address.  Composite
    terms are evaluated under the run's valuation.  Secret-carrying terms
    accept either label: a load through a secret address is modeled by a
    fresh secret even though the concrete cell may hold public data.
    """
    if av is TOP:
        return True
    if av is PUBLIC:
        return v.label is LO
    if av.has_secret:
        ids = secret_ids(av)
        if not ids <= env.secrets.keys():
            return True
        if isinstance(av, Secret):
            return v.n == env.secrets[av.id]
        return any(_evaluate(av, env, base) == v.n for base in _headers(env))
    if v.label is not LO:
        return False
    if isinstance(av, Const):
        return v.n == av.n
    if av is STACK:
        return env.layout.in_stack(v.n)
    if av is HEADER:
        return env.layout.in_secret(v.n)
    return any(_evaluate(av, env, base) == v.n for base in _headers(env))


def _headers(env: Valuation) -> list[int | None]:
    return [base for _, base, _ in env.layout.regions] or [None]


def covered(values: Iterable[AbstractValue], v: CVal, env: Valuation) -> bool:
    return any(gamma_member(av, v, env) for av in values)


def immediates(program: ir.Program) -> set[int]:
    out: set[int] = set()
    for instr in program.instrs:
        for lit in ir._literals(instr):  # noqa: SLF001 - shared walker
            out.add(lit.value)
    return out


def alpha(v: CVal, layout: Layout, imm: set[int], fresh_id: int) -> AbstractValue:
    """Abstraction of a single concrete value."""
    if v.label is HI:
        return Secret(fresh_id)
    if v.n in imm:
        return Const(v.n)
    if layout.in_secret(v.n):
        return HEADER
    if layout.in_stack(v.n):
        return STACK
    return PUBLIC


# --------------------------------------------------------------------------
# Differential soundness
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    run: int
    pc: int
    key: str
    value: CVal
    abstract: tuple[str, ...]

    def to_json(self) -> dict:
        return {
            "run": self.run,
            "pc": self.pc,
            "key": self.key,
            "value": self.value.n,
            "label": self.value.label.value,
            "abstract": list(self.abstract),
        }

    def __str__(self) -> str:
        return f"run {self.run} pc {self.pc}: {self.key}={self.value} not in {{{', '.join(self.abstract)}}}"


@dataclass
class SoundnessReport:
    runs: int
    violations: list[Violation]
    faults: list[str]
    fuel_exhausted: int
    steps_checked: int

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_json(self) -> dict:
        return {
            "runs": self.runs,
            "violations": [v.to_json() for v in self.violations],
            "faults": list(self.faults),
            "fuel_exhausted": self.fuel_exhausted,
            "steps_checked": self.steps_checked,
        }


def _check_point(
    m: Machine,
    state: AbsState,
    env: Valuation,
    annotated: set[str],
    run: int,
    out: list[Violation],
) -> None:
    st = m.state
    env.frame_base = st.frame.base
    entry_frame = len(st.frames) == 1
    regs = set(st.frame.written) | {ir.STACK_REGISTER}
    if entry_frame:
        regs |= annotated
    for name in sorted(regs):
        values = state.get(RegKey(name))
        v = st.regs[name]
        if values is None:
            values = frozenset({PUBLIC})
        if not covered(values, v, env):
            out.append(Violation(run, st.pc, name, v, tuple(format_set(values))))
    for key, values in state.items():
        if isinstance(key, SlotKey):
            addr = (st.frame.base + key.offset) & m.mask
        elif isinstance(key, AccessKey):
            if key.register not in st.regs:
                continue
            addr = (st.regs[key.register].n + key.offset) & m.mask
        else:
            continue
        if addr not in st.written_cells:
            continue
        v = st.memory[addr]
        if not covered(values, v, env):
            out.append(Violation(run, st.pc, str(key), v, tuple(format_set(values))))


def check_soundness(
    program: ir.Program,
    analysis: AnalysisResult,
    runs: int = 100,
    seed: int = 0,
    fuel: int = 100_000,
) -> SoundnessReport:
    """Replay random concrete runs and check every visited pc against the fixpoint.

    The abstract state at a pc is compared with the concrete state on arrival
    at that pc.  Registers are checked once written in the current frame
    (plus ``esp`` and the annotated registers of the entry frame); memory is
    checked at every abstract key whose concrete cell has been written.
    """
    rng = random.Random(seed)
    layout = Layout.for_program(program)
    annotated = {a.register for a in program.secret_annotations}
    violations: list[Violation] = []
    faults: list[str] = []
    exhausted = 0
    checked = 0
    for run in range(runs):
        secrets = SecretAssignment.random(program, analysis.secret_ids, rng)
        env = Valuation(program.width, layout, dict(secrets.values))

        def observe(m: Machine) -> None:
            nonlocal checked
            state = analysis.states.get(m.state.pc)
            if state is None:
                if analysis.terminated:
                    return
                state = {}
            checked += 1
            _check_point(m, state, env, annotated, run, violations)

        trace = crun(
            program,
            secrets,
            fuel,
            secret_regs=dict(analysis.secret_ids),
            seed=rng.randrange(1 << 30),
            observer=observe,
        )
        if trace.status is Status.FAULT:
            faults.append(f"run {run}: {trace.fault}")
        elif trace.status is Status.FUEL:
            exhausted += 1
    if runs == 0:
        log.warning("oracle ran zero runs; soundness check is vacuous")
    return SoundnessReport(runs, violations, faults, exhausted, checked)

