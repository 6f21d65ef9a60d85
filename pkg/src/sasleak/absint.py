"""Worklist abstract interpreter over the SAS domain.

States are lookup tables from :data:`StateKey` to canonical value sets.
Registers are updated strongly, memory weakly.  Memory cells are keyed by
``e ± c`` stack offsets when the address is an exact stack address and by the
syntactic access expression ``!(reg ± c)`` otherwise.

Calls are analyzed with context-sensitive summaries keyed by the caller's
name and the value sets of the stack-passed arguments.  A summary recorded
for a larger context is reused for any context it covers.
"""

from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Union

from . import ir
from .domain import (
    DEFAULT_BOUND,
    PUBLIC,
    PUBLIC_SET,
    STACK,
    TOP,
    TOP_SET,
    AbsOp,
    AbstractValue,
    Category,
    Const,
    HEADER,
    Node,
    Secret,
    canon,
    classify,
    format_set,
    join,
    leq_vs,
    reduce,
    stack_offset,
    stack_value,
)

log = logging.getLogger(__name__)

_OPS = {
    ir.BinOp.ADD: AbsOp.ADD,
    ir.BinOp.SUB: AbsOp.SUB,
    ir.BinOp.MUL: AbsOp.MUL,
    ir.BinOp.DIV: AbsOp.DIV,
    ir.BinOp.MOD: AbsOp.MOD,
    ir.BinOp.AND: AbsOp.AND,
    ir.BinOp.OR: AbsOp.OR,
    ir.BinOp.XOR: AbsOp.XOR,
    ir.BinOp.BSH: AbsOp.SHIFT,
}


def abs_op(op: ir.BinOp) -> AbsOp:
    return _OPS[op]


# --------------------------------------------------------------------------
# State keys and states
# --------------------------------------------------------------------------


@dataclass(frozen=True, order=True)
class RegKey:
    name: str

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True, order=True)
class SlotKey:
    """Stack cell at ``e + offset``."""

    offset: int

    def __str__(self) -> str:
        if self.offset == 0:
            return "[e]"
        return f"[e{'+' if self.offset > 0 else '-'}{abs(self.offset)}]"


@dataclass(frozen=True, order=True)
class AccessKey:
    """Memory cell denoted syntactically by ``!(register + offset)``."""

    register: str
    offset: int = 0

    def __str__(self) -> str:
        if self.offset == 0:
            return f"!({self.register})"
        return f"!({self.register}{'+' if self.offset > 0 else '-'}{abs(self.offset)})"


StateKey = Union[RegKey, SlotKey, AccessKey]
AbsState = dict  # dict[StateKey, frozenset[AbstractValue]]

_KEY_RANK = {RegKey: 0, SlotKey: 1, AccessKey: 2}


def key_order(key: StateKey) -> tuple:
    return (_KEY_RANK[type(key)], str(key))


def merge_states(t1: AbsState, t2: AbsState, bound: int = DEFAULT_BOUND) -> AbsState:
    """Pointwise join; a key absent from one side joins as bottom."""
    if t1 is t2:
        return t1
    out = dict(t1)
    for key, vs in t2.items():
        old = out.get(key)
        out[key] = vs if old is None else join(old, vs, bound)
    return out


def state_leq(t1: AbsState, t2: AbsState) -> bool:
    return all(leq_vs(vs, t2.get(key, frozenset())) for key, vs in t1.items())


def format_state(state: AbsState) -> dict[str, list[str]]:
    return {str(k): format_set(state[k]) for k in sorted(state, key=key_order)}


# --------------------------------------------------------------------------
# Results
# --------------------------------------------------------------------------


class SiteKind:
    LOAD = "MemLoad"
    STORE = "MemStore"
    BRANCH = "Branch"


@dataclass(frozen=True)
class SiteRecord:
    pc: int
    kind: str
    formulas: tuple[AbstractValue, ...]

    def to_json(self) -> dict:
        return {"pc": self.pc, "kind": self.kind, "formulas": [str(f) for f in self.formulas]}


@dataclass(frozen=True)
class Terminated:
    pc: int
    cause: str

    def to_json(self) -> dict:
        return {"pc": self.pc, "cause": self.cause}


@dataclass(frozen=True)
class Context:
    callee: str
    caller: str | None
    args: tuple[frozenset, ...]

    def covered_by(self, other: "Context") -> bool:
        return (
            self.callee == other.callee
            and self.caller == other.caller
            and len(self.args) == len(other.args)
            and all(leq_vs(a, b) for a, b in zip(self.args, other.args))
        )

    def __str__(self) -> str:
        args = ", ".join("{" + ", ".join(format_set(a)) + "}" for a in self.args)
        return f"<{self.caller or '-'} -> {self.callee}({args})>"


@dataclass
class Summary:
    context: Context
    exit_state: AbsState
    ret: frozenset


@dataclass
class AnalysisOptions:
    bound: int = DEFAULT_BOUND
    call_depth_budget: int = 8
    iteration_budget: int = 200_000


@dataclass
class AnalysisResult:
    program: ir.Program
    options: AnalysisOptions
    states: dict[int, AbsState]
    context_states: dict[tuple[int, int], AbsState]
    contexts: list[Context]
    sites: list[SiteRecord]
    termination: Terminated | None = None
    inconclusive: list[int] = field(default_factory=list)
    stats: dict[str, int] = field(default_factory=dict)
    secret_ids: dict[str, int] = field(default_factory=dict)

    @property
    def terminated(self) -> bool:
        return self.termination is not None

    def state_at(self, pc: int) -> AbsState:
        return self.states.get(pc, {})

    def to_json(self, dump_states: bool = False) -> dict:
        out = {
            "sites": [s.to_json() for s in self.sites],
            "termination": self.termination.to_json() if self.termination else None,
            "inconclusive": list(self.inconclusive),
            "stats": dict(sorted(self.stats.items())),
            "annotated_secrets": dict(sorted(self.secret_ids.items())),
        }
        if dump_states:
            out["states"] = {str(pc): format_state(self.states[pc]) for pc in sorted(self.states)}
        return out


class _Abort(Exception):
    def __init__(self, reason: Terminated):
        self.reason = reason


# --------------------------------------------------------------------------
# Engine
# --------------------------------------------------------------------------


def _write_sets(program: ir.Program) -> tuple[dict[str, frozenset], dict[str, frozenset]]:
    """May- and must-written registers per function (``esp`` excluded)."""
    direct: dict[str, set[str]] = {}
    callees: dict[str, set[str]] = {}
    for fn in program.functions:
        regs: set[str] = set()
        calls: set[str] = set()
        for pc in fn.body:
            instr = program.instrs[pc]
            regs |= ir.registers_of(instr)[1]
            if isinstance(instr, ir.Call):
                calls.add(instr.callee)
        direct[fn.name] = regs - {ir.STACK_REGISTER}
        callees[fn.name] = calls

    may = {name: set(regs) for name, regs in direct.items()}
    changed = True
    while changed:
        changed = False
        for name in may:
            for callee in callees[name]:
                if not may[callee] <= may[name]:
                    may[name] |= may[callee]
                    changed = True

    # must-write: intersection dataflow, callees folded in post-order;
    # recursive edges contribute nothing, which only under-approximates
    must: dict[str, frozenset] = {}
    visiting: set[str] = set()

    def compute(name: str) -> frozenset:
        if name in must:
            return must[name]
        if name in visiting:
            return frozenset()
        visiting.add(name)
        fn = program.function(name)
        universe = frozenset(may[name])
        out: dict[int, frozenset] = {pc: universe for pc in fn.body}
        in_: dict[int, frozenset] = {pc: universe for pc in fn.body}
        in_[fn.entry_pc] = frozenset()
        preds: dict[int, list[int]] = {pc: [] for pc in fn.body}
        for pc in fn.body:
            for nxt in ir.successors(program, pc):
                if nxt in preds:
                    preds[nxt].append(pc)
        exits = [pc for pc in fn.body if isinstance(program.instrs[pc], ir.Ret)]
        changed = True
        while changed:
            changed = False
            for pc in fn.body:
                if pc != fn.entry_pc:
                    ps = preds[pc]
                    new_in = frozenset.intersection(*(out[p] for p in ps)) if ps else universe
                    in_[pc] = new_in
                instr = program.instrs[pc]
                gen = ir.registers_of(instr)[1]
                if isinstance(instr, ir.Call):
                    gen = gen | compute(instr.callee)
                new_out = (in_[pc] | gen) & universe
                if new_out != out[pc]:
                    out[pc] = new_out
                    changed = True
        visiting.discard(name)
        result = frozenset.intersection(*(in_[pc] for pc in exits)) if exits else universe
        must[name] = result - {ir.STACK_REGISTER}
        return must[name]

    for fn in program.functions:
        compute(fn.name)
    return {k: frozenset(v) for k, v in may.items()}, must


def rebase(value: AbstractValue, delta: int | None, width: int) -> AbstractValue:
    """Substitute ``e := e + delta``; an unknown delta makes stack terms opaque."""
    if not value.has_stack:
        return value
    if delta is None:
        return TOP if value.has_secret else PUBLIC
    if value is STACK:
        return stack_value(delta, width)
    if isinstance(value, Node):
        return reduce(value.op, rebase(value.left, delta, width), rebase(value.right, delta, width), width)
    return value


def rebase_set(values: frozenset, delta: int | None, width: int, bound: int) -> frozenset:
    return canon((rebase(v, delta, width) for v in values), bound)


def degrade(values: frozenset) -> frozenset:
    """One BOU step to a single symbol, used when the call-depth budget runs out."""
    if any(v is TOP or v.has_secret for v in values):
        return TOP_SET
    return PUBLIC_SET


class Analyzer:
    """Interprocedural fixpoint engine for one program.

    ``merge`` is the join applied at CFG merge points; tests override it to
    check that the oracle notices a broken engine.
    """

    def __init__(self, program: ir.Program, options: AnalysisOptions | None = None):
        self.program = program
        self.options = options or AnalysisOptions()
        self.width = program.width
        self.bound = self.options.bound
        self.may_write, self.must_write = _write_sets(program)
        self.summaries: dict[str, list[Summary]] = {}
        self.contexts: list[Context] = []
        self.context_ids: dict[Context, int] = {}
        self.active: dict[Context, int] = {}
        self.fresh: dict[tuple[str, int, int], int] = {}
        self.secret_ids: dict[str, int] = {}
        self.next_secret = 1
        self.states: dict[tuple[int, int], AbsState] = {}
        self.sites: dict[tuple[int, str, int], frozenset] = {}
        self.iterations = 0
        self.instructions = 0
        self.summary_hits = 0
        self.peak_state = 0
        self.inconclusive: set[int] = set()
        self.observer: Callable[[int, int, AbsState], None] | None = None
        for ann in program.secret_annotations:
            if isinstance(ann, ir.RegisterSecret) and ann.register not in self.secret_ids:
                self.secret_ids[ann.register] = self._new_secret()

    def merge(self, stored: AbsState, incoming: AbsState) -> AbsState:
        return merge_states(stored, incoming, self.bound)

    def _new_secret(self) -> int:
        sid = self.next_secret
        self.next_secret += 1
        return sid

    def fresh_secret(self, fn: str, pc: int, ctx_id: int) -> Secret:
        key = (fn, pc, ctx_id)
        if key not in self.fresh:
            self.fresh[key] = self._new_secret()
        return Secret(self.fresh[key])

    # ---------------------------------------------------------------- states

    def init_state(self, fn: ir.Function, args: tuple[frozenset, ...] = ()) -> AbsState:
        state: AbsState = {RegKey(ir.STACK_REGISTER): frozenset({STACK})}
        for i, arg in enumerate(args):
            state[SlotKey(ir.WORD_BYTES * (i + 1))] = arg
        if fn.name == self.program.entry:
            for ann in fn.annotations:
                if isinstance(ann, ir.RegisterSecret):
                    state[RegKey(ann.register)] = frozenset({Secret(self.secret_ids[ann.register])})
                else:
                    state[RegKey(ann.register)] = frozenset({HEADER})
        return state

    def eval_expr(self, expr: ir.Expr, state: AbsState) -> frozenset:
        if isinstance(expr, ir.Lit):
            return frozenset({Const(expr.value)})
        if isinstance(expr, ir.Reg):
            return state.get(RegKey(expr.name), PUBLIC_SET)
        left = self.eval_expr(expr.left, state)
        right = self.eval_expr(expr.right, state)
        op = abs_op(expr.op)
        return canon((reduce(op, a, b, self.width) for a in left for b in right), self.bound)

    def _set_reg(self, state: AbsState, name: str, values: frozenset) -> None:
        state[RegKey(name)] = values
        for key in [k for k in state if isinstance(k, AccessKey) and k.register == name]:
            del state[key]

    def _addresses(self, state: AbsState, reg: str, offset: int) -> frozenset | None:
        """Address set of ``reg + offset``; None when the register is untracked."""
        base = state.get(RegKey(reg))
        if base is None:
            return None
        if offset == 0:
            return base
        off = Const(offset % (1 << self.width))
        return canon((reduce(AbsOp.ADD, v, off, self.width) for v in base), self.bound)

    def _record(self, pc: int, kind: str, ctx_id: int, values: Iterable[AbstractValue]) -> None:
        self.sites[(pc, kind, ctx_id)] = frozenset(values)

    # -------------------------------------------------------------- transfer

    def transfer(self, pc: int, state: AbsState, fn: ir.Function, ctx_id: int) -> AbsState:
        instr = self.program.instrs[pc]
        if isinstance(instr, ir.Assign):
            out = dict(state)
            self._set_reg(out, instr.dst, self.eval_expr(instr.rhs, state))
            return out
        if isinstance(instr, ir.Load):
            out = dict(state)
            self._set_reg(out, instr.dst, self._load(pc, instr, state, fn, ctx_id))
            return out
        if isinstance(instr, ir.Store):
            return self._store(pc, instr, state, ctx_id)
        if isinstance(instr, ir.IsZero):
            src = state.get(RegKey(instr.src), PUBLIC_SET)
            out = dict(state)
            self._set_reg(out, instr.dst, _is_zero(src))
            return out
        if isinstance(instr, ir.Jcc):
            if isinstance(instr.cond, ir.Reg):
                cond = state.get(RegKey(instr.cond.name), PUBLIC_SET)
                if any(v is TOP or v.has_secret for v in cond):
                    self._record(pc, SiteKind.BRANCH, ctx_id, cond)
            return state
        raise AssertionError(f"transfer called on {instr!r}")

    def _load(self, pc: int, instr: ir.Load, state: AbsState, fn: ir.Function, ctx_id: int) -> frozenset:
        addrs = self._addresses(state, instr.addr, instr.offset)
        if addrs is None:
            # untracked register: an opaque, non-secret pointer
            return state.get(AccessKey(instr.addr, instr.offset), PUBLIC_SET)
        result: set[AbstractValue] = set()
        flagged = False
        written = state.get(AccessKey(instr.addr, instr.offset))
        for a in addrs:
            cat = classify(a)
            if cat is Category.TOP:
                result.add(TOP)
                flagged = True
            elif cat in (Category.S, Category.U):
                # a cell stored through the same syntactic address is read back
                if written is not None:
                    result |= written
                else:
                    result.add(self.fresh_secret(fn.name, pc, ctx_id))
                flagged = flagged or cat is Category.S
            elif cat is Category.P:
                result.add(TOP)
            elif cat is Category.E:
                result |= state.get(SlotKey(stack_offset(a)), PUBLIC_SET)
            else:
                result |= state.get(AccessKey(instr.addr, instr.offset), PUBLIC_SET)
        if flagged:
            self._record(pc, SiteKind.LOAD, ctx_id, addrs)
        return canon(result, self.bound)

    def _store(self, pc: int, instr: ir.Store, state: AbsState, ctx_id: int) -> AbsState:
        value = state.get(RegKey(instr.src), PUBLIC_SET)
        addrs = self._addresses(state, instr.addr, instr.offset)
        out = dict(state)
        if addrs is None:
            key = AccessKey(instr.addr, instr.offset)
            out[key] = join(state.get(key, frozenset()), value, self.bound)
            return out
        if any(a is TOP or a.has_secret for a in addrs):
            self._record(pc, SiteKind.STORE, ctx_id, addrs)
        for a in addrs:
            if a is TOP or a is PUBLIC:
                raise _Abort(Terminated(pc, f"store through {'⊤' if a is TOP else 'p'} address"))
        for a in addrs:
            off = stack_offset(a)
            key = SlotKey(off) if off is not None else AccessKey(instr.addr, instr.offset)
            out[key] = join(out.get(key, frozenset()), value, self.bound)
        return out

    # ----------------------------------------------------------------- calls

    def _call(self, pc: int, instr: ir.Call, state: AbsState, fn: ir.Function, depth: int) -> AbsState:
        callee = self.program.function(instr.callee)
        esp = state.get(RegKey(ir.STACK_REGISTER), PUBLIC_SET)
        offset = stack_offset(next(iter(esp))) if len(esp) == 1 else None
        args: list[frozenset] = []
        for i in range(callee.param_count):
            if offset is None:
                args.append(PUBLIC_SET)
                continue
            raw = state.get(SlotKey(offset + ir.WORD_BYTES * i), PUBLIC_SET)
            # caller e + k is callee e + (k - offset + 4)
            args.append(rebase_set(raw, ir.WORD_BYTES - offset, self.width, self.bound))
        if depth >= self.options.call_depth_budget:
            args = [degrade(a) for a in args]
        ctx = Context(callee.name, fn.name, tuple(args))
        summary = self.analyze_function(callee, ctx, depth + 1)

        out = dict(state)
        delta = None if offset is None else offset - ir.WORD_BYTES
        may = self.may_write[callee.name]
        must = self.must_write[callee.name]
        for reg in sorted(may):
            callee_vs = summary.exit_state.get(RegKey(reg))
            if callee_vs is None:
                continue
            vs = rebase_set(callee_vs, delta, self.width, self.bound)
            if reg not in must and RegKey(reg) in state:
                vs = join(state[RegKey(reg)], vs, self.bound)
            self._set_reg(out, reg, vs)
        for key, vs in summary.exit_state.items():
            if isinstance(key, SlotKey) and key.offset >= ir.WORD_BYTES and delta is not None:
                target = SlotKey(key.offset + delta)
                out[target] = join(out.get(target, frozenset()), rebase_set(vs, delta, self.width, self.bound), self.bound)
            elif isinstance(key, AccessKey) and key.register not in may and key.register != ir.STACK_REGISTER:
                out[key] = join(out.get(key, frozenset()), rebase_set(vs, delta, self.width, self.bound), self.bound)
        return out

    def analyze_function(self, fn: ir.Function, ctx: Context, depth: int = 0) -> Summary:
        for summary in self.summaries.get(fn.name, []):
            if ctx.covered_by(summary.context):
                self.summary_hits += 1
                log.debug("summary hit %s via %s", ctx, summary.context)
                return summary
        for active in self.active:
            if ctx.covered_by(active):
                # recursive cycle: everything the callee may write is unknown
                log.debug("recursion cut at %s", ctx)
                exit_state = {RegKey(r): TOP_SET for r in self.may_write[fn.name]}
                return Summary(ctx, exit_state, TOP_SET)
        if ctx not in self.context_ids:
            self.context_ids[ctx] = len(self.contexts)
            self.contexts.append(ctx)
        ctx_id = self.context_ids[ctx]
        self.active[ctx] = ctx_id
        try:
            exit_state = self._worklist(fn, ctx, ctx_id, depth)
        finally:
            del self.active[ctx]
        ret = exit_state.get(RegKey(ir.RETURN_REGISTER), PUBLIC_SET)
        summary = Summary(ctx, exit_state, ret)
        self.summaries.setdefault(fn.name, []).append(summary)
        return summary

    def _worklist(self, fn: ir.Function, ctx: Context, ctx_id: int, depth: int) -> AbsState:
        program = self.program
        stored: dict[int, AbsState] = {fn.entry_pc: self.init_state(fn, ctx.args)}
        heap = [fn.entry_pc]
        queued = {fn.entry_pc}
        exit_state: AbsState | None = None
        while heap:
            pc = heapq.heappop(heap)
            queued.discard(pc)
            self.iterations += 1
            if self.iterations > self.options.iteration_budget:
                self.inconclusive.add(pc)
                self.inconclusive.update(heap)
                log.warning("iteration budget exhausted in %s", fn.name)
                break
            state = stored[pc]
            self.instructions += 1
            self.states[(ctx_id, pc)] = state
            self.peak_state = max(self.peak_state, len(state))
            if self.observer is not None:
                self.observer(ctx_id, pc, state)
            instr = program.instrs[pc]
            if isinstance(instr, ir.Ret):
                exit_state = state if exit_state is None else merge_states(exit_state, state, self.bound)
                continue
            if isinstance(instr, ir.Call):
                out = self._call(pc, instr, state, fn, depth)
            else:
                out = self.transfer(pc, state, fn, ctx_id)
            for nxt in sorted(ir.successors(program, pc)):
                old = stored.get(nxt)
                if old is not None and state_leq(out, old):
                    continue
                stored[nxt] = out if old is None else self.merge(old, out)
                if nxt not in queued:
                    queued.add(nxt)
                    heapq.heappush(heap, nxt)
        return exit_state or {}

    # ------------------------------------------------------------------- run

    def run(self) -> AnalysisResult:
        entry = self.program.entry_function
        ctx = Context(entry.name, None, tuple(PUBLIC_SET for _ in range(entry.param_count)))
        termination = None
        try:
            self.analyze_function(entry, ctx)
        except _Abort as abort:
            termination = abort.reason
            log.info("analysis terminated at pc %d: %s", termination.pc, termination.cause)
        return self._result(termination)

    def _result(self, termination: Terminated | None) -> AnalysisResult:
        merged: dict[int, AbsState] = {}
        for (_, pc), state in sorted(self.states.items()):
            merged[pc] = merge_states(merged[pc], state, self.bound) if pc in merged else state
        by_site: dict[tuple[int, str], set[AbstractValue]] = {}
        for (pc, kind, _), values in self.sites.items():
            by_site.setdefault((pc, kind), set()).update(values)
        sites = [SiteRecord(pc, kind, tuple(sorted(vs))) for (pc, kind), vs in sorted(by_site.items())]
        stats = {
            "iterations": self.iterations,
            "instructions": self.instructions,
            "contexts": len(self.contexts),
            "functions": len({c.callee for c in self.contexts}),
            "summary_hits": self.summary_hits,
            "peak_state_entries": self.peak_state,
            "secrets": self.next_secret - 1,
        }
        return AnalysisResult(
            program=self.program,
            options=self.options,
            states=merged,
            context_states=dict(self.states),
            contexts=list(self.contexts),
            sites=sites,
            termination=termination,
            inconclusive=sorted(self.inconclusive),
            stats=stats,
            secret_ids=dict(self.secret_ids),
        )


def _is_zero(src: frozenset) -> frozenset:
    if src and all(isinstance(v, Const) for v in src):
        if src == {Const(0)}:
            return frozenset({Const(1)})
        if Const(0) not in src:
            return frozenset({Const(0)})
    return frozenset({Const(0), Const(1)})


def run_worklist(program: ir.Program, options: AnalysisOptions | None = None) -> AnalysisResult:
    return Analyzer(program, options).run()
