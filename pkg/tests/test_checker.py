from __future__ import annotations

import itertools
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sasleak.absint import SiteKind, SiteRecord, run_worklist
from sasleak.checker import (
    PUB,
    BVConst,
    BVOp,
    BVVar,
    CheckOptions,
    LeakKind,
    Outcome,
    check_site,
    check_sites,
    emit_smtlib,
    make_branch_constraint,
    make_cache_constraint,
    site_constraints,
    solve_enum,
    strongest,
    translate,
    variables,
    witness_json,
)
from sasleak.domain import HEADER, PUBLIC, STACK, TOP, AbsOp, AbstractValue, Const, Node, Secret, parse_value

import smtlib
from conftest import CORPUS_NAMES, load, random_value

V = parse_value
s1 = BVVar("secret", 1)


def cache(text: str, width: int, line_bits: int):
    return make_cache_constraint(translate(V(text), width), line_bits, width)


def branch(text: str, width: int):
    return make_branch_constraint(translate(V(text), width), width)


# -- translation ---------------------------------------------------------------


def test_translate_examples():
    assert translate(V("(+ (× s1 4) 8)"), 32) == BVOp("bvadd", BVOp("bvmul", s1, BVConst(4)), BVConst(8))
    f = translate(V("(+ p 16)"), 32)
    assert f.op == "bvadd" and {f.left, f.right} == {PUB, BVConst(16)}
    assert translate(Const(12), 32) == BVConst(12)
    with pytest.raises(ValueError):
        translate(TOP, 32)


def test_translate_shift_direction():
    assert translate(V("(SHIFT s1 249)"), 8) == BVOp("bvlshr", s1, BVConst(7))
    assert translate(V("(SHIFT s1 3)"), 8) == BVOp("bvshl", s1, BVConst(3))
    assert translate(V("(SHIFT s1 s2)"), 8).op == "bsh"


def test_same_secret_same_variable():
    f = translate(V("(XOR (+ s1 u) (- s1 s2))"), 32)
    names = sorted(v.name for v in variables(f))
    assert names == ["hdr", "s1", "s2"]


# -- worked constraint examples -------------------------------------------------


def test_cache_examples():
    v = solve_enum(cache("s1", 32, 6))
    assert v.outcome is Outcome.SAT
    w = dict(v.witness)
    assert w["s1"] >> 6 != w["sp1"] >> 6
    assert solve_enum(cache("(AND s1 63)", 32, 6)).outcome is Outcome.UNSAT
    assert solve_enum(cache("(+ (× s1 4) p)", 8, 2)).outcome is Outcome.SAT


def test_branch_examples():
    assert solve_enum(branch("(AND s1 1)", 32)).outcome is Outcome.SAT
    assert solve_enum(branch("(XOR s1 s1)", 8)).outcome is Outcome.UNSAT
    # 64 relevant bits at W=32: no proof within the cap, and no false SAT
    assert solve_enum(branch("(XOR s1 s1)", 32)).outcome is Outcome.UNKNOWN
    v = solve_enum(branch("(SHIFT s1 249)", 8))
    assert v.outcome is Outcome.SAT
    w = dict(v.witness)
    assert (w["s1"] >> 7) != (w["sp1"] >> 7)


def test_solver_phases():
    sat = solve_enum(cache("s1", 8, 2))
    assert sat.outcome is Outcome.SAT and sat.definitive
    unsat = solve_enum(cache("(AND s1 3)", 8, 2))
    assert unsat.outcome is Outcome.UNSAT and unsat.definitive
    found = solve_enum(cache("(+ s1 p)", 32, 6), budget=10_000)
    assert found.outcome is Outcome.SAT


def test_unknown_is_reported_honestly():
    c = cache("(XOR (× s1 s2) (× s3 s1))", 32, 6)
    v = solve_enum(c, budget=0)
    assert v.outcome is Outcome.UNKNOWN and not v.definitive
    assert "exhaustive cap" in v.reason


def test_constraint_preconditions():
    with pytest.raises(ValueError):
        make_cache_constraint(translate(V("(+ p 4)"), 32), 6, 32)
    with pytest.raises(ValueError):
        make_cache_constraint(translate(V("s1"), 8), 8, 8)


def test_strongest_priority():
    assert strongest([Outcome.UNSAT, Outcome.SAT, Outcome.TOP_ACCESS]) is Outcome.SAT
    assert strongest([Outcome.UNSAT, Outcome.UNKNOWN]) is Outcome.UNKNOWN
    assert strongest([Outcome.NOT_APPLICABLE, Outcome.UNSAT]) is Outcome.UNSAT
    assert strongest([]) is Outcome.NOT_APPLICABLE


# -- sites -------------------------------------------------------------------------


def test_check_site_examples():
    load_site = SiteRecord(3, SiteKind.LOAD, (V("(+ (× s1 4) p)"),))
    verdict = check_site(load_site, 32)
    assert verdict.outcome is Outcome.SAT
    (entry,) = witness_json(verdict)
    assert entry["pc"] == 3 and set(entry["assignment"]) == {"pub", "s1", "sp1"}
    assert check_site(SiteRecord(4, SiteKind.LOAD, (TOP,)), 32).outcome is Outcome.TOP_ACCESS
    assert check_site(SiteRecord(5, SiteKind.BRANCH, (Const(0), Const(1))), 32).outcome is Outcome.NOT_APPLICABLE


def test_branch_checks_can_be_disabled():
    site = SiteRecord(1, SiteKind.BRANCH, (V("(AND s1 1)"),))
    off = CheckOptions(check_branches=False)
    assert check_site(site, 32, off).outcome is Outcome.NOT_APPLICABLE
    assert site_constraints(site, 32, off) == []


def test_mixed_site_reports_strongest():
    site = SiteRecord(2, SiteKind.LOAD, (V("(AND s1 3)"), TOP))
    v = check_site(site, 8, CheckOptions(line_bits=2))
    assert v.outcome is Outcome.TOP_ACCESS
    assert [d.outcome for _, d in v.details] == [Outcome.UNSAT, Outcome.TOP_ACCESS]


def test_check_sites_sorted_by_pc():
    sites = [SiteRecord(9, SiteKind.LOAD, (TOP,)), SiteRecord(2, SiteKind.BRANCH, (TOP,))]
    assert [v.site.pc for v in check_sites(sites, 32)] == [2, 9]


# -- naive reference --------------------------------------------------------------


def naive_eval(av: AbstractValue, env: dict[str, int], width: int, primed: bool) -> int:
    """Direct evaluation of the abstract tree, written independently of the checker."""
    mask = (1 << width) - 1
    if isinstance(av, Const):
        return av.n & mask
    if isinstance(av, Secret):
        return env[("sp" if primed else "s") + str(av.id)]
    if av is PUBLIC:
        return env["pub"]
    if av is STACK:
        return env["stk"]
    if av is HEADER:
        return env["hdr"]
    assert isinstance(av, Node)
    a = naive_eval(av.left, env, width, primed)
    b = naive_eval(av.right, env, width, primed)
    op = av.op
    if op is AbsOp.ADD:
        return (a + b) & mask
    if op is AbsOp.SUB:
        return (a - b) & mask
    if op is AbsOp.MUL:
        return (a * b) & mask
    if op is AbsOp.DIV:
        return mask if b == 0 else a // b
    if op is AbsOp.MOD:
        return a if b == 0 else a % b
    if op is AbsOp.AND:
        return a & b
    if op is AbsOp.OR:
        return a | b
    if op is AbsOp.XOR:
        return a ^ b
    signed = b - (1 << width) if b >> (width - 1) else b
    if signed >= 0:
        return (a << signed) & mask if signed < width else 0
    return a >> -signed if -signed < width else 0


def var_names(av: AbstractValue) -> list[str]:
    names = set()
    stack = [av]
    while stack:
        x = stack.pop()
        if isinstance(x, Node):
            stack += [x.left, x.right]
        elif isinstance(x, Secret):
            names |= {f"s{x.id}", f"sp{x.id}"}
        elif x is PUBLIC:
            names.add("pub")
        elif x is STACK:
            names.add("stk")
        elif x is HEADER:
            names.add("hdr")
    return sorted(names)


def naive_sat(av: AbstractValue, kind: LeakKind, width: int, line_bits: int) -> bool:
    names = var_names(av)
    for values in itertools.product(range(1 << width), repeat=len(names)):
        env = dict(zip(names, values))
        a = naive_eval(av, env, width, False)
        b = naive_eval(av, env, width, True)
        if kind is LeakKind.CACHE_LINE:
            a, b = a >> line_bits, b >> line_bits
        if a != b:
            return True
    return False


def small_formulas(kind: LeakKind, count: int) -> list[tuple[AbstractValue, int]]:
    rng = random.Random(f"naive/{kind.value}")
    out = []
    while len(out) < count:
        width = rng.choice([2, 3, 4, 8])
        av = random_value(rng, width, depth=rng.choice([2, 3]))
        if av is TOP or not av.has_secret:
            continue
        if len(var_names(av)) * width > 16:
            continue
        out.append((av, width))
    return out


@pytest.mark.parametrize("kind", list(LeakKind))
def test_solver_agrees_with_naive_brute_force(kind):
    formulas = small_formulas(kind, 60)
    disagreements = []
    for av, width in formulas:
        line_bits = random.Random(str(av)).randrange(width) if kind is LeakKind.CACHE_LINE else 0
        f = translate(av, width)
        c = make_cache_constraint(f, line_bits, width) if kind is LeakKind.CACHE_LINE else make_branch_constraint(f, width)
        v = solve_enum(c, budget=256)
        assert v.definitive
        if (v.outcome is Outcome.SAT) != naive_sat(av, kind, width, line_bits):
            disagreements.append((str(av), width, line_bits))
        if v.outcome is Outcome.SAT:
            env = dict(v.witness)
            assert c.holds(env)
            assert naive_eval(av, env, width, False) != naive_eval(av, env, width, True)
    assert disagreements == []
    assert len(formulas) >= 50


# -- properties -----------------------------------------------------------------------

seeds = st.integers(0, 2**32 - 1)


def _formula(seed: int, width: int) -> AbstractValue | None:
    av = random_value(random.Random(seed), width)
    return None if av is TOP or not av.has_secret else av


@settings(max_examples=200)
@given(seeds)
def test_renaming_discipline(seed):
    av = _formula(seed, 32)
    if av is None:
        return
    c = make_branch_constraint(translate(av, 32), 32)
    orig, ren = variables(c.original), variables(c.renamed)
    assert {v for v in orig if not v.is_secret} == {v for v in ren if not v.is_secret}
    assert {(v.id, True) for v in orig if v.is_secret} == {(v.id, v.primed) for v in ren if v.is_secret}
    assert not any(v.primed for v in orig)


@settings(max_examples=60, deadline=None)
@given(seeds)
def test_line_bits_monotone_at_w8(seed):
    av = _formula(seed, 8)
    if av is None:
        return
    f = translate(av, 8)
    unsat_seen = False
    for line_bits in range(8):
        v = solve_enum(make_cache_constraint(f, line_bits, 8), budget=512, exhaustive_cap=40)
        assert v.definitive
        if unsat_seen:
            assert v.outcome is Outcome.UNSAT, (str(av), line_bits)
        unsat_seen = v.outcome is Outcome.UNSAT


# -- SMT-LIB emission ---------------------------------------------------------------


def test_emit_branch_template():
    text = emit_smtlib(branch("(AND s1 1)", 32))
    assert "(assert (distinct (bvand s1 #x00000001) (bvand sp1 #x00000001)))" in text
    assert text.splitlines()[0] == "(set-logic QF_BV)"
    assert text.rstrip().endswith("(check-sat)\n(get-model)")


def test_emit_cache_template_and_shared_public():
    text = emit_smtlib(cache("(+ s1 p)", 32, 6))
    env = smtlib.validate(text)
    assert env == {"s1": 32, "sp1": 32, "pub": 32}
    assert text.count("(declare-const pub ") == 1
    assert "(bvlshr (bvadd s1 pub) #x00000006)" in text


def test_emit_odd_width_uses_binary_literals():
    text = emit_smtlib(cache("(+ s1 5)", 7, 2))
    assert "#b0000101" in text
    smtlib.validate(text)


def test_emit_variable_shift():
    text = emit_smtlib(branch("(SHIFT s1 s2)", 8))
    assert "(ite (bvslt s2 #x00)" in text
    smtlib.validate(text)


@pytest.mark.parametrize(
    "bad",
    [
        "(assert (distinct s1 sp1))",
        "(set-logic QF_BV)\n(declare-const s1 (_ BitVec 8))\n(assert (distinct s1 sp1))",
        "(set-logic QF_BV)\n(declare-const s1 (_ BitVec 8))\n(assert (distinct s1 #x0001))",
        "(set-logic QF_BV)\n(declare-const s1 (_ BitVec 8))\n(assert (distinct s1 s1)",
        "(set-logic QF_BV)\n(declare-const s1 (_ BitVec 8))\n(assert (bvfoo s1 s1))",
        "(set-logic QF_BV)\n(check-sat)",
    ],
)
def test_validator_rejects_malformed(bad):
    with pytest.raises(smtlib.SmtSyntaxError):
        smtlib.validate(bad)


def corpus_scripts(width: int = 8, line_bits: int = 2):
    """(fixture, site, constraint, script) for every secret-dependent formula."""
    options = CheckOptions(line_bits=line_bits)
    for name in CORPUS_NAMES:
        program = load(name, width)
        for site in run_worklist(program).sites:
            for c in site_constraints(site, width, options):
                yield name, site, c, emit_smtlib(c)


@pytest.mark.parametrize("width", [8, 32])
def test_corpus_scripts_are_valid(width):
    count = 0
    for _, _, c, text in corpus_scripts(width, 2 if width == 8 else 6):
        env = smtlib.validate(text)
        assert set(env.values()) == {width}
        assert set(env) == {v.name for v in c.variables}
        count += 1
    assert count >= 8


def test_solver_agreement_with_z3():
    z3 = pytest.importorskip("z3")
    for name, site, c, text in corpus_scripts():
        body = "\n".join(line for line in text.splitlines() if line not in ("(check-sat)", "(get-model)"))
        solver = z3.Solver()
        solver.add(z3.parse_smt2_string(body))
        answer = solver.check()
        ours = solve_enum(c)
        assert ours.definitive
        assert (answer == z3.sat) == (ours.outcome is Outcome.SAT), (name, site.pc)
