from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from sasleak import ir
from sasleak.ir import Assign, BinExpr, BinOp, IRError, Jcc, Lit, Load, Reg, Ret, Store, parse_program, successors, validate

from conftest import CORPUS_NAMES, fixture_text, load


def test_minimal_body_without_header():
    p = parse_program("f: assign eax, ebx\n")
    assigns = [i for i in p.instrs if isinstance(i, Assign)]
    assert assigns == [Assign("eax", Reg("ebx"))]
    assert p.labels == {"f": 0}
    assert p.entry == "main"


def test_literal_overflow_is_reported_with_position():
    with pytest.raises(IRError) as exc:
        parse_program("func f\n  assign eax, 0x1_0000_0000\n  ret\n")
    (diag,) = exc.value.diagnostics
    assert "overflows 32 bits" in diag.message
    assert (diag.line, diag.column) == (2, 15)


def test_literal_fits_at_smaller_width():
    with pytest.raises(IRError):
        parse_program("func f\n  assign eax, 256\n", width=8)
    assert parse_program("func f\n  assign eax, 255\n", width=8)


def test_running_example_program_has_seven_instructions():
    p = load("running_example")
    assert len(p) == 7
    assert isinstance(p.instrs[2], Load) and p.instrs[2].addr == "esi"
    assert p.secret_annotations == (ir.RegisterSecret("ebx"),)


def test_all_errors_are_collected():
    src = "func f\n  bogus eax\n  assign eax, (ebx\n  jcc eax, nowhere\n  ret\nfunc f\n  ret\n"
    with pytest.raises(IRError) as exc:
        parse_program(src)
    messages = " | ".join(d.message for d in exc.value.diagnostics)
    assert "unknown opcode 'bogus'" in messages
    assert "duplicate function name 'f'" in messages
    assert len(exc.value.diagnostics) >= 3


@pytest.mark.parametrize(
    "src, message",
    [
        ("func f\n  call g\n  ret\n", "unknown function 'g'"),
        ("func f\n  jcc eax, missing\n  ret\n", "unresolved label 'missing'"),
        ("func f\n  jcc eax, *ecx\n  ret\n", "no declared label set"),
        ("func f\n  jcc eax, *ecx []\n  ret\n", "malformed indirect target list"),
        ("func f\n  ret\nfunc g\n@secret ebx\n  assign eax, ebx\n  ret\n", "non-entry function"),
        ("func f\n@secret_region esi size=8\n@secret_region esi size=8\n  load eax, [esi]\n  ret\n", "twice"),
    ],
)
def test_validation_errors(src, message):
    with pytest.raises(IRError) as exc:
        parse_program(src)
    assert any(message in d.message for d in exc.value.diagnostics)


def test_validate_well_formed_two_functions():
    p = parse_program("func main\n  call g\n  ret\nfunc g params=1\n  load eax, [esp+4]\n  ret\n")
    assert validate(p) == []


def test_unreachable_code_is_a_warning():
    p = parse_program("func f\n  ret\n  assign eax, 1\n  ret\n")
    (diag,) = validate(p)
    assert diag.severity == "warning" and "unreachable" in diag.message


def test_successors_cases():
    src = "func f\n" + "  assign eax, 1\n" * 5 + "  jcc eax, L\n" + "  assign eax, 2\n" * 3 + "L:\n  assign eax, 3\n  jmp M\nM:\n  ret\n"
    p = parse_program(src)
    assert successors(p, 3) == {4}
    assert successors(p, 5) == {6, 9}
    assert successors(p, 10) == {11}  # jmp only takes its target
    assert successors(p, 11) == frozenset()
    assert successors(p, 5) == successors(p, 5)


def test_indirect_jump_targets():
    src = "func f\n  assign ecx, @b\n  jcc 1, *ecx [a, b]\na:\n  ret\nb:\n  ret\n"
    p = parse_program(src)
    assert p.instrs[0] == Assign("ecx", Lit(3))
    assert successors(p, 1) == {2, 3}


def test_immediate_addressing_is_desugared():
    p = parse_program("func f\n  load eax, 0x40\n  store 7, [esp-4]\n  ret\n")
    assert p.instrs[:2] == (Assign("eax", Lit(0x40)), Load("eax", "eax"))
    assert p.instrs[2] == Assign("_imm0", Lit(7))
    assert p.instrs[3] == Store("_imm0", "esp", -4)


def test_expression_precedence_and_unary_minus():
    p = parse_program("func f\n  assign eax, ebx + ecx * 4 & 255\n  assign edx, ebx <<>> -7\n", width=8)
    assert p.instrs[0].rhs == BinExpr(
        BinOp.AND, BinExpr(BinOp.ADD, Reg("ebx"), BinExpr(BinOp.MUL, Reg("ecx"), Lit(4))), Lit(255)
    )
    assert p.instrs[1].rhs == BinExpr(BinOp.BSH, Reg("ebx"), Lit(249))


def test_implicit_ret_and_jmp_shorthand():
    p = parse_program("func a\n  assign eax, 1\nfunc b\n  jmp x\nx: assign eax, 2\n")
    assert isinstance(p.instrs[1], Ret) and isinstance(p.instrs[-1], Ret)
    assert p.instrs[2] == Jcc(Lit(1), ("x",))


@pytest.mark.parametrize("name", CORPUS_NAMES + ["stack_counter"])
def test_round_trip_corpus(name):
    p = parse_program(fixture_text(name))
    q = parse_program(ir.format_program(p))
    assert q == p
    assert ir.format_program(q) == ir.format_program(p)


_regs = st.sampled_from(["eax", "ebx", "ecx", "edx", "esi"])
_exprs = st.recursive(
    st.one_of(_regs.map(Reg), st.integers(0, 2**32 - 1).map(Lit)),
    lambda inner: st.builds(BinExpr, st.sampled_from(list(BinOp)), inner, inner),
    max_leaves=8,
)


@given(_exprs)
def test_expression_printer_round_trips(expr):
    p = parse_program(f"func f\n  assign eax, {ir.format_expr(expr)}\n  ret\n")
    assert p.instrs[0].rhs == expr
