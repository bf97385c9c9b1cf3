"""Expression helpers and pipeline validation."""

from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from minisched.ir import (
    BinOp,
    Const,
    ValidationError,
    Var,
    eval_const,
    free_vars,
    substitute,
)
from minisched.parser import parse_pipeline


def codes(err: ValidationError) -> set[str]:
    return {d.code for d in err.diagnostics}


def test_substitute_folds_constant_tails():
    # (x + 1) with x := xo*2 + 1 must merge the two constants.
    e = BinOp("+", Var("x"), Const(1))
    out = substitute(e, {"x": BinOp("+", BinOp("*", Var("xo"), Const(2)), Const(1))})
    assert out == BinOp("+", BinOp("*", Var("xo"), Const(2)), Const(2))


def test_substitute_erases_additive_zero():
    e = BinOp("+", BinOp("*", Var("x"), Const(1)), Const(0))
    assert substitute(e, {"x": Var("y")}) == Var("y")


@given(st.integers(-50, 50), st.integers(-50, 50), st.integers(-50, 50))
def test_folding_preserves_value(a: int, b: int, c: int):
    e = BinOp("+", BinOp("-", BinOp("+", Var("x"), Const(a)), Const(b)), Const(c))
    folded = substitute(e, {})
    env = {"x": 17}
    assert eval_const(folded, env) == 17 + a - b + c


def test_free_vars_sees_through_operators():
    e = BinOp("&&", BinOp("<", Var("a"), Const(3)), BinOp("==", Var("b"), Var("a")))
    assert free_vars(e) == {"a", "b"}


def test_eval_const_euclidean_ops():
    assert eval_const(BinOp("hdiv", Const(-7), Const(2))) == -4
    assert eval_const(BinOp("hmod", Const(-7), Const(2))) == 1
    assert eval_const(BinOp("hdiv", Const(5), Const(0))) == 0
    assert eval_const(BinOp("hmod", Const(5), Const(0))) == 5


MINIMAL = """
pipeline tiny(inp) -> out {
  param n = 8;
  buffer inp(x in [0, n));
  func out(x in [0, n)) {
    out(x) = inp(x) + 1;
  }
}
"""


def test_minimal_pipeline_validates():
    p = parse_pipeline(MINIMAL).validated()
    assert p.output == "out"
    assert p.func("out").dims[0][1].extent == 8


def test_guard_rejected_on_pure_stage():
    src = MINIMAL.replace("out(x) = inp(x) + 1;", "out(x) = inp(x) + 1 if x < 4;")
    with pytest.raises(ValidationError) as exc:
        parse_pipeline(src).validated()
    assert "GuardNotUpdate" in codes(exc.value)


def test_arity_mismatch_detected():
    src = MINIMAL.replace("inp(x) + 1", "inp(x, x) + 1")
    with pytest.raises(ValidationError) as exc:
        parse_pipeline(src).validated()
    assert "ArityMismatch" in codes(exc.value)


def test_unknown_func_detected():
    src = MINIMAL.replace("inp(x) + 1", "inp(x) + ghost(x)")
    with pytest.raises(ValidationError) as exc:
        parse_pipeline(src).validated()
    assert "UnknownFunc" in codes(exc.value)


def test_self_reference_in_pure_stage_rejected():
    src = MINIMAL.replace("inp(x) + 1", "inp(x) + out(x)")
    with pytest.raises(ValidationError) as exc:
        parse_pipeline(src).validated()
    assert "SelfReference" in codes(exc.value)


def test_unbound_variable_detected():
    src = MINIMAL.replace("inp(x) + 1", "inp(x) + q")
    with pytest.raises(ValidationError) as exc:
        parse_pipeline(src).validated()
    assert "UnboundVar" in codes(exc.value)


def test_empty_interval_detected():
    src = MINIMAL.replace("buffer inp(x in [0, n));", "buffer inp(x in [4, 4));")
    with pytest.raises(ValidationError) as exc:
        parse_pipeline(src).validated()
    assert "EmptyInterval" in codes(exc.value)


def test_bound_above_limit_detected():
    with pytest.raises(ValidationError) as exc:
        parse_pipeline(MINIMAL).validated({"n": 2**20 + 1})
    assert "BoundTooLarge" in codes(exc.value)


def test_scale_override_changes_extent():
    p = parse_pipeline(MINIMAL).validated({"n": 32})
    assert p.func("out").dims[0][1].extent == 32
    # overrides are matched case-insensitively
    p2 = parse_pipeline(MINIMAL).validated({"N": 16})
    assert p2.func("out").dims[0][1].extent == 16


def test_update_stage_may_pin_a_dimension():
    src = """
pipeline pinned(inp) -> grid {
  param n = 8;
  buffer inp(x in [0, n), y in [0, 4));
  func grid(x in [0, n), y in [0, 4)) {
    grid(x, y) = inp(x, y);
    grid(x, 0) = grid(x, 0) + grid(x, 3);
  }
}
"""
    p = parse_pipeline(src).validated()
    stages = p.func("grid").stages
    assert stages[0].kind == "pure"
    assert stages[1].kind == "update"


def test_update_rhs_must_not_use_pinned_dimension():
    src = """
pipeline pinned(inp) -> grid {
  param n = 8;
  buffer inp(x in [0, n), y in [0, 4));
  func grid(x in [0, n), y in [0, 4)) {
    grid(x, y) = inp(x, y);
    grid(x, 0) = grid(x, y) + 1;
  }
}
"""
    with pytest.raises(ValidationError) as exc:
        parse_pipeline(src).validated()
    assert "UnboundVar" in codes(exc.value)


def test_pipeline_requires_must_hold_at_default_scale():
    src = MINIMAL.replace(
        "buffer inp(x in [0, n));",
        "buffer inp(x in [0, n));\n  requires inp.x.max == out.x.max + 5;",
    )
    with pytest.raises(ValidationError) as exc:
        parse_pipeline(src).validated()
    assert "RequiresUnsatisfied" in codes(exc.value)
