"""Surface syntax: round-trips, desugaring, and rejection behaviour."""

from __future__ import annotations

import glob
import os

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from minisched.ir import BinOp, ParseError, PipelineError, Var
from minisched.parser import (
    parse_pipeline,
    parse_schedule,
    print_pipeline,
    print_schedule,
)

CORPUS = sorted(glob.glob(os.path.join(os.path.dirname(__file__), "..", "corpus", "*.hal")))


@pytest.mark.parametrize("path", CORPUS, ids=[os.path.basename(p) for p in CORPUS])
def test_corpus_round_trips(path):
    with open(path) as fh:
        first = parse_pipeline(fh.read())
    again = parse_pipeline(print_pipeline(first))
    assert again == first


@pytest.mark.parametrize("path", CORPUS, ids=[os.path.basename(p) for p in CORPUS])
def test_corpus_validates(path):
    with open(path) as fh:
        parse_pipeline(fh.read()).validated()


SKEL = """
pipeline t(inp) -> out {{
  param n = 8;
  buffer inp(x in [0, n));
  func out(x in [0, n)) {{
    out(x) = {expr};
  }}
}}
"""


def rhs(expr: str):
    p = parse_pipeline(SKEL.format(expr=expr))
    return p.func("out").stages[0].rhs


def test_comparison_normalized_to_less_than():
    # Only < and <= exist in the tree; > and >= arrive swapped.
    assert rhs("select(inp(x) > 0, 1, 0)") == rhs("select(0 < inp(x), 1, 0)")
    assert rhs("select(inp(x) >= 0, 1, 0)") == rhs("select(0 <= inp(x), 1, 0)")


def test_chained_comparison_becomes_conjunction():
    chained = rhs("select(0 <= inp(x) < 8, 1, 0)")
    spelled = rhs("select(0 <= inp(x) && inp(x) < 8, 1, 0)")
    assert chained == spelled


def test_division_sugar_is_euclidean():
    e = rhs("inp(x) / 3 + inp(x) % 3")
    ops = set()

    def collect(n):
        if isinstance(n, BinOp):
            ops.add(n.op)
            collect(n.left)
            collect(n.right)

    collect(e)
    assert "hdiv" in ops and "hmod" in ops
    assert "/" not in ops and "%" not in ops


def test_precedence_mul_binds_tighter_than_add():
    assert rhs("inp(x) + 2 * 3") == rhs("inp(x) + (2 * 3)")
    assert rhs("inp(x) + 2 * 3") != rhs("(inp(x) + 2) * 3")


def test_implication_binds_loosest():
    a = rhs("select(0 < x && x < 4 ==> 0 < inp(x), 1, 0)")
    b = rhs("select((0 < x && x < 4) ==> (0 < inp(x)), 1, 0)")
    assert a == b


def test_listing_style_schedule_parses_to_eight_directives():
    ds = parse_schedule(
        "blur_y.split(y, yo, yi, 8).parallel(yo).split(x, xo, xi, 2).unroll(xi);\n"
        "blur_x.store_at(blur_y, yo).compute_at(blur_y, yi).split(x, xo, xi, 2).unroll(xi);\n"
    )
    assert [d.kind for d in ds] == [
        "split",
        "parallel",
        "split",
        "unroll",
        "store_at",
        "compute_at",
        "split",
        "unroll",
    ]
    assert ds[0].func == "blur_y" and ds[0].args == ("y", "yo", "yi", 8)
    assert ds[4].func == "blur_x" and ds[4].args == ("blur_y", "yo")


def test_schedule_round_trips():
    text = "f.split(x, xo, xi, 4).reorder(xi, xo).parallel(xo);\ng.fuse(x, y, t).unroll(t);\n"
    ds = parse_schedule(text)
    assert parse_schedule(print_schedule(ds)) == ds


def test_reserved_word_rejected_as_name():
    with pytest.raises(ParseError):
        parse_pipeline(SKEL.format(expr="1").replace("func out", "func select"))


def test_unknown_directive_rejected():
    with pytest.raises(ParseError):
        parse_schedule("f.tile(x, y, xo, yo, 4, 4);")


def test_trailing_garbage_rejected():
    with pytest.raises(ParseError):
        parse_pipeline(SKEL.format(expr="1") + "wat")


def test_unterminated_statement_rejected():
    with pytest.raises(ParseError):
        parse_pipeline(SKEL.format(expr="1").replace("out(x) = 1;", "out(x) = 1"))


def test_error_carries_location():
    try:
        parse_pipeline("pipeline p(inp) -> out {\n  param n = ;\n}")
    except ParseError as e:
        assert e.span.line == 2
    else:
        raise AssertionError("expected a parse error")


@settings(max_examples=300, deadline=None)
@given(
    st.text(
        alphabet="pipeline func buffer param ensures requires over select forall"
        " xyriot0123456789()[]{};=<>&|!+-*/%.,\n ",
        max_size=160,
    )
)
def test_parser_is_total(text: str):
    """Arbitrary input either parses or raises a diagnostic, never crashes."""
    try:
        parse_pipeline(text)
    except PipelineError:
        pass
    try:
        parse_schedule(text)
    except PipelineError:
        pass
