"""Euclidean division semantics.

The oracle below derives the quotient from the defining property alone
(search over a window), so the closed-form implementation is tested against
the definition rather than against itself.
"""

from __future__ import annotations

import time

from hypothesis import given
from hypothesis import strategies as st

from minisched.ir import hdiv, hmod


def oracle_hdiv(x: int, y: int) -> int:
    """The unique q with x == y*q + r and 0 <= r < |y|, found by search."""
    assert y != 0
    base = x // abs(y)  # candidate neighbourhood
    for q in range(base - 2, base + 3):
        qq = q if y > 0 else -q
        r = x - y * qq
        if 0 <= r < abs(y):
            return qq
    raise AssertionError(f"no Euclidean quotient found for {x}, {y}")


def test_matches_oracle_on_small_window():
    for x in range(-40, 41):
        for y in range(-12, 13):
            if y == 0:
                continue
            q = oracle_hdiv(x, y)
            assert hdiv(x, y) == q, (x, y)
            assert hmod(x, y) == x - y * q, (x, y)


def test_division_by_zero_is_total():
    for x in (-7, -1, 0, 1, 9):
        assert hdiv(x, 0) == 0
        assert hmod(x, 0) == x


def test_exhaustive_algebra_small_square():
    """Decomposition, remainder range, and totality over [-200, 200]^2,
    y == 0 included.  The acceptance suite runs the same laws over the
    [-1000, 1000] square on the vectorised kernels."""
    for x in range(-200, 201):
        for y in range(-200, 201):
            q = hdiv(x, y)
            r = hmod(x, y)
            if y == 0:
                assert q == 0 and r == x
                continue
            assert x == y * q + r
            assert 0 <= r < abs(y)


@given(st.integers(-(2**40), 2**40), st.integers(-(2**20), 2**20))
def test_decomposition_property(x: int, y: int):
    q, r = hdiv(x, y), hmod(x, y)
    if y == 0:
        assert q == 0 and r == x
    else:
        assert x == y * q + r
        assert 0 <= r < abs(y)


@given(st.integers(-(2**30), 2**30), st.integers(1, 2**16))
def test_positive_divisor_matches_python_floor(x: int, y: int):
    assert hdiv(x, y) == x // y
    assert hmod(x, y) == x % y


@given(st.integers(-(2**30), 2**30), st.integers(-(2**16), -1))
def test_negative_divisor_negates_quotient(x: int, y: int):
    assert hdiv(x, y) == -hdiv(x, -y)
    assert hmod(x, y) == hmod(x, -y)
