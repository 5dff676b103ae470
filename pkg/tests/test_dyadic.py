from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from adaptiga import DyadicRational

dyadics = st.builds(DyadicRational, st.integers(-10**6, 10**6), st.integers(0, 40))


def test_canonical_form():
    assert DyadicRational(4, 3) == DyadicRational(1, 1)
    assert DyadicRational(4, 3).exponent == 1
    assert DyadicRational(3, -2).numerator == 12


@pytest.mark.parametrize("raw, expected", [("3/8", Fraction(3, 8)), ("0.25", Fraction(1, 4)),
                                           (0.5, Fraction(1, 2)), (7, Fraction(7))])
def test_from_value(raw, expected):
    assert DyadicRational.from_value(raw).to_fraction() == expected


@pytest.mark.parametrize("raw", ["1/3", "0.1", float("nan")])
def test_rejects_non_dyadic(raw):
    with pytest.raises(ValueError):
        DyadicRational.from_value(raw)


def test_immutable():
    with pytest.raises(AttributeError):
        DyadicRational(1, 1).numerator = 3


def test_str_round_trip():
    z = DyadicRational(5, 4)
    assert str(z) == "5/16"
    assert DyadicRational.from_value(str(z)) == z


@given(dyadics, dyadics)
def test_arithmetic_matches_fractions(a, b):
    fa, fb = a.to_fraction(), b.to_fraction()
    assert (a + b).to_fraction() == fa + fb
    assert (a - b).to_fraction() == fa - fb
    assert a.midpoint(b).to_fraction() == (fa + fb) / 2
    assert (a < b) == (fa < fb)
    assert (a == b) == (fa == fb)
    assert float(a) == float(fa)


@given(dyadics)
def test_hash_consistent_with_equality(a):
    b = DyadicRational(a.numerator * 8, a.exponent + 3)
    assert a == b and hash(a) == hash(b)
