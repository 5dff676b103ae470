"""Exact dyadic rationals used for knot breakpoints."""
from __future__ import annotations

import math
from fractions import Fraction
from functools import total_ordering


@total_ordering
class DyadicRational:
    """The number ``numerator / 2**exponent`` in canonical reduced form.

    Canonical means the numerator is odd or the exponent is zero, so two
    instances are equal exactly when their fields are equal.
    """

    __slots__ = ("numerator", "exponent")

    def __init__(self, numerator: int, exponent: int = 0):
        numerator = int(numerator)
        exponent = int(exponent)
        if exponent < 0:
            numerator <<= -exponent
            exponent = 0
        while exponent > 0 and numerator % 2 == 0:
            numerator //= 2
            exponent -= 1
        object.__setattr__(self, "numerator", numerator)
        object.__setattr__(self, "exponent", exponent)

    def __setattr__(self, name, value):
        raise AttributeError("DyadicRational is immutable")

    @classmethod
    def from_value(cls, value) -> "DyadicRational":
        """Convert an int, float, Fraction, string or DyadicRational exactly.

        Strings may be decimal (``"0.25"``) or fractions (``"3/8"``).  Values
        whose denominator is not a power of two are rejected.
        """
        if isinstance(value, DyadicRational):
            return value
        if isinstance(value, str):
            value = Fraction(value.strip())
        if isinstance(value, float):
            if not math.isfinite(value):
                raise ValueError("breakpoint must be finite")
            value = Fraction(value)
        frac = Fraction(value)
        den = frac.denominator
        if den & (den - 1):
            raise ValueError(f"{value!r} is not a dyadic rational")
        return cls(frac.numerator, den.bit_length() - 1)

    def to_fraction(self) -> Fraction:
        return Fraction(self.numerator, 1 << self.exponent)

    def __float__(self) -> float:
        return math.ldexp(self.numerator, -self.exponent)

    def _cmp_key(self, other: "DyadicRational"):
        e = max(self.exponent, other.exponent)
        return (self.numerator << (e - self.exponent),
                other.numerator << (e - other.exponent))

    def __eq__(self, other) -> bool:
        if not isinstance(other, DyadicRational):
            try:
                other = DyadicRational.from_value(other)
            except (TypeError, ValueError):
                return NotImplemented
        return self.numerator == other.numerator and self.exponent == other.exponent

    def __lt__(self, other) -> bool:
        if not isinstance(other, DyadicRational):
            other = DyadicRational.from_value(other)
        a, b = self._cmp_key(other)
        return a < b

    def __hash__(self) -> int:
        return hash((self.numerator, self.exponent))

    def __add__(self, other: "DyadicRational") -> "DyadicRational":
        other = DyadicRational.from_value(other)
        a, b = self._cmp_key(other)
        return DyadicRational(a + b, max(self.exponent, other.exponent))

    def __sub__(self, other: "DyadicRational") -> "DyadicRational":
        other = DyadicRational.from_value(other)
        a, b = self._cmp_key(other)
        return DyadicRational(a - b, max(self.exponent, other.exponent))

    def half(self) -> "DyadicRational":
        return DyadicRational(self.numerator, self.exponent + 1)

    def midpoint(self, other: "DyadicRational") -> "DyadicRational":
        return (self + other).half()

    def __repr__(self) -> str:
        if self.exponent == 0:
            return f"DyadicRational({self.numerator})"
        return f"DyadicRational({self.numerator}, {self.exponent})"

    def __str__(self) -> str:
        if self.exponent == 0:
            return str(self.numerator)
        return f"{self.numerator}/{1 << self.exponent}"
