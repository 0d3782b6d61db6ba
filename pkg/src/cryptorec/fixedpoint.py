"""Power-of-two fixed-point helpers.

A real ``x`` at exponent ``e`` is carried as the integer ``round(x * 2**e)``.
The protocol fixes the exponents: ratings 0, model codewords 12, means,
biases and predictions 24.
"""
from __future__ import annotations

from fractions import Fraction

import numpy as np

RATING_EXP = 0
CODEWORD_EXP = 12
OUTPUT_EXP = 24


def to_fixed(x, exponent: int):
    """Round ``x`` (scalar or array) to integer mantissas at ``exponent``."""
    if np.isscalar(x):
        return int(round(float(x) * (1 << exponent)))
    return np.rint(np.asarray(x, dtype=np.float64) * float(1 << exponent)).astype(np.int64)


def from_fixed(mantissa, exponent: int):
    if np.isscalar(mantissa):
        return int(mantissa) / float(1 << exponent)
    return np.asarray(mantissa, dtype=np.float64) / float(1 << exponent)


def dyadic(x, bits: int):
    """Exact rational rounding of ``x`` onto the ``2**-bits`` grid.

    Returns a :class:`fractions.Fraction` for scalars and an object array
    of them otherwise, so downstream numpy arithmetic is exact.
    """
    denom = 1 << bits
    if np.isscalar(x) or isinstance(x, Fraction):
        return Fraction(int(round(float(x) * denom)), denom)
    arr = np.asarray(x, dtype=np.float64)
    mant = np.rint(arr * float(denom))
    out = np.empty(arr.shape, dtype=object)
    flat = out.reshape(-1)
    for k, v in enumerate(mant.reshape(-1)):
        flat[k] = Fraction(int(v), denom)
    return out


def exact_ints(x) -> np.ndarray:
    """Integer array as an object array of Fractions (ratings, indicators)."""
    arr = np.asarray(x)
    out = np.empty(arr.shape, dtype=object)
    flat = out.reshape(-1)
    for k, v in enumerate(arr.reshape(-1)):
        flat[k] = Fraction(int(v))
    return out
