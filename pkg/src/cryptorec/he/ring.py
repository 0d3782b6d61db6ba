"""Negacyclic polynomial arithmetic on lists of Python integers.

Products use Kronecker substitution: both operands are packed into one big
integer with a digit per coefficient, multiplied once by GMP, and the
digits of the product are read back and folded modulo ``x^p + 1``.
"""
from __future__ import annotations

from functools import lru_cache

from gmpy2 import mpz


@lru_cache(maxsize=64)
def _offset(width: int, count: int) -> mpz:
    """``2^(8*width-1)`` in each of ``count`` digits of ``width`` bytes."""
    digit = b"\x00" * (width - 1) + b"\x80"
    return mpz(int.from_bytes(digit * count, "little"))


def _pack(coeffs, width: int) -> mpz:
    half = 1 << (8 * width - 1)
    raw = b"".join((c + half).to_bytes(width, "little") for c in coeffs)
    return mpz(int.from_bytes(raw, "little")) - _offset(width, len(coeffs))


def max_abs(a) -> int:
    return max(abs(min(a)), abs(max(a)))


def negacyclic_mul(a: list, b: list, bound: int | None = None) -> list:
    """Exact product of two integer polynomials modulo ``x^p + 1``.

    ``bound`` may give a known upper limit on ``|coefficient|`` of the
    unreduced product; otherwise ``p * max|a| * max|b|`` is used.
    """
    p = len(a)
    if len(b) != p:
        raise ValueError("polynomials of different degree")
    ma, mb = max_abs(a), max_abs(b)
    if bound is None:
        bound = p * ma * mb
    # digits must hold the operands as well as the product
    bound = max(bound, ma, mb)
    width = (bound.bit_length() + 2 + 7) // 8
    prod = _pack(a, width) * _pack(b, width)
    n = 2 * p - 1
    half = 1 << (8 * width - 1)
    prod += _offset(width, n)
    raw = prod.to_bytes(width * n, "little")
    digits = [int.from_bytes(raw[j * width:(j + 1) * width], "little") - half for j in range(n)]
    out = digits[:p]
    for j in range(p - 1):
        out[j] -= digits[j + p]
    return out


def center(a: list, q: int) -> list:
    """Reduce every coefficient into ``(-q/2, q/2]``."""
    half = q // 2
    out = []
    for c in a:
        c %= q
        out.append(c - q if c > half else c)
    return out


def add(a: list, b: list) -> list:
    return [x + y for x, y in zip(a, b)]


def sub(a: list, b: list) -> list:
    return [x - y for x, y in zip(a, b)]


def scale(a: list, k: int) -> list:
    return [k * x for x in a]


def l1(a: list) -> int:
    return sum(abs(c) for c in a)
