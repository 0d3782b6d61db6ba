"""Paillier cryptosystem over gmpy2 integers, generator ``g = n + 1``.

The key holder encrypts and decrypts through the CRT of ``p^2`` and
``q^2``; the evaluator only ever sees ``n``. Signed integers use the
half-range rule: residues above ``n // 2`` decode as negative.
"""
from __future__ import annotations

import secrets
import struct
from dataclasses import dataclass, field
from typing import ClassVar, Sequence

import gmpy2
from gmpy2 import mpz

from ..errors import FrameError, KeyMismatch, ParamError, RangeError
from .base import AdditiveBackend, Ciphertext, KeyPair, PlainScalar, as_plain, new_key_id

SUPPORTED_BITS = (1024, 2048, 3072)
_SMALL_STEP = 16


@dataclass(frozen=True, eq=False)
class PaillierPublicKey:
    n: mpz
    key_id: bytes
    n2: mpz = field(init=False)
    backend_tag: ClassVar[str] = "paillier"

    def __post_init__(self):
        object.__setattr__(self, "n2", self.n * self.n)

    @property
    def bits(self) -> int:
        return self.n.bit_length()

    @property
    def ct_bytes(self) -> int:
        return (self.n2.bit_length() + 7) // 8


@dataclass(frozen=True, eq=False)
class PaillierSecretKey:
    pk: PaillierPublicKey
    p: mpz
    q: mpz

    def __post_init__(self):
        p, q, n = self.p, self.q, self.pk.n
        set_ = lambda k, v: object.__setattr__(self, k, v)
        set_("p2", p * p)
        set_("q2", q * q)
        # h_p = L_p(g^(p-1) mod p^2)^-1 mod p, likewise for q
        set_("hp", gmpy2.invert(_L(gmpy2.powmod(n + 1, p - 1, self.p2), p), p))
        set_("hq", gmpy2.invert(_L(gmpy2.powmod(n + 1, q - 1, self.q2), q), q))
        set_("p_inv_q", gmpy2.invert(p, q))
        set_("p2_inv_q2", gmpy2.invert(self.p2, self.q2))

    @property
    def key_id(self) -> bytes:
        return self.pk.key_id


def _L(x, d):
    return (x - 1) // d


def _random_prime(bits: int) -> mpz:
    while True:
        cand = mpz(secrets.randbits(bits)) | (mpz(3) << (bits - 2)) | 1
        p = gmpy2.next_prime(cand)
        if p.bit_length() == bits:
            return p


def _random_unit(n: mpz) -> mpz:
    while True:
        r = mpz(secrets.randbelow(int(n) - 1) + 1)
        if gmpy2.gcd(r, n) == 1:
            return r


class PaillierBackend(AdditiveBackend):
    tag = "paillier"

    def keygen(self, bits: int = 2048) -> KeyPair:
        if bits not in SUPPORTED_BITS:
            raise ParamError(f"unsupported key size {bits}; use one of {SUPPORTED_BITS}")
        half = bits // 2
        while True:
            p, q = _random_prime(half), _random_prime(half)
            if p != q and (p * q).bit_length() == bits:
                break
        pk = PaillierPublicKey(p * q, new_key_id())
        return KeyPair(pk, PaillierSecretKey(pk, p, q))

    # --- group operations on payloads
    def _add(self, pk, x, y):
        return x * y % pk.n2

    def _neg(self, pk, x):
        return gmpy2.invert(x, pk.n2)

    def _mul(self, pk, x, k: int):
        if k == 0:
            return mpz(1)
        return gmpy2.powmod(x, k, pk.n2)

    def _identity(self, pk):
        return mpz(1)

    def _encode_plain(self, pk, k: int):
        # g^k = 1 + k*n mod n^2
        return (1 + (k % pk.n) * pk.n) % pk.n2

    def _powers(self, pk, x, values: Sequence[int]) -> list:
        # walk the sorted magnitudes so each step is a small exponentiation
        out = {}
        for sign, base in ((1, x), (-1, None)):
            mags = sorted(abs(int(v)) for v in values if (v > 0) == (sign > 0))
            if not mags:
                continue
            if base is None:
                base = gmpy2.invert(x, pk.n2)
            small = [mpz(1), base]  # base^k for the short gaps between neighbours
            cur, prev = mpz(1), 0
            for mag in mags:
                step = mag - prev
                if step <= _SMALL_STEP:
                    while len(small) <= step:
                        small.append(small[-1] * base % pk.n2)
                    cur = cur * small[step] % pk.n2
                else:
                    cur = cur * gmpy2.powmod(base, step, pk.n2) % pk.n2
                out[sign * mag] = cur
                prev = mag
        return [out[int(v)] for v in values]

    # --- encryption
    def _blind(self, pk, sk=None):
        """A fresh random ``r^n mod n^2``; CRT-accelerated when ``sk`` is known."""
        if sk is None:
            return gmpy2.powmod(_random_unit(pk.n), pk.n, pk.n2)
        # n-th residues mod p^2 are exactly the values a^p with a uniform mod p,
        # so a p-bit exponent per prime replaces the n-bit one
        xp = gmpy2.powmod(_random_unit(sk.p), sk.p, sk.p2)
        xq = gmpy2.powmod(_random_unit(sk.q), sk.q, sk.q2)
        return xp + sk.p2 * ((xq - xp) * sk.p2_inv_q2 % sk.q2)

    def encrypt(self, pk, x, scale: int = 0, sk=None) -> Ciphertext:
        """Encrypt a signed integer (or :class:`PlainScalar`); ``sk`` speeds it up."""
        if pk.backend_tag != self.tag:
            raise KeyMismatch("not a Paillier public key")
        x = as_plain(x, scale)
        if 2 * abs(x.value) >= pk.n:
            raise RangeError(f"plaintext magnitude needs more than {pk.bits - 1} bits")
        if sk is not None and sk.key_id != pk.key_id:
            raise KeyMismatch("secret key does not match public key")
        self.counter.add("encrypt")
        c = self._encode_plain(pk, x.value) * self._blind(pk, sk) % pk.n2
        return Ciphertext(pk, c, x.scale, abs(x.value))

    def decrypt(self, sk, c: Ciphertext) -> PlainScalar:
        self._own(c)
        if c.key_id != sk.key_id:
            raise KeyMismatch("ciphertext was not encrypted under this key")
        self.counter.add("decrypt")
        n = sk.pk.n
        mp = _L(gmpy2.powmod(c.payload % sk.p2, sk.p - 1, sk.p2), sk.p) * sk.hp % sk.p
        mq = _L(gmpy2.powmod(c.payload % sk.q2, sk.q - 1, sk.q2), sk.q) * sk.hq % sk.q
        m = mp + sk.p * ((mq - mp) * sk.p_inv_q % sk.q)
        if m > n // 2:
            m -= n
        return PlainScalar(int(m), c.scale)

    def rerandomize(self, pk, c: Ciphertext) -> Ciphertext:
        """Multiply by a fresh encryption of zero."""
        self._own(c)
        if c.key_id != pk.key_id:
            raise KeyMismatch("ciphertext was not encrypted under this key")
        self.counter.add("rerandomize")
        return Ciphertext(pk, c.payload * self._blind(pk) % pk.n2, c.scale, c.bound)

    # --- serialization: u32 big-endian length + fixed-width big-endian magnitude
    def ct_size(self, pk) -> int:
        return 4 + pk.ct_bytes

    def ct_to_bytes(self, c: Ciphertext) -> bytes:
        width = c.pk.ct_bytes
        return struct.pack(">I", width) + int(c.payload).to_bytes(width, "big")

    def ct_from_bytes(self, pk, data: bytes, scale: int = 0, bound: int | None = None) -> Ciphertext:
        if len(data) < 4:
            raise FrameError(0, "truncated ciphertext length")
        (length,) = struct.unpack_from(">I", data)
        if length != len(data) - 4:
            raise FrameError(0, f"ciphertext length {length} does not match {len(data) - 4} bytes")
        value = mpz(int.from_bytes(data[4:], "big"))
        if not 0 < value < pk.n2 or gmpy2.gcd(value, pk.n) != 1:
            raise FrameError(4, "ciphertext is not a unit mod n^2")
        return Ciphertext(pk, value, scale, bound)

    def pk_to_bytes(self, pk) -> bytes:
        raw = int(pk.n).to_bytes((pk.bits + 7) // 8, "big")
        return struct.pack(">I", len(raw)) + raw

    def pk_from_bytes(self, data: bytes, key_id: bytes) -> PaillierPublicKey:
        if len(data) < 4:
            raise FrameError(0, "truncated public key")
        (length,) = struct.unpack_from(">I", data)
        if length != len(data) - 4:
            raise FrameError(0, "public key length mismatch")
        n = mpz(int.from_bytes(data[4:], "big"))
        if n.bit_length() not in SUPPORTED_BITS or n % 2 == 0:
            raise FrameError(4, f"unsupported modulus of {n.bit_length()} bits")
        return PaillierPublicKey(n, key_id)
