"""Exact-rational stand-in for the SWHE backend.

Ciphertexts carry the plaintext as a :class:`fractions.Fraction`, so a
circuit evaluated here is the cleartext mirror of the same circuit under
encryption. Used to check encrypted retraining against the plaintext
reference without any encoding or noise effects.
"""
from __future__ import annotations

import struct
from fractions import Fraction

from ..errors import FrameError, KeyMismatch
from .base import OpCounter, new_key_id


class ExactCiphertext:
    __slots__ = ("value", "key_id", "__weakref__")

    def __init__(self, value: Fraction, key_id: bytes):
        self.value = value
        self.key_id = key_id

    @property
    def size(self) -> int:
        return 2

    def __repr__(self):
        return f"ExactCiphertext({self.value})"


class ExactKeys:
    def __init__(self):
        self.key_id = new_key_id()
        self.pk = self.sk = self.rk = self


class ExactBackend:
    tag = "exact"

    def __init__(self):
        self.counter = OpCounter()

    def keygen(self) -> ExactKeys:
        return ExactKeys()

    def _new(self, value, key_id):
        return self.counter.track(ExactCiphertext(Fraction(value), key_id))

    @staticmethod
    def _check(a, b):
        if a.key_id != b.key_id:
            raise KeyMismatch("ciphertexts belong to different keys")

    def encrypt(self, pk: ExactKeys, x) -> ExactCiphertext:
        self.counter.add("encrypt")
        return self._new(Fraction(x), pk.key_id)

    def decrypt(self, sk: ExactKeys, ct: ExactCiphertext) -> Fraction:
        if ct.key_id != sk.key_id:
            raise KeyMismatch("ciphertext was not encrypted under this key")
        self.counter.add("decrypt")
        return ct.value

    def add(self, a, b):
        self._check(a, b)
        self.counter.add("add")
        return self._new(a.value + b.value, a.key_id)

    def sub(self, a, b):
        self._check(a, b)
        self.counter.add("add")
        return self._new(a.value - b.value, a.key_id)

    def neg(self, a):
        self.counter.add("neg")
        return self._new(-a.value, a.key_id)

    def add_plain(self, a, x):
        self.counter.add("add_plain")
        return self._new(a.value + Fraction(x), a.key_id)

    def mul_plain(self, a, x):
        self.counter.add("mul_plain")
        return self._new(a.value * Fraction(x), a.key_id)

    def mul(self, a, b, rk=None):
        self._check(a, b)
        if rk is not None and rk.key_id != a.key_id:
            raise KeyMismatch("relinearization key belongs to another key pair")
        self.counter.add("mul_ct")
        return self._new(a.value * b.value, a.key_id)

    # --- serialization: numerator and denominator as length-prefixed signed integers
    def ct_to_bytes(self, ct: ExactCiphertext) -> bytes:
        out = []
        for v in (ct.value.numerator, ct.value.denominator):
            raw = v.to_bytes((v.bit_length() + 8) // 8, "big", signed=True)
            out.append(struct.pack(">I", len(raw)) + raw)
        return b"".join(out)

    def ct_from_bytes(self, key_id: bytes, data: bytes) -> ExactCiphertext:
        vals, off = [], 0
        for _ in range(2):
            if len(data) < off + 4:
                raise FrameError(off, "truncated rational")
            (n,) = struct.unpack_from(">I", data, off)
            off += 4
            if n == 0 or len(data) < off + n:
                raise FrameError(off, "bad rational length")
            vals.append(int.from_bytes(data[off:off + n], "big", signed=True))
            off += n
        if off != len(data):
            raise FrameError(off, "trailing bytes after rational")
        if vals[1] <= 0:
            raise FrameError(off, "non-positive denominator")
        return self._new(Fraction(vals[0], vals[1]), key_id)

    def pk_to_bytes(self, pk: ExactKeys) -> bytes:
        return pk.key_id

    def pk_from_bytes(self, data: bytes, key_id: bytes) -> ExactKeys:
        if data != key_id:
            raise FrameError(0, "public key does not match key id")
        keys = ExactKeys.__new__(ExactKeys)
        keys.key_id = key_id
        keys.pk = keys.sk = keys.rk = keys
        return keys

    def rk_to_bytes(self, rk: ExactKeys) -> bytes:
        return rk.key_id

    def rk_from_bytes(self, data: bytes, key_id: bytes) -> ExactKeys:
        return self.pk_from_bytes(data, key_id)
