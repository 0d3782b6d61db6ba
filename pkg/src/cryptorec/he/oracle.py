"""Cleartext stand-in for the Paillier backend.

Ciphertexts hold their plaintext integer directly, so every program runs
orders of magnitude faster while producing the same decrypted integers as
long as no value leaves the signed range. Every operation is counted, which
makes this backend the measuring stick for operation budgets.
"""
from __future__ import annotations

import secrets
import struct
from dataclasses import dataclass
from typing import ClassVar

from ..errors import FrameError, KeyMismatch, ParamError, RangeError
from .base import AdditiveBackend, Ciphertext, KeyPair, PlainScalar, as_plain, new_key_id
from .paillier import SUPPORTED_BITS


@dataclass(frozen=True, eq=False)
class OraclePublicKey:
    key_id: bytes
    bits: int
    backend_tag: ClassVar[str] = "oracle"

    @property
    def n(self) -> int:
        # nominal modulus: the smallest a Paillier key of this size can have
        return 1 << (self.bits - 1)


@dataclass(frozen=True, eq=False)
class OracleSecretKey:
    pk: OraclePublicKey

    @property
    def key_id(self) -> bytes:
        return self.pk.key_id


class OracleBackend(AdditiveBackend):
    tag = "oracle"

    def keygen(self, bits: int = 2048) -> KeyPair:
        if bits not in SUPPORTED_BITS:
            raise ParamError(f"unsupported key size {bits}; use one of {SUPPORTED_BITS}")
        pk = OraclePublicKey(new_key_id(), bits)
        return KeyPair(pk, OracleSecretKey(pk))

    def _reduce(self, pk, v: int) -> int:
        v %= pk.n
        return v - pk.n if v > pk.n // 2 else v

    def _add(self, pk, x, y):
        return self._reduce(pk, x + y)

    def _neg(self, pk, x):
        return -x

    def _mul(self, pk, x, k: int):
        return self._reduce(pk, x * k)

    def _identity(self, pk):
        return 0

    def _encode_plain(self, pk, k: int):
        return k

    def encrypt(self, pk, x, scale: int = 0, sk=None) -> Ciphertext:
        if pk.backend_tag != self.tag:
            raise KeyMismatch("not an oracle public key")
        x = as_plain(x, scale)
        if 2 * abs(x.value) >= pk.n:
            raise RangeError(f"plaintext magnitude needs more than {pk.bits - 2} bits")
        self.counter.add("encrypt")
        return Ciphertext(pk, x.value, x.scale, abs(x.value))

    def decrypt(self, sk, c: Ciphertext) -> PlainScalar:
        self._own(c)
        if c.key_id != sk.key_id:
            raise KeyMismatch("ciphertext was not encrypted under this key")
        self.counter.add("decrypt")
        return PlainScalar(c.payload, c.scale)

    def rerandomize(self, pk, c: Ciphertext) -> Ciphertext:
        self._own(c)
        if c.key_id != pk.key_id:
            raise KeyMismatch("ciphertext was not encrypted under this key")
        self.counter.add("rerandomize")
        return Ciphertext(pk, c.payload, c.scale, c.bound)

    # Same framing as Paillier: u32 length + big-endian two's complement,
    # padded to the width a Paillier ciphertext of this key size would have
    def ct_size(self, pk) -> int:
        return 4 + (2 * pk.bits + 7) // 8

    def ct_to_bytes(self, c: Ciphertext) -> bytes:
        width = self.ct_size(c.pk) - 4
        return struct.pack(">I", width) + int(c.payload).to_bytes(width, "big", signed=True)

    def ct_from_bytes(self, pk, data: bytes, scale: int = 0, bound: int | None = None) -> Ciphertext:
        if len(data) < 4:
            raise FrameError(0, "truncated ciphertext length")
        (length,) = struct.unpack_from(">I", data)
        if length != len(data) - 4:
            raise FrameError(0, f"ciphertext length {length} does not match {len(data) - 4} bytes")
        return Ciphertext(pk, int.from_bytes(data[4:], "big", signed=True), scale, bound)

    def pk_to_bytes(self, pk) -> bytes:
        # random filler of the modulus length keeps frame sizes equal to Paillier's
        raw = struct.pack(">I", pk.bits) + secrets.token_bytes((pk.bits + 7) // 8 - 4)
        return struct.pack(">I", len(raw)) + raw

    def pk_from_bytes(self, data: bytes, key_id: bytes) -> OraclePublicKey:
        if len(data) < 8:
            raise FrameError(0, "truncated public key")
        (length, bits) = struct.unpack_from(">II", data)
        if length != len(data) - 4 or bits not in SUPPORTED_BITS:
            raise FrameError(4, "malformed oracle public key")
        return OraclePublicKey(key_id, bits)
