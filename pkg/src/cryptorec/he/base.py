"""Backend-neutral types for additively homomorphic evaluation.

Plaintexts are signed integer mantissas with a power-of-two scale exponent.
Ciphertexts carry the same exponent as metadata, plus an optional upper
bound on the magnitude of the encrypted value so that a wrap past half the
modulus is reported as :class:`RangeError` before it happens.
"""
from __future__ import annotations

import secrets
import threading
import weakref
from collections import Counter
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from ..errors import KeyMismatch, RangeError, ScaleMismatch, ShapeError


@dataclass(frozen=True)
class PlainScalar:
    value: int
    scale: int = 0

    def __post_init__(self):
        object.__setattr__(self, "value", int(self.value))


def new_key_id() -> bytes:
    return secrets.token_bytes(16)


@dataclass(frozen=True, eq=False)
class KeyPair:
    pk: Any
    sk: Any

    @property
    def key_id(self) -> bytes:
        return self.pk.key_id

    @property
    def bits(self) -> int:
        return self.pk.bits


class Ciphertext:
    """An encrypted signed integer at ``2**-scale``.

    ``payload`` is backend specific (an integer mod ``n^2`` for Paillier,
    the plaintext itself for the oracle); use the backend to serialize it.
    ``bound`` is None when the server has no magnitude information.
    """

    __slots__ = ("pk", "payload", "scale", "bound", "__weakref__")

    def __init__(self, pk, payload, scale: int = 0, bound: int | None = None):
        self.pk = pk
        self.payload = payload
        self.scale = scale
        self.bound = bound

    @property
    def key_id(self) -> bytes:
        return self.pk.key_id

    @property
    def backend_tag(self) -> str:
        return self.pk.backend_tag

    def __repr__(self):
        return f"Ciphertext({self.backend_tag}, key={self.key_id.hex()[:8]}, scale={self.scale})"


class OpCounter:
    """Thread-safe tally of homomorphic operations and live ciphertexts."""

    def __init__(self):
        self._lock = threading.Lock()
        self.counts: Counter = Counter()
        self.live = 0
        self.peak_live = 0

    def add(self, op: str, k: int = 1):
        with self._lock:
            self.counts[op] += k

    def __getitem__(self, op: str) -> int:
        return self.counts[op]

    def track(self, obj):
        with self._lock:
            self.live += 1
            self.peak_live = max(self.peak_live, self.live)
        weakref.finalize(obj, self._release)
        return obj

    def _release(self):
        with self._lock:
            self.live -= 1

    def reset(self):
        with self._lock:
            self.counts.clear()
            self.peak_live = self.live


def check_same_key(a: Ciphertext, b: Ciphertext):
    if a.key_id != b.key_id:
        raise KeyMismatch("ciphertexts belong to different keys")


def add_bounds(a: int | None, b: int | None) -> int | None:
    return None if a is None or b is None else a + b


def as_plain(k, scale: int = 0) -> PlainScalar:
    return k if isinstance(k, PlainScalar) else PlainScalar(int(k), scale)


class AdditiveBackend:
    """Shared evaluation logic over a backend's primitive group operations.

    Subclasses implement ``_add``, ``_neg``, ``_mul`` (payload level),
    ``_identity`` (a deterministic encryption of zero) and the key,
    encryption and serialization hooks.
    """

    tag = "abstract"

    def __init__(self):
        self.counter = OpCounter()

    # --- primitives supplied by subclasses
    def _add(self, pk, x, y):
        raise NotImplementedError

    def _mul(self, pk, x, k: int):
        raise NotImplementedError

    def _neg(self, pk, x):
        raise NotImplementedError

    def _identity(self, pk):
        raise NotImplementedError

    def _encode_plain(self, pk, k: int):
        raise NotImplementedError

    def _modulus(self, pk) -> int:
        return pk.n

    # --- checks
    def _check_range(self, pk, bound: int | None):
        if bound is not None and 2 * bound >= self._modulus(pk):
            raise RangeError(f"value bound {bound} reaches half the plaintext modulus")

    def _own(self, c: Ciphertext):
        if c.pk.backend_tag != self.tag:
            raise KeyMismatch(f"{c.pk.backend_tag} ciphertext given to {self.tag} backend")

    def _wrap(self, pk, payload, scale, bound) -> Ciphertext:
        return Ciphertext(pk, payload, scale, bound)

    # --- public evaluation API
    def add(self, a: Ciphertext, b) -> Ciphertext:
        """``a ⊕ b`` for a ciphertext or :class:`PlainScalar` ``b`` at the same scale."""
        self._own(a)
        if isinstance(b, Ciphertext):
            self._own(b)
            check_same_key(a, b)
            if a.scale != b.scale:
                raise ScaleMismatch(f"adding scales {a.scale} and {b.scale}")
            bound = add_bounds(a.bound, b.bound)
            self._check_range(a.pk, bound)
            self.counter.add("add")
            return self._wrap(a.pk, self._add(a.pk, a.payload, b.payload), a.scale, bound)
        b = as_plain(b, a.scale)
        if b.scale != a.scale:
            raise ScaleMismatch(f"adding scales {a.scale} and {b.scale}")
        bound = add_bounds(a.bound, abs(b.value))
        self._check_range(a.pk, bound)
        self.counter.add("add_plain")
        return self._wrap(a.pk, self._add(a.pk, a.payload, self._encode_plain(a.pk, b.value)), a.scale, bound)

    def neg(self, a: Ciphertext) -> Ciphertext:
        self._own(a)
        self.counter.add("neg")
        return self._wrap(a.pk, self._neg(a.pk, a.payload), a.scale, a.bound)

    def sub(self, a: Ciphertext, b) -> Ciphertext:
        if isinstance(b, Ciphertext):
            return self.add(a, self.neg(b))
        b = as_plain(b, a.scale)
        return self.add(a, PlainScalar(-b.value, b.scale))

    def mul_plain(self, c: Ciphertext, k) -> Ciphertext:
        """``c ⊙ k``; the result's scale is the sum of both exponents."""
        self._own(c)
        k = as_plain(k)
        bound = None if c.bound is None else c.bound * abs(k.value)
        self._check_range(c.pk, bound)
        self.counter.add("mul_plain")
        return self._wrap(c.pk, self._mul(c.pk, c.payload, k.value), c.scale + k.scale, bound)

    def zero(self, pk, scale: int = 0) -> Ciphertext:
        """Deterministic encryption of zero (not hiding; rerandomize before release)."""
        return self._wrap(pk, self._identity(pk), scale, 0)

    def dot_plain(self, cv: Sequence[Ciphertext], w, scale: int = 0, reuse: bool = False) -> Ciphertext:
        """``Σ_j w_j ⊙ cv_j`` with integer weights at exponent ``scale``.

        With ``reuse`` the ciphertexts sharing a weight are summed first, so
        there is one ⊙ per distinct nonzero weight. Both paths decrypt to
        the same integer.
        """
        w = np.asarray(w)
        if len(cv) != w.shape[0] or w.ndim != 1:
            raise ShapeError(f"{len(cv)} ciphertexts for {w.shape} weights")
        if not len(cv):
            raise ShapeError("empty dot product")
        pk = cv[0].pk
        base_scale = cv[0].scale
        for c in cv:
            self._own(c)
            check_same_key(cv[0], c)
            if c.scale != base_scale:
                raise ScaleMismatch("dot product over mixed scales")
        acc = self.zero(pk, base_scale + scale)
        if reuse:
            groups: dict[int, list[int]] = {}
            for j, v in enumerate(w.tolist()):
                if v:
                    groups.setdefault(int(v), []).append(j)
            for v, idx in groups.items():
                bucket = cv[idx[0]]
                for j in idx[1:]:
                    bucket = self.add(bucket, cv[j])
                acc = self.add(acc, self.mul_plain(bucket, PlainScalar(v, scale)))
            return acc
        for c, v in zip(cv, w.tolist()):
            acc = self.add(acc, self.mul_plain(c, PlainScalar(int(v), scale)))
        return acc

    def vecmat(self, cv: Sequence[Ciphertext], W, scale: int = 0, plan=None) -> list[Ciphertext]:
        """``out_l = Σ_k cv_k ⊙ W[k, l]`` for an integer matrix ``W``.

        Without a plan every product is evaluated (``k*l`` ⊙ operations).
        With a :class:`~cryptorec.compress.RowPlan` each ciphertext is
        multiplied once per distinct nonzero value of its row and the
        product reused at every position holding that value.
        """
        W = np.asarray(W)
        if W.ndim != 2 or W.shape[0] != len(cv):
            raise ShapeError(f"{len(cv)} ciphertexts for a {W.shape} matrix")
        if not len(cv):
            raise ShapeError("empty input vector")
        pk = cv[0].pk
        s = cv[0].scale
        for c in cv:
            self._own(c)
            check_same_key(cv[0], c)
            if c.scale != s:
                raise ScaleMismatch("vector-matrix product over mixed scales")
        bounds = [c.bound for c in cv]
        if any(b is None for b in bounds):
            out_bounds = [None] * W.shape[1]
        else:
            b = np.array([int(x) for x in bounds], dtype=object)
            out_bounds = list(np.abs(W).astype(object).T.dot(b))
            for ob in out_bounds:
                self._check_range(pk, int(ob))
        acc = [self._identity(pk) for _ in range(W.shape[1])]
        if plan is None:
            for k, c in enumerate(cv):
                row = W[k].tolist()
                for l, v in enumerate(row):
                    prod = self._mul(pk, c.payload, int(v))
                    acc[l] = self._add(pk, acc[l], prod)
                self.counter.add("mul_plain", len(row))
                self.counter.add("add", len(row))
        else:
            if plan.shape != W.shape:
                raise ShapeError(f"plan for {plan.shape} given a {W.shape} matrix")
            for k, c in enumerate(cv):
                values, positions = plan.row(k)
                products = self._powers(pk, c.payload, values)
                n_add = 0
                for prod, pos in zip(products, positions):
                    for l in pos:
                        acc[l] = self._add(pk, acc[l], prod)
                    n_add += len(pos)
                self.counter.add("mul_plain", len(values))
                self.counter.add("add", n_add)
        return [self._wrap(pk, a, s + scale, None if ob is None else int(ob)) for a, ob in zip(acc, out_bounds)]

    def _powers(self, pk, x, values: Sequence[int]) -> list:
        """``x ⊙ v`` for each ``v`` in ``values`` (distinct, nonzero)."""
        return [self._mul(pk, x, int(v)) for v in values]

    # --- key material and I/O supplied by subclasses
    def keygen(self, bits: int) -> KeyPair:
        raise NotImplementedError

    def encrypt(self, pk, x, scale: int = 0, sk=None) -> Ciphertext:
        raise NotImplementedError

    def decrypt(self, sk, c: Ciphertext) -> PlainScalar:
        raise NotImplementedError

    def rerandomize(self, pk, c: Ciphertext) -> Ciphertext:
        raise NotImplementedError

    def ct_size(self, pk) -> int:
        raise NotImplementedError

    def ct_to_bytes(self, c: Ciphertext) -> bytes:
        raise NotImplementedError

    def ct_from_bytes(self, pk, data: bytes, scale: int = 0, bound: int | None = None) -> Ciphertext:
        raise NotImplementedError

    def pk_to_bytes(self, pk) -> bytes:
        raise NotImplementedError

    def pk_from_bytes(self, data: bytes, key_id: bytes):
        raise NotImplementedError

    def encrypt_vector(self, pk, values, scale: int = 0, sk=None) -> list[Ciphertext]:
        return [self.encrypt(pk, int(v), scale, sk=sk) for v in np.asarray(values).tolist()]

    def decrypt_vector(self, sk, cts: Sequence[Ciphertext]) -> list[int]:
        return [self.decrypt(sk, c).value for c in cts]
