"""Textbook Fan–Vercauteren (BFV) somewhat homomorphic encryption.

Everything runs on Python/gmpy2 integers in ``Z_q[x]/(x^p + 1)``: no RNS,
no NTT, no batching. Reals are carried by a base-2 fractional encoding:
integral bits sit in the low coefficients, and the bit worth ``2^-k`` is
the coefficient ``-1`` at degree ``p - k`` (since ``x^-k = -x^(p-k)``).
Products of encodings therefore stay decodable while no coefficient
exceeds ``t/2`` and the integral and fractional regions do not collide.

Each ciphertext carries a worst-case bound on its noise ``e``, where
``c0 + c1*s = Δ*m + e (mod q)`` and ``Δ = q // t``. Decryption is correct
while ``|e| < Δ/2``; the noise budget is ``log2(Δ/2) - log2(bound)``.
"""
from __future__ import annotations

import math
import random
import struct
from dataclasses import dataclass
from fractions import Fraction
from typing import ClassVar

import gmpy2
import numpy as np

from ..errors import FrameError, KeyMismatch, NoiseExhausted, ParamError, RangeError
from . import ring
from .base import OpCounter, new_key_id

_sysrand = random.SystemRandom()

SIGMA = 3.2
ERROR_BOUND = 19  # Gaussian samples are rejected beyond 6 sigma


@dataclass(frozen=True)
class SwheParams:
    """Ring, moduli and fractional-encoding layout.

    Attributes:
      poly_degree: ``p``, a power of two.
      plain_modulus: ``t``, prime.
      coeff_modulus: ``q``.
      frac_integer_coeffs: low coefficients reserved for the integral part.
      frac_precision_bits: fraction bits kept when encoding an inexact real.
      decomp_bits: relinearization digit size (base ``2**decomp_bits``).
    """

    poly_degree: int
    plain_modulus: int
    coeff_modulus: int
    frac_integer_coeffs: int
    frac_precision_bits: int = 32
    decomp_bits: int = 32
    name: str = "custom"

    def __post_init__(self):
        p, t, q = self.poly_degree, self.plain_modulus, self.coeff_modulus
        if p not in (1024, 4096):
            raise ParamError(f"poly_degree must be 1024 or 4096, got {p}")
        if not gmpy2.is_prime(t):
            raise ParamError(f"plain modulus {t} is not prime")
        if q <= t * 4:
            raise ParamError("coefficient modulus too small for the plain modulus")
        if self.frac_integer_coeffs < 1 or self.frac_integer_coeffs + self.frac_precision_bits > p:
            raise ParamError("fractional layout does not fit the ring")
        if self.decomp_bits < 1:
            raise ParamError("decomp_bits must be positive")

    @property
    def delta(self) -> int:
        return self.coeff_modulus // self.plain_modulus

    @property
    def r_t(self) -> int:
        return self.coeff_modulus % self.plain_modulus

    @property
    def frac_capacity(self) -> int:
        """Fraction bits an exact dyadic may use."""
        return self.poly_degree - self.frac_integer_coeffs

    @property
    def decomp_count(self) -> int:
        return -(-self.coeff_modulus.bit_length() // self.decomp_bits)

    @property
    def words_per_coeff(self) -> int:
        return -(-self.coeff_modulus.bit_length() // 64)

    @property
    def ciphertext_bytes(self) -> int:
        """Serialized size of a fresh (two-part) ciphertext."""
        return 4 + 2 * (4 + 8 * self.words_per_coeff * self.poly_degree)

    @property
    def fresh_noise(self) -> int:
        """Noise bound of a fresh encryption: ``|e1 + e*u + e2*s|`` plus rounding of ``q/t``."""
        return ERROR_BOUND * (1 + 2 * self.poly_degree) + self.r_t

    @property
    def max_budget(self) -> float:
        return math.log2(self.delta / 2)


def _modulus_near(bits: int, t: int) -> int:
    """Smallest ``q >= 2^bits`` with ``q = 1 (mod t)`` so that ``q mod t = 1``."""
    q = 1 << bits
    return q + (1 - q) % t


def _prime_near(bits: int) -> int:
    return int(gmpy2.next_prime(1 << bits))


def make_profile(name: str) -> SwheParams:
    """Named parameter sets.

    ``test``: p=1024 with a large plaintext modulus so the retraining
    circuit never wraps coefficients; far below 128-bit security.
    ``deep_4096``: p=4096, t=65537, q sized for four sequential ct×ct
    products (about 60-bit security).
    ``secure_4096``: p=4096, t=65537, q=2^109-ish, inside the 128-bit
    security bound for this ring, enough for one or two products.
    """
    if name == "test":
        t = _prime_near(72)
        return SwheParams(1024, t, _modulus_near(512, t), 128, 32, 64, name)
    if name == "deep_4096":
        t = 65537
        return SwheParams(4096, t, _modulus_near(250, t), 1024, 32, 32, name)
    if name == "secure_4096":
        t = 65537
        return SwheParams(4096, t, _modulus_near(108, t), 1024, 32, 32, name)
    raise ParamError(f"unknown profile {name!r}")


PROFILES = ("test", "deep_4096", "secure_4096")


# --- fractional encoding

def _as_fraction(x) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, (int, np.integer)):
        return Fraction(int(x))
    return Fraction(float(x))


def fractional_encode(x, params: SwheParams) -> list:
    """Plaintext polynomial (integer coefficients) representing ``x``.

    A dyadic rational needing at most ``frac_capacity`` fraction bits is
    encoded exactly; anything else is first rounded to the nearest multiple
    of ``2**-frac_precision_bits``.
    """
    p = params.poly_degree
    v = _as_fraction(x)
    den = v.denominator
    if den & (den - 1) or den.bit_length() - 1 > params.frac_capacity:
        v = Fraction(round(v * (1 << params.frac_precision_bits)), 1 << params.frac_precision_bits)
        den = v.denominator
    k = den.bit_length() - 1
    sign = -1 if v < 0 else 1
    mag = abs(v.numerator)
    integral, frac = mag >> k, mag & ((1 << k) - 1)
    if integral.bit_length() > params.frac_integer_coeffs:
        raise RangeError(f"|{float(v)}| needs more than {params.frac_integer_coeffs} integral bits")
    poly = [0] * p
    for i in range(integral.bit_length()):
        if integral >> i & 1:
            poly[i] = sign
    for j in range(1, k + 1):
        # bit worth 2^-j: x^-j = -x^(p-j)
        if frac >> (k - j) & 1:
            poly[p - j] = -sign
    return poly


def fractional_decode(poly: list, params: SwheParams) -> Fraction:
    """Exact rational value of a (centered) plaintext polynomial."""
    p, ic = params.poly_degree, params.frac_integer_coeffs
    integral = sum(c << i for i, c in enumerate(poly[:ic]) if c)
    num = 0
    for i in range(ic, p):
        c = poly[i]
        if c:
            num -= c << (i - ic)
    return integral + Fraction(num, 1 << (p - ic))


# --- keys and ciphertexts

@dataclass(frozen=True, eq=False)
class SwhePublicKey:
    params: SwheParams
    b: list
    a: list
    key_id: bytes
    backend_tag: ClassVar[str] = "swhe"

    @property
    def bits(self) -> int:
        return self.params.coeff_modulus.bit_length()


@dataclass(frozen=True, eq=False)
class SwheSecretKey:
    params: SwheParams
    s: list
    key_id: bytes


@dataclass(frozen=True, eq=False)
class SwheRelinKeys:
    params: SwheParams
    keys: list  # [(b_i, a_i)] with b_i = -(a_i*s + e_i) + w^i * s^2
    key_id: bytes


@dataclass(frozen=True, eq=False)
class SwheKeys:
    pk: SwhePublicKey
    sk: SwheSecretKey
    rk: SwheRelinKeys

    @property
    def key_id(self) -> bytes:
        return self.pk.key_id


class SwheCiphertext:
    __slots__ = ("params", "key_id", "parts", "noise", "__weakref__")

    def __init__(self, params: SwheParams, key_id: bytes, parts: list, noise: float | None):
        self.params = params
        self.key_id = key_id
        self.parts = parts
        self.noise = noise  # upper bound on |e|, None when unknown (deserialized)

    @property
    def size(self) -> int:
        return len(self.parts)

    @property
    def noise_budget_bits(self) -> float:
        """Estimated remaining budget; ``inf`` if the bound is zero, ``nan`` if unknown."""
        if self.noise is None:
            return math.nan
        if self.noise <= 0:
            return math.inf
        return self.params.max_budget - math.log2(self.noise)

    def __repr__(self):
        return f"SwheCiphertext(size={self.size}, budget={self.noise_budget_bits:.1f})"


def _ternary(p: int) -> list:
    return [_sysrand.randrange(3) - 1 for _ in range(p)]


def _error(p: int) -> list:
    out = []
    while len(out) < p:
        e = round(_sysrand.gauss(0.0, SIGMA))
        if abs(e) <= ERROR_BOUND:
            out.append(e)
    return out


def _uniform(p: int, q: int) -> list:
    half = q // 2
    return [_sysrand.randrange(q) - half for _ in range(p)]


class SwheBackend:
    """BFV evaluator; every op returns a new ciphertext and updates noise bounds."""

    tag = "swhe"

    def __init__(self, params: SwheParams):
        self.params = params
        self.counter = OpCounter()

    # --- keys
    def keygen(self) -> SwheKeys:
        P = self.params
        p, q = P.poly_degree, P.coeff_modulus
        key_id = new_key_id()
        s = _ternary(p)
        a = _uniform(p, q)
        b = ring.center(ring.sub(ring.scale(ring.negacyclic_mul(a, s), -1), _error(p)), q)
        s2 = ring.center(ring.negacyclic_mul(s, s), q)
        keys = []
        for i in range(P.decomp_count):
            ai = _uniform(p, q)
            ei = _error(p)
            w_i = 1 << (P.decomp_bits * i)
            bi = [-x - y + w_i * z for x, y, z in zip(ring.negacyclic_mul(ai, s), ei, s2)]
            keys.append((ring.center(bi, q), ai))
        return SwheKeys(
            SwhePublicKey(P, b, a, key_id), SwheSecretKey(P, s, key_id), SwheRelinKeys(P, keys, key_id)
        )

    def _check(self, *cts):
        kid = cts[0].key_id
        for c in cts:
            if not isinstance(c, SwheCiphertext) or c.params != self.params:
                raise KeyMismatch("ciphertext from a different parameter set")
            if c.key_id != kid:
                raise KeyMismatch("ciphertexts belong to different keys")

    def _new(self, key_id, parts, noise):
        return self.counter.track(SwheCiphertext(self.params, key_id, parts, noise))

    # --- encryption
    def encode(self, x) -> list:
        return fractional_encode(x, self.params)

    def decode(self, poly) -> Fraction:
        return fractional_decode(poly, self.params)

    def encrypt_poly(self, pk: SwhePublicKey, m: list) -> SwheCiphertext:
        P = self.params
        if pk.params != P:
            raise KeyMismatch("public key from a different parameter set")
        p, q, t = P.poly_degree, P.coeff_modulus, P.plain_modulus
        m = ring.center(m, t)
        u = _ternary(p)
        e1, e2 = _error(p), _error(p)
        c0 = [x + y + P.delta * z for x, y, z in zip(ring.negacyclic_mul(pk.b, u), e1, m)]
        c1 = ring.add(ring.negacyclic_mul(pk.a, u), e2)
        self.counter.add("encrypt")
        return self._new(pk.key_id, [ring.center(c0, q), ring.center(c1, q)], P.fresh_noise)

    def encrypt(self, pk: SwhePublicKey, x) -> SwheCiphertext:
        return self.encrypt_poly(pk, self.encode(x))

    def _phase(self, sk: SwheSecretKey, ct: SwheCiphertext) -> list:
        q = self.params.coeff_modulus
        acc = list(ct.parts[0])
        s_pow = sk.s
        for part in ct.parts[1:]:
            acc = ring.add(acc, ring.negacyclic_mul(part, s_pow))
            s_pow = ring.center(ring.negacyclic_mul(s_pow, sk.s), q)
        return ring.center(acc, q)

    def _round_phase(self, phase: list) -> list:
        P = self.params
        q, t = P.coeff_modulus, P.plain_modulus
        m = [(2 * t * x + q) // (2 * q) for x in phase]
        return ring.center(m, t)

    def measured_budget(self, sk: SwheSecretKey, ct: SwheCiphertext) -> float:
        """Exact remaining budget computed with the secret key (testing aid)."""
        P = self.params
        phase = self._phase(sk, ct)
        m = self._round_phase(phase)
        e = ring.center([x - P.delta * y for x, y in zip(phase, m)], P.coeff_modulus)
        worst = ring.max_abs(e)
        return math.inf if worst == 0 else P.max_budget - math.log2(worst)

    def decrypt_poly(self, sk: SwheSecretKey, ct: SwheCiphertext) -> list:
        if ct.key_id != sk.key_id:
            raise KeyMismatch("ciphertext was not encrypted under this key")
        budget = ct.noise_budget_bits
        if math.isnan(budget):
            budget = self.measured_budget(sk, ct)
            # a wrapped phase can look quiet, so demand a safety margin
            if budget < 2:
                raise NoiseExhausted(f"measured noise budget {budget:.1f} bits")
        elif budget <= 0:
            raise NoiseExhausted(f"estimated noise budget {budget:.1f} bits")
        self.counter.add("decrypt")
        return self._round_phase(self._phase(sk, ct))

    def decrypt(self, sk: SwheSecretKey, ct: SwheCiphertext) -> Fraction:
        return self.decode(self.decrypt_poly(sk, ct))

    # --- evaluation
    def add(self, a: SwheCiphertext, b: SwheCiphertext) -> SwheCiphertext:
        self._check(a, b)
        q = self.params.coeff_modulus
        n = max(a.size, b.size)
        parts = []
        for i in range(n):
            if i < a.size and i < b.size:
                parts.append(ring.center(ring.add(a.parts[i], b.parts[i]), q))
            else:
                parts.append(list((a.parts if i < a.size else b.parts)[i]))
        self.counter.add("add")
        return self._new(a.key_id, parts, _sum_noise(a.noise, b.noise, self.params.r_t))

    def neg(self, a: SwheCiphertext) -> SwheCiphertext:
        self.counter.add("neg")
        return self._new(a.key_id, [ring.scale(x, -1) for x in a.parts], a.noise)

    def sub(self, a: SwheCiphertext, b: SwheCiphertext) -> SwheCiphertext:
        return self.add(a, self.neg(b))

    def add_plain(self, a: SwheCiphertext, x) -> SwheCiphertext:
        P = self.params
        m = ring.center(self.encode(x), P.plain_modulus)
        c0 = ring.center([c + P.delta * y for c, y in zip(a.parts[0], m)], P.coeff_modulus)
        self.counter.add("add_plain")
        noise = None if a.noise is None else a.noise + P.r_t
        return self._new(a.key_id, [c0] + [list(c) for c in a.parts[1:]], noise)

    def mul_plain(self, a: SwheCiphertext, x) -> SwheCiphertext:
        """``a ⊙ x``: multiply by the encoding of the plaintext real ``x``."""
        P = self.params
        m = ring.center(self.encode(x), P.plain_modulus)
        norm = ring.l1(m)
        bound = P.coeff_modulus // 2 * max(norm, 1)
        parts = [ring.center(ring.negacyclic_mul(c, m, bound), P.coeff_modulus) for c in a.parts]
        self.counter.add("mul_plain")
        noise = None
        if a.noise is not None:
            noise = max(a.noise, norm * a.noise + P.r_t * (norm + 1) / 2)
        return self._new(a.key_id, parts, noise)

    def mul(self, a: SwheCiphertext, b: SwheCiphertext, rk: SwheRelinKeys | None = None) -> SwheCiphertext:
        """``a ⊗ b``; relinearized back to two parts when ``rk`` is given."""
        self._check(a, b)
        if a.size != 2 or b.size != 2:
            raise ParamError("ciphertext multiplication needs two-part operands")
        if rk is not None and rk.key_id != a.key_id:
            raise KeyMismatch("relinearization key belongs to another key pair")
        P = self.params
        p, q, t = P.poly_degree, P.coeff_modulus, P.plain_modulus
        (a0, a1), (b0, b1) = a.parts, b.parts
        bound = p * (q // 2) ** 2 * 4
        d0 = ring.negacyclic_mul(a0, b0, bound)
        d2 = ring.negacyclic_mul(a1, b1, bound)
        mid = ring.negacyclic_mul(ring.add(a0, a1), ring.add(b0, b1), bound)
        d1 = [x - y - z for x, y, z in zip(mid, d0, d2)]
        # scale by t/q and round
        parts = [ring.center([(2 * t * x + q) // (2 * q) for x in d], q) for d in (d0, d1, d2)]
        self.counter.add("mul_ct")
        noise = None
        if a.noise is not None and b.noise is not None:
            noise = max(a.noise, b.noise, _tensor_noise(P, a.noise, b.noise))
        out = self._new(a.key_id, parts, noise)
        return out if rk is None else self.relinearize(out, rk)

    def relinearize(self, ct: SwheCiphertext, rk: SwheRelinKeys) -> SwheCiphertext:
        """Reduce a three-part ciphertext to two parts without changing its plaintext."""
        if ct.size == 2:
            return ct
        if rk.key_id != ct.key_id:
            raise KeyMismatch("relinearization key belongs to another key pair")
        noise = None if ct.noise is None else ct.noise + _relin_noise(self.params)
        return self._new(ct.key_id, self._relin(*ct.parts, rk), noise)

    def _relin(self, c0, c1, c2, rk: SwheRelinKeys):
        P = self.params
        q, w = P.coeff_modulus, P.decomp_bits
        mask = (1 << w) - 1
        lifted = [c % q for c in c2]
        acc0, acc1 = list(c0), list(c1)
        for i, (kb, ka) in enumerate(rk.keys):
            digit = [(c >> (w * i)) & mask for c in lifted]
            if not any(digit):
                continue
            bound = P.poly_degree * (mask + 1) * (q // 2)
            acc0 = ring.add(acc0, ring.negacyclic_mul(digit, kb, bound))
            acc1 = ring.add(acc1, ring.negacyclic_mul(digit, ka, bound))
        self.counter.add("relin")
        return [ring.center(acc0, q), ring.center(acc1, q)]

    # --- serialization: u32 parts, then per part u32 coefficient count and
    # each coefficient (as its residue in [0, q)) in little-endian u64 words
    def ct_to_bytes(self, ct: SwheCiphertext) -> bytes:
        P = self.params
        width = 8 * P.words_per_coeff
        q = P.coeff_modulus
        out = [struct.pack("<I", ct.size)]
        for part in ct.parts:
            out.append(struct.pack("<I", len(part)))
            out.append(b"".join((c % q).to_bytes(width, "little") for c in part))
        return b"".join(out)

    def ct_from_bytes(self, key_id: bytes, data: bytes, fresh: bool = False) -> SwheCiphertext:
        """Parse a ciphertext; ``fresh`` asserts it is a fresh two-part encryption.

        Without ``fresh`` the noise bound is unknown and decryption falls
        back to measuring it.
        """
        P = self.params
        width = 8 * P.words_per_coeff
        q, p = P.coeff_modulus, P.poly_degree
        off = 0
        if len(data) < 4:
            raise FrameError(0, "truncated ciphertext")
        (nparts,) = struct.unpack_from("<I", data)
        off = 4
        if nparts not in (2, 3):
            raise FrameError(0, f"bad part count {nparts}")
        parts = []
        for _ in range(nparts):
            if len(data) < off + 4:
                raise FrameError(off, "truncated part header")
            (count,) = struct.unpack_from("<I", data, off)
            off += 4
            if count != p or len(data) < off + count * width:
                raise FrameError(off, "bad coefficient count or truncated part")
            coeffs = [int.from_bytes(data[off + j * width: off + (j + 1) * width], "little") for j in range(count)]
            if any(c >= q for c in coeffs):
                raise FrameError(off, "coefficient not reduced mod q")
            parts.append(ring.center(coeffs, q))
            off += count * width
        if off != len(data):
            raise FrameError(off, "trailing bytes after ciphertext")
        if fresh and nparts != 2:
            raise FrameError(0, "a fresh ciphertext has two parts")
        return self._new(key_id, parts, P.fresh_noise if fresh else None)

    def pk_to_bytes(self, pk: SwhePublicKey) -> bytes:
        return self.ct_to_bytes(SwheCiphertext(self.params, pk.key_id, [pk.b, pk.a], None))

    def pk_from_bytes(self, data: bytes, key_id: bytes) -> SwhePublicKey:
        ct = self.ct_from_bytes(key_id, data)
        if ct.size != 2:
            raise FrameError(0, "public key must have two parts")
        return SwhePublicKey(self.params, ct.parts[0], ct.parts[1], key_id)

    def rk_to_bytes(self, rk: SwheRelinKeys) -> bytes:
        out = [struct.pack("<I", len(rk.keys))]
        for kb, ka in rk.keys:
            out.append(self.ct_to_bytes(SwheCiphertext(self.params, rk.key_id, [kb, ka], None)))
        return b"".join(out)

    def rk_from_bytes(self, data: bytes, key_id: bytes) -> SwheRelinKeys:
        if len(data) < 4:
            raise FrameError(0, "truncated relinearization keys")
        (count,) = struct.unpack_from("<I", data)
        if count != self.params.decomp_count:
            raise FrameError(0, f"expected {self.params.decomp_count} relinearization keys, got {count}")
        size = self.params.ciphertext_bytes
        if len(data) != 4 + count * size:
            raise FrameError(4, "relinearization key length mismatch")
        keys = []
        for i in range(count):
            ct = self.ct_from_bytes(key_id, data[4 + i * size: 4 + (i + 1) * size])
            keys.append((ct.parts[0], ct.parts[1]))
        return SwheRelinKeys(self.params, keys, key_id)


def _sum_noise(x, y, r_t):
    return None if x is None or y is None else x + y + r_t


def _tensor_noise(P: SwheParams, e1: float, e2: float) -> float:
    """Worst-case noise after tensoring and rescaling (infinity norms, ternary ``s``)."""
    p, t, q = P.poly_degree, P.plain_modulus, P.coeff_modulus
    R = (p + 1) / 2 + 1  # bound on the wrap-around polynomial of each operand
    tensor = t * p * (e1 + e2) * (R + 1) + t * p * e1 * e2 / q + P.r_t * t * p * (R + 1)
    return tensor + (1 + p + p * p) / 2


def _relin_noise(P: SwheParams) -> float:
    return P.decomp_count * P.poly_degree * (1 << P.decomp_bits) * ERROR_BOUND


def mul_noise(P: SwheParams, e1: float, e2: float) -> float:
    """Noise bound of a relinearized product of operands with noise ``e1`` and ``e2``."""
    return max(e1, e2, _tensor_noise(P, e1, e2)) + _relin_noise(P)


class PlainRingBackend:
    """The encoding arithmetic of :class:`SwheBackend` without encryption.

    Payloads are integer polynomials over ``Z[x]/(x^p + 1)`` with no
    plaintext modulus, so running a circuit here reveals the largest
    coefficient the plaintext modulus has to accommodate.
    """

    tag = "plain-ring"

    def __init__(self, params: SwheParams):
        self.params = params
        self.counter = OpCounter()
        self.max_coeff = 0

    def _note(self, poly):
        self.max_coeff = max(self.max_coeff, ring.max_abs(poly))
        return poly

    def keygen(self):
        return None

    def encrypt(self, pk, x):
        return self._note(fractional_encode(x, self.params))

    def decrypt(self, sk, ct) -> Fraction:
        return fractional_decode(ct, self.params)

    def add(self, a, b):
        return self._note(ring.add(a, b))

    def sub(self, a, b):
        return self._note(ring.sub(a, b))

    def neg(self, a):
        return ring.scale(a, -1)

    def add_plain(self, a, x):
        return self._note(ring.add(a, fractional_encode(x, self.params)))

    def mul_plain(self, a, x):
        self.counter.add("mul_plain")
        return self._note(ring.negacyclic_mul(a, fractional_encode(x, self.params)))

    def mul(self, a, b, rk=None):
        self.counter.add("mul_ct")
        return self._note(ring.negacyclic_mul(a, b))
