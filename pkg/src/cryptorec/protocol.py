"""The one-round client/server protocol and its wire format.

A client encrypts its dense rating row under a key pair made for this query
only and sends it with its encrypted mean (and, to be retrained on, its
encrypted rating indicator plus relinearization keys). The server evaluates
the model on the ciphertexts and returns one encrypted prediction per item;
it never holds a secret key.

Frame layout (all integers big-endian)::

    "CRYR" | version u8 | type u8 | payload length u64 | payload

Query payloads are u32-length-prefixed fields: backend tag, key id, public
key, item count ``m`` (u32), ``m`` rating ciphertexts, the mean ciphertext
and, for retraining, ``m`` indicator ciphertexts and the relinearization
keys. A response holds the key id, a u32 count and that many ciphertexts.
An error payload is ``code u16 | length u32 | UTF-8 text``.

Fixed-point exponents are part of protocol version 1: ratings 0, model
codewords 12, means, biases and predictions 24. Ring backends (SWHE and
its exact stand-in) carry reals directly.
"""
from __future__ import annotations

import struct
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from enum import IntEnum
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .compress import CompressedModel, ReusePlan, RowPlan
from .errors import (
    FrameError, InvalidRating, ItemMapError, KeyMismatch, NoiseExhausted, ParamError, ShapeError,
    VersionMismatch,
)
from .fixedpoint import CODEWORD_EXP, OUTPUT_EXP, RATING_EXP, dyadic, to_fixed
from .he import OracleBackend, PaillierBackend
from .he.base import AdditiveBackend
from .he.exact import ExactBackend
from .he.swhe import SwheBackend, make_profile
from .model import ModelParams, RegUsers, TrainingConfig
from .retrain import EXACT_BITS, RetrainTerms, prepare_terms, retrain_circuit

MAGIC = b"CRYR"
VERSION = 1
HEADER = struct.Struct(">4sBBQ")
MAX_PAYLOAD = 1 << 34
MAX_TAG = 64
KEY_ID_BYTES = 16


class MsgType(IntEnum):
    DIRECT_QUERY = 1
    RETRAIN_QUERY = 2
    RESPONSE = 3
    ERROR = 4


class Mode(IntEnum):
    DIRECT = MsgType.DIRECT_QUERY
    RETRAIN = MsgType.RETRAIN_QUERY


class ErrorCode(IntEnum):
    VERSION = 1
    MALFORMED = 2
    SHAPE = 3
    NOISE = 4
    UNSUPPORTED = 5
    INTERNAL = 6


@dataclass(frozen=True)
class QueryMessage:
    mode: Mode
    backend: str
    key_id: bytes
    pk: bytes
    m: int
    ratings: tuple
    mean: bytes
    indicator: tuple | None = None
    relin: bytes | None = None

    def __post_init__(self):
        if len(self.ratings) != self.m:
            raise ShapeError(f"{len(self.ratings)} rating ciphertexts for m={self.m}")
        retrain = self.mode == Mode.RETRAIN
        if retrain != (self.indicator is not None) or retrain != (self.relin is not None):
            raise ShapeError("indicator and relinearization keys go with retraining queries only")
        if self.indicator is not None and len(self.indicator) != self.m:
            raise ShapeError(f"{len(self.indicator)} indicator ciphertexts for m={self.m}")


@dataclass(frozen=True)
class ResponseMessage:
    key_id: bytes
    predictions: tuple


@dataclass(frozen=True)
class ErrorMessage:
    code: int
    message: str


# --- frame codec

def _field(data: bytes) -> bytes:
    return struct.pack(">I", len(data)) + data


def _payload(msg) -> tuple[MsgType, bytes]:
    if isinstance(msg, QueryMessage):
        parts = [_field(msg.backend.encode()), _field(msg.key_id), _field(msg.pk), _field(struct.pack(">I", msg.m))]
        parts += [_field(c) for c in msg.ratings]
        parts.append(_field(msg.mean))
        if msg.mode == Mode.RETRAIN:
            parts += [_field(c) for c in msg.indicator]
            parts.append(_field(msg.relin))
        return MsgType(msg.mode), b"".join(parts)
    if isinstance(msg, ResponseMessage):
        parts = [_field(msg.key_id), _field(struct.pack(">I", len(msg.predictions)))]
        parts += [_field(c) for c in msg.predictions]
        return MsgType.RESPONSE, b"".join(parts)
    if isinstance(msg, ErrorMessage):
        text = msg.message.encode()
        return MsgType.ERROR, struct.pack(">HI", msg.code, len(text)) + text
    raise TypeError(f"cannot frame {type(msg).__name__}")


def encode_frame(msg) -> bytes:
    kind, payload = _payload(msg)
    return HEADER.pack(MAGIC, VERSION, kind, len(payload)) + payload


class _Reader:
    def __init__(self, data: bytes, base: int):
        self.data, self.off, self.base = data, 0, base

    def take(self, n: int) -> bytes:
        if n > len(self.data) - self.off:
            raise FrameError(self.base + self.off, f"need {n} bytes, {len(self.data) - self.off} left")
        out = self.data[self.off:self.off + n]
        self.off += n
        return out

    def field(self) -> bytes:
        (n,) = struct.unpack(">I", self.take(4))
        return self.take(n)

    def u32_field(self) -> int:
        raw = self.field()
        if len(raw) != 4:
            raise FrameError(self.base + self.off, "count field must be 4 bytes")
        return struct.unpack(">I", raw)[0]

    def count(self) -> int:
        value = self.u32_field()
        # every item needs at least its own 4-byte length prefix
        if 4 * value > len(self.data) - self.off:
            raise FrameError(self.base + self.off, f"count {value} exceeds the remaining payload")
        return value

    def text(self, limit: int) -> str:
        raw = self.field()
        if len(raw) > limit:
            raise FrameError(self.base + self.off, "text field too long")
        try:
            return raw.decode()
        except UnicodeDecodeError:
            raise FrameError(self.base + self.off, "text field is not UTF-8") from None

    def done(self):
        if self.off != len(self.data):
            raise FrameError(self.base + self.off, "trailing bytes in payload")


def decode_header(data: bytes) -> tuple[MsgType, int]:
    """Validate a frame header; returns the message type and payload length."""
    if len(data) < HEADER.size:
        raise FrameError(len(data), "truncated frame header")
    magic, version, kind, length = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FrameError(0, "bad magic")
    if version != VERSION:
        raise VersionMismatch(4, f"protocol version {version}, expected {VERSION}")
    try:
        kind = MsgType(kind)
    except ValueError:
        raise FrameError(5, f"unknown message type {kind}") from None
    if length > MAX_PAYLOAD:
        raise FrameError(6, f"payload length {length} exceeds limit")
    return kind, length


def decode_frame(data: bytes):
    """Parse one complete frame into a message object; raises FrameError only."""
    kind, length = decode_header(data)
    if len(data) - HEADER.size != length:
        raise FrameError(min(len(data), HEADER.size + length), f"payload is {len(data) - HEADER.size} bytes, header says {length}")
    r = _Reader(data[HEADER.size:], HEADER.size)
    if kind == MsgType.ERROR:
        code, n = struct.unpack(">HI", r.take(6))
        try:
            text = r.take(n).decode()
        except UnicodeDecodeError:
            raise FrameError(HEADER.size + 6, "error text is not UTF-8") from None
        r.done()
        return ErrorMessage(code, text)
    if kind == MsgType.RESPONSE:
        key_id = r.field()
        preds = tuple(r.field() for _ in range(r.count()))
        r.done()
        return ResponseMessage(key_id, preds)
    backend = r.text(MAX_TAG)
    key_id = r.field()
    if len(key_id) != KEY_ID_BYTES:
        raise FrameError(HEADER.size + r.off, "key id must be 16 bytes")
    pk = r.field()
    m = r.count()
    ratings = tuple(r.field() for _ in range(m))
    mean = r.field()
    indicator = relin = None
    if kind == MsgType.RETRAIN_QUERY:
        if 4 * m > len(r.data) - r.off:
            raise FrameError(HEADER.size + r.off, "indicator count exceeds the remaining payload")
        indicator = tuple(r.field() for _ in range(m))
        relin = r.field()
    r.done()
    return QueryMessage(Mode(kind), backend, key_id, pk, m, ratings, mean, indicator, relin)


def read_frame(stream) -> bytes:
    """Read one raw frame from a binary file-like object (for example a socket file)."""
    head = _read_exact(stream, HEADER.size)
    _, length = decode_header(head)
    return head + _read_exact(stream, length)


def _read_exact(stream, n: int) -> bytes:
    chunks, got = [], 0
    while got < n:
        chunk = stream.read(n - got)
        if not chunk:
            raise FrameError(got, f"connection closed after {got} of {n} bytes")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


# --- backends by wire tag

def backend_for(tag: str):
    """Backend instance for a wire tag: ``paillier``, ``oracle``, ``exact`` or ``swhe:<profile>``."""
    if tag == "paillier":
        return PaillierBackend()
    if tag == "oracle":
        return OracleBackend()
    if tag == "exact":
        return ExactBackend()
    if tag.startswith("swhe:"):
        return SwheBackend(make_profile(tag[5:]))
    raise ParamError(f"unknown backend {tag!r}")


def is_additive(backend) -> bool:
    return isinstance(backend, AdditiveBackend)


# --- client

@dataclass(eq=False)
class ClientSession:
    """Client-side state of one query; the secret key never leaves it."""

    backend: object
    keys: object
    mode: Mode
    item_ids: np.ndarray
    backend_tag: str = ""

    @property
    def key_id(self) -> bytes:
        return self.keys.key_id


@dataclass(frozen=True)
class Prediction:
    item_ids: np.ndarray
    scores: np.ndarray
    ranking: np.ndarray  # item positions, best first


def dense_row(ratings: Mapping, item_ids: Sequence) -> np.ndarray:
    """Dense integer rating vector in the server's item order (0 = unobserved)."""
    index = {int(i): k for k, i in enumerate(np.asarray(item_ids).tolist())}
    r = np.zeros(len(index), dtype=np.int64)
    for item, value in ratings.items():
        try:
            k = index[int(item)]
        except KeyError:
            raise ItemMapError(f"item {item} is not served by this model") from None
        if value != int(value) or not 1 <= value:
            raise InvalidRating(f"rating {value!r} for item {item} is not a positive integer")
        r[k] = int(value)
    return r


def user_mean(r: np.ndarray) -> float:
    observed = r[r != 0]
    return float(observed.mean()) if observed.size else 0.0


def client_build_query(
    ratings: Mapping,
    item_ids: Sequence,
    mode: Mode = Mode.DIRECT,
    backend: str = "paillier",
    bits: int = 2048,
) -> tuple[QueryMessage, ClientSession]:
    """Encrypt a rating row under a fresh key pair.

    Args:
      ratings: ``{item_id: rating}`` for the items the user rated.
      item_ids: the server's item universe, in its order.
      mode: DIRECT for the pre-trained model, RETRAIN to be retrained on.
      backend: wire tag; additive backends serve DIRECT only.
      bits: key size for additive backends.
    """
    mode = Mode(mode)
    r = dense_row(ratings, item_ids)
    mean = user_mean(r)
    be = backend_for(backend)
    if is_additive(be):
        if mode == Mode.RETRAIN:
            raise ParamError("retraining needs ciphertext multiplication; use an swhe backend")
        kp = be.keygen(bits)
        enc = [be.ct_to_bytes(be.encrypt(kp.pk, int(x), RATING_EXP, sk=kp.sk)) for x in r.tolist()]
        mean_ct = be.ct_to_bytes(be.encrypt(kp.pk, to_fixed(mean, OUTPUT_EXP), OUTPUT_EXP, sk=kp.sk))
        msg = QueryMessage(mode, backend, kp.key_id, be.pk_to_bytes(kp.pk), len(r), tuple(enc), mean_ct)
        return msg, ClientSession(be, kp, mode, np.asarray(item_ids), backend)
    keys = be.keygen()
    enc = tuple(be.ct_to_bytes(be.encrypt(keys.pk, int(x))) for x in r.tolist())
    mean_ct = be.ct_to_bytes(be.encrypt(keys.pk, dyadic(mean, EXACT_BITS)))
    indicator = relin = None
    if mode == Mode.RETRAIN:
        indicator = tuple(be.ct_to_bytes(be.encrypt(keys.pk, int(x != 0))) for x in r.tolist())
        relin = be.rk_to_bytes(keys.rk)
    msg = QueryMessage(mode, backend, keys.key_id, be.pk_to_bytes(keys.pk), len(r), enc, mean_ct, indicator, relin)
    return msg, ClientSession(be, keys, mode, np.asarray(item_ids), backend)


def rank(scores) -> np.ndarray:
    """Positions sorted by descending score; ties go to the lower position."""
    scores = np.asarray(scores)
    return np.lexsort((np.arange(scores.size), -scores))


def client_decrypt(resp: ResponseMessage, session: ClientSession) -> list:
    """Exact decrypted predictions: Fractions (ring backends) or integers at exponent 24."""
    if resp.key_id != session.key_id:
        raise KeyMismatch("response was produced for a different session key")
    if len(resp.predictions) != len(session.item_ids):
        raise ShapeError(f"{len(resp.predictions)} predictions for {len(session.item_ids)} items")
    be = session.backend
    if is_additive(be):
        pk, sk = session.keys.pk, session.keys.sk
        return [be.decrypt(sk, be.ct_from_bytes(pk, c, OUTPUT_EXP)).value for c in resp.predictions]
    return [be.decrypt(session.keys.sk, be.ct_from_bytes(session.key_id, c)) for c in resp.predictions]


def client_decode_response(resp: ResponseMessage, session: ClientSession) -> Prediction:
    values = client_decrypt(resp, session)
    if is_additive(session.backend):
        scores = np.array([v / float(1 << OUTPUT_EXP) for v in values])
    else:
        scores = np.array([float(v) for v in values])
    return Prediction(session.item_ids, scores, rank(scores))


# --- server

def _chunks(n: int, k: int) -> list[tuple[int, int]]:
    k = max(1, min(k, n))
    edges = np.linspace(0, n, k + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def _vecmat_task(tag, cts, W, scale, plan):
    return backend_for(tag).vecmat(cts, W, scale, plan=plan)


def _rerandomize_task(tag, pk, cts):
    be = backend_for(tag)
    return [be.rerandomize(pk, c) for c in cts]


def _parallel_vecmat(backend, pool, cv, W, scale, plan: RowPlan | None, workers):
    """``vecmat`` split over input rows; partial sums combined in the caller."""
    if pool is None:
        return backend.vecmat(cv, W, scale, plan=plan)
    jobs = [pool.submit(_vecmat_task, backend.tag, cv[a:b], W[a:b], scale, None if plan is None else plan.rows(a, b))
            for a, b in _chunks(len(cv), workers)]
    parts = [j.result() for j in jobs]
    out = parts[0]
    for part in parts[1:]:
        out = [backend.add(x, y) for x, y in zip(out, part)]
    return out


def _direct_additive(query, cm, plan, backend, workers, timings):
    clock = time.perf_counter()

    def lap(name):
        nonlocal clock
        now = time.perf_counter()
        timings[name] = timings.get(name, 0.0) + now - clock
        clock = now

    pk = backend.pk_from_bytes(query.pk, query.key_id)
    if pk.key_id != query.key_id:
        raise KeyMismatch("public key does not carry the query key id")
    enc_r = [backend.ct_from_bytes(pk, c, RATING_EXP) for c in query.ratings]
    enc_mean = backend.ct_from_bytes(pk, query.mean, OUTPUT_EXP)
    A, Qt = cm.A.fixed(), cm.Q.fixed().T
    lap("parse")
    pool = ProcessPoolExecutor(workers) if workers > 1 else None
    try:
        p = _parallel_vecmat(backend, pool, enc_r, A, CODEWORD_EXP, plan.layer1 if plan else None, workers)
        lap("layer1")
        inter = _parallel_vecmat(backend, pool, p, Qt, CODEWORD_EXP, plan.layer2 if plan else None, workers)
        lap("layer2")
        offsets = cm.item_offsets_fixed()
        out = []
        for i, c in enumerate(inter):
            x1 = backend.add(enc_mean, int(offsets[i]))
            out.append(backend.add(x1, c))
        lap("bias")
        if pool is None:
            out = [backend.rerandomize(pk, c) for c in out]
        else:
            jobs = [pool.submit(_rerandomize_task, backend.tag, pk, out[a:b]) for a, b in _chunks(len(out), workers)]
            out = [c for j in jobs for c in j.result()]
    finally:
        if pool is not None:
            pool.shutdown()
    lap("rerandomize")
    resp = ResponseMessage(query.key_id, tuple(backend.ct_to_bytes(c) for c in out))
    lap("serialize")
    return resp


def _ring_vecmat(backend, cts, W, exponent, plan: RowPlan | None):
    """``out_l = sum_k cts[k] * W[k, l] / 2**exponent`` with per-row products shared."""
    plan = plan or RowPlan.from_matrix(W)
    acc = [None] * W.shape[1]
    denom = 1 << exponent
    for k, c in enumerate(cts):
        values, positions = plan.row(k)
        for v, pos in zip(values, positions):
            prod = backend.mul_plain(c, Fraction(int(v), denom))
            for l in pos:
                acc[l] = prod if acc[l] is None else backend.add(acc[l], prod)
    zero = None
    for l, a in enumerate(acc):
        if a is None:
            zero = zero or backend.mul_plain(cts[0], 0)
            acc[l] = zero
    return acc


def _ring_keys(query, backend):
    pk = backend.pk_from_bytes(query.pk, query.key_id)
    fresh = {"fresh": True} if isinstance(backend, SwheBackend) else {}
    enc_r = [backend.ct_from_bytes(query.key_id, c, **fresh) for c in query.ratings]
    enc_mean = backend.ct_from_bytes(query.key_id, query.mean, **fresh)
    return pk, enc_r, enc_mean, fresh


def _ring_release(backend, pk, outs) -> tuple:
    if isinstance(backend, SwheBackend):
        if any(c.noise_budget_bits <= 0 for c in outs):
            raise NoiseExhausted("evaluated ciphertexts exhausted their noise budget")
        outs = [backend.add(c, backend.encrypt(pk, 0)) for c in outs]
    return tuple(backend.ct_to_bytes(c) for c in outs)


def _direct_ring(query, cm, plan, backend):
    pk, enc_r, enc_mean, _ = _ring_keys(query, backend)
    A, Qt = cm.A.fixed(), cm.Q.fixed().T
    p = _ring_vecmat(backend, enc_r, A, CODEWORD_EXP, plan.layer1 if plan else None)
    inter = _ring_vecmat(backend, p, Qt, CODEWORD_EXP, plan.layer2 if plan else None)
    offsets = cm.item_offsets_fixed()
    out = []
    for i, c in enumerate(inter):
        x1 = backend.add_plain(enc_mean, Fraction(int(offsets[i]), 1 << OUTPUT_EXP))
        out.append(backend.add(x1, c))
    return ResponseMessage(query.key_id, _ring_release(backend, pk, out))


def server_direct(
    query: QueryMessage,
    cm: CompressedModel,
    plan: ReusePlan | None,
    backend=None,
    workers: int = 1,
    timings: dict | None = None,
):
    """Encrypted predictions from the compressed pre-trained model.

    ``plan`` shares each ⊙ among the positions holding the same codeword;
    ``None`` evaluates every product. Paillier outputs are rerandomized
    and SWHE outputs get a fresh encryption of zero added before release.
    With additive backends ``workers > 1`` spreads both layers and the
    rerandomization over processes; ``timings`` collects per-phase seconds.
    """
    if query.mode != Mode.DIRECT:
        raise ParamError("server_direct handles DIRECT queries only")
    if query.m != cm.m:
        raise ShapeError(f"query has {query.m} items, model serves {cm.m}")
    backend = backend or backend_for(query.backend)
    if is_additive(backend):
        return _direct_additive(query, cm, plan, backend, workers, {} if timings is None else timings)
    return _direct_ring(query, cm, plan, backend)


def server_retrain(
    query: QueryMessage,
    model: ModelParams | None,
    reg_users: RegUsers | None,
    config: TrainingConfig,
    backend=None,
    terms: RetrainTerms | None = None,
) -> ResponseMessage:
    """One encrypted gradient step on the client's row, then predictions for all items.

    ``terms`` may be supplied to reuse the plaintext side across queries;
    otherwise it is prepared from ``model``, ``reg_users`` and ``config``.
    """
    if query.mode != Mode.RETRAIN:
        raise ParamError("server_retrain handles RETRAIN queries only")
    backend = backend or backend_for(query.backend)
    if is_additive(backend):
        raise ParamError("retraining needs a backend with ciphertext multiplication")
    if terms is None:
        terms = prepare_terms(model, reg_users, config)
    if query.m != terms.m:
        raise ShapeError(f"query has {query.m} items, model serves {terms.m}")
    pk, enc_r, enc_mean, fresh = _ring_keys(query, backend)
    enc_phi = [backend.ct_from_bytes(query.key_id, c, **fresh) for c in query.indicator]
    rk = backend.rk_from_bytes(query.relin, query.key_id)
    out = retrain_circuit(backend, rk, enc_r, enc_phi, enc_mean, terms)
    del enc_r, enc_phi
    return ResponseMessage(query.key_id, _ring_release(backend, pk, out))
