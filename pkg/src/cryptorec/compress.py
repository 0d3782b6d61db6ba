"""Pruning, 11-bit codebook quantization and the ⊙-reuse planner.

The served model holds ``A`` and ``Q`` as indices into two small codebooks
of fixed-point mantissas at exponent 12. Index 0 is reserved for the exact
zero left by pruning. Biases skip the codebook and are rounded directly at
exponent 24, the exponent of every prediction.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ShapeError
from .fixedpoint import CODEWORD_EXP, OUTPUT_EXP, from_fixed, to_fixed
from .model import ModelParams

QUANT_BITS = 11
N_LEVELS = (1 << QUANT_BITS) - 1  # nonzero levels; index 0 is the zero codeword
DEFAULT_THRESHOLD = 5e-4

CRMQ_MAGIC = b"CRMQ"
CRMQ_VERSION = 1


@dataclass(frozen=True, eq=False)
class PruneMask:
    A: np.ndarray
    Q: np.ndarray

    @property
    def ratio(self) -> float:
        return float(self.A.sum() + self.Q.sum()) / (self.A.size + self.Q.size)


def prune(model: ModelParams, threshold: float = DEFAULT_THRESHOLD) -> tuple[ModelParams, PruneMask]:
    """Zero every entry of ``A`` and ``Q`` with ``|v| <= threshold``.

    A threshold of 0 disables pruning. Biases are never pruned.
    """
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    A, Q = np.asarray(model.A, dtype=np.float64), np.asarray(model.Q, dtype=np.float64)
    if threshold == 0:
        mask = PruneMask(np.zeros(A.shape, bool), np.zeros(Q.shape, bool))
    else:
        mask = PruneMask(np.abs(A) <= threshold, np.abs(Q) <= threshold)
    pruned = model.with_updates(A=np.where(mask.A, 0.0, A), Q=np.where(mask.Q, 0.0, Q))
    return pruned, mask


@dataclass(frozen=True, eq=False)
class Codebook:
    """Quantized matrix: ``levels[index]`` approximates it, ``mantissas[index]`` is served.

    ``levels`` keeps the exact bin centres when the codebook was built in
    memory; after loading from disk only the fixed-point ``mantissas``
    exist and ``levels`` equals ``mantissas / 2**12``.
    """

    mantissas: np.ndarray
    levels: np.ndarray
    index: np.ndarray

    @property
    def size(self) -> int:
        return len(self.mantissas)

    @property
    def step(self) -> float:
        return float(self.levels[2] - self.levels[1]) if self.size > 2 else 0.0

    def dequantize(self) -> np.ndarray:
        return self.levels[self.index]

    def fixed(self) -> np.ndarray:
        """Integer matrix of served mantissas (exponent 12)."""
        return self.mantissas.astype(np.int64)[self.index]


def quantize_matrix(W: np.ndarray, pruned: np.ndarray) -> Codebook:
    """Uniform quantization of the surviving entries onto 2047 bin centres.

    The bins split ``[min, max]`` of the survivors into equal widths, so
    every survivor lands within half a bin of its level.
    """
    W = np.asarray(W, dtype=np.float64)
    keep = ~pruned
    index = np.zeros(W.shape, dtype=np.uint16)
    if not keep.any():
        levels = np.zeros(1)
    else:
        lo, hi = float(W[keep].min()), float(W[keep].max())
        if lo == hi:
            levels = np.array([0.0, lo])
            index[keep] = 1
        else:
            width = (hi - lo) / N_LEVELS
            bins = np.floor((W[keep] - lo) / width).astype(np.int64)
            index[keep] = np.clip(bins, 0, N_LEVELS - 1) + 1
            levels = np.concatenate([[0.0], lo + (np.arange(N_LEVELS) + 0.5) * width])
    mant = to_fixed(levels, CODEWORD_EXP)
    if np.abs(mant).max(initial=0) >= 1 << 31:
        raise OverflowError("codeword does not fit a 32-bit mantissa")
    return Codebook(mantissas=mant.astype(np.int32), levels=levels, index=index)


@dataclass(frozen=True, eq=False)
class CompressedModel:
    A: Codebook
    Q: Codebook
    b_i_fixed: np.ndarray
    b_i_star_fixed: np.ndarray
    avg_b_u_star_fixed: int
    mu_fixed: int
    pruning_ratio: float
    reuse_ratio: float

    @property
    def m(self) -> int:
        return self.A.index.shape[0]

    @property
    def d(self) -> int:
        return self.A.index.shape[1]

    @property
    def pruned_mask(self) -> PruneMask:
        return PruneMask(self.A.index == 0, self.Q.index == 0)

    def item_offsets_fixed(self) -> np.ndarray:
        """``b_i + b_i* + avg b_u*`` per item at exponent 24 (plaintext addends)."""
        return self.b_i_fixed + self.b_i_star_fixed + self.avg_b_u_star_fixed

    def dequantize(self) -> ModelParams:
        mu = from_fixed(self.mu_fixed, OUTPUT_EXP)
        return ModelParams(
            A=self.A.dequantize(), Q=self.Q.dequantize(), b_u_star=np.zeros(0),
            b_i_star=from_fixed(self.b_i_star_fixed, OUTPUT_EXP), mu=mu, b_u=np.zeros(0),
            b_i=from_fixed(self.b_i_fixed, OUTPUT_EXP), avg_b_u_star=from_fixed(self.avg_b_u_star_fixed, OUTPUT_EXP),
        )

    def served_model(self) -> ModelParams:
        """Real-valued view of exactly what the server computes with."""
        base = self.dequantize()
        return base.with_updates(A=from_fixed(self.A.fixed(), CODEWORD_EXP), Q=from_fixed(self.Q.fixed(), CODEWORD_EXP))


def quantize(model: ModelParams, mask: PruneMask) -> CompressedModel:
    cA = quantize_matrix(model.A, mask.A)
    cQ = quantize_matrix(model.Q, mask.Q)
    return CompressedModel(
        A=cA, Q=cQ,
        b_i_fixed=to_fixed(model.b_i, OUTPUT_EXP),
        b_i_star_fixed=to_fixed(model.b_i_star, OUTPUT_EXP),
        avg_b_u_star_fixed=to_fixed(model.avg_b_u_star, OUTPUT_EXP),
        mu_fixed=to_fixed(model.mu, OUTPUT_EXP),
        pruning_ratio=mask.ratio,
        reuse_ratio=reuse_ratio(cA.fixed(), cQ.fixed().T),
    )


def compress(model: ModelParams, threshold: float = DEFAULT_THRESHOLD) -> CompressedModel:
    pruned, mask = prune(model, threshold)
    return quantize(pruned, mask)


def _row_distinct_nonzero(W: np.ndarray) -> int:
    if W.size == 0:
        return 0
    s = np.sort(W, axis=1)
    new = np.ones(s.shape, dtype=bool)
    new[:, 1:] = s[:, 1:] != s[:, :-1]
    return int((new & (s != 0)).sum())


def reuse_ratio(*matrices: np.ndarray) -> float:
    """``1 - distinct/total`` where distinct counts the nonzero values of each row.

    The layer-one matrix is ``A`` and the layer-two matrix ``Q^T``; each
    distinct nonzero value in a row costs one ⊙ against that row's
    ciphertext, every repeat is reused.
    """
    total = sum(W.size for W in matrices)
    distinct = sum(_row_distinct_nonzero(np.asarray(W)) for W in matrices)
    return 1.0 - distinct / total if total else 0.0


def global_reuse_ratio(*matrices: np.ndarray) -> float:
    """``1 - distinct/total`` with distinct values counted over whole matrices."""
    total = sum(W.size for W in matrices)
    distinct = sum(len(np.unique(W)) for W in matrices)
    return 1.0 - distinct / total if total else 0.0


@dataclass(frozen=True, eq=False)
class RowPlan:
    """For each row: distinct nonzero values and the columns holding each.

    Zero entries appear in no list; they never cost a ⊙.
    """

    shape: tuple
    values: list
    positions: list

    def row(self, k: int):
        return self.values[k], self.positions[k]

    @property
    def n_products(self) -> int:
        return sum(len(v) for v in self.values)

    def rows(self, lo: int, hi: int) -> "RowPlan":
        """The plan for rows ``lo:hi`` only."""
        return RowPlan((hi - lo, self.shape[1]), self.values[lo:hi], self.positions[lo:hi])

    @classmethod
    def from_matrix(cls, W: np.ndarray) -> "RowPlan":
        W = np.asarray(W)
        values, positions = [], []
        for row in W:
            vals, inv, counts = np.unique(row, return_inverse=True, return_counts=True)
            groups = np.split(np.argsort(inv, kind="stable"), np.cumsum(counts)[:-1])
            keep = vals != 0
            values.append([int(v) for v in vals[keep]])
            positions.append([g.tolist() for g, k in zip(groups, keep) if k])
        return cls(shape=W.shape, values=values, positions=positions)


@dataclass(frozen=True, eq=False)
class ReusePlan:
    layer1: RowPlan  # rows of A, one per rating ciphertext
    layer2: RowPlan  # rows of Q^T, one per feature ciphertext

    @property
    def n_products(self) -> int:
        return self.layer1.n_products + self.layer2.n_products


def build_reuse_plan(cm: CompressedModel) -> ReusePlan:
    return ReusePlan(RowPlan.from_matrix(cm.A.fixed()), RowPlan.from_matrix(cm.Q.fixed().T))


def predict_fixed(cm: CompressedModel, r_v, mean_fixed: int) -> np.ndarray:
    """Integer predictions at exponent 24, exactly what the encrypted path decrypts to."""
    r_v = np.asarray(r_v, dtype=np.int64)
    if r_v.shape != (cm.m,):
        raise ShapeError(f"rating vector must have length {cm.m}")
    A, Q = cm.A.fixed(), cm.Q.fixed()
    bound = 5 * int(np.abs(A).max(initial=0)) * cm.m * int(np.abs(Q).max(initial=0)) * cm.d
    if bound >= 1 << 62:
        A, Q, r_v = A.astype(object), Q.astype(object), r_v.astype(object)
    p = r_v @ A
    return int(mean_fixed) + cm.item_offsets_fixed() + Q @ p


def compression_report(cm: CompressedModel, full: ModelParams | None = None, feed=None, test=None) -> dict:
    """Summary statistics; with ``full`` and an evaluation split also the RMSE change."""
    plan_ops = _row_distinct_nonzero(cm.A.fixed()) + _row_distinct_nonzero(cm.Q.fixed().T)
    report = {
        "m": cm.m,
        "d": cm.d,
        "pruning_ratio": cm.pruning_ratio,
        "reuse_ratio": cm.reuse_ratio,
        "global_reuse_ratio": global_reuse_ratio(cm.A.fixed(), cm.Q.fixed()),
        "codebook_size_A": cm.A.size,
        "codebook_size_Q": cm.Q.size,
        "quant_step_A": cm.A.step,
        "quant_step_Q": cm.Q.step,
        "mul_plain_without_plan": 2 * cm.m * cm.d,
        "mul_plain_with_plan": plan_ops,
    }
    if full is not None and feed is not None and test is not None:
        from .model import holdout_rmse

        served = cm.served_model()
        base = holdout_rmse(full, feed, test)
        comp = holdout_rmse(served, feed, test)
        report.update(rmse_full=base, rmse_compressed=comp, rmse_delta=comp - base)
    return report


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)


# --- CRMQ file format (little-endian; index streams are big-endian bit order)

def _pack_indices(index: np.ndarray) -> bytes:
    flat = index.reshape(-1).astype(np.uint16)
    bits = (flat[:, None] >> np.arange(QUANT_BITS - 1, -1, -1, dtype=np.uint16)) & 1
    return np.packbits(bits.astype(np.uint8).reshape(-1)).tobytes()


def _unpack_indices(raw: bytes, count: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8))[: count * QUANT_BITS]
    weights = (1 << np.arange(QUANT_BITS - 1, -1, -1)).astype(np.uint16)
    return (bits.reshape(count, QUANT_BITS).astype(np.uint16) * weights).sum(axis=1).astype(np.uint16)


def save_compressed(cm: CompressedModel, path: str | Path) -> None:
    m, d = cm.m, cm.d
    with open(path, "wb") as fh:
        fh.write(CRMQ_MAGIC)
        fh.write(struct.pack("<BIIHH", CRMQ_VERSION, m, d, cm.A.size, cm.Q.size))
        fh.write(cm.A.mantissas.astype("<i4").tobytes())
        fh.write(cm.Q.mantissas.astype("<i4").tobytes())
        fh.write(_pack_indices(cm.A.index))
        fh.write(_pack_indices(cm.Q.index))
        fh.write(np.asarray(cm.b_i_fixed, dtype="<i8").tobytes())
        fh.write(np.asarray(cm.b_i_star_fixed, dtype="<i8").tobytes())
        fh.write(struct.pack("<qq", int(cm.avg_b_u_star_fixed), int(cm.mu_fixed)))
        fh.write(struct.pack("<dd", cm.pruning_ratio, cm.reuse_ratio))


def load_compressed(path: str | Path) -> CompressedModel:
    raw = Path(path).read_bytes()
    if raw[:4] != CRMQ_MAGIC:
        raise ValueError(f"{path}: not a CRMQ model file")
    version, m, d, ka, kq = struct.unpack_from("<BIIHH", raw, 4)
    if version != CRMQ_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    off = 4 + struct.calcsize("<BIIHH")
    stream = (m * d * QUANT_BITS + 7) // 8
    expected = off + 4 * (ka + kq) + 2 * stream + 16 * m + 16 + 16
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")

    def take(nbytes):
        nonlocal off
        chunk = raw[off:off + nbytes]
        off += nbytes
        return chunk

    mant_a = np.frombuffer(take(4 * ka), dtype="<i4").astype(np.int32)
    mant_q = np.frombuffer(take(4 * kq), dtype="<i4").astype(np.int32)
    idx_a = _unpack_indices(take(stream), m * d).reshape(m, d)
    idx_q = _unpack_indices(take(stream), m * d).reshape(m, d)
    if idx_a.max(initial=0) >= ka or idx_q.max(initial=0) >= kq:
        raise ValueError(f"{path}: codeword index out of range")
    b_i = np.frombuffer(take(8 * m), dtype="<i8").astype(np.int64)
    b_i_star = np.frombuffer(take(8 * m), dtype="<i8").astype(np.int64)
    avg, mu = struct.unpack("<qq", take(16))
    pr, rr = struct.unpack("<dd", take(16))
    book = lambda mant, idx: Codebook(mantissas=mant, levels=from_fixed(mant, CODEWORD_EXP), index=idx)
    return CompressedModel(
        A=book(mant_a, idx_a), Q=book(mant_q, idx_q), b_i_fixed=b_i, b_i_star_fixed=b_i_star,
        avg_b_u_star_fixed=avg, mu_fixed=mu, pruning_ratio=pr, reuse_ratio=rr,
    )
