"""Rating data: parsing, per-user/per-item statistics, splitting and RMSE.

Ratings are held as a sparse ``n x m`` CSR matrix of small integers where
0 marks an unobserved entry. Raw user and item identifiers are remapped to
dense indices; the original ids are kept on the matrix.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import EmptyDataset, EmptyEvalError, InvalidRating, ItemMapError, ParseError

RATING_MIN = 1
RATING_MAX = 5


@dataclass(frozen=True, eq=False)
class RatingMatrix:
    """Sparse integer ratings with their indicator and mean statistics.

    Attributes:
      ratings: ``n x m`` CSR matrix, ``int8``; 0 means "not rated".
      user_ids: raw user id for each row.
      item_ids: raw item id for each column.
      user_mean: mean observed rating per user (``global_mean`` if none).
      item_mean: mean observed rating per item (``global_mean`` if none).
      global_mean: mean over all observed ratings.
    """

    ratings: sp.csr_matrix
    user_ids: np.ndarray
    item_ids: np.ndarray
    user_mean: np.ndarray
    item_mean: np.ndarray
    global_mean: float

    @property
    def n(self) -> int:
        return self.ratings.shape[0]

    @property
    def m(self) -> int:
        return self.ratings.shape[1]

    @property
    def N(self) -> int:
        return int(self.ratings.nnz)

    @property
    def phi(self) -> sp.csr_matrix:
        """0/1 indicator of observed entries, same sparsity as ``ratings``."""
        ind = self.ratings.copy()
        ind.data = np.ones_like(ind.data)
        return ind

    def row(self, u: int) -> np.ndarray:
        """Dense length-``m`` integer rating vector of user ``u``."""
        start, end = self.ratings.indptr[u], self.ratings.indptr[u + 1]
        out = np.zeros(self.m, dtype=np.int64)
        out[self.ratings.indices[start:end]] = self.ratings.data[start:end]
        return out

    def rows(self, users: Sequence[int] | np.ndarray) -> np.ndarray:
        return self.ratings[np.asarray(users)].toarray().astype(np.int64)

    def dense(self) -> np.ndarray:
        return self.ratings.toarray().astype(np.int64)

    def triples(self) -> np.ndarray:
        """``(K, 3)`` array of raw ``(user_id, item_id, rating)`` rows."""
        coo = self.ratings.tocoo()
        return np.column_stack(
            [self.user_ids[coo.row], self.item_ids[coo.col], coo.data.astype(np.int64)]
        )

    def item_index(self) -> dict:
        return {int(v): k for k, v in enumerate(self.item_ids)}

    @classmethod
    def from_csr(cls, ratings: sp.spmatrix, user_ids, item_ids, allow_empty: bool = False) -> "RatingMatrix":
        ratings = sp.csr_matrix(ratings, dtype=np.int8)
        ratings.eliminate_zeros()
        ratings.sort_indices()
        if ratings.nnz == 0 and not allow_empty:
            raise EmptyDataset("no observed ratings")
        data = ratings.data
        if data.size and (data.min() < RATING_MIN or data.max() > RATING_MAX):
            raise InvalidRating("ratings must lie in {1..5}")
        total = int(data.astype(np.int64).sum())
        mu = total / ratings.nnz if ratings.nnz else 0.0
        user_mean = _axis_means(ratings, axis=1, fallback=mu)
        item_mean = _axis_means(ratings, axis=0, fallback=mu)
        return cls(
            ratings=ratings,
            user_ids=np.asarray(user_ids),
            item_ids=np.asarray(item_ids),
            user_mean=user_mean,
            item_mean=item_mean,
            global_mean=mu,
        )


def _axis_means(ratings: sp.csr_matrix, axis: int, fallback: float) -> np.ndarray:
    sums = np.asarray(ratings.sum(axis=axis, dtype=np.int64)).ravel()
    counts = np.diff(ratings.indptr) if axis == 1 else np.bincount(
        ratings.indices, minlength=ratings.shape[1]
    )
    means = np.full(sums.shape, fallback, dtype=np.float64)
    seen = counts > 0
    means[seen] = sums[seen] / counts[seen]
    return means


def compute_statistics(
    triples: Iterable[Sequence[int]] | np.ndarray,
    item_ids: Sequence[int] | np.ndarray | None = None,
    user_ids: Sequence[int] | np.ndarray | None = None,
) -> RatingMatrix:
    """Build a :class:`RatingMatrix` from raw ``(user, item, rating)`` triples.

    Ids are remapped to ``[0, n) x [0, m)`` in sorted order unless an explicit
    ``item_ids``/``user_ids`` universe is supplied (unknown ids then raise
    :class:`ItemMapError`). A repeated ``(user, item)`` pair keeps its last
    rating.
    """
    arr = np.asarray(list(triples) if not isinstance(triples, np.ndarray) else triples)
    if arr.size == 0:
        raise EmptyDataset("no ratings given")
    arr = arr.reshape(-1, 3)
    ratings = arr[:, 2]
    if not np.all(np.equal(np.mod(ratings, 1), 0)):
        raise InvalidRating("ratings must be integers")
    ratings = ratings.astype(np.int64)
    bad = (ratings < RATING_MIN) | (ratings > RATING_MAX)
    if bad.any():
        raise InvalidRating(f"rating {ratings[bad][0]} outside {{1..5}}")
    users = arr[:, 0].astype(np.int64)
    items = arr[:, 1].astype(np.int64)

    uids, urow = _remap(users, user_ids, "user")
    iids, icol = _remap(items, item_ids, "item")
    # keep the last occurrence of duplicated (user, item) pairs
    key = urow * len(iids) + icol
    _, last = np.unique(key[::-1], return_index=True)
    keep = len(key) - 1 - last
    mat = sp.csr_matrix(
        (ratings[keep].astype(np.int8), (urow[keep], icol[keep])),
        shape=(len(uids), len(iids)),
    )
    return RatingMatrix.from_csr(mat, uids, iids)


def _remap(values: np.ndarray, universe, kind: str) -> tuple[np.ndarray, np.ndarray]:
    if universe is None:
        ids, idx = np.unique(values, return_inverse=True)
        return ids, idx
    ids = np.asarray(universe, dtype=np.int64)
    order = np.argsort(ids, kind="stable")
    pos = np.searchsorted(ids, values, sorter=order)
    pos = np.clip(pos, 0, len(ids) - 1)
    idx = order[pos]
    missing = ids[idx] != values
    if missing.any():
        raise ItemMapError(f"unknown {kind} id {values[missing][0]}")
    return ids, idx


def ingest(path: str | Path, fmt: str | None = None) -> np.ndarray:
    """Parse a MovieLens-style ratings file into ``(K, 3)`` integer triples.

    Lines are ``user item rating [timestamp]`` separated by ``::``
    (``fmt="ml-delim"``) or tabs (``fmt="tsv"``); the separator is sniffed
    when ``fmt`` is None. Timestamps are dropped, duplicate pairs keep the
    last rating.
    """
    seps = {"ml-delim": "::", "tsv": "\t", None: None}
    if fmt not in seps:
        raise ValueError(f"unknown format {fmt!r}")
    sep = seps[fmt]
    latest: dict[tuple[int, int], int] = {}
    with open(path, encoding="latin-1") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if sep is None:
                sep = "::" if "::" in line else "\t"
            parts = line.split(sep)
            if len(parts) < 3:
                raise ParseError(lineno, f"expected at least 3 fields, got {len(parts)}")
            try:
                u, i = int(parts[0]), int(parts[1])
                r = float(parts[2])
            except ValueError as exc:
                raise ParseError(lineno, str(exc)) from None
            if r != int(r):
                raise ParseError(lineno, f"non-integer rating {parts[2]!r}")
            latest.pop((u, i), None)
            latest[(u, i)] = int(r)
    if not latest:
        return np.zeros((0, 3), dtype=np.int64)
    out = np.empty((len(latest), 3), dtype=np.int64)
    for k, ((u, i), r) in enumerate(latest.items()):
        out[k] = (u, i, r)
    return out


@dataclass(frozen=True)
class SplitSpec:
    seed: int = 0
    train_frac: float = 0.8
    feed_frac: float = 0.9


def split(data: RatingMatrix, spec: SplitSpec = SplitSpec()) -> tuple[RatingMatrix, RatingMatrix, RatingMatrix]:
    """User-level train/validation split, then feed/test split of each validation row.

    Returns ``(train, feed, test)``. All three share ``data``'s item universe;
    ``feed`` and ``test`` share the same validation users in the same order.
    A validation user with fewer than 2 ratings is put entirely in ``feed``.
    """
    rng = np.random.default_rng(spec.seed)
    perm = rng.permutation(data.n)
    n_train = int(round(spec.train_frac * data.n))
    train_users = np.sort(perm[:n_train])
    val_users = np.sort(perm[n_train:])

    train = RatingMatrix.from_csr(data.ratings[train_users], data.user_ids[train_users], data.item_ids)

    val = data.ratings[val_users].tocsr()
    feed_rows, feed_cols, feed_vals = [], [], []
    test_rows, test_cols, test_vals = [], [], []
    for k in range(val.shape[0]):
        start, end = val.indptr[k], val.indptr[k + 1]
        cols = val.indices[start:end]
        vals = val.data[start:end]
        count = len(cols)
        order = rng.permutation(count)
        n_test = 0 if count < 2 else max(1, int(round((1.0 - spec.feed_frac) * count)))
        test_idx, feed_idx = order[:n_test], order[n_test:]
        feed_rows.append(np.full(len(feed_idx), k)); feed_cols.append(cols[feed_idx]); feed_vals.append(vals[feed_idx])
        test_rows.append(np.full(len(test_idx), k)); test_cols.append(cols[test_idx]); test_vals.append(vals[test_idx])

    shape = (len(val_users), data.m)
    uids = data.user_ids[val_users]

    def build(rows, cols, vals):
        mat = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=shape
        )
        return RatingMatrix.from_csr(mat, uids, data.item_ids, allow_empty=True)

    return train, build(feed_rows, feed_cols, feed_vals), build(test_rows, test_cols, test_vals)


def rmse(predictions, truth, clamp: bool = True) -> float:
    """Root mean squared error; with ``clamp`` predictions are clipped to [1, 5] first."""
    pred = np.asarray(predictions, dtype=np.float64).ravel()
    true = np.asarray(truth, dtype=np.float64).ravel()
    if true.size == 0:
        raise EmptyEvalError("empty test set")
    if pred.shape != true.shape:
        raise ValueError(f"{pred.size} predictions for {true.size} ratings")
    if clamp:
        pred = np.clip(pred, RATING_MIN, RATING_MAX)
    return float(np.sqrt(np.mean((pred - true) ** 2)))


def synthetic_ratings(
    n: int,
    m: int,
    density: float,
    seed: int = 0,
    rank: int = 8,
) -> np.ndarray:
    """Draw ``(user, item, rating)`` triples from a low-rank model with biases.

    Observation probability is skewed by item popularity so the column counts
    look like real rating data. Every user gets at least two ratings.
    """
    rng = np.random.default_rng(seed)
    user_bias = rng.normal(0.0, 0.4, n)
    item_bias = rng.normal(0.0, 0.5, m)
    U = rng.normal(0.0, 0.35, (n, rank))
    V = rng.normal(0.0, 0.35, (m, rank))
    popularity = rng.pareto(1.5, m) + 0.1
    popularity /= popularity.sum()
    per_user = np.maximum(2, rng.poisson(density * m, n))
    per_user = np.minimum(per_user, m)
    triples = []
    for u in range(n):
        items = rng.choice(m, size=per_user[u], replace=False, p=popularity)
        raw = 3.6 + user_bias[u] + item_bias[items] + V[items] @ U[u] + rng.normal(0, 0.6, len(items))
        r = np.clip(np.rint(raw), RATING_MIN, RATING_MAX).astype(np.int64)
        triples.append(np.column_stack([np.full(len(items), u + 1), items + 1, r]))
    return np.concatenate(triples)
