"""Item-based neighborhood baseline with Pearson similarities (cleartext only)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import RatingMatrix

DEFAULT_NEIGHBORS = 50


@dataclass(frozen=True, eq=False)
class SimilarityModel:
    S: np.ndarray
    item_mean: np.ndarray
    neighborhood_size: int = DEFAULT_NEIGHBORS


def pearson_matrix(data: RatingMatrix, neighborhood_size: int = DEFAULT_NEIGHBORS) -> SimilarityModel:
    """Pearson similarity between every pair of items over their co-raters.

    Deviations are taken from each item's overall mean. Pairs with fewer
    than two co-raters or a zero variance term get similarity 0.
    """
    R = data.ratings.astype(np.float64).tocsc()
    Phi = R.copy()
    Phi.data[:] = 1.0
    # deviations r_ui - mean_i on observed entries only
    D = R.copy()
    D.data -= np.repeat(data.item_mean, np.diff(R.indptr))
    D2 = D.multiply(D).tocsc()
    num = (D.T @ D).toarray()
    var_i = (D2.T @ Phi).toarray()  # [i, j] = sum over co-raters of d_ui^2
    co = (Phi.T @ Phi).toarray()
    den = np.sqrt(var_i * var_i.T)
    S = np.zeros_like(num)
    ok = (co >= 2) & (den > 0)
    S[ok] = num[ok] / den[ok]
    np.clip(S, -1.0, 1.0, out=S)
    return SimilarityModel(S=S, item_mean=data.item_mean.copy(), neighborhood_size=neighborhood_size)


def neighbors(sim: SimilarityModel, rated: np.ndarray, i: int) -> np.ndarray:
    """The ``neighborhood_size`` items of ``rated`` most similar to ``i``.

    Ties go to the lower item index; ``i`` itself is never a neighbor.
    """
    cand = rated[rated != i]
    if cand.size == 0:
        return cand
    s = sim.S[i, cand]
    order = np.lexsort((cand, -s))
    return cand[order[: sim.neighborhood_size]]


def predict_inbm(sim: SimilarityModel, r_u: np.ndarray, i: int) -> float:
    """Weighted-deviation prediction for item ``i`` from the user's ratings ``r_u``.

    Falls back to the item mean when the user rated nothing usable or all
    neighbor weights are zero. No clamping is applied.
    """
    r_u = np.asarray(r_u)
    rated = np.flatnonzero(r_u)
    nb = neighbors(sim, rated, i)
    base = sim.item_mean[i]
    if nb.size == 0:
        return float(base)
    s = sim.S[i, nb]
    weight = np.abs(s).sum()
    if weight == 0:
        return float(base)
    return float(base + (s * (r_u[nb] - sim.item_mean[nb])).sum() / weight)


def predict_items(sim: SimilarityModel, r_u: np.ndarray, items) -> np.ndarray:
    return np.array([predict_inbm(sim, r_u, int(i)) for i in items])
