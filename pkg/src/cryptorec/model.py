"""Item-only latent factor model with separated bias terms.

A user's feature vector is never learned; it is aggregated on the fly from
the user's own ratings as ``p_u = r_u @ A``. A prediction is::

    r_hat[u, i] = mean_u + b_i[i] + b_i_star[i] + b_u_star[u] + p_u @ Q[i]

where ``mean_u + b_i`` equals ``mu + b_u + b_i`` with ``b_u = mean_u - mu``.
Only ``A``, ``Q``, ``b_u_star`` and ``b_i_star`` are learned.

All batch arithmetic is plain numpy (``@``, ``+``, ``*``, ``sum``) so the
same code runs on object arrays of :class:`fractions.Fraction` for exact
reference computations.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import fixedpoint
from .data import RatingMatrix, rmse
from .errors import DivergedError, ParamError, ShapeError

log = logging.getLogger(__name__)

MODEL_MAGIC = b"CRMD"
MODEL_VERSION = 1


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Learned parameters plus the fixed statistics they were trained against.

    ``b_u`` and ``b_u_star`` are per training user and are empty for a model
    loaded from a serving file; serving only needs item-side arrays and
    ``avg_b_u_star``.
    """

    A: np.ndarray
    Q: np.ndarray
    b_u_star: np.ndarray
    b_i_star: np.ndarray
    mu: float
    b_u: np.ndarray
    b_i: np.ndarray
    avg_b_u_star: float

    def __post_init__(self):
        if self.A.shape != self.Q.shape or self.A.ndim != 2:
            raise ShapeError(f"A {self.A.shape} and Q {self.Q.shape} must both be m x d")
        if self.b_i.shape != (self.m,) or self.b_i_star.shape != (self.m,):
            raise ShapeError("item bias vectors must have length m")
        if self.b_u.shape != self.b_u_star.shape:
            raise ShapeError("user bias vectors must have equal length")
        for arr in (self.A, self.Q, self.b_u_star, self.b_i_star, self.b_u, self.b_i):
            if arr.dtype != object:
                arr.setflags(write=False)

    @property
    def m(self) -> int:
        return self.A.shape[0]

    @property
    def d(self) -> int:
        return self.A.shape[1]

    @property
    def n(self) -> int:
        return self.b_u_star.shape[0]

    @property
    def item_bias(self) -> np.ndarray:
        """``b_i + b_i_star``, the per-item part of every prediction."""
        return self.b_i + self.b_i_star

    def with_updates(self, **changes) -> "ModelParams":
        return replace(self, **changes)


@dataclass(frozen=True)
class TrainingConfig:
    eta: float = 2e-4
    lam: float = 2e-5
    d: int = 500
    max_iters: int = 100
    batch_users: int = 64
    seed: int = 0
    patience: int = 5
    tau: int = 10
    holdout_frac: float = 0.05
    init_std: float = 0.01

    def __post_init__(self):
        if not self.eta >= 0:
            raise ParamError("eta must be >= 0")
        if self.lam < 0:
            raise ParamError("lambda must be >= 0")
        if self.d < 1 or self.batch_users < 1 or self.max_iters < 0:
            raise ParamError("d, batch_users must be >= 1 and max_iters >= 0")
        if self.tau < 0 or self.patience < 1:
            raise ParamError("tau must be >= 0 and patience >= 1")


@dataclass
class Gradients:
    A: np.ndarray
    Q: np.ndarray
    b_u_star: np.ndarray
    b_i_star: np.ndarray


def init_params(data: RatingMatrix, config: TrainingConfig) -> ModelParams:
    rng = np.random.default_rng(config.seed)
    A = rng.normal(0.0, config.init_std, (data.m, config.d))
    Q = rng.normal(0.0, config.init_std, (data.m, config.d))
    mu = data.global_mean
    return ModelParams(
        A=A,
        Q=Q,
        b_u_star=np.zeros(data.n),
        b_i_star=np.zeros(data.m),
        mu=mu,
        b_u=data.user_mean - mu,
        b_i=data.item_mean - mu,
        avg_b_u_star=0.0,
    )


def predict_rows(model: ModelParams, R: np.ndarray, means, b_star) -> np.ndarray:
    """Predict full rows for a batch of users given their rating rows."""
    R = np.asarray(R)
    if R.ndim != 2 or R.shape[1] != model.m:
        raise ShapeError(f"rating rows must be k x {model.m}, got {R.shape}")
    means = np.asarray(means).reshape(-1, 1)
    b_star = np.asarray(b_star).reshape(-1, 1)
    interaction = (R @ model.A) @ model.Q.T
    return means + (model.item_bias + b_star) + interaction


def predict_user(model: ModelParams, r_u, mean_u, b_u_star_value) -> np.ndarray:
    """Predict every item for one user.

    Args:
      model: trained parameters.
      r_u: length-``m`` integer ratings, 0 where unobserved.
      mean_u: the user's mean rating.
      b_u_star_value: the user's learned bias, or ``model.avg_b_u_star`` for
        a user the model was not trained on.
    """
    r_u = np.asarray(r_u)
    if r_u.shape != (model.m,):
        raise ShapeError(f"rating vector must have length {model.m}, got {r_u.shape}")
    return predict_rows(model, r_u[None, :], [mean_u], [b_u_star_value])[0]


def _masked_errors(A, Q, item_bias, R, Phi, means, b_star, target=None):
    # ``target`` defaults to R; it only differs from R in tests of the mask
    P = R @ A
    pred = np.asarray(means).reshape(-1, 1) + (item_bias + np.asarray(b_star).reshape(-1, 1)) + P @ Q.T
    return (pred - (R if target is None else target)) * Phi, P


def _grad_arrays(A, Q, b_i, b_i_star, R, Phi, means, b_star, lam, target=None) -> Gradients:
    E, P = _masked_errors(A, Q, b_i + b_i_star, R, Phi, means, b_star, target)
    return Gradients(
        A=R.T @ (E @ Q) + lam * A,
        Q=E.T @ P + lam * Q,
        b_u_star=E.sum(axis=1) + lam * np.asarray(b_star),
        b_i_star=E.sum(axis=0) + lam * b_i_star,
    )


def batch_gradients(model: ModelParams, R, Phi, means, b_star, lam) -> Gradients:
    """Gradients over an explicit batch of user rows.

    The regularizer contributes once per batch; the error terms are summed
    over the batch users and masked by ``Phi`` so unobserved slots never
    contribute. ``b_u_star`` in the result is per batch row.
    """
    R = np.asarray(R)
    if R.ndim != 2 or R.shape[1] != model.m or np.shape(Phi) != R.shape:
        raise ShapeError("batch rows must be k x m with matching indicator")
    return _grad_arrays(model.A, model.Q, model.b_i, model.b_i_star, R, Phi, means, b_star, lam)


def gradients(model: ModelParams, data: RatingMatrix, users, config: TrainingConfig) -> Gradients:
    """Gradients of the objective (halved) over the given training users."""
    users = np.asarray(users)
    if users.size == 0:
        raise ShapeError("empty batch")
    _check_compatible(model, data)
    R = data.rows(users)
    return batch_gradients(
        model, R, (R > 0).astype(np.int64), data.user_mean[users], model.b_u_star[users], config.lam
    )


def loss(model: ModelParams, data: RatingMatrix, config: TrainingConfig, chunk: int = 512) -> float:
    """Masked squared error over all observed ratings plus the L2 penalty."""
    _check_compatible(model, data)
    total = 0.0
    for start in range(0, data.n, chunk):
        users = np.arange(start, min(start + chunk, data.n))
        R = data.rows(users)
        E, _ = _masked_errors(model.A, model.Q, model.item_bias, R, (R > 0).astype(np.int64),
                              data.user_mean[users], model.b_u_star[users])
        total += float((E * E).sum())
    penalty = sum(float((x * x).sum()) for x in (model.A, model.Q, model.b_u_star, model.b_i_star))
    return total + config.lam * penalty


def _check_compatible(model: ModelParams, data: RatingMatrix):
    if data.m != model.m or data.n != model.n:
        raise ShapeError(f"model is {model.n}x{model.m}, data is {data.n}x{data.m}")


@dataclass
class TrainResult:
    model: ModelParams
    best_epoch: int
    train_loss: list = field(default_factory=list)
    val_rmse: list = field(default_factory=list)

    @property
    def best_so_far(self) -> list:
        return list(np.minimum.accumulate(self.val_rmse)) if self.val_rmse else []


def _holdout(data: RatingMatrix, config: TrainingConfig):
    """Split off ~5% of training users as an early-stopping set.

    Returns ``(fit, feed, test)``; ``feed``/``test`` are None when the
    dataset is too small to hold users out.
    """
    n_hold = int(round(config.holdout_frac * data.n))
    if n_hold < 1 or data.n - n_hold < 1:
        return data, None, None
    from .data import SplitSpec, split

    frac = 1.0 - n_hold / data.n
    fit, feed, test = split(data, SplitSpec(seed=config.seed + 1, train_frac=frac))
    return fit, feed, test


def holdout_rmse(model: ModelParams, feed: RatingMatrix, test: RatingMatrix, clamp: bool = True) -> float:
    preds, truth = [], []
    for start in range(0, feed.n, 256):
        users = np.arange(start, min(start + 256, feed.n))
        P = predict_rows(model, feed.rows(users), feed.user_mean[users], np.full(len(users), model.avg_b_u_star))
        T = test.ratings[users]
        coo = T.tocoo()
        preds.append(P[coo.row, coo.col])
        truth.append(coo.data)
    return rmse(np.concatenate(preds), np.concatenate(truth), clamp=clamp)


def train_with_history(data: RatingMatrix, config: TrainingConfig = TrainingConfig()) -> TrainResult:
    """Batched gradient descent with early stopping on held-out users.

    A small slice of the training users is held out (their rows split
    90/10 into feed/test); the epoch with the lowest held-out RMSE wins.
    Without enough users to hold out, training RMSE is monitored instead.
    """
    fit, feed, test = _holdout(data, config)
    model = init_params(fit, config)
    rng = np.random.default_rng(config.seed)
    A, Q = model.A.copy(), model.Q.copy()
    bu, bi = model.b_u_star.copy(), model.b_i_star.copy()
    Rcsr = fit.ratings

    def snapshot():
        return model.with_updates(
            A=A.copy(), Q=Q.copy(), b_u_star=bu.copy(), b_i_star=bi.copy(), avg_b_u_star=float(bu.mean())
        )

    result = TrainResult(model=snapshot(), best_epoch=0)
    best = np.inf
    stale = 0
    for epoch in range(1, config.max_iters + 1):
        order = rng.permutation(fit.n)
        for start in range(0, fit.n, config.batch_users):
            users = order[start:start + config.batch_users]
            R = Rcsr[users].toarray().astype(np.float64)
            g = _grad_arrays(A, Q, model.b_i, bi, R, (R > 0).astype(np.float64),
                             fit.user_mean[users], bu[users], config.lam)
            A -= config.eta * g.A
            Q -= config.eta * g.Q
            bu[users] -= config.eta * g.b_u_star
            bi -= config.eta * g.b_i_star
        current = snapshot()
        train_loss = loss(current, fit, config)
        if not np.isfinite(train_loss):
            raise DivergedError(epoch)
        if feed is not None:
            score = holdout_rmse(current, feed, test)
        else:
            score = float(np.sqrt((train_loss - config.lam * _penalty(current)) / fit.N))
        result.train_loss.append(train_loss)
        result.val_rmse.append(score)
        log.info("epoch %d loss %.4f val_rmse %.5f", epoch, train_loss, score)
        if score < best:
            best, stale = score, 0
            result.model, result.best_epoch = current, epoch
        else:
            stale += 1
            if stale >= config.patience:
                break
    return result


def _penalty(model: ModelParams) -> float:
    return sum(float((x * x).sum()) for x in (model.A, model.Q, model.b_u_star, model.b_i_star))


def train(data: RatingMatrix, config: TrainingConfig = TrainingConfig()) -> ModelParams:
    """Train on ``data`` and return the parameters of the best validation epoch."""
    return train_with_history(data, config).model


@dataclass(frozen=True)
class RegUsers:
    """Rows of training users used as a regularizer during retraining."""

    ratings: np.ndarray
    means: np.ndarray
    b_star: np.ndarray
    users: np.ndarray | None = None

    @property
    def tau(self) -> int:
        return self.ratings.shape[0]

    @property
    def phi(self) -> np.ndarray:
        return (np.asarray(self.ratings) != 0).astype(np.int64)


def sample_reg_users(data: RatingMatrix, model: ModelParams, tau: int, seed: int = 0) -> RegUsers:
    rng = np.random.default_rng(seed)
    users = np.sort(rng.choice(data.n, size=min(tau, data.n), replace=False))
    return RegUsers(
        ratings=data.rows(users),
        means=data.user_mean[users].copy(),
        b_star=np.asarray(model.b_u_star)[users].copy(),
        users=users,
    )


def no_reg_users(m: int) -> RegUsers:
    return RegUsers(np.zeros((0, m), dtype=np.int64), np.zeros(0), np.zeros(0))


def exact_inputs(model: ModelParams, r_v, mean_v, reg: RegUsers, eta, lam, bits: int):
    """Round every real input onto the ``2**-bits`` grid as exact rationals."""
    q = lambda x: fixedpoint.dyadic(x, bits)
    exact_model = ModelParams(
        A=q(model.A), Q=q(model.Q), b_u_star=q(model.b_u_star), b_i_star=q(model.b_i_star),
        mu=q(model.mu), b_u=q(model.b_u), b_i=q(model.b_i), avg_b_u_star=q(model.avg_b_u_star),
    )
    exact_reg = RegUsers(
        ratings=fixedpoint.exact_ints(reg.ratings), means=q(reg.means), b_star=q(reg.b_star), users=reg.users
    )
    return exact_model, fixedpoint.exact_ints(r_v), q(mean_v), exact_reg, q(eta), q(lam)


def retrain_plain(
    model: ModelParams,
    r_v,
    phi_v,
    mean_v,
    reg_users: RegUsers,
    config: TrainingConfig,
    iters: int = 1,
    exact_bits: int | None = None,
):
    """Retrain on one client's row plus ``tau`` regularization rows.

    Runs ``iters`` full-batch gradient steps on the batch ``{client} +
    reg_users`` starting from the pre-trained ``model``. The client's
    learned bias starts at ``model.avg_b_u_star``. With ``exact_bits`` every
    real input is first rounded to that binary grid and the arithmetic is
    carried out in exact rationals.

    Returns:
      ``(model', b_v_star)``: updated parameters and the client's updated
      learned bias. Predictions for the client are
      ``predict_user(model', r_v, mean_v, b_v_star)``.
    """
    r_v = np.asarray(r_v)
    phi_v = np.asarray(phi_v)
    if r_v.shape != (model.m,) or phi_v.shape != (model.m,):
        raise ShapeError(f"client vectors must have length {model.m}")
    if reg_users.ratings.shape[1:] != (model.m,) and reg_users.tau:
        raise ShapeError("regularization rows must have length m")
    eta, lam = config.eta, config.lam
    b_v = model.avg_b_u_star
    if exact_bits is not None:
        model, r_v, mean_v, reg_users, eta, lam = exact_inputs(model, r_v, mean_v, reg_users, eta, lam, exact_bits)
        phi_v = fixedpoint.exact_ints(phi_v)
        b_v = model.avg_b_u_star
    if iters == 0:
        return model, b_v

    R = np.vstack([r_v[None, :], np.asarray(reg_users.ratings).reshape(-1, model.m)])
    Phi = np.vstack([phi_v[None, :], (R[1:] != 0).astype(np.int64) if exact_bits is None
                     else fixedpoint.exact_ints(R[1:] != 0)])
    means = np.concatenate([np.asarray([mean_v], dtype=object if exact_bits else np.float64),
                            np.asarray(reg_users.means)])
    b_star = np.concatenate([np.asarray([b_v], dtype=object if exact_bits else np.float64),
                             np.asarray(reg_users.b_star)])
    A, Q, bi = model.A, model.Q, model.b_i_star
    for it in range(iters):
        cur = model.with_updates(A=A, Q=Q, b_i_star=bi)
        g = batch_gradients(cur, R, Phi, means, b_star, lam)
        A = A - eta * g.A
        Q = Q - eta * g.Q
        bi = bi - eta * g.b_i_star
        b_star = b_star - eta * g.b_u_star
        if exact_bits is None and not np.isfinite(A).all():
            raise DivergedError(it + 1)

    b_u_star = np.array(model.b_u_star, copy=True)
    if reg_users.users is not None and reg_users.tau and b_u_star.size:
        b_u_star[np.asarray(reg_users.users)] = b_star[1:]
    return model.with_updates(A=A, Q=Q, b_i_star=bi, b_u_star=b_u_star), b_star[0]


def save_model(model: ModelParams, path: str | Path) -> None:
    """Write the serving subset of ``model`` in the little-endian CRMD layout."""
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<BIIdd", MODEL_VERSION, model.m, model.d, float(model.mu), float(model.avg_b_u_star)))
        for arr in (model.b_i, model.b_i_star, model.A, model.Q):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_model(path: str | Path) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:4] != MODEL_MAGIC:
        raise ValueError(f"{path}: not a CRMD model file")
    version, m, d, mu, avg = struct.unpack_from("<BIIdd", raw, 4)
    if version != MODEL_VERSION:
        raise ValueError(f"{path}: unsupported model version {version}")
    off = 4 + struct.calcsize("<BIIdd")
    expected = off + 8 * (2 * m + 2 * m * d)
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    vals = np.frombuffer(raw, dtype="<f8", offset=off).astype(np.float64)
    b_i, b_i_star = vals[:m], vals[m:2 * m]
    A = vals[2 * m:2 * m + m * d].reshape(m, d)
    Q = vals[2 * m + m * d:].reshape(m, d)
    return ModelParams(
        A=A.copy(), Q=Q.copy(), b_u_star=np.zeros(0), b_i_star=b_i_star.copy(), mu=mu,
        b_u=np.zeros(0), b_i=b_i.copy(), avg_b_u_star=avg,
    )
