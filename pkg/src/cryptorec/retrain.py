"""One encrypted gradient step on a client's row, generic over a ring backend.

The server holds the pre-trained model in the clear and the client's
ratings ``r``, indicator ``phi`` and mean only as ciphertexts. The backend
must provide ``add``, ``sub``, ``add_plain``, ``mul_plain`` and ``mul``
(ciphertext by ciphertext, with relinearization keys). Plaintext operands
are exact rationals on the ``2**-bits`` grid, so the circuit evaluated by
:class:`~cryptorec.he.exact.ExactBackend` reproduces
``retrain_plain(..., iters=1, exact_bits=bits)`` exactly.

Longest chain of ciphertext products: ``ef = e*phi``, ``dA = x*r``,
``p = r*A'`` and ``r_hat = p*q'``, depth four.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import ShapeError
from .model import ModelParams, RegUsers, TrainingConfig, _grad_arrays, exact_inputs
from .fixedpoint import exact_ints

EXACT_BITS = 32


@dataclass(frozen=True)
class RetrainTerms:
    """Server-side plaintext operands of the circuit (exact rationals)."""

    A: np.ndarray  # m x d
    Q: np.ndarray  # m x d
    item_bias: np.ndarray  # b_i + b_i*
    b_i: np.ndarray
    b_i_star: np.ndarray
    b_v: Fraction  # starting bias of the client
    eta: Fraction
    lam: Fraction
    reg_A: np.ndarray  # gradient contributions of the regularization users
    reg_Q: np.ndarray
    reg_bi: np.ndarray

    @property
    def m(self) -> int:
        return self.A.shape[0]

    @property
    def d(self) -> int:
        return self.A.shape[1]


def prepare_terms(model: ModelParams, reg: RegUsers, config: TrainingConfig, bits: int = EXACT_BITS) -> RetrainTerms:
    """Round the model onto the exact grid and fold in the ``tau`` users' gradients."""
    zero_r = np.zeros(model.m, dtype=np.int64)
    em, _, _, ereg, eta, lam = exact_inputs(model, zero_r, 0.0, reg, config.eta, config.lam, bits)
    if ereg.tau:
        R = np.asarray(ereg.ratings).reshape(-1, model.m)
        g = _grad_arrays(em.A, em.Q, em.b_i, em.b_i_star, R, exact_ints(reg.phi), ereg.means, ereg.b_star, 0)
        reg_A, reg_Q, reg_bi = g.A, g.Q, g.b_i_star
    else:
        reg_A = np.full(em.A.shape, Fraction(0), dtype=object)
        reg_Q = np.full(em.Q.shape, Fraction(0), dtype=object)
        reg_bi = np.full(model.m, Fraction(0), dtype=object)
    return RetrainTerms(
        A=em.A, Q=em.Q, item_bias=em.b_i + em.b_i_star, b_i=em.b_i, b_i_star=em.b_i_star,
        b_v=em.avg_b_u_star, eta=eta, lam=lam, reg_A=reg_A, reg_Q=reg_Q, reg_bi=reg_bi,
    )


def _dot(backend, cts, weights):
    """``sum_k cts[k] * weights[k]`` with plaintext weights; zero weights skipped."""
    acc = None
    for c, w in zip(cts, weights):
        if w == 0:
            continue
        term = backend.mul_plain(c, w)
        acc = term if acc is None else backend.add(acc, term)
    if acc is None:
        acc = backend.mul_plain(cts[0], 0)
    return acc


def _sum(backend, cts):
    acc = cts[0]
    for c in cts[1:]:
        acc = backend.add(acc, c)
    return acc


def retrain_circuit(backend, rk, enc_r: list, enc_phi: list, enc_mean, terms: RetrainTerms) -> list:
    """Encrypted predictions for every item after one retraining step.

    Ciphertexts are released as soon as they are consumed: the updated
    column ``A'_:j`` lives only while ``p_j`` is accumulated and the
    updated row ``q'_i`` only while ``r_hat_i`` is computed, so the peak
    number of live ciphertexts is linear in ``m + d``.
    """
    m, d = terms.m, terms.d
    if len(enc_r) != m or len(enc_phi) != m:
        raise ShapeError(f"expected {m} encrypted ratings and indicators")
    eta, lam = terms.eta, terms.lam

    y = [_dot(backend, enc_r, terms.A[:, j]) for j in range(d)]  # r A

    ef = []
    offset = enc_mean
    for i in range(m):
        e = _dot(backend, y, terms.Q[i])
        e = backend.add(e, offset)
        e = backend.add_plain(e, terms.item_bias[i] + terms.b_v)
        e = backend.sub(e, enc_r[i])
        ef.append(backend.mul(e, enc_phi[i], rk))
        del e

    x = [_dot(backend, ef, terms.Q[:, j]) for j in range(d)]  # (e * phi) Q

    p = []
    for j in range(d):
        acc = None
        for i in range(m):
            dA = backend.add_plain(backend.mul(x[j], enc_r[i], rk), lam * terms.A[i, j] + terms.reg_A[i, j])
            a_ij = backend.add_plain(backend.mul_plain(dA, -eta), terms.A[i, j])
            del dA
            term = backend.mul(enc_r[i], a_ij, rk)
            del a_ij
            acc = term if acc is None else backend.add(acc, term)
        p.append(acc)
    del x

    b_v_new = backend.add_plain(backend.mul_plain(_sum(backend, ef), -eta), terms.b_v - eta * lam * terms.b_v)
    base = backend.add(enc_mean, b_v_new)
    del b_v_new

    out = []
    for i in range(m):
        acc = backend.add_plain(base, terms.b_i[i])
        bi = terms.b_i_star[i]
        acc = backend.add(acc, backend.mul_plain(ef[i], -eta))
        acc = backend.add_plain(acc, bi - eta * (lam * bi + terms.reg_bi[i]))
        for j in range(d):
            dq = backend.add_plain(backend.mul(ef[i], y[j], rk), lam * terms.Q[i, j] + terms.reg_Q[i, j])
            q_ij = backend.add_plain(backend.mul_plain(dq, -eta), terms.Q[i, j])
            del dq
            acc = backend.add(acc, backend.mul(p[j], q_ij, rk))
            del q_ij
        out.append(acc)
        ef[i] = None
    return out
