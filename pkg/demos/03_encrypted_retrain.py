"""One encrypted gradient step on the client's row with the lattice scheme.

The client sends its ratings, its rating indicators and its mean encrypted
under a somewhat homomorphic key; the server runs one retraining step and
predicts every item without decrypting anything. The result is compared with
the plaintext retraining reference, and the remaining noise budget is shown.
"""
import time

import numpy as np

from cryptorec import protocol as P
from cryptorec import service as S
from cryptorec.model import RegUsers, TrainingConfig, predict_user, retrain_plain


def main():
    m, d = 16, 3
    rng = np.random.default_rng(4)
    model = S.synthetic_model(m, d, seed=4, scale=0.1).with_updates(b_u_star=rng.normal(0, 0.1, 4),
                                                                      b_u=np.zeros(4))
    R = rng.integers(1, 6, (2, m)) * (rng.random((2, m)) < 0.5)
    R[:, 0] = 4
    reg = RegUsers(R, R.sum(1) / (R > 0).sum(1), model.b_u_star[:2], np.arange(2))
    cfg = TrainingConfig(d=d, eta=0.01, lam=0.05)
    items = np.arange(1, m + 1)
    ratings = {2: 5, 5: 3, 9: 4, 14: 1}

    t0 = time.perf_counter()
    q, session = P.client_build_query(ratings, items, P.Mode.RETRAIN, backend="swhe:test")
    frame = P.encode_frame(q)
    print(f"query {len(frame) / 1e6:.1f} MB built in {time.perf_counter() - t0:.1f} s")
    t0 = time.perf_counter()
    resp = P.server_retrain(P.decode_frame(frame), model, reg, cfg)
    print(f"server retrain and predict: {time.perf_counter() - t0:.1f} s")

    be, sk = session.backend, session.keys.sk
    cts = [be.ct_from_bytes(session.key_id, c) for c in resp.predictions]
    scores = np.array([float(be.decrypt(sk, c)) for c in cts])
    r = P.dense_row(ratings, items)
    m2, bv = retrain_plain(model, r, (r != 0).astype(int), P.user_mean(r), reg, cfg)
    ref = predict_user(m2, r, P.user_mean(r), bv)
    print(f"max deviation from plaintext retraining: {np.abs(scores - ref).max():.2e}")
    print(f"smallest remaining noise budget: {min(be.measured_budget(sk, c) for c in cts):.1f} bits")


if __name__ == "__main__":
    main()
