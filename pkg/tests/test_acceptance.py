"""Acceptance suite: one recorded pass/fail line per criterion (see the terminal summary)."""
import os
import random
import time
from contextlib import contextmanager
from fractions import Fraction

import numpy as np
import pytest

from conftest import ACCEPTANCE, ML1M, ML100K, random_dense
from cryptorec import compress as C
from cryptorec import protocol as P
from cryptorec import service as S
from cryptorec.data import RatingMatrix, SplitSpec, compute_statistics, ingest, split
from cryptorec.errors import CryptoRecError
from cryptorec.fixedpoint import OUTPUT_EXP, to_fixed
from cryptorec.he.oracle import OracleBackend
from cryptorec.he.paillier import PaillierBackend
from cryptorec.model import (
    ModelParams, RegUsers, TrainingConfig, gradients, holdout_rmse, predict_user, retrain_plain,
    train_with_history,
)
from cryptorec.retrain import EXACT_BITS


@contextmanager
def criterion(n: int, limit_s: float | None = None):
    """Record PASS/FAIL/SKIP for criterion ``n`` with the details gathered in ``info``.

    With ``limit_s`` the block must also finish within that many seconds.
    """
    info: dict = {}
    start = time.perf_counter()

    def detail():
        info.setdefault("time_s", round(time.perf_counter() - start, 1))
        return " ".join(f"{k}={v}" for k, v in info.items())

    try:
        yield info
        elapsed = time.perf_counter() - start
        assert limit_s is None or elapsed <= limit_s, f"took {elapsed:.0f} s, limit {limit_s:.0f} s"
    except pytest.skip.Exception as exc:
        ACCEPTANCE[n] = ("SKIP", f"{exc.msg} {detail()}")
        raise
    except BaseException as exc:
        ACCEPTANCE[n] = ("FAIL", f"{detail()} error={type(exc).__name__}: {str(exc)[:160]}")
        raise
    ACCEPTANCE[n] = ("PASS", detail())
    print(f"criterion {n}: PASS {detail()}")


def rand_model(rng, m, d, n=0, scale=0.1):
    return ModelParams(
        A=rng.normal(0, scale, (m, d)), Q=rng.normal(0, scale, (m, d)), b_u_star=rng.normal(0, 0.1, n),
        b_i_star=rng.normal(0, 0.1, m), mu=3.6, b_u=np.zeros(n), b_i=rng.normal(0, 0.3, m), avg_b_u_star=0.02,
    )


def rand_ratings(rng, m, density=0.4):
    return {int(i) + 1: int(rng.integers(1, 6)) for i in np.flatnonzero(rng.random(m) < density)}


# 1. homomorphic correctness

def test_c1_paillier_homomorphic_correctness():
    with criterion(1, limit_s=120) as info:
        rnd = random.Random(1)
        be = PaillierBackend()
        keys = be.keygen(1024)
        lim = 1 << 39
        ok = 0
        for _ in range(1000):
            a, b, k = (rnd.randrange(-lim, lim) for _ in range(3))
            ca, cb = be.encrypt(keys.pk, a), be.encrypt(keys.pk, b, sk=keys.sk)
            assert be.decrypt(keys.sk, be.add(ca, cb)).value == a + b
            assert be.decrypt(keys.sk, be.mul_plain(ca, k)).value == k * a
            ok += 1
        info.update(cases=ok)


# 2. encrypted pipeline equals the quantized plaintext pipeline

def integer_reference(cm, r, mean_fixed):
    """Prediction integers by plain Python big-int loops over the served codewords."""
    A = [[int(x) for x in row] for row in cm.A.fixed()]
    Q = [[int(x) for x in row] for row in cm.Q.fixed()]
    u = [sum(int(r[k]) * A[k][j] for k in range(cm.m)) for j in range(cm.d)]
    off = cm.item_offsets_fixed()
    return [int(mean_fixed) + int(off[i]) + sum(u[j] * Q[i][j] for j in range(cm.d)) for i in range(cm.m)]


def test_c2_encrypted_equals_plaintext_pipeline():
    with criterion(2) as info:
        rng = np.random.default_rng(2)
        cases = 0
        for trial in range(50):
            m, d = int(rng.integers(1, 51)), int(rng.integers(1, 9))
            cm = C.compress(rand_model(rng, m, d, scale=float(rng.choice([0.003, 0.03, 0.3]))))
            plan = C.build_reuse_plan(cm)
            items = np.arange(1, m + 1)
            ratings = rand_ratings(rng, m)
            r = P.dense_row(ratings, items)
            mean_fixed = to_fixed(P.user_mean(r), OUTPUT_EXP)
            expect = integer_reference(cm, r, mean_fixed)
            # the same quantity through the real-valued model path (exact: every term is on the 2^-24 grid)
            served = cm.served_model()
            float_view = predict_user(served, r, mean_fixed / 2.0**OUTPUT_EXP, served.avg_b_u_star) * 2.0**OUTPUT_EXP
            assert np.array_equal(float_view, np.array(expect, dtype=np.float64))
            for backend in ("paillier", "oracle"):
                q, session = P.client_build_query(ratings, items, P.Mode.DIRECT, backend, bits=1024)
                q = P.decode_frame(P.encode_frame(q))
                got = P.client_decrypt(P.server_direct(q, cm, plan if trial % 2 else None), session)
                assert got == expect, f"model {trial} ({backend}) differs"
                cases += 1
        info.update(models=50, backend_runs=cases)


# 3. gradient check

def objective(model: ModelParams, R: np.ndarray, lam: float) -> float:
    """Full regularized squared error over observed entries, written out directly."""
    phi = R > 0
    means = np.array([R[u][phi[u]].mean() for u in range(len(R))])
    pred = means[:, None] + (model.b_i + model.b_i_star)[None, :] + model.b_u_star[:, None] + (R @ model.A) @ model.Q.T
    err = np.where(phi, R - pred, 0.0)
    reg = sum(float((x * x).sum()) for x in (model.A, model.Q, model.b_u_star, model.b_i_star))
    return float((err * err).sum()) + lam * reg


def test_c3_gradient_check():
    with criterion(3, limit_s=60) as info:
        rng = np.random.default_rng(3)
        worst, h, lam = 0.0, 1e-5, 0.01
        for _ in range(20):
            m, d, n = int(rng.integers(2, 21)), int(rng.integers(1, 5)), int(rng.integers(1, 7))
            R = random_dense(rng, n, m).astype(np.float64)
            data = compute_statistics(np.array([(u, i, int(R[u, i])) for u, i in zip(*np.nonzero(R))]),
                                      user_ids=np.arange(n), item_ids=np.arange(m))
            model = rand_model(rng, m, d, n).with_updates(b_i=rng.normal(0, 0.3, m))
            g = gradients(model, data, np.arange(n), TrainingConfig(lam=lam, d=d))
            Rd = data.dense().astype(np.float64)
            for name in ("A", "Q", "b_u_star", "b_i_star"):
                base = np.array(getattr(model, name))
                for idx in np.ndindex(base.shape):
                    plus, minus = base.copy(), base.copy()
                    plus[idx] += h
                    minus[idx] -= h
                    fd = (objective(model.with_updates(**{name: plus}), Rd, lam)
                          - objective(model.with_updates(**{name: minus}), Rd, lam)) / (2 * h)
                    a = 2.0 * getattr(g, name)[idx]  # gradients are those of half the objective
                    scale = max(abs(a), abs(fd))
                    worst = max(worst, abs(a - fd) / scale if scale > 1e-6 else abs(a - fd))
        info.update(instances=20, max_rel_err=f"{worst:.2e}")
        assert worst < 1e-4


# 4. desk-scale training

@pytest.mark.skipif(not ML100K.exists(), reason="ml-100k not present under data/")
def test_c4_ml100k_training_and_baseline():
    with criterion(4, limit_s=1800) as info:
        data = compute_statistics(ingest(ML100K))
        train, feed, test = split(data, SplitSpec(seed=0))
        result = train_with_history(train, TrainingConfig())
        best = result.best_so_far
        val = holdout_rmse(result.model, feed, test)
        nbm = S.evaluate(data, seed=0, mode="nbm")["rmse"]
        info.update(validation_rmse=round(val, 4), best_epoch=result.best_epoch, epochs=len(best),
                    inbm_rmse=round(nbm, 4))
        assert val <= 1.00
        assert all(b2 <= b1 for b1, b2 in zip(best, best[1:]))
        assert best[-1] == result.val_rmse[result.best_epoch - 1]
        assert 0.88 <= nbm <= 1.05


# 5. and 6. need the ml-1m ratings

def ml1m_or_skip():
    if not ML1M.exists():
        pytest.skip(f"ml-1m ratings not present at {ML1M.relative_to(ML1M.parents[2])}")
    return compute_statistics(ingest(ML1M))


@pytest.mark.slow
def test_c5_ml1m_accuracy():
    with criterion(5) as info:
        data = ml1m_or_skip()
        direct = S.evaluate(data, mode="direct")
        retrain = S.evaluate(data, mode="retrain")
        nbm = S.evaluate(data, mode="nbm")
        info.update(rmse=round(direct["rmse"], 4), retrain_gain_pct=round(retrain["improvement_pct"], 2),
                    inbm=round(nbm["rmse"], 4))
        assert abs(direct["rmse"] - 0.8781) <= 0.02
        assert retrain["improvement_pct"] >= 0.5
        assert abs(nbm["rmse"] - 0.8872) <= 0.03


def compression_numbers(data: RatingMatrix) -> dict:
    train, feed, test = split(data, SplitSpec(seed=0))
    model = train_with_history(train, TrainingConfig()).model
    cm = C.compress(model)
    served = cm.served_model()
    delta = holdout_rmse(served, feed, test) - holdout_rmse(model, feed, test)
    ratings = {int(i) + 1: 4 for i in range(0, cm.m, 25)}
    q, _ = P.client_build_query(ratings, np.arange(1, cm.m + 1), backend="oracle", bits=1024)
    counts = []
    for plan in (C.build_reuse_plan(cm), None):
        be = OracleBackend()
        P.server_direct(q, cm, plan, backend=be)
        counts.append(be.counter["mul_plain"])
    return {"pruning": cm.pruning_ratio, "reuse": cm.reuse_ratio, "rmse_delta": delta,
            "op_drop": 1 - counts[0] / counts[1]}


@pytest.mark.slow
def test_c6_compression():
    with criterion(6) as info:
        if not ML1M.exists() and ML100K.exists():
            proxy = compression_numbers(compute_statistics(ingest(ML100K)))
            info.update(ml100k_proxy=" ".join(f"{k}:{v:.4f}" for k, v in proxy.items()))
        out = compression_numbers(ml1m_or_skip())
        info.update(**{k: round(v, 4) for k, v in out.items()})
        assert 0.06 <= out["pruning"] <= 0.12
        assert out["reuse"] >= 0.85
        assert abs(out["rmse_delta"]) <= 0.01
        assert out["op_drop"] >= 0.70


# 7. retrain equivalence

@pytest.mark.slow
def test_c7_retrain_equivalence():
    with criterion(7, limit_s=600) as info:
        rng = np.random.default_rng(7)
        m, d, tau = 40, 4, 3
        model = rand_model(rng, m, d, n=8)
        R = rng.integers(1, 6, (tau, m)) * (rng.random((tau, m)) < 0.4)
        R[:, 0] = 3
        reg = RegUsers(R, R.sum(1) / (R > 0).sum(1), model.b_u_star[:tau], np.arange(tau))
        cfg = TrainingConfig(d=d, eta=0.01, lam=0.05)
        items = np.arange(1, m + 1)
        ratings = rand_ratings(rng, m, 0.5)
        r = P.dense_row(ratings, items)
        phi = (r != 0).astype(np.int64)

        q, session = P.client_build_query(ratings, items, P.Mode.RETRAIN, backend="exact")
        got = P.client_decrypt(P.server_retrain(P.decode_frame(P.encode_frame(q)), model, reg, cfg), session)
        m2, bv = retrain_plain(model, r, phi, P.user_mean(r), reg, cfg, iters=1, exact_bits=EXACT_BITS)
        mean_exact = Fraction(round(P.user_mean(r) * 2**EXACT_BITS), 2**EXACT_BITS)
        assert all(isinstance(v, Fraction) for v in got)
        assert got == predict_user(m2, r.astype(object), mean_exact, bv).tolist()

        f2, fbv = retrain_plain(model, r, phi, P.user_mean(r), reg, cfg, iters=1)
        reference = predict_user(f2, r, P.user_mean(r), fbv)
        q, session = P.client_build_query(ratings, items, P.Mode.RETRAIN, backend="swhe:test")
        resp = P.server_retrain(P.decode_frame(P.encode_frame(q)), model, reg, cfg)
        be, sk = session.backend, session.keys.sk
        cts = [be.ct_from_bytes(session.key_id, c) for c in resp.predictions]
        budget = min(be.measured_budget(sk, c) for c in cts)
        dev = float(np.max(np.abs(np.array([float(be.decrypt(sk, c)) for c in cts]) - reference)))
        info.update(exact_equal=True, swhe_max_dev=f"{dev:.2e}", swhe_min_budget_bits=round(budget, 1))
        assert dev <= 1e-3
        assert budget > 0


# 8. protocol hygiene

def mutate(rnd: random.Random, raw: bytes) -> bytes:
    b = bytearray(raw)
    kind = rnd.randrange(4)
    if kind == 0 and b:
        for _ in range(rnd.randint(1, 4)):
            b[rnd.randrange(len(b))] = rnd.randrange(256)
    elif kind == 1:
        b = b[:rnd.randrange(len(b) + 1)]
    elif kind == 2:
        b += bytes(rnd.randrange(256) for _ in range(rnd.randint(1, 20)))
    else:
        b = bytearray(rnd.getrandbits(8) for _ in range(rnd.randint(0, 64)))
    return bytes(b)


def test_c8_protocol_hygiene():
    with criterion(8) as info:
        rnd = random.Random(8)
        rng = np.random.default_rng(8)
        m = 30
        items = np.arange(1, m + 1)
        cm = C.compress(rand_model(rng, m, 3))
        app = S.Server(S.ServedModel(cm, C.build_reuse_plan(cm), items), "oracle")
        seeds = []
        for backend in ("oracle", "paillier", "exact"):
            mode = P.Mode.RETRAIN if backend == "exact" else P.Mode.DIRECT
            q, _ = P.client_build_query(rand_ratings(rng, m), items, mode, backend, bits=1024)
            seeds.append(P.encode_frame(q))
        seeds.append(P.encode_frame(P.ResponseMessage(bytes(16), (b"x" * 9,) * 3)))
        seeds.append(P.encode_frame(P.ErrorMessage(3, "shape")))
        decoded = rejected = internal = 0
        for k in range(10_000):
            raw = mutate(rnd, rnd.choice(seeds))
            try:
                msg = P.decode_frame(raw)
            except CryptoRecError:
                rejected += 1
            else:
                decoded += 1
                assert P.decode_frame(P.encode_frame(msg)) == msg
            if k % 10 == 0:
                reply = P.decode_frame(app.handle(raw))
                internal += isinstance(reply, P.ErrorMessage) and reply.code == P.ErrorCode.INTERNAL
        assert internal == 0

        lengths = set()
        backend = PaillierBackend()
        keys = backend.keygen(1024)
        for _ in range(100):
            ratings = rand_ratings(rng, m, float(rng.uniform(0.05, 0.9)))
            r = P.dense_row(ratings, items)
            session = P.ClientSession(backend, keys, P.Mode.DIRECT, items, "paillier")
            q = P.QueryMessage(
                P.Mode.DIRECT, "paillier", keys.key_id, backend.pk_to_bytes(keys.pk), m,
                tuple(backend.ct_to_bytes(c) for c in backend.encrypt_vector(keys.pk, r, sk=keys.sk)),
                backend.ct_to_bytes(backend.encrypt(keys.pk, to_fixed(P.user_mean(r), OUTPUT_EXP), OUTPUT_EXP, keys.sk)),
            )
            resp = P.server_direct(q, cm, None)
            assert P.client_decrypt(resp, session) == C.predict_fixed(cm, r, to_fixed(P.user_mean(r), OUTPUT_EXP)).tolist()
            lengths.add((len(P.encode_frame(q)), len(P.encode_frame(resp))))
        built = {len(P.encode_frame(P.client_build_query(rand_ratings(rng, m), items, bits=1024)[0])) for _ in range(5)}
        assert len(lengths) == 1 and built == {next(iter(lengths))[0]}

        ids = {P.client_build_query({1: 3}, items, backend="oracle", bits=1024)[1].key_id for _ in range(1000)}
        assert len(ids) == 1000

        q, session = P.client_build_query({2: 5, 7: 1}, items, backend="paillier", bits=1024)
        r1, r2 = P.server_direct(q, cm, None), P.server_direct(q, cm, None)
        assert all(a != b for a, b in zip(r1.predictions, r2.predictions))
        assert P.client_decrypt(r1, session) == P.client_decrypt(r2, session)
        c = backend.encrypt(keys.pk, -123456789)
        c2 = backend.rerandomize(keys.pk, c)
        assert backend.ct_to_bytes(c2) != backend.ct_to_bytes(c)
        assert backend.decrypt(keys.sk, c2).value == -123456789
        info.update(fuzz_frames=10_000, decoded=decoded, rejected=rejected, transcript_lengths=sorted(lengths),
                    unique_key_ids=len(ids))


# 9. throughput (recorded)

@pytest.mark.slow
def test_c9_throughput_recorded(tmp_path):
    with criterion(9) as info:
        workers = os.cpu_count() or 1
        report = S.bench("ml1m", bits=2048, workers=workers, seed=0)
        (tmp_path / "bench.json").write_text(S.to_json(report))
        info.update(m=report["m"], d=report["d"], cpus=workers, end_to_end_s=report["end_to_end_s"],
                    server_s=report["server_s"], communication_mb=round(report["communication_mb"], 3),
                    within_120s=report["end_to_end_s"] <= 120)
        assert report["matches_plaintext"]
        assert {"layer1", "layer2", "rerandomize"} <= set(report["server_phases_s"])
        assert 3.86 / 2 <= report["communication_mb"] <= 3.86 * 2
