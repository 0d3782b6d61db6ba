import random
import struct
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cryptorec import compress as C
from cryptorec import protocol as P
from cryptorec.errors import FrameError, ItemMapError, KeyMismatch, ParamError, ShapeError, VersionMismatch
from cryptorec.fixedpoint import OUTPUT_EXP, to_fixed
from cryptorec.model import (
    ModelParams, RegUsers, TrainingConfig, exact_inputs, no_reg_users, predict_user, retrain_plain,
)


def make_model(rng, m=20, d=4, n=6, scale=0.1):
    return ModelParams(
        A=rng.normal(0, scale, (m, d)), Q=rng.normal(0, scale, (m, d)),
        b_u_star=rng.normal(0, 0.1, n), b_i_star=rng.normal(0, 0.1, m), mu=3.6,
        b_u=np.zeros(n), b_i=rng.normal(0, 0.3, m), avg_b_u_star=0.03,
    )


def random_ratings(rng, m, density=0.4):
    items = np.flatnonzero(rng.random(m) < density)
    return {int(i) + 100: int(rng.integers(1, 6)) for i in items}


ITEMS = lambda m: np.arange(100, 100 + m)


def expected_fixed(cm, ratings, m):
    r = P.dense_row(ratings, ITEMS(m))
    return C.predict_fixed(cm, r, to_fixed(P.user_mean(r), OUTPUT_EXP))


@pytest.mark.parametrize("backend", ["paillier", "oracle"])
def test_direct_equals_quantized_plaintext(rng, backend):
    model = make_model(rng)
    cm = C.compress(model)
    plan = C.build_reuse_plan(cm)
    ratings = random_ratings(rng, 20)
    q, session = P.client_build_query(ratings, ITEMS(20), P.Mode.DIRECT, backend, bits=1024)
    resp = P.server_direct(q, cm, plan)
    got = P.client_decrypt(resp, session)
    assert got == expected_fixed(cm, ratings, 20).tolist()
    pred = P.client_decode_response(resp, session)
    np.testing.assert_array_equal(pred.scores, np.array(got) / 2.0**OUTPUT_EXP)


@pytest.mark.parametrize("backend", ["exact", "swhe:test"])
def test_direct_on_ring_backends(rng, backend):
    model = make_model(rng, m=12, d=3)
    cm = C.compress(model)
    ratings = random_ratings(rng, 12)
    q, session = P.client_build_query(ratings, ITEMS(12), P.Mode.DIRECT, backend)
    got = P.client_decrypt(P.server_direct(q, cm, C.build_reuse_plan(cm)), session)
    expect = expected_fixed(cm, ratings, 12)
    r = P.dense_row(ratings, ITEMS(12))
    # the ring path carries the mean on a 2^-32 grid instead of 2^-24
    shift = Fraction(round(P.user_mean(r) * 2**32), 2**32) - Fraction(to_fixed(P.user_mean(r), OUTPUT_EXP), 2**OUTPUT_EXP)
    assert got == [Fraction(int(e), 2**OUTPUT_EXP) + shift for e in expect]


def test_plan_and_no_plan_agree(rng):
    cm = C.compress(make_model(rng, m=15, d=3, scale=0.003))
    ratings = random_ratings(rng, 15)
    q, session = P.client_build_query(ratings, ITEMS(15), backend="oracle", bits=1024)
    with_plan = P.client_decrypt(P.server_direct(q, cm, C.build_reuse_plan(cm)), session)
    without = P.client_decrypt(P.server_direct(q, cm, None), session)
    assert with_plan == without


def test_zero_model_returns_mean(rng):
    model = make_model(rng, m=8, d=2)
    z = np.zeros(8)
    model = model.with_updates(A=np.zeros((8, 2)), Q=np.zeros((8, 2)), b_i=z, b_i_star=z, avg_b_u_star=0.0)
    cm = C.compress(model)
    ratings = {100: 4, 103: 3}
    q, session = P.client_build_query(ratings, ITEMS(8), backend="paillier", bits=1024)
    got = P.client_decrypt(P.server_direct(q, cm, C.build_reuse_plan(cm)), session)
    assert got == [round(3.5 * 2**24)] * 8


def test_empty_client_gets_bias_only_predictions(rng):
    cm = C.compress(make_model(rng, m=10, d=2))
    q, session = P.client_build_query({}, ITEMS(10), backend="oracle", bits=1024)
    got = P.client_decrypt(P.server_direct(q, cm, C.build_reuse_plan(cm)), session)
    assert got == cm.item_offsets_fixed().tolist()


def test_workers_give_identical_results(rng):
    cm = C.compress(make_model(rng, m=16, d=3))
    plan = C.build_reuse_plan(cm)
    ratings = random_ratings(rng, 16)
    q, session = P.client_build_query(ratings, ITEMS(16), backend="paillier", bits=1024)
    one = P.client_decrypt(P.server_direct(q, cm, plan, workers=1), session)
    three = P.client_decrypt(P.server_direct(q, cm, plan, workers=3), session)
    assert one == three == expected_fixed(cm, ratings, 16).tolist()


def test_server_never_decrypts(rng, monkeypatch):
    from cryptorec.he import OracleBackend
    from cryptorec.he.exact import ExactBackend

    def forbidden(*a, **k):
        raise AssertionError("server attempted decryption")

    cm = C.compress(make_model(rng, m=6, d=2))
    q, session = P.client_build_query({101: 5}, ITEMS(6), backend="oracle", bits=1024)
    qr, session_r = P.client_build_query({101: 5}, ITEMS(6), P.Mode.RETRAIN, backend="exact")
    monkeypatch.setattr(OracleBackend, "decrypt", forbidden)
    monkeypatch.setattr(ExactBackend, "decrypt", forbidden)
    resp = P.server_direct(q, cm, C.build_reuse_plan(cm))
    resp_r = P.server_retrain(qr, make_model(rng, m=6, d=2), no_reg_users(6), TrainingConfig(d=2))
    monkeypatch.undo()
    assert len(P.client_decrypt(resp, session)) == len(P.client_decrypt(resp_r, session_r)) == 6


def test_fresh_keys_per_query(rng):
    ids = {P.client_build_query({100: 3}, ITEMS(3), backend="oracle", bits=1024)[1].key_id for _ in range(50)}
    assert len(ids) == 50


def test_unknown_item_rejected():
    with pytest.raises(ItemMapError):
        P.client_build_query({999: 4}, ITEMS(5), backend="oracle", bits=1024)


def test_additive_backend_cannot_retrain():
    with pytest.raises(ParamError):
        P.client_build_query({100: 4}, ITEMS(5), P.Mode.RETRAIN, backend="paillier", bits=1024)


def test_model_size_mismatch(rng):
    cm = C.compress(make_model(rng, m=10, d=2))
    q, _ = P.client_build_query({100: 4}, ITEMS(9), backend="oracle", bits=1024)
    with pytest.raises(ShapeError):
        P.server_direct(q, cm, None)


def test_response_key_must_match(rng):
    cm = C.compress(make_model(rng, m=5, d=2))
    q, _ = P.client_build_query({100: 4}, ITEMS(5), backend="oracle", bits=1024)
    _, other = P.client_build_query({100: 4}, ITEMS(5), backend="oracle", bits=1024)
    with pytest.raises(KeyMismatch):
        P.client_decode_response(P.server_direct(q, cm, None), other)


def test_ranking_ties_to_lower_index():
    assert P.rank([1.0, 1.0, 1.0, 1.0]).tolist() == [0, 1, 2, 3]
    assert P.rank([2.0, 3.0, 2.0, 1.0]).tolist() == [1, 0, 2, 3]


def test_retrain_exact_oracle_equals_plaintext_reference(rng):
    m, d, tau = 40, 4, 3
    model = make_model(rng, m, d, n=8)
    R = rng.integers(1, 6, (tau, m)) * (rng.random((tau, m)) < 0.4)
    reg = RegUsers(R, np.array([3.1, 3.7, 4.0]), model.b_u_star[:tau], np.arange(tau))
    cfg = TrainingConfig(d=d, eta=0.01, lam=0.05)
    ratings = random_ratings(rng, m, 0.5)
    q, session = P.client_build_query(ratings, ITEMS(m), P.Mode.RETRAIN, backend="exact")
    got = P.client_decrypt(P.server_retrain(q, model, reg, cfg), session)
    r = P.dense_row(ratings, ITEMS(m))
    m2, bv = retrain_plain(model, r, (r != 0).astype(int), P.user_mean(r), reg, cfg, exact_bits=32)
    _, er, emean, *_ = exact_inputs(model, r, P.user_mean(r), reg, cfg.eta, cfg.lam, 32)
    assert got == predict_user(m2, er, emean, bv).tolist()


def test_retrain_with_zero_step_is_pretrained_prediction(rng):
    m, d = 10, 3
    model = make_model(rng, m, d)
    cfg = TrainingConfig(d=d, eta=0.0, lam=0.0)
    ratings = random_ratings(rng, m, 0.6)
    q, session = P.client_build_query(ratings, ITEMS(m), P.Mode.RETRAIN, backend="exact")
    got = P.client_decrypt(P.server_retrain(q, model, no_reg_users(m), cfg), session)
    r = P.dense_row(ratings, ITEMS(m))
    em, er, emean, *_ = exact_inputs(model, r, P.user_mean(r), no_reg_users(m), 0.0, 0.0, 32)
    assert got == predict_user(em, er, emean, em.avg_b_u_star).tolist()


def test_retrain_memory_stays_linear(rng):
    from cryptorec.he.exact import ExactBackend
    m, d = 30, 6
    model = make_model(rng, m, d)
    q, _ = P.client_build_query(random_ratings(rng, m), ITEMS(m), P.Mode.RETRAIN, backend="exact")
    be = ExactBackend()
    P.server_retrain(q, model, no_reg_users(m), TrainingConfig(d=d), backend=be)
    assert be.counter.peak_live <= 4 * (m + d)
    assert be.counter["mul_ct"] == m + 4 * m * d


# --- frame codec

def random_query(rnd: random.Random, retrain=False):
    m = rnd.randint(0, 6)
    blob = lambda: bytes(rnd.getrandbits(8) for _ in range(rnd.randint(0, 40)))
    return P.QueryMessage(
        P.Mode.RETRAIN if retrain else P.Mode.DIRECT, rnd.choice(["paillier", "oracle", "swhe:test"]),
        bytes(rnd.getrandbits(8) for _ in range(16)), blob(), m, tuple(blob() for _ in range(m)), blob(),
        tuple(blob() for _ in range(m)) if retrain else None, blob() if retrain else None,
    )


def random_message(rnd: random.Random):
    kind = rnd.randrange(4)
    if kind < 2:
        return random_query(rnd, retrain=kind == 1)
    if kind == 2:
        return P.ResponseMessage(bytes(16), tuple(bytes([rnd.randrange(256)]) * rnd.randrange(30) for _ in range(rnd.randrange(5))))
    return P.ErrorMessage(rnd.randrange(1 << 16), "".join(rnd.choice("abcé✓ ") for _ in range(rnd.randrange(20))))


def test_frame_roundtrip_and_header():
    rnd = random.Random(11)
    for _ in range(300):
        msg = random_message(rnd)
        raw = P.encode_frame(msg)
        assert raw[:4] == bytes.fromhex("43525952") and raw[4] == 1
        assert struct.unpack(">Q", raw[6:14])[0] == len(raw) - 14
        assert P.decode_frame(raw) == msg


def test_error_payload_layout():
    raw = P.encode_frame(P.ErrorMessage(1, "bad"))
    assert raw[5] == 4 and raw[14:] == b"\x00\x01\x00\x00\x00\x03bad"


def test_truncation_and_corruption_raise_frame_errors():
    raw = P.encode_frame(random_query(random.Random(2), retrain=True))
    for cut in range(len(raw)):
        with pytest.raises(FrameError):
            P.decode_frame(raw[:cut])
    with pytest.raises(FrameError) as e:
        P.decode_frame(b"XXXX" + raw[4:])
    assert e.value.offset == 0
    with pytest.raises(VersionMismatch):
        P.decode_frame(raw[:4] + b"\x02" + raw[5:])


@settings(max_examples=300, deadline=None)
@given(st.binary(max_size=200), st.integers(0, 5))
def test_arbitrary_payloads_never_crash(payload, kind):
    raw = P.HEADER.pack(P.MAGIC, P.VERSION, kind, len(payload)) + payload
    try:
        P.decode_frame(raw)
    except FrameError:
        pass


def test_direct_transcript_length_depends_only_on_shape(rng):
    cm = C.compress(make_model(rng, m=12, d=2))
    sizes = set()
    for _ in range(10):
        q, _ = P.client_build_query(random_ratings(rng, 12, rng.random()), ITEMS(12), backend="paillier", bits=1024)
        sizes.add((len(P.encode_frame(q)), len(P.encode_frame(P.server_direct(q, cm, None)))))
    assert len(sizes) == 1
