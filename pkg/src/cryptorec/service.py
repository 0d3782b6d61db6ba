"""TCP serving, the client flow, and the evaluation and benchmark pipelines.

One connection carries one session: the client sends a query frame and
the server answers with a response or an error frame, then closes. Logs
record the mode, item count, sizes and timings of each session, never
ratings, keys or key ids.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import socket
import socketserver
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import compress as C
from . import protocol as P
from .data import RatingMatrix, SplitSpec, compute_statistics, ingest, rmse, split
from .errors import (
    ConnectError, FrameError, InvalidRating, ItemMapError, KeyMismatch, NoiseExhausted,
    ParamError, ParseError, ProtocolError, RangeError, ShapeError, VersionMismatch,
)
from .fixedpoint import OUTPUT_EXP, to_fixed
from .model import (
    ModelParams, RegUsers, TrainingConfig, load_model, no_reg_users, predict_rows, retrain_plain,
    sample_reg_users, train_with_history,
)
from .nbm import pearson_matrix, predict_items
from .retrain import RetrainTerms, prepare_terms

log = logging.getLogger(__name__)

SERVE_BACKENDS = {
    "paillier": lambda tag: tag == "paillier",
    "oracle": lambda tag: tag in ("oracle", "exact"),
    "swhe": lambda tag: tag.startswith("swhe:"),
}


def items_path(model_path: str | Path) -> Path:
    """Sidecar file listing the served item ids, one per line."""
    return Path(str(model_path) + ".items")


def write_items(model_path, item_ids) -> None:
    items_path(model_path).write_text("".join(f"{int(i)}\n" for i in item_ids))


def read_items(path: str | Path) -> np.ndarray:
    try:
        return np.array([int(x) for x in Path(path).read_text().split()], dtype=np.int64)
    except ValueError as exc:
        raise ParseError(0, f"{path}: {exc}") from None


@dataclass(eq=False)
class ServedModel:
    """Everything a server needs: the compressed model and, for retraining, the float one."""

    cm: C.CompressedModel
    plan: C.ReusePlan
    item_ids: np.ndarray
    terms: RetrainTerms | None = None

    @property
    def m(self) -> int:
        return self.cm.m

    @classmethod
    def from_model(
        cls,
        model: ModelParams,
        item_ids=None,
        threshold: float = C.DEFAULT_THRESHOLD,
        reg: RegUsers | None = None,
        config: TrainingConfig | None = None,
    ) -> "ServedModel":
        cm = C.compress(model, threshold)
        ids = np.arange(1, model.m + 1) if item_ids is None else np.asarray(item_ids)
        config = config or TrainingConfig(d=model.d)
        terms = prepare_terms(model, reg if reg is not None else no_reg_users(model.m), config)
        return cls(cm, C.build_reuse_plan(cm), ids, terms)

    @classmethod
    def load(cls, path, threshold: float = C.DEFAULT_THRESHOLD, data_path=None, tau: int = 10, seed: int = 0):
        """Load a float (CRMD) or compressed (CRMQ) model file.

        Compressed models serve DIRECT queries only. With ``data_path``, the
        regularization users for retraining are drawn from that ratings file.
        """
        path = Path(path)
        ids = read_items(items_path(path)) if items_path(path).exists() else None
        if path.read_bytes()[:4] == C.CRMQ_MAGIC:
            cm = C.load_compressed(path)
            ids = np.arange(1, cm.m + 1) if ids is None else ids
            return cls(cm, C.build_reuse_plan(cm), ids)
        model = load_model(path)
        ids = np.arange(1, model.m + 1) if ids is None else ids
        reg = None
        if data_path is not None and tau:
            data = compute_statistics(ingest(data_path), item_ids=ids)
            reg = sample_reg_users(data, model.with_updates(
                b_u_star=np.full(data.n, model.avg_b_u_star), b_u=np.zeros(data.n)), tau, seed)
        return cls.from_model(model, ids, threshold, reg)


class Server:
    """Frame-in, frame-out request handler; holds no secret key material."""

    def __init__(self, served: ServedModel, backend: str = "paillier", workers: int = 1):
        if backend not in SERVE_BACKENDS:
            raise ParamError(f"unknown backend family {backend!r}")
        self.served = served
        self.family = backend
        self.workers = workers
        self._retrain_lock = threading.Lock()

    def _error(self, code: P.ErrorCode, text: str) -> bytes:
        return P.encode_frame(P.ErrorMessage(int(code), text))

    def handle(self, raw: bytes) -> bytes:
        start = time.perf_counter()
        try:
            msg = P.decode_frame(raw)
        except VersionMismatch as exc:
            return self._error(P.ErrorCode.VERSION, str(exc))
        except FrameError as exc:
            return self._error(P.ErrorCode.MALFORMED, str(exc))
        if not isinstance(msg, P.QueryMessage):
            return self._error(P.ErrorCode.MALFORMED, "expected a query frame")
        if not SERVE_BACKENDS[self.family](msg.backend):
            return self._error(P.ErrorCode.UNSUPPORTED, f"this server does not accept {msg.backend!r} queries")
        try:
            if msg.mode == P.Mode.DIRECT:
                resp = P.server_direct(msg, self.served.cm, self.served.plan, workers=self.workers)
            else:
                if self.served.terms is None:
                    raise ParamError("this server has no float model to retrain")
                with self._retrain_lock:
                    resp = P.server_retrain(msg, None, None, None, terms=self.served.terms)
        except (ShapeError, ItemMapError) as exc:
            return self._error(P.ErrorCode.SHAPE, str(exc))
        except NoiseExhausted as exc:
            return self._error(P.ErrorCode.NOISE, str(exc))
        except ParamError as exc:
            return self._error(P.ErrorCode.UNSUPPORTED, str(exc))
        except (FrameError, KeyMismatch, RangeError) as exc:
            return self._error(P.ErrorCode.MALFORMED, str(exc))
        except Exception as exc:  # never leak internals to the peer
            log.error("session failed: %s", type(exc).__name__)
            return self._error(P.ErrorCode.INTERNAL, "internal error")
        out = P.encode_frame(resp)
        log.info("%s session m=%d in=%dB out=%dB %.2fs", msg.mode.name, msg.m, len(raw), len(out),
                 time.perf_counter() - start)
        return out


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        srv = self.server
        with srv.slots:
            try:
                raw = P.read_frame(self.rfile)
            except VersionMismatch as exc:
                self.wfile.write(srv.app._error(P.ErrorCode.VERSION, str(exc)))
                return
            except FrameError as exc:
                log.warning("dropped connection: %s", exc)
                return
            self.wfile.write(srv.app.handle(raw))


class TCPServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, app: Server, threads: int = 4):
        self.app = app
        self.slots = threading.BoundedSemaphore(max(1, threads))
        super().__init__(address, _Handler)


def start_server(app: Server, host: str = "127.0.0.1", port: int = 0, threads: int = 4):
    """Run a server on a background thread; returns ``(server, (host, port))``."""
    srv = TCPServer((host, port), app, threads)
    threading.Thread(target=srv.serve_forever, daemon=True).start()
    return srv, srv.server_address


# --- client side

def parse_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ParamError(f"address must be host:port, got {addr!r}")
    return host, int(port)


def read_ratings(path: str | Path) -> dict:
    """``item_id,rating`` lines (comma, tab, space or ``::`` separated; optional header)."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace("::", ",").replace("\t", ",").replace(" ", ",").split(",")
        parts = [p for p in parts if p]
        if len(parts) < 2:
            raise ParseError(lineno, "expected item_id and rating")
        try:
            item, value = int(parts[0]), float(parts[1])
        except ValueError:
            if lineno == 1:
                continue  # header
            raise ParseError(lineno, f"cannot parse {line!r}") from None
        if value != int(value) or not 1 <= value <= 5:
            raise InvalidRating(f"line {lineno}: rating {parts[1]!r} is not in 1..5")
        out[item] = int(value)
    return out


def exchange(addr: tuple[str, int], frame: bytes, timeout: float = 600.0) -> bytes:
    """Send one frame, return the peer's reply frame."""
    try:
        with socket.create_connection(addr, timeout=timeout) as sock:
            sock.sendall(frame)
            sock.shutdown(socket.SHUT_WR)
            with sock.makefile("rb") as fh:
                return P.read_frame(fh)
    except FrameError as exc:
        raise ConnectError(f"{addr[0]}:{addr[1]}: bad reply ({exc})") from None
    except OSError as exc:
        raise ConnectError(f"cannot reach {addr[0]}:{addr[1]}: {exc.strerror or exc}") from None


def run_query(
    addr: tuple[str, int],
    ratings: Mapping,
    item_ids,
    mode: P.Mode = P.Mode.DIRECT,
    backend: str = "paillier",
    bits: int = 2048,
) -> tuple[P.Prediction, dict]:
    """The full client flow over TCP; returns predictions and transfer statistics."""
    t0 = time.perf_counter()
    query, session = P.client_build_query(ratings, item_ids, mode, backend, bits)
    frame = P.encode_frame(query)
    t1 = time.perf_counter()
    reply = exchange(addr, frame)
    t2 = time.perf_counter()
    msg = P.decode_frame(reply)
    if isinstance(msg, P.ErrorMessage):
        raise ProtocolError(msg.code, msg.message)
    if not isinstance(msg, P.ResponseMessage):
        raise ProtocolError(int(P.ErrorCode.MALFORMED), "server sent a query frame")
    pred = P.client_decode_response(msg, session)
    t3 = time.perf_counter()
    stats = {"query_bytes": len(frame), "response_bytes": len(reply), "client_encrypt_s": t1 - t0,
             "round_trip_s": t2 - t1, "client_decrypt_s": t3 - t2}
    return pred, stats


def predictions_csv(pred: P.Prediction) -> str:
    """``item_id,score`` rows, best first, scores to 6 decimals."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["item_id", "score"])
    for k in pred.ranking:
        w.writerow([int(pred.item_ids[k]), f"{pred.scores[k]:.6f}"])
    return buf.getvalue()


# --- evaluation

def load_ratings(path) -> RatingMatrix:
    return compute_statistics(ingest(path))


def evaluate(
    data: RatingMatrix,
    seed: int = 0,
    mode: str = "direct",
    config: TrainingConfig | None = None,
    threshold: float = C.DEFAULT_THRESHOLD,
    max_users: int | None = None,
) -> dict:
    """Train on the 80% split and score the validation users' held-out ratings.

    Modes: ``direct`` (pre-trained model, float and quantized), ``retrain``
    (one gradient step on each validation user's feeding row first) and
    ``nbm`` (item-based neighbourhood baseline). Clamped and raw RMSE are
    both reported.
    """
    config = config or TrainingConfig(seed=seed)
    train, feed, test = split(data, SplitSpec(seed=seed))
    report = {"mode": mode, "seed": seed, "n_train": train.n, "n_validation": feed.n, "m": data.m}
    users = np.flatnonzero(np.diff(test.ratings.indptr) > 0)  # users with something to score
    if max_users is not None:
        users = users[:max_users]
    truth_coo = test.ratings[users].tocoo()
    truth = truth_coo.data.astype(np.float64)
    report["n_test_ratings"] = int(truth.size)

    if mode == "nbm":
        sim = pearson_matrix(train)
        preds = []
        for k, u in enumerate(users):
            items = truth_coo.col[truth_coo.row == k]
            preds.append(predict_items(sim, feed.row(u), items))
        pred = np.concatenate(preds) if preds else np.zeros(0)
        report.update(rmse=rmse(pred, truth), rmse_raw=rmse(pred, truth, clamp=False))
        return report

    result = train_with_history(train, config)
    model = result.model
    report["best_epoch"] = result.best_epoch
    report["epochs_run"] = len(result.val_rmse)
    R = feed.rows(users)
    means = feed.user_mean[users]
    if mode == "direct":
        P_full = predict_rows(model, R, means, np.full(len(users), model.avg_b_u_star))
        pred = P_full[truth_coo.row, truth_coo.col]
        cm = C.compress(model, threshold)
        fixed = np.stack([C.predict_fixed(cm, R[k], to_fixed(float(means[k]), OUTPUT_EXP)) for k in range(len(users))]) \
            if len(users) else np.zeros((0, data.m))
        qpred = fixed[truth_coo.row, truth_coo.col].astype(np.float64) / float(1 << OUTPUT_EXP)
        report.update(
            rmse=rmse(pred, truth), rmse_raw=rmse(pred, truth, clamp=False),
            rmse_quantized=rmse(qpred, truth), pruning_ratio=cm.pruning_ratio, reuse_ratio=cm.reuse_ratio,
        )
        return report
    if mode == "retrain":
        reg = sample_reg_users(train, model, config.tau, seed)
        preds, base = [], []
        for k, u in enumerate(users):
            r = R[k]
            items = truth_coo.col[truth_coo.row == k]
            m2, bv = retrain_plain(model, r, (r != 0).astype(np.int64), means[k], reg, config)
            preds.append(predict_rows(m2, r[None, :], [means[k]], [bv])[0][items])
            base.append(predict_rows(model, r[None, :], [means[k]], [model.avg_b_u_star])[0][items])
        pred = np.concatenate(preds)
        before = np.concatenate(base)
        report.update(
            rmse=rmse(pred, truth), rmse_raw=rmse(pred, truth, clamp=False),
            rmse_pretrained=rmse(before, truth),
        )
        report["improvement_pct"] = 100.0 * (report["rmse_pretrained"] - report["rmse"]) / report["rmse_pretrained"]
        return report
    raise ParamError(f"unknown evaluation mode {mode!r}")


# --- benchmark

BENCH_PROFILES = {"ml100k": (1682, 500), "ml1m": (3952, 500)}


def synthetic_model(m: int, d: int, seed: int = 0, scale: float = 0.01) -> ModelParams:
    rng = np.random.default_rng(seed)
    return ModelParams(
        A=rng.normal(0, scale, (m, d)), Q=rng.normal(0, scale, (m, d)), b_u_star=np.zeros(0),
        b_i_star=rng.normal(0, 0.1, m), mu=3.58, b_u=np.zeros(0), b_i=rng.normal(0, 0.3, m), avg_b_u_star=0.0,
    )


def bench(profile: str = "ml1m", bits: int = 2048, workers: int = 1, seed: int = 0,
          model: ModelParams | None = None, density: float = 0.04) -> dict:
    """Time one DIRECT query end to end and report message sizes.

    Without a trained ``model`` a synthetic one of the profile's shape is
    used; timings depend only on the shape, key size and codebook reuse.
    """
    if profile not in BENCH_PROFILES:
        raise ParamError(f"unknown bench profile {profile!r}")
    m, d = BENCH_PROFILES[profile] if model is None else (model.m, model.d)
    model = model or synthetic_model(m, d, seed)
    rng = np.random.default_rng(seed)
    rated = np.flatnonzero(rng.random(m) < density)
    ratings = {int(i) + 1: int(rng.integers(1, 6)) for i in rated}
    item_ids = np.arange(1, m + 1)

    t = {}
    t0 = time.perf_counter()
    cm = C.compress(model)
    plan = C.build_reuse_plan(cm)
    t["server_setup_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    query, session = P.client_build_query(ratings, item_ids, P.Mode.DIRECT, "paillier", bits)
    t["client_keygen_encrypt_s"] = time.perf_counter() - t0
    qframe = P.encode_frame(query)
    t0 = time.perf_counter()
    phases: dict = {}
    resp = P.server_direct(P.decode_frame(qframe), cm, plan, workers=workers, timings=phases)
    rframe = P.encode_frame(resp)
    t["server_s"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    pred = P.client_decode_response(P.decode_frame(rframe), session)
    t["client_decrypt_s"] = time.perf_counter() - t0

    expect = C.predict_fixed(cm, P.dense_row(ratings, item_ids), to_fixed(P.user_mean(P.dense_row(ratings, item_ids)), OUTPUT_EXP))
    exact = bool(np.array_equal(np.rint(pred.scores * (1 << OUTPUT_EXP)).astype(np.int64), expect.astype(np.int64)))
    total = t["client_keygen_encrypt_s"] + t["server_s"] + t["client_decrypt_s"]
    return {
        "profile": profile, "m": m, "d": d, "key_bits": bits, "workers": workers,
        "rated_items": int(rated.size),
        "pruning_ratio": cm.pruning_ratio, "reuse_ratio": cm.reuse_ratio,
        "mul_plain_with_plan": plan.n_products, "mul_plain_without_plan": 2 * m * d,
        "query_bytes": len(qframe), "response_bytes": len(rframe),
        "communication_mb": (len(qframe) + len(rframe)) / 1e6,
        "server_phases_s": {k: round(v, 4) for k, v in phases.items()},
        **{k: round(v, 4) for k, v in t.items()},
        "end_to_end_s": round(total, 4),
        "matches_plaintext": exact,
    }


def to_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=float)
