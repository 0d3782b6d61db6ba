"""Command line entry point: ``cryptorec <command> [options]``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import compress as C
from . import service as S
from .data import SplitSpec, compute_statistics, ingest, split
from .errors import ConnectError, CryptoRecError, ProtocolError
from .model import TrainingConfig, holdout_rmse, load_model, save_model, train_with_history
from .protocol import Mode

log = logging.getLogger("cryptorec")


def _config(args) -> TrainingConfig:
    base = TrainingConfig()
    return TrainingConfig(
        eta=args.lr if args.lr is not None else base.eta,
        lam=args.reg if args.reg is not None else base.lam,
        d=args.dim if args.dim is not None else base.d,
        max_iters=args.epochs if args.epochs is not None else base.max_iters,
        seed=args.seed,
    )


def cmd_train(args) -> int:
    data = compute_statistics(ingest(args.data))
    train, feed, test = split(data, SplitSpec(seed=args.seed))
    result = train_with_history(train, _config(args))
    save_model(result.model, args.out)
    S.write_items(args.out, data.item_ids)
    summary = {
        "model": str(args.out), "m": data.m, "d": result.model.d, "best_epoch": result.best_epoch,
        "holdout_rmse_by_epoch": result.val_rmse, "validation_rmse": holdout_rmse(result.model, feed, test),
    }
    print(S.to_json(summary))
    return 0


def cmd_compress(args) -> int:
    model = load_model(args.model)
    cm = C.compress(model, args.threshold)
    C.save_compressed(cm, args.out)
    src = S.items_path(args.model)
    if src.exists():
        S.items_path(args.out).write_text(src.read_text())
    print(C.report_json(C.compression_report(cm)))
    return 0


def cmd_serve(args) -> int:
    served = S.ServedModel.load(args.model, args.threshold, args.data, args.tau, args.seed)
    app = S.Server(served, args.backend, workers=args.workers)
    srv = S.TCPServer((args.host, args.port), app, args.threads)
    log.info("serving m=%d items on %s:%d (%s)", served.m, *srv.server_address[:2], args.backend)
    try:
        srv.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        srv.server_close()
    return 0


def cmd_query(args) -> int:
    addr = S.parse_addr(args.addr)
    ratings = S.read_ratings(args.ratings)
    if args.items:
        item_ids = S.read_items(args.items)
    elif args.m:
        item_ids = list(range(1, args.m + 1))
    else:
        raise CryptoRecError("the item universe is needed: pass --items FILE or --m COUNT")
    backend = args.backend
    if backend == "swhe":
        backend = f"swhe:{args.profile}"
    mode = Mode.RETRAIN if args.mode == "retrain" else Mode.DIRECT
    pred, stats = S.run_query(addr, ratings, item_ids, mode, backend, args.bits)
    text = S.predictions_csv(pred)
    if args.out and args.out != "-":
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    log.info("query %d B, response %d B, round trip %.2f s", stats["query_bytes"], stats["response_bytes"],
             stats["round_trip_s"])
    return 0


def cmd_eval(args) -> int:
    data = compute_statistics(ingest(args.data))
    config = _config(args)
    report = S.evaluate(data, args.seed, args.mode, config, args.threshold, args.max_users)
    print(S.to_json(report))
    return 0


def cmd_bench(args) -> int:
    model = load_model(args.model) if args.model else None
    report = S.bench(args.profile, args.bits, args.workers, args.seed, model=model)
    text = S.to_json(report)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cryptorec", description="Private recommendation over encrypted ratings.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def training_flags(q):
        q.add_argument("--dim", type=int)
        q.add_argument("--lr", type=float)
        q.add_argument("--reg", type=float)
        q.add_argument("--epochs", type=int)
        q.add_argument("--seed", type=int, default=0)

    q = sub.add_parser("train", help="train a model on a ratings file")
    q.add_argument("--data", required=True)
    q.add_argument("--out", required=True)
    training_flags(q)
    q.set_defaults(func=cmd_train)

    q = sub.add_parser("compress", help="prune and quantize a trained model")
    q.add_argument("--model", required=True)
    q.add_argument("--threshold", type=float, default=C.DEFAULT_THRESHOLD)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_compress)

    q = sub.add_parser("serve", help="answer encrypted queries over TCP")
    q.add_argument("--model", required=True)
    q.add_argument("--backend", choices=sorted(S.SERVE_BACKENDS), default="paillier")
    q.add_argument("--host", default="127.0.0.1")
    q.add_argument("--port", type=int, default=7700)
    q.add_argument("--threads", type=int, default=4, help="concurrent sessions")
    q.add_argument("--workers", type=int, default=1, help="processes per direct query")
    q.add_argument("--threshold", type=float, default=C.DEFAULT_THRESHOLD)
    q.add_argument("--data", help="ratings file to draw retraining regularization users from")
    q.add_argument("--tau", type=int, default=10)
    q.add_argument("--seed", type=int, default=0)
    q.set_defaults(func=cmd_serve)

    q = sub.add_parser("query", help="send an encrypted query and write predictions as CSV")
    q.add_argument("--addr", required=True, help="host:port")
    q.add_argument("--ratings", required=True, help="item_id,rating lines")
    q.add_argument("--mode", choices=["direct", "retrain"], default="direct")
    q.add_argument("--bits", type=int, default=2048)
    q.add_argument("--backend", choices=["paillier", "oracle", "swhe", "exact"], default="paillier")
    q.add_argument("--profile", default="test", help="SWHE parameter profile")
    q.add_argument("--items", help="served item ids, one per line (the model's .items file)")
    q.add_argument("--m", type=int, help="item count when ids are 1..m")
    q.add_argument("--out", help="CSV path (default stdout)")
    q.set_defaults(func=cmd_query)

    q = sub.add_parser("eval", help="train and score on a seeded split")
    q.add_argument("--data", required=True)
    q.add_argument("--mode", choices=["direct", "retrain", "nbm"], default="direct")
    q.add_argument("--threshold", type=float, default=C.DEFAULT_THRESHOLD)
    q.add_argument("--max-users", type=int)
    training_flags(q)
    q.set_defaults(func=cmd_eval)

    q = sub.add_parser("bench", help="time one encrypted DIRECT query")
    q.add_argument("--profile", choices=sorted(S.BENCH_PROFILES), default="ml1m")
    q.add_argument("--bits", type=int, default=2048)
    q.add_argument("--workers", type=int, default=1)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--model", help="trained model to bench instead of a synthetic one")
    q.add_argument("--out")
    q.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConnectError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ProtocolError as exc:
        print(f"server error: {exc}", file=sys.stderr)
        return 4
    except (CryptoRecError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
