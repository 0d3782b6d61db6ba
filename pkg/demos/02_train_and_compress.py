"""Train on MovieLens 100k, compress the model and compare accuracy.

Usage: python demos/02_train_and_compress.py [path/to/u.data]
"""
import sys
from pathlib import Path

from cryptorec import compress as C
from cryptorec import nbm
from cryptorec import service as S
from cryptorec.data import SplitSpec, compute_statistics, ingest, split
from cryptorec.model import TrainingConfig, holdout_rmse, train_with_history

DEFAULT = Path(__file__).resolve().parent.parent / "data" / "ml-100k" / "u.data"


def main():
    path = Path(sys.argv[1]) if len(sys.argv) > 1 else DEFAULT
    data = compute_statistics(ingest(path))
    train, feed, test = split(data, SplitSpec(seed=0))
    print(f"{data.n} users, {data.m} items, {data.N} ratings")

    result = train_with_history(train, TrainingConfig())
    print("held-out RMSE by epoch:", " ".join(f"{x:.4f}" for x in result.val_rmse))
    print(f"best epoch {result.best_epoch}, validation RMSE {holdout_rmse(result.model, feed, test):.4f}")

    cm = C.compress(result.model)
    report = C.compression_report(cm, result.model, feed, test)
    print(f"pruning {report['pruning_ratio']:.3%}, reuse {report['reuse_ratio']:.3%}, "
          f"RMSE after compression {holdout_rmse(cm.served_model(), feed, test):.4f}")
    plan = C.build_reuse_plan(cm)
    print(f"ciphertext scalings per query: {plan.n_products} with reuse, {2 * cm.m * cm.d} without")

    baseline = S.evaluate(data, seed=0, mode="nbm")["rmse"]
    print(f"item-based neighbourhood baseline RMSE {baseline:.4f} (k={nbm.DEFAULT_NEIGHBORS})")


if __name__ == "__main__":
    main()
