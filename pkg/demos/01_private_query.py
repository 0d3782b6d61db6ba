"""Serve a small model over loopback TCP and answer one encrypted query.

The client encrypts its rating row under a fresh Paillier key, the server
evaluates the compressed model on ciphertexts, and the client decrypts and
ranks the scores. The decrypted scores are compared with the plaintext
fixed-point pipeline.
"""
import numpy as np

from cryptorec import compress as C
from cryptorec import protocol as P
from cryptorec import service as S
from cryptorec.fixedpoint import OUTPUT_EXP, to_fixed


def main():
    model = S.synthetic_model(m=40, d=8, seed=1, scale=0.05)
    items = np.arange(1001, 1041)
    served = S.ServedModel.from_model(model, item_ids=items)
    srv, addr = S.start_server(S.Server(served, "paillier"))
    print(f"server on {addr[0]}:{addr[1]}, {served.m} items, reuse ratio {served.cm.reuse_ratio:.3f}")

    ratings = {1003: 5, 1011: 4, 1017: 1, 1030: 3}
    pred, stats = S.run_query(addr, ratings, items, backend="paillier", bits=1024)
    print(f"query {stats['query_bytes']} B, response {stats['response_bytes']} B, {stats['round_trip_s']:.2f} s")

    r = P.dense_row(ratings, items)
    plain = C.predict_fixed(served.cm, r, to_fixed(P.user_mean(r), OUTPUT_EXP)) / 2.0**OUTPUT_EXP
    print("matches plaintext pipeline:", bool(np.array_equal(pred.scores, plain)))
    print("top 5:")
    for k in pred.ranking[:5]:
        print(f"  item {items[k]}  {pred.scores[k]:.4f}")
    srv.shutdown()


if __name__ == "__main__":
    main()
