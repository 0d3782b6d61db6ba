import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import ML100K
from cryptorec.data import RatingMatrix, SplitSpec, compute_statistics, ingest, rmse, split, synthetic_ratings
from cryptorec.errors import EmptyDataset, EmptyEvalError, InvalidRating, ItemMapError, ParseError


def test_single_entry_statistics():
    data = compute_statistics([(0, 0, 4)])
    assert data.global_mean == 4
    assert data.user_mean[0] == 4 and data.item_mean[0] == 4
    assert data.N == 1


def test_symmetric_pair():
    data = compute_statistics([(0, 0, 1), (0, 1, 5)])
    assert data.user_mean[0] == 3
    assert data.global_mean == 3


def test_empty_and_invalid():
    with pytest.raises(EmptyDataset):
        compute_statistics([])
    with pytest.raises(InvalidRating):
        compute_statistics([(0, 0, 6)])
    with pytest.raises(InvalidRating):
        compute_statistics([(0, 0, 0)])


def test_duplicates_keep_last():
    data = compute_statistics([(1, 1, 2), (1, 2, 3), (1, 1, 5)])
    assert data.N == 2
    assert data.row(0).tolist() == [5, 3]


def test_explicit_item_universe():
    data = compute_statistics([(1, 20, 4)], item_ids=[10, 20, 30])
    assert data.m == 3
    assert data.row(0).tolist() == [0, 4, 0]
    assert data.item_mean.tolist() == [4.0, 4.0, 4.0]  # unseen items fall back to the global mean
    with pytest.raises(ItemMapError):
        compute_statistics([(1, 40, 4)], item_ids=[10, 20, 30])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 8), st.integers(0, 8), st.integers(1, 5)), min_size=1, max_size=60))
def test_statistics_match_direct_counting(triples):
    data = compute_statistics(triples)
    last = {}
    for u, i, r in triples:
        last[(u, i)] = r
    assert data.N == len(last)
    assert data.global_mean == pytest.approx(sum(last.values()) / len(last), rel=1e-15)
    phi = data.phi.toarray()
    R = data.dense()
    assert ((R > 0) == (phi == 1)).all()
    for k, u in enumerate(data.user_ids):
        vals = [r for (uu, _), r in last.items() if uu == u]
        assert data.user_mean[k] == pytest.approx(np.mean(vals))
    for k, i in enumerate(data.item_ids):
        vals = [r for (_, ii), r in last.items() if ii == i]
        assert data.item_mean[k] == pytest.approx(np.mean(vals))


def test_ingest_formats(tmp_path):
    p = tmp_path / "r.dat"
    p.write_text("1::10::4::978300760\n2::10::3::978300761\n")
    assert ingest(p).tolist() == [[1, 10, 4], [2, 10, 3]]
    assert ingest(p, fmt="ml-delim").tolist() == [[1, 10, 4], [2, 10, 3]]
    t = tmp_path / "r.tsv"
    t.write_text("1\t10\t4\t5\n1\t10\t2\t6\n")
    assert ingest(t, fmt="tsv").tolist() == [[1, 10, 2]]


def test_ingest_rejects_malformed(tmp_path):
    p = tmp_path / "bad.dat"
    p.write_text("a::b::c\n")
    with pytest.raises(ParseError) as err:
        ingest(p)
    assert err.value.line == 1
    p.write_text("1::2::3\n1::2\n")
    with pytest.raises(ParseError) as err:
        ingest(p)
    assert err.value.line == 2


@pytest.mark.skipif(not ML100K.exists(), reason="ml-100k not present under data/")
def test_ml100k_count_and_mean():
    triples = ingest(ML100K, fmt="tsv")
    assert len(triples) == 100000
    # independent single pass over the raw file
    total = count = 0
    with open(ML100K) as fh:
        for line in fh:
            total += int(line.split("\t")[2])
            count += 1
    data = compute_statistics(triples)
    assert data.N == count
    assert data.global_mean == total / count


def _check_partition(data, spec):
    train, feed, test = split(data, spec)
    assert set(train.user_ids).isdisjoint(feed.user_ids)
    assert (feed.user_ids == test.user_ids).all()
    assert train.N + feed.N + test.N == data.N
    assert feed.ratings.multiply(test.ratings).nnz == 0
    idx = {u: k for k, u in enumerate(data.user_ids)}
    rows = np.array([idx[u] for u in feed.user_ids])
    recombined = (feed.ratings + test.ratings).toarray()
    assert (recombined == data.ratings[rows].toarray()).all()
    trows = np.array([idx[u] for u in train.user_ids])
    assert (train.ratings.toarray() == data.ratings[trows].toarray()).all()
    return train, feed, test


def test_split_partition_and_determinism(small_data):
    spec = SplitSpec(seed=7)
    a = _check_partition(small_data, spec)
    b = split(small_data, spec)
    for x, y in zip(a, b):
        assert (x.ratings != y.ratings).nnz == 0
        assert (x.user_ids == y.user_ids).all()
    assert abs(a[1].n - 0.2 * small_data.n) <= 1


@pytest.mark.skipif(not ML100K.exists(), reason="ml-100k not present under data/")
def test_split_partition_ml100k():
    data = compute_statistics(ingest(ML100K, fmt="tsv"))
    train, feed, test = _check_partition(data, SplitSpec(seed=0))
    assert abs(feed.n - 0.2 * data.n) <= 1


def test_single_rating_validation_user_goes_to_feed():
    data = compute_statistics([(u, 0, 3) for u in range(10)])
    _, feed, test = split(data, SplitSpec(seed=1))
    assert feed.N == feed.n and test.N == 0


def test_rmse():
    assert rmse([1, 2, 3], [1, 2, 3]) == 0
    assert rmse([1.5, 2.5, 3.5], [1, 2, 3]) == pytest.approx(0.5)
    assert rmse([7.0], [5]) == 0.0
    assert rmse([7.0], [5], clamp=False) == 2.0
    with pytest.raises(EmptyEvalError):
        rmse([], [])


def test_synthetic_ratings_are_valid():
    t = synthetic_ratings(50, 30, 0.2, seed=1)
    data = compute_statistics(t)
    assert isinstance(data, RatingMatrix)
    assert np.diff(data.ratings.indptr).min() >= 2
