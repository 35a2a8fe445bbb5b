import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reinpool.errors import ConfigError, ShapeError
from reinpool.reward import RankedList, RewardSpec, inverse_retrieval_reward, ndcg_at_k, rank, similarity
from reinpool.store import SingleVectorIndex


def brute_force_ndcg(scores, ids, grades, k):
    """Independent oracle: bubble sort with explicit tie rule, direct sums."""
    items = list(zip(scores, ids))
    for i in range(len(items)):
        for j in range(len(items) - 1 - i):
            a, b = items[j], items[j + 1]
            if a[0] < b[0] or (a[0] == b[0] and a[1] > b[1]):
                items[j], items[j + 1] = b, a
    dcg = 0.0
    for pos, (_, i) in enumerate(items[:k]):
        dcg += grades.get(i, 0) / math.log2(pos + 2)
    ideal = sorted(grades.values(), reverse=True)[:k]
    idcg = 0.0
    for pos, g in enumerate(ideal):
        idcg += g / math.log2(pos + 2)
    return 0.0 if idcg == 0 else dcg / idcg


def ranked(*ids):
    return RankedList(tuple(ids), tuple(float(-i) for i in range(len(ids))))


@pytest.mark.parametrize("a, b, expected", [
    ((1, 0), (0.5, 0.5), 0.5),
    ((0.6, 0.8), (0.6, 0.8), 1.0),
    ((1, 0), (0, 1), 0.0),
])
def test_similarity(a, b, expected):
    assert similarity(a, b) == pytest.approx(expected, abs=1e-15)


def test_similarity_shape_mismatch():
    with pytest.raises(ShapeError):
        similarity([1, 2], [1, 2, 3])


def test_ndcg_closed_forms():
    assert ndcg_at_k(ranked("p", "a", "b", "c"), {"p": 1}, 3) == 1.0
    assert ndcg_at_k(ranked("a", "b", "p", "c"), {"p": 1}, 3) == 0.5
    assert ndcg_at_k(ranked("a", "b", "c", "p"), {"p": 1}, 3) == 0.0


def test_ndcg_two_relevant():
    value = ndcg_at_k(ranked("p1", "a", "p2", "b"), {"p1": 1, "p2": 1}, 3)
    expected = brute_force_ndcg([4, 3, 2, 1], ["p1", "a", "p2", "b"], {"p1": 1, "p2": 1}, 3)
    assert value == pytest.approx(expected, abs=1e-15)
    assert value == pytest.approx(0.919720, abs=1e-6)


def test_ndcg_no_relevant_is_zero():
    assert ndcg_at_k(ranked("a", "b"), {}, 3) == 0.0
    assert ndcg_at_k(ranked("a", "b"), {"a": 0}, 3) == 0.0


def test_rank_ties_break_by_id():
    r = rank(["c", "a", "b"], [1.0, 1.0, 2.0])
    assert r.ids == ("b", "a", "c")


@settings(max_examples=200, deadline=None)
@given(n=st.integers(1, 64), k=st.sampled_from([1, 3, 10]), data=st.data())
def test_ndcg_matches_brute_force(n, k, data):
    ids = [f"c{i:02d}" for i in range(n)]
    scores = data.draw(st.lists(st.integers(-3, 3).map(float), min_size=n, max_size=n))
    grades = dict(zip(ids, data.draw(st.lists(st.integers(0, 3), min_size=n, max_size=n))))
    value = ndcg_at_k(rank(ids, scores), grades, k)
    assert 0.0 <= value <= 1.0
    assert value == pytest.approx(brute_force_ndcg(scores, ids, grades, k), abs=1e-12)


def _pool(rng, n=64, d=8):
    ids = [f"q{i:03d}" for i in range(n)]
    return SingleVectorIndex(ids, rng.normal(size=(n, d)))


def test_unique_top_positive_scores_one():
    pool = SingleVectorIndex(["a", "b", "c"], np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]]))
    assert inverse_retrieval_reward([1.0, 0.0], {"a"}, pool) == 1.0


def test_all_ties_rank_by_id():
    pool = SingleVectorIndex(["a", "b", "c", "d"], np.zeros((4, 2)) + [[1, 0]] * 4)
    # v is orthogonal to every candidate, so rank order is a, b, c, d
    assert inverse_retrieval_reward([0.0, 1.0], {"c"}, pool) == 0.5
    assert inverse_retrieval_reward([0.0, 1.0], {"d"}, pool) == 0.0


def test_reward_matches_brute_force_sort(rng):
    for _ in range(20):
        pool = _pool(rng)
        v = rng.normal(size=8)
        positives = set(rng.choice(pool.ids, size=rng.integers(1, 5), replace=False))
        scores = [float(np.dot(row.astype(np.float64), v)) for row in pool.vectors]
        expected = brute_force_ndcg(scores, pool.ids, {p: 1 for p in positives}, 3)
        assert inverse_retrieval_reward(v, positives, pool) == pytest.approx(expected, abs=1e-12)


def test_reward_scale_invariant(rng):
    pool = _pool(rng)
    v = rng.normal(size=8)
    pos = {pool.ids[3], pool.ids[10]}
    r1 = rank(pool.ids, pool.vectors.astype(np.float64) @ v)
    r2 = rank(pool.ids, pool.vectors.astype(np.float64) @ (7.5 * v))
    assert r1.ids == r2.ids
    assert inverse_retrieval_reward(v, pos, pool) == inverse_retrieval_reward(7.5 * v, pos, pool)


def test_reward_one_iff_positives_on_top():
    pool = SingleVectorIndex(["a", "b", "c", "d"], np.array([[3.0], [2.0], [1.0], [0.0]]))
    assert inverse_retrieval_reward([1.0], {"a", "b"}, pool) == 1.0
    assert inverse_retrieval_reward([1.0], {"a", "c"}, pool) < 1.0


def test_missing_positive_is_config_error(rng):
    with pytest.raises(ConfigError):
        inverse_retrieval_reward(np.ones(8), {"nope"}, _pool(rng))


def test_negative_sampling_is_seeded(rng):
    pool = _pool(rng, n=200)
    v = rng.normal(size=8)
    spec = RewardSpec(k=3, candidate_pool_size=20)
    a = inverse_retrieval_reward(v, {"q005"}, pool, spec, rng=np.random.default_rng(7))
    b = inverse_retrieval_reward(v, {"q005"}, pool, spec, rng=np.random.default_rng(7))
    assert a == b


def test_reward_spec_validation():
    with pytest.raises(ConfigError):
        RewardSpec(k=0)
