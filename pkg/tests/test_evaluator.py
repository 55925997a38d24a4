import numpy as np
import pytest

from oracles import exhaustive_retrieval
from progda.evaluator import evaluate, split_query_gallery


def test_perfect_ranking():
    g = np.array([[0.0], [1.0], [10.0]])
    r = evaluate([[0.1]], [1], [0], g, [1, 1, 2], [1, 1, 1])
    assert r.mAP == 1.0
    assert r.rank1 == 1.0


def test_match_at_rank_two():
    g = np.array([[0.0], [1.0]])
    r = evaluate([[0.0]], [1], [0], g, [2, 1], [1, 1])
    assert r.mAP == 0.5
    np.testing.assert_array_equal(r.cmc, [0.0, 1.0])


def test_same_camera_same_label_excluded():
    g = np.array([[0.0], [5.0]])
    r = evaluate([[0.0]], [1], [0], g, [1, 1], [0, 1])
    assert r.mAP == 1.0


def test_query_without_relevant_item_is_skipped():
    r = evaluate([[0.0], [1.0]], [1, 2], [0, 0], [[0.0]], [1], [1])
    assert r.num_queries == 1
    assert r.skipped == 1


def test_ties_broken_by_instance_id():
    g = np.array([[1.0], [1.0]])
    assert evaluate([[0.0]], [1], [0], g, [2, 1], [1, 1], gallery_ids=[5, 3]).mAP == 1.0
    assert evaluate([[0.0]], [1], [0], g, [2, 1], [1, 1], gallery_ids=[3, 5]).mAP == 0.5


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        evaluate([[0.0, 1.0]], [1], [0], [[0.0]], [1], [1])


def random_instance(seed):
    rng = np.random.default_rng(seed)
    nq, ng = int(rng.integers(1, 11)), int(rng.integers(1, 31))
    d = int(rng.integers(1, 4))
    # Coarse grid coordinates so distance ties actually occur.
    qf = rng.integers(0, 3, (nq, d)).astype(float)
    gf = rng.integers(0, 3, (ng, d)).astype(float)
    return (qf, rng.integers(0, 4, nq), rng.integers(0, 3, nq), gf, rng.integers(0, 4, ng),
            rng.integers(0, 3, ng), rng.permutation(ng) + 100)


@pytest.mark.parametrize("seed", range(30))
def test_matches_exhaustive_oracle(seed):
    qf, ql, qc, gf, gl, gc, gid = random_instance(seed)
    r = evaluate(qf, ql, qc, gf, gl, gc, gallery_ids=gid)
    m, cmc = exhaustive_retrieval(qf.tolist(), ql.tolist(), qc.tolist(), gf.tolist(), gl.tolist(),
                                  gc.tolist(), gid.tolist())
    assert abs(r.mAP - m) <= 1e-12
    if cmc:
        np.testing.assert_allclose(r.cmc, cmc, atol=1e-12)
        assert np.all(np.diff(r.cmc) >= 0)


def test_split_query_gallery():
    labels = np.array([0] * 6 + [1] * 3)
    q, g = split_query_gallery(labels, every=5)
    np.testing.assert_array_equal(q, [0, 5, 6])
    assert sorted(np.concatenate([q, g]).tolist()) == list(range(9))


def test_two_relevant_at_ranks_one_and_three():
    g = np.array([[0.0], [1.0], [2.0]])
    r = evaluate([[0.0]], [1], [0], g, [1, 2, 1], [1, 1, 1])
    assert r.mAP == pytest.approx((1 + 2 / 3) / 2, rel=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_positive_scaling_leaves_metrics_unchanged(seed):
    qf, ql, qc, gf, gl, gc, gid = random_instance(seed)
    qf = qf + np.random.default_rng(seed).normal(0, 0.01, qf.shape)
    a = evaluate(qf, ql, qc, gf, gl, gc, gallery_ids=gid)
    b = evaluate(qf * 4.0, ql, qc, gf * 4.0, gl, gc, gallery_ids=gid)
    assert a.mAP == b.mAP
    np.testing.assert_array_equal(a.cmc, b.cmc)
    assert 0.0 <= a.mAP <= 1.0
