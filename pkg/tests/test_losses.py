import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from progda import losses
from progda.clustering import DbscanParams, dbscan
from progda.losses import (ClassifierHead, ContrastiveBatch, DegenerateBatchError, LossValue, SourceTerms,
                           TargetTerms, ccl_loss, combined_loss, cross_entropy, cross_entropy_logits,
                           fourier_ce, init_head_from_centroids, triplet_loss)
from progda.numerics import backprop, encode, finite_diff_check, init_encoder, layer_grads_to_params


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def random_unit(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


# --- contrastive -------------------------------------------------------------

def test_ccl_single_negative_equal_scores_is_zero():
    b = ContrastiveBatch([[1.0, 0.0]], [[0.0, 1.0]], [np.array([[0.0, -1.0]])])
    assert ccl_loss(b, tau=1.0, include_positive=False).value == pytest.approx(0.0, abs=1e-15)


def test_ccl_two_negatives_gives_log2():
    b = ContrastiveBatch([[1.0, 0.0]], [[0.0, 1.0]], [np.array([[0.0, -1.0], [0.0, 1.0]])])
    assert ccl_loss(b, tau=1.0, include_positive=False).value == pytest.approx(math.log(2), rel=1e-12)


def test_ccl_bounded_form_small_value():
    a, p, n = [1.0, 0.0], [0.7, math.sqrt(1 - 0.49)], [0.0, 1.0]
    b = ContrastiveBatch([a], [p], [np.array([n])])
    expected = math.log1p(math.exp(-0.7 / 0.07))  # 4.5399e-05
    assert ccl_loss(b, tau=0.07, include_positive=True).value == pytest.approx(expected, rel=1e-9)


def test_ccl_requires_negatives():
    with pytest.raises(DegenerateBatchError):
        ccl_loss(ContrastiveBatch([[1.0, 0.0]], [[1.0, 0.0]], [np.empty((0, 2))]))


@pytest.mark.parametrize("include_positive", [True, False])
@pytest.mark.parametrize("seed", range(20))
def test_ccl_gradients(seed, include_positive):
    rng = np.random.default_rng(seed)
    a, p = random_unit(rng, 4, 6), random_unit(rng, 4, 6)
    negs = [random_unit(rng, int(m), 6) for m in rng.integers(1, 8, size=4)]

    def loss(params):
        lv = ccl_loss(ContrastiveBatch(params["anchors"], params["positives"], negs), 0.5, include_positive)
        return lv.value, lv.grads

    assert finite_diff_check(loss, {"anchors": a, "positives": p}).max_rel_error < 1e-4


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(-0.9, 0.9))
def test_ccl_nonnegative_and_decreasing_in_positive_similarity(seed, base):
    rng = np.random.default_rng(seed)
    negs = [random_unit(rng, 5, 2)]
    a = np.array([[1.0, 0.0]])

    def value(cos):
        p = np.array([[cos, math.sqrt(1 - cos * cos)]])
        return ccl_loss(ContrastiveBatch(a, p, negs), 0.07, True).value

    lo, hi = value(base), value(base + 0.05)
    assert lo >= 0 and hi >= 0
    assert hi < lo or lo == hi == 0.0


def test_ccl_permutation_invariant_in_negatives():
    rng = np.random.default_rng(3)
    a, p = random_unit(rng, 1, 5), random_unit(rng, 1, 5)
    negs = random_unit(rng, 9, 5)
    v1 = ccl_loss(ContrastiveBatch(a, p, [negs])).value
    v2 = ccl_loss(ContrastiveBatch(a, p, [negs[rng.permutation(9)]])).value
    assert v1 == pytest.approx(v2, rel=1e-13)


def test_hardest_positive_is_least_similar_same_label():
    f = np.array([[1.0, 0.0], [0.8, 0.6], [0.0, 1.0], [-1.0, 0.0]])
    idx = losses.hardest_positive_indices(f, [0, 0, 0, 1])
    np.testing.assert_array_equal(idx, [2, 2, 0, -1])


# --- cross-entropy -------------------------------------------------------------

def test_ce_uniform_logits():
    assert cross_entropy_logits([[0.0, 0.0]], [0]).value == pytest.approx(math.log(2), rel=1e-14)


def test_ce_saturated_is_stable():
    lv = cross_entropy_logits([[1000.0, 0.0]], [0])
    assert np.isfinite(lv.value) and lv.value == pytest.approx(0.0, abs=1e-300)


def test_ce_label_out_of_range():
    with pytest.raises(ValueError):
        cross_entropy(ClassifierHead(np.zeros((2, 3)), np.zeros(2)), np.ones(3), [2])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(-50, 50))
def test_ce_shift_invariance(seed, c):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(3, 4))
    labels = rng.integers(0, 4, size=3)
    a = cross_entropy_logits(logits, labels).value
    b = cross_entropy_logits(logits + c, labels).value
    assert abs(a - b) < 1e-10


@pytest.mark.parametrize("seed", range(20))
def test_ce_gradients(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 3, size=5)
    params = {"features": rng.normal(size=(5, 4)), "head.weight": rng.normal(size=(3, 4)),
              "head.bias": rng.normal(size=3)}

    def loss(p):
        lv = cross_entropy(ClassifierHead(p["head.weight"], p["head.bias"]), p["features"], labels)
        return lv.value, lv.grads

    assert finite_diff_check(loss, params).max_rel_error < 1e-4


# --- triplet -------------------------------------------------------------

def test_triplet_satisfied_margin():
    x = np.array([[0.0, 0.0], [0.5, 0.0], [0.0, 1.0], [0.5, 1.0]])
    assert triplet_loss(x, [0, 0, 1, 1], 0.3).value == 0.0


def test_triplet_forced_arithmetic():
    x = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 0.5], [1.0, 0.5]])
    assert triplet_loss(x, [0, 0, 1, 1], 0.3).value == pytest.approx(0.8, rel=1e-14)


def test_triplet_well_separated_batch_is_zero():
    rng = np.random.default_rng(0)
    x = np.concatenate([rng.normal(0, 0.01, (4, 3)), rng.normal(5, 0.01, (4, 3))])
    assert triplet_loss(x, [0] * 4 + [1] * 4).value == 0.0


def test_triplet_degenerate_batch():
    with pytest.raises(DegenerateBatchError):
        triplet_loss(np.eye(3), [0, 1, 2])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(-100, 100))
def test_triplet_translation_invariance(seed, shift):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(8, 3))
    labels = np.repeat([0, 1], 4)
    a = triplet_loss(x, labels).value
    b = triplet_loss(x + shift, labels).value
    assert a == pytest.approx(b, abs=1e-9)


@pytest.mark.parametrize("seed", range(20))
def test_triplet_gradients(seed):
    rng = np.random.default_rng(seed)
    labels = np.repeat([0, 1, 2], 3)
    x = rng.normal(size=(9, 4))

    def loss(p):
        lv = triplet_loss(p["features"], labels, margin=1.0)
        return lv.value, lv.grads

    assert finite_diff_check(loss, {"features": x}).max_rel_error < 1e-4


# --- Fourier cross-entropy -----------------------------------------------------

def test_fourier_ce_zero_head():
    head = ClassifierHead(np.zeros((2, 4)), np.zeros(2))
    assert fourier_ce(head, [1.0, 0.0, 0.0, 0.0], [0]).value == pytest.approx(math.log(2), rel=1e-14)


def test_fourier_ce_deterministic():
    rng = np.random.default_rng(0)
    head = ClassifierHead(rng.normal(size=(3, 8)), rng.normal(size=3))
    f = rng.normal(size=(2, 8))
    assert fourier_ce(head, f, [0, 2]).value == fourier_ce(head, f.copy(), [0, 2]).value


@pytest.mark.parametrize("seed", range(20))
def test_fourier_ce_end_to_end_through_encoder(seed):
    rng = np.random.default_rng(seed)
    enc = init_encoder(6, out_dim=8, hidden=10, seed=seed)
    x = rng.normal(size=(4, 6))
    labels = rng.integers(0, 3, size=4)
    head = ClassifierHead(rng.normal(size=(3, 8)), rng.normal(size=3))
    params = {**enc.params(), "head.weight": head.weight, "head.bias": head.bias}

    def loss(p):
        state = enc.with_params(p)
        f = encode(state, x)
        lv = fourier_ce(ClassifierHead(p["head.weight"], p["head.bias"]), f, labels)
        grads, _ = backprop(state, x, lv.grads["features"])
        return lv.value, {**layer_grads_to_params(grads), "head.weight": lv.grads["head.weight"],
                          "head.bias": lv.grads["head.bias"]}

    assert finite_diff_check(loss, params).max_rel_error < 1e-4


# --- combined objective ------------------------------------------------------

def lv(value, key="g"):
    return LossValue(value, {key: np.array([value])})


def test_combined_arithmetic():
    tgt = TargetTerms(ccl=lv(1.0, "c"), ce=lv(2.0, "s"), fourier_ce=lv(3.0, "f"))
    out = combined_loss(SourceTerms(ce=lv(5.0, "src")), tgt, 0.0, 1.0, 0.1, 0.7)
    assert out.value == pytest.approx(2.4, rel=1e-14)
    assert "src" not in out.grads


def test_combined_pretraining_is_source_only():
    src = SourceTerms(ce=lv(1.5, "a"), triplet=lv(0.5, "b"))
    tgt = TargetTerms(ccl=lv(1.0), ce=lv(2.0), fourier_ce=lv(3.0))
    out = combined_loss(src, tgt, 0.8, 0.0, 0.1, 0.7)
    assert out.value == 0.8 * 2.0
    assert set(out.grads) == {"a", "b"}


def test_combined_gamma_one_drops_fourier():
    tgt = TargetTerms(ccl=lv(1.0, "c"), ce=lv(2.0, "s"), fourier_ce=lv(3.0, "f"))
    out = combined_loss(SourceTerms(), tgt, 0.0, 1.0, 0.1, 1.0)
    assert "f" not in out.grads
    assert out.value == pytest.approx(0.1 + 2.0)


@settings(max_examples=50, deadline=None)
@given(*[st.floats(0, 10) for _ in range(5)], st.floats(0, 1), st.floats(0, 2), st.floats(0, 2),
       st.floats(0, 2))
def test_combined_is_linear_in_components(ls_, ccl, spa, fre, src, gamma, lam_s, lam_t, delta):
    out = combined_loss(SourceTerms(ce=LossValue(src)), TargetTerms(ccl=LossValue(ccl), ce=LossValue(spa),
                                                                    fourier_ce=LossValue(fre)),
                        lam_s, lam_t, delta, gamma)
    expected = lam_s * src + lam_t * (delta * ccl + gamma * spa + (1 - gamma) * fre)
    assert out.value == pytest.approx(expected, rel=1e-12, abs=1e-12)


def test_combined_rejects_bad_weights():
    with pytest.raises(ValueError):
        combined_loss(SourceTerms(), TargetTerms(), 1.0, 1.0, 0.1, 1.5)


# --- centroid heads ------------------------------------------------------------

def test_head_from_single_centroid():
    head = init_head_from_centroids(np.array([[0.0, 1.0]]))
    assert head.num_classes == 1
    np.testing.assert_array_equal(head.weight, [[0.0, 1.0]])
    np.testing.assert_array_equal(head.bias, [0.0])


def test_head_from_orthogonal_centroids_prefers_own_class():
    head = init_head_from_centroids(np.array([[1.0, 0.0], [0.0, 1.0]]))
    assert head.logits(np.array([1.0, 0.0])).argmax() == 0
    assert head.logits(np.array([0.0, 1.0])).argmax() == 1


def test_head_requires_clusters():
    with pytest.raises(ValueError):
        init_head_from_centroids(np.empty((0, 3)))


def test_head_rows_match_mean_then_normalize_oracle():
    rng = np.random.default_rng(0)
    centres = random_unit(rng, 3, 4) * 3
    feats = np.concatenate([c + rng.normal(0, 0.05, (6, 4)) for c in centres])
    feats /= np.linalg.norm(feats, axis=1, keepdims=True)
    lab = dbscan(feats, DbscanParams(eps=0.4, min_pts=3))
    assert lab.num_clusters == 3
    head = init_head_from_centroids(lab)
    for c in range(3):
        members = [feats[i] for i in range(len(feats)) if lab.assignment[i] == c]
        mean = [sum(m[j] for m in members) / len(members) for j in range(4)]
        norm = math.sqrt(sum(v * v for v in mean))
        np.testing.assert_allclose(head.weight[c], [v / norm for v in mean], rtol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(lab.centroids, axis=1), 1.0, atol=1e-12)
