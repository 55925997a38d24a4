import numpy as np
import pytest

from progda.numerics import (EncoderState, EvaluationError, ShapeError, backprop, encode,
                             finite_diff_check, init_encoder, layer_grads_to_params)


def identity_encoder(normalize):
    return EncoderState([(np.eye(2), np.zeros(2))], activation="identity", normalize=normalize)


def test_identity_encoder_passes_input_through():
    np.testing.assert_array_equal(encode(identity_encoder(False), [3.0, 4.0]), [3.0, 4.0])


def test_identity_encoder_normalizes():
    np.testing.assert_allclose(encode(identity_encoder(True), [3.0, 4.0]), [0.6, 0.8], atol=1e-15)


def test_two_layer_forward_matches_straight_line_oracle():
    state = init_encoder(5, out_dim=4, hidden=7, seed=0)
    x = np.ones(5)
    (w1, b1), (w2, b2) = state.layers
    hidden = [np.tanh(sum(w1[i, j] * x[j] for j in range(5)) + b1[i]) for i in range(7)]
    out = np.array([sum(w2[i, j] * hidden[j] for j in range(7)) + b2[i] for i in range(4)])
    expected = out / np.sqrt(np.sum(out ** 2))
    np.testing.assert_allclose(encode(state, x), expected, rtol=1e-13, atol=1e-15)


def test_dimension_mismatch():
    with pytest.raises(ShapeError):
        encode(init_encoder(5, seed=0), np.ones(4))


def test_forward_is_deterministic():
    state = init_encoder(6, seed=3)
    x = np.random.default_rng(1).normal(size=(10, 6))
    assert encode(state, x).tobytes() == encode(state, x).tobytes()


def test_normalized_rows_have_unit_norm():
    state = init_encoder(6, seed=3)
    x = np.random.default_rng(1).normal(size=(50, 6))
    np.testing.assert_allclose(np.linalg.norm(encode(state, x), axis=1), 1.0, atol=1e-12)


def test_backprop_scalar_product_rule():
    state = EncoderState([(np.array([[2.0]]), np.zeros(1))], activation="identity", normalize=False)
    grads, dx = backprop(state, [3.0], [1.0])
    assert grads[0][0][0, 0] == 3.0
    assert grads[0][1][0] == 1.0
    assert dx[0] == 2.0


def test_backprop_zero_upstream():
    state = init_encoder(4, seed=0)
    grads, dx = backprop(state, np.ones(4), np.zeros(state.out_dim))
    assert all(not dw.any() and not db.any() for dw, db in grads)
    assert not dx.any()


@pytest.mark.parametrize("seed", range(20))
def test_backprop_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    state = init_encoder(5, out_dim=4, hidden=6, seed=seed)
    x = rng.normal(size=(3, 5))
    upstream = rng.normal(size=(3, 4))

    def loss(params):
        s = state.with_params(params)
        grads, _ = backprop(s, x, upstream)
        return float(np.sum(upstream * encode(s, x))), layer_grads_to_params(grads)

    report = finite_diff_check(loss, state, h=1e-5)
    assert report.max_rel_error < 1e-4


def test_backprop_input_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    state = init_encoder(5, out_dim=4, hidden=6, seed=0)
    x = rng.normal(size=5)
    upstream = rng.normal(size=4)

    def loss(params):
        xi = params["x"]
        _, dx = backprop(state, xi, upstream)
        return float(upstream @ encode(state, xi)), {"x": dx}

    assert finite_diff_check(loss, {"x": x}).max_rel_error < 1e-4


def test_gradcheck_quadratic_is_essentially_exact():
    rng = np.random.default_rng(7)
    theta = {"a": rng.normal(size=(3, 2)), "b": rng.normal(size=4)}

    def loss(p):
        return float(sum(np.sum(v ** 2) for v in p.values())), {k: 2 * v for k, v in p.items()}

    assert finite_diff_check(loss, theta).max_rel_error < 1e-8


def test_gradcheck_constant_parameter_has_zero_error():
    def loss(p):
        return float(np.sum(p["used"] ** 2)), {"used": 2 * p["used"]}

    report = finite_diff_check(loss, {"used": np.ones(3), "unused": np.ones(2)})
    assert dict(report.per_parameter)["unused"] == 0.0
    assert report.max_rel_error == max(e for _, e in report.per_parameter)


def test_gradcheck_detects_wrong_gradient():
    def loss(p):
        return float(np.sum(p["x"] ** 2)), {"x": -2 * p["x"]}

    assert finite_diff_check(loss, {"x": np.array([1.0, -2.0])}).max_rel_error > 1.0


def test_gradcheck_rejects_non_finite_loss():
    with pytest.raises(EvaluationError):
        finite_diff_check(lambda p: (float("nan"), {}), {"x": np.ones(2)})
