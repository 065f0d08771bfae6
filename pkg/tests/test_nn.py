import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ract import nn
from ract.nn import (
    AdamState,
    AffineLayer,
    BatchNormState,
    activation_backward,
    activation_forward,
    adam_step,
    affine_backward,
    affine_forward,
    batch_norm_backward,
    batch_norm_forward,
    glorot_init,
    init_affine,
    log_softmax,
    mlp_backward,
    mlp_forward,
    sigmoid,
    softmax_stable,
)


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(1e-12, np.max(np.abs(a) + np.abs(b))))


def test_glorot_bounds(rng):
    w = glorot_init(30, 50, rng)
    assert w.shape == (30, 50)
    assert np.max(np.abs(w)) <= np.sqrt(6 / 80)
    # uniform on [-b, b] has variance b^2 / 3 = 2 / (in + out)
    assert np.var(glorot_init(300, 500, rng)) == pytest.approx(2 / 800, rel=0.05)


def test_affine_shape_error_names_both_shapes(rng):
    layer = init_affine(3, 2, rng)
    with pytest.raises(ValueError, match=r"\(4, 5\).*\(3, 2\)|\(3, 2\).*\(4, 5\)"):
        affine_forward(layer, np.zeros((4, 5)))


def test_affine_gradients(rng):
    layer = init_affine(4, 3, rng)
    x = rng.standard_normal((5, 4))
    up = rng.standard_normal((5, 3))

    def f():
        return float(np.sum(affine_forward(layer, x) * up))

    gx, gw, gb = affine_backward(layer, x, up)
    assert rel_err(gx, numeric_grad(f, x)) < 1e-7
    assert rel_err(gw, numeric_grad(f, layer.weight)) < 1e-7
    assert rel_err(gb, numeric_grad(f, layer.bias)) < 1e-7


@pytest.mark.parametrize("kind", ["tanh", "relu", "sigmoid", "exp", "linear"])
def test_activation_gradients(kind, rng):
    x = rng.standard_normal((4, 6))
    x[np.abs(x) < 1e-3] = 0.1  # keep relu away from its kink
    up = rng.standard_normal((4, 6))

    def f():
        return float(np.sum(activation_forward(kind, x) * up))

    y = activation_forward(kind, x)
    g = activation_backward(kind, x, y, up)
    assert rel_err(g, numeric_grad(f, x)) < 1e-7


def test_sigmoid_is_stable_at_extremes():
    with np.errstate(over="raise", invalid="raise"):
        y = sigmoid(np.array([-1000.0, -50.0, 0.0, 50.0, 1000.0]))
    assert y[0] == 0.0 and y[-1] == 1.0 and y[2] == 0.5


def test_exp_is_clamped_and_counted():
    before = nn.saturation_counts["exp"]
    y = activation_forward("exp", np.array([[800.0, 1.0]]))
    assert np.isfinite(y).all()
    assert nn.saturation_counts["exp"] == before + 1


def test_unknown_activation():
    with pytest.raises(ValueError):
        activation_forward("gelu", np.zeros((1, 1)))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (3, 7), elements=st.floats(-500, 500)))
def test_softmax_rows_sum_to_one(logits):
    p = softmax_stable(logits)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.exp(log_softmax(logits)), p, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (2, 5), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_shift_invariance(logits, c):
    np.testing.assert_allclose(softmax_stable(logits + c), softmax_stable(logits), atol=1e-12)


def test_batch_norm_train_mode_normalizes(rng):
    x = rng.standard_normal((64, 3)) * [1, 10, 100] + [0, 5, -7]
    state = BatchNormState.create(3)
    y, _ = batch_norm_forward(x, state, "train")
    np.testing.assert_allclose(y.mean(axis=0), 0, atol=1e-10)
    np.testing.assert_allclose(y.var(axis=0), 1, atol=1e-3)


def test_batch_norm_running_stats(rng):
    state = BatchNormState.create(2)
    x1 = rng.standard_normal((10, 2)) + 3.0
    batch_norm_forward(x1, state, "train")
    # first update copies the batch statistics
    np.testing.assert_allclose(state.running_mean, x1.mean(axis=0))
    x2 = rng.standard_normal((10, 2)) - 1.0
    batch_norm_forward(x2, state, "train")
    np.testing.assert_allclose(state.running_mean, 0.99 * x1.mean(axis=0) + 0.01 * x2.mean(axis=0))
    mean = state.running_mean.copy()
    batch_norm_forward(x2, state, "train", update_running=False)
    np.testing.assert_array_equal(state.running_mean, mean)
    y, _ = batch_norm_forward(x2[:1], state, "eval")
    expected = (x2[:1] - state.running_mean) / np.sqrt(state.running_var + state.epsilon)
    np.testing.assert_allclose(y, expected)


def test_batch_norm_needs_two_rows_in_train_mode():
    with pytest.raises(ValueError):
        batch_norm_forward(np.zeros((1, 2)), BatchNormState.create(2), "train")


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_batch_norm_gradients(mode, rng):
    state = BatchNormState.create(3)
    state.gamma = rng.uniform(0.5, 2, 3)
    state.beta_shift = rng.standard_normal(3)
    batch_norm_forward(rng.standard_normal((8, 3)), state, "train")
    x = rng.standard_normal((6, 3)) * 4
    up = rng.standard_normal((6, 3))

    def f():
        return float(np.sum(batch_norm_forward(x, state, mode, update_running=False)[0] * up))

    _, cache = batch_norm_forward(x, state, mode, update_running=False)
    gx, gg, gb = batch_norm_backward(cache, up)
    assert rel_err(gx, numeric_grad(f, x)) < 1e-6
    assert rel_err(gg, numeric_grad(f, state.gamma)) < 1e-6
    assert rel_err(gb, numeric_grad(f, state.beta_shift)) < 1e-6


def test_mlp_gradients(rng):
    layers = [init_affine(5, 4, rng), init_affine(4, 3, rng)]
    acts = ["tanh", "sigmoid"]
    x = rng.standard_normal((3, 5))
    up = rng.standard_normal((3, 3))

    def f():
        return float(np.sum(mlp_forward(layers, acts, x)[0] * up))

    out, cache = mlp_forward(layers, acts, x)
    gx, grads = mlp_backward(layers, acts, cache, up)
    assert rel_err(gx, numeric_grad(f, x)) < 1e-7
    for layer, (gw, gb) in zip(layers, grads):
        assert rel_err(gw, numeric_grad(f, layer.weight)) < 1e-7
        assert rel_err(gb, numeric_grad(f, layer.bias)) < 1e-7


def test_adam_first_step_moves_by_lr():
    # with bias correction the first step is lr * g / (|g| + eps)
    params = {"w": np.array([1.0, -2.0])}
    state = AdamState(lr=0.1)
    adam_step(params, {"w": np.array([3.0, -0.5])}, state)
    np.testing.assert_allclose(params["w"], [0.9, -1.9], atol=1e-7)
    assert state.step == 1


def test_adam_matches_reference_recursion():
    params = {"a": np.array([0.5])}
    state = AdamState(lr=1e-3)
    m = v = 0.0
    x = 0.5
    for t in range(1, 6):
        g = 2 * x
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x -= 1e-3 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        adam_step(params, {"a": 2 * params["a"]}, state)
    assert params["a"][0] == pytest.approx(x, abs=1e-15)


def test_adam_rejects_bad_gradients():
    params = {"w": np.zeros(2)}
    with pytest.raises(FloatingPointError, match="w"):
        adam_step(params, {"w": np.array([np.nan, 0.0])}, AdamState())
    with pytest.raises(ValueError):
        adam_step(params, {"v": np.zeros(2)}, AdamState())
    with pytest.raises(ValueError):
        adam_step(params, {"w": np.zeros(3)}, AdamState())


def test_affine_layer_rejects_mismatched_bias():
    with pytest.raises(ValueError):
        AffineLayer(np.zeros((2, 3)), np.zeros(2))


def test_affine_hand_cases():
    layer = AffineLayer(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([1.0, 1.0]))
    np.testing.assert_array_equal(affine_forward(layer, np.array([[1.0, 1.0]])), [[5.0, 7.0]])
    ident = AffineLayer(np.eye(2), np.zeros(2))
    np.testing.assert_array_equal(affine_forward(ident, np.array([[3.0, 4.0]])), [[3.0, 4.0]])
    shift = AffineLayer(np.ones((2, 2)), np.array([5.0, 6.0]))
    np.testing.assert_array_equal(affine_forward(shift, np.zeros((1, 2))), [[5.0, 6.0]])


def test_affine_backward_scalar_case():
    layer = AffineLayer(np.array([[2.0]]), np.zeros(1))
    gx, gw, gb = affine_backward(layer, np.array([[3.0]]), np.array([[1.0]]))
    assert (gx, gw, gb) == ([[2.0]], [[3.0]], [1.0])
    gx, gw, gb = affine_backward(layer, np.array([[3.0]]), np.zeros((1, 1)))
    assert not gx.any() and not gw.any() and not gb.any()


def test_activation_closed_forms():
    assert activation_forward("tanh", np.zeros((1, 1)))[0, 0] == 0.0
    assert activation_forward("relu", np.array([[-1.0]]))[0, 0] == 0.0
    assert sigmoid(np.array([0.0]))[0] == 0.5
    assert sigmoid(np.array([np.log(3.0)]))[0] == pytest.approx(0.75, abs=1e-15)


def test_softmax_closed_forms():
    np.testing.assert_allclose(softmax_stable(np.array([[0.0, np.log(3.0)]])), [[0.25, 0.75]], atol=1e-15)
    np.testing.assert_array_equal(softmax_stable(np.array([[1000.0, 1000.0]])), [[0.5, 0.5]])
    np.testing.assert_allclose(softmax_stable(np.full((1, 4), 7.0)), 0.25)


def test_batch_norm_two_point_batch():
    y, _ = batch_norm_forward(np.array([[0.0], [2.0]]), BatchNormState.create(1), "train")
    np.testing.assert_allclose(y, [[-1.0], [1.0]], atol=1e-3)


def test_glorot_unit_bound_and_determinism():
    a = glorot_init(3, 3, np.random.default_rng(7))
    b = glorot_init(3, 3, np.random.default_rng(7))
    np.testing.assert_array_equal(a, b)
    assert np.max(np.abs(a)) <= 1.0
    w = glorot_init(1, 1000, np.random.default_rng(0))
    sigma = np.sqrt(6 / 1001) / np.sqrt(3)
    assert abs(w.mean()) < 3 * sigma / np.sqrt(1000)


def test_adam_zero_gradient_and_quadratic():
    params = {"w": np.array([1.0])}
    state = AdamState(lr=0.1)
    adam_step(params, {"w": np.zeros(1)}, state)
    assert params["w"][0] == 1.0 and state.step == 1
    state = AdamState(lr=0.1)
    for _ in range(100):
        adam_step(params, {"w": 2 * params["w"]}, state)
    assert abs(params["w"][0]) < 0.1
