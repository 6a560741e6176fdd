import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from specblocks.errors import InvalidArgumentError, NumericError
from specblocks.nnet import (
    ACTIVATIONS,
    MlpParams,
    adamw_init,
    adamw_step,
    grad_param_of_directional_input_gradient,
    init_mlp,
    mlp_forward,
    mlp_input_gradient,
    scheduler_epoch,
)


def _straight_line(p, x):
    h = x
    for W, b in p.layers[:-1]:
        z = h @ W + b
        h = np.array([0.5 * zi * (1 + math.erf(zi / math.sqrt(2))) for zi in z])
    W, b = p.layers[-1]
    return h @ W + b


def test_zero_net_outputs_zero():
    p = MlpParams([(np.zeros((3, 4)), np.zeros(4)), (np.zeros((4, 1)), np.zeros(1))])
    assert mlp_forward(p, np.ones(3)).tolist() == [0.0]
    np.testing.assert_array_equal(mlp_input_gradient(p, np.ones(3)), 0)


def test_linear_layer():
    W, b = np.arange(6.0).reshape(3, 2), np.array([0.5, -1.0])
    x = np.array([1.0, -2.0, 0.5])
    p = MlpParams([(W, b)])
    np.testing.assert_allclose(mlp_forward(p, x), x @ W + b)


def test_forward_matches_straight_line_eval():
    p = init_mlp([4, 6, 5, 1], seed=3)
    x = np.random.default_rng(0).standard_normal(4)
    np.testing.assert_allclose(mlp_forward(p, x), _straight_line(p, x), rtol=1e-13)


def test_gelu_matches_erf_oracle():
    z = np.linspace(-6, 6, 101)
    want = np.array([zi * 0.5 * (1 + math.erf(zi / math.sqrt(2))) for zi in z])
    np.testing.assert_allclose(ACTIVATIONS["gelu"][0](z), want, atol=1e-12)


@pytest.mark.parametrize("act", ["gelu", "tanh", "softplus"])
def test_activation_derivatives_fd(act):
    s, d1, d2 = ACTIVATIONS[act]
    z = np.linspace(-3, 3, 13)
    h = 1e-5
    np.testing.assert_allclose(d1(z), (s(z + h) - s(z - h)) / (2 * h), rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(d2(z), (d1(z + h) - d1(z - h)) / (2 * h), rtol=1e-6, atol=1e-9)


def test_linear_net_gradient():
    w = np.array([[1.5], [-2.0], [0.25]])
    p = MlpParams([(w, np.array([3.0]))])
    np.testing.assert_allclose(mlp_input_gradient(p, np.zeros(3)), w[:, 0])
    v = np.array([0.5, 1.0, -1.0])
    g = grad_param_of_directional_input_gradient(p, np.zeros(3), v)
    np.testing.assert_allclose(g[0][:, 0], v)
    np.testing.assert_array_equal(g[1], 0)


@pytest.mark.parametrize("seed", range(20))
def test_input_gradient_fd(seed):
    rng = np.random.default_rng(seed)
    p = init_mlp([5, 8, 8, 1], seed=seed)
    x = rng.standard_normal(5)
    h = 1e-5
    fd = np.array([(mlp_forward(p, x + h * e) - mlp_forward(p, x - h * e))[0] / (2 * h) for e in np.eye(5)])
    g = mlp_input_gradient(p, x)
    assert np.max(np.abs(g - fd)) <= 1e-6 * max(1.0, np.abs(fd).max())


@pytest.mark.parametrize("seed", range(20))
def test_mixed_second_derivative_fd(seed):
    rng = np.random.default_rng(100 + seed)
    p = init_mlp([3, 6, 5, 1], activation=["gelu", "tanh", "softplus"][seed % 3], seed=seed)
    X = rng.standard_normal((4, 3))
    V = rng.standard_normal((4, 3))
    g = grad_param_of_directional_input_gradient(p, X, V)

    def objective(q):
        return float(np.sum(mlp_input_gradient(q, X) * V))

    h = 1e-6
    arrays = p.arrays()
    for k, arr in enumerate(arrays):
        fd = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            qp, qm = p.copy(), p.copy()
            qp.arrays()[k][idx] += h
            qm.arrays()[k][idx] -= h
            fd[idx] = (objective(qp) - objective(qm)) / (2 * h)
        assert np.max(np.abs(g[k] - fd)) <= 1e-5 * max(1.0, np.abs(fd).max())


def test_zero_direction_gives_zero():
    p = init_mlp([3, 4, 1], seed=0)
    g = grad_param_of_directional_input_gradient(p, np.ones(3), np.zeros(3))
    assert all(not np.any(x) for x in g)


def test_shape_errors():
    p = init_mlp([3, 4, 2], seed=0)
    with pytest.raises(InvalidArgumentError):
        mlp_forward(p, np.zeros(4))
    with pytest.raises(InvalidArgumentError):
        mlp_input_gradient(p, np.zeros(3))
    q = init_mlp([3, 4, 1], seed=0)
    with pytest.raises(InvalidArgumentError):
        grad_param_of_directional_input_gradient(q, np.zeros(3), np.zeros(2))
    with pytest.raises(InvalidArgumentError):
        MlpParams([(np.zeros((3, 4)), np.zeros(4)), (np.zeros((5, 1)), np.zeros(1))])
    with pytest.raises(InvalidArgumentError):
        MlpParams([(np.zeros((3, 4)), np.zeros(4))], activation="relu")


def test_init_schemes_bounds_and_determinism():
    a = init_mlp([16, 32, 1], seed=7)
    b = init_mlp([16, 32, 1], seed=7)
    for x, y in zip(a.arrays(), b.arrays()):
        np.testing.assert_array_equal(x, y)
    assert np.abs(a.layers[0][0]).max() <= math.sqrt(6 / 16)
    assert not a.layers[0][1].any()
    c = init_mlp([16, 32, 1], seed=7, scheme="fan_in_uniform")
    assert np.abs(c.layers[0][0]).max() <= 0.25 and np.abs(c.layers[0][1]).max() <= 0.25
    assert c.layers[0][1].any()
    with pytest.raises(InvalidArgumentError):
        init_mlp([2, 1], scheme="xavier")


def test_dict_roundtrip():
    p = init_mlp([3, 5, 1], activation="tanh", seed=2)
    q = MlpParams.from_dict(p.to_dict())
    assert q.activation == "tanh"
    for x, y in zip(p.arrays(), q.arrays()):
        np.testing.assert_array_equal(x, y)


# -- AdamW ------------------------------------------------------------------------

def test_adam_zero_gradient_is_noop():
    p = [np.array([1.0, -2.0])]
    opt = adamw_init(p, lr=0.1)
    adamw_step(p, [np.zeros(2)], opt)
    np.testing.assert_array_equal(p[0], [1.0, -2.0])


def test_adam_first_step_by_hand():
    p = [np.array([0.0])]
    opt = adamw_init(p, lr=0.1)
    adamw_step(p, [np.array([1.0])], opt)
    # m = 0.1, v = 0.001, mhat = 1, vhat = 1 -> step lr * 1 / (1 + eps)
    assert p[0][0] == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)
    assert opt.step == 1


def test_adam_weight_decay_only():
    p = [np.array([2.0])]
    opt = adamw_init(p, lr=0.1, weight_decay=0.5)
    adamw_step(p, [np.zeros(1)], opt)
    assert p[0][0] == pytest.approx(2.0 * (1 - 0.05), abs=1e-15)


def test_adam_two_steps_against_recurrence():
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal(3)
    g1, g2 = rng.standard_normal((2, 3))
    p = [x0.copy()]
    opt = adamw_init(p, lr=0.01, weight_decay=0.1, betas=(0.8, 0.99), eps=1e-6)
    adamw_step(p, [g1], opt)
    adamw_step(p, [g2], opt)
    x, m, v = x0.copy(), 0.0, 0.0
    for t, g in ((1, g1), (2, g2)):
        m = 0.8 * m + 0.2 * g
        v = 0.99 * v + 0.01 * g * g
        x = x * (1 - 0.01 * 0.1)
        x = x - 0.01 * (m / (1 - 0.8 ** t)) / (np.sqrt(v / (1 - 0.99 ** t)) + 1e-6)
    np.testing.assert_allclose(p[0], x, rtol=1e-14)


def test_adam_rejects_nonfinite():
    p = [np.zeros(2)]
    opt = adamw_init(p)
    with pytest.raises(NumericError):
        adamw_step(p, [np.array([0.0, np.nan])], opt)


def test_step_lr_schedule():
    opt = adamw_init([np.zeros(1)], lr=1e-3, step_size=50, gamma=0.3)
    lrs = [scheduler_epoch(opt) for _ in range(120)]
    assert lrs[48] == 1e-3
    assert lrs[49] == pytest.approx(3e-4)
    assert lrs[99] == pytest.approx(9e-5)


@given(st.integers(0, 2 ** 31 - 1))
def test_training_loop_deterministic(seed):
    def run():
        p = init_mlp([2, 4, 1], seed=seed)
        opt = adamw_init(p.arrays(), lr=1e-2)
        X = np.random.default_rng(seed).standard_normal((8, 2))
        for _ in range(3):
            g = grad_param_of_directional_input_gradient(p, X, X)
            adamw_step(p.arrays(), g, opt)
        return p

    a, b = run(), run()
    for x, y in zip(a.arrays(), b.arrays()):
        assert x.tobytes() == y.tobytes()
