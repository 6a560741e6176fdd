import copy

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from numpy.polynomial import legendre

from specblocks.baseplate import QuadratureGrid, build_shen_baseplate, dirichlet_lift
from specblocks.errors import InvalidArgumentError, NumericError
from specblocks.generators import (
    DensityGenerator,
    MlpGenerator,
    QuadraticDiagonalSoftplus,
    QuadraticLowRank,
    generator_from_dict,
    gen_grad,
    gen_grad_param_vjp,
    gen_value,
    inverse_softplus,
    softplus,
)
from specblocks.nnet import init_mlp

K = 12


@pytest.fixture(scope="module")
def bp():
    return build_shen_baseplate(32, K)


def _generators(bp, seed=0):
    rng = np.random.default_rng(seed)
    return {
        "mlp": MlpGenerator.init(K, hidden=(8, 8), seed=seed),
        "mlp_even": MlpGenerator(init_mlp([K, 8, 8, 1], seed=seed), rng.uniform(0.5, 2, K), "even", 3.0),
        "mlp_odd": MlpGenerator(init_mlp([K, 8, 1], "tanh", seed=seed), None, "odd"),
        "lowrank": QuadraticLowRank(rng.standard_normal(K), rng.standard_normal((K, 3))),
        "softplus": QuadraticDiagonalSoftplus(rng.standard_normal(K)),
        "density_poly": DensityGenerator.polynomial({2: 0.5, 3: -1 / 6}),
        "density_net": DensityGenerator.init(hidden=(6, 6), seed=seed),
    }


VARIANTS = list(_generators(build_shen_baseplate(32, K)))


def _fd_grad(g, bp, a, h=1e-5):
    return np.array([(g.value(bp, a + h * e) - g.value(bp, a - h * e)) / (2 * h) for e in np.eye(len(a))])


@pytest.mark.parametrize("name", VARIANTS)
def test_gradient_matches_fd(name, bp):
    rng = np.random.default_rng(1)
    for seed in range(20):
        g = _generators(bp, seed)[name]
        a = 0.5 * rng.standard_normal(K)
        fd = _fd_grad(g, bp, a)
        assert np.max(np.abs(gen_grad(g, bp, a) - fd)) <= 1e-6 * max(1.0, np.abs(fd).max())


@pytest.mark.parametrize("name", VARIANTS)
def test_param_vjp_matches_fd(name, bp):
    rng = np.random.default_rng(2)
    g = _generators(bp, 3)[name]
    A = 0.5 * rng.standard_normal((3, K))
    V = rng.standard_normal((3, K))
    got = gen_grad_param_vjp(g, bp, A, None, 0.0, V)
    h = 1e-6
    for arr, dg in zip(g.params(), got):
        fd = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            fp = np.sum(gen_grad(g, bp, A) * V)
            arr[idx] = old - h
            fm = np.sum(gen_grad(g, bp, A) * V)
            arr[idx] = old
            fd[idx] = (fp - fm) / (2 * h)
        assert np.max(np.abs(dg - fd)) <= 1e-5 * max(1.0, np.abs(fd).max())


@pytest.mark.parametrize("name", VARIANTS)
def test_batch_matches_single_and_roundtrip(name, bp):
    g = _generators(bp, 4)[name]
    A = np.random.default_rng(5).standard_normal((4, K)) * 0.3
    vals = gen_value(g, bp, A)
    assert vals.shape == (4,)
    assert gen_value(g, bp, A[1]) == pytest.approx(vals[1], rel=1e-14, abs=1e-14)
    h = generator_from_dict(g.to_dict())
    np.testing.assert_array_equal(gen_value(h, bp, A), vals)
    np.testing.assert_array_equal(gen_grad(h, bp, A), gen_grad(g, bp, A))


def test_quadratic_examples(bp):
    z = QuadraticLowRank(np.zeros(2), np.zeros((2, 1)))
    assert z.value(build_shen_baseplate(6, 2), [3.0, -1.0]) == 0.0
    q = QuadraticLowRank([1.0, 2.0], rank=0)
    small = build_shen_baseplate(6, 2)
    assert q.value(small, [1.0, 1.0]) == 1.5
    np.testing.assert_array_equal(q.grad(small, [0.0, 0.0]), 0)
    np.testing.assert_array_equal(q.diagonal, [1.0, 2.0])
    # diag gradient of <v, k * a> with respect to k is v * a
    v, a = np.array([2.0, -1.0]), np.array([0.5, 3.0])
    np.testing.assert_allclose(q.grad_param_vjp(small, a, v=v)[0], v * a)


def test_lowrank_matrix_symmetric():
    rng = np.random.default_rng(0)
    q = QuadraticLowRank(rng.standard_normal(5), rng.standard_normal((5, 2)))
    C = q.quadratic_matrix
    np.testing.assert_array_equal(C, C.T)
    assert q.diagonal is None


@given(arrays(np.float64, K, elements=st.floats(-50, 50)), arrays(np.float64, K, elements=st.floats(-5, 5)))
def test_softplus_diagonal_positive(c_raw, a):
    g = QuadraticDiagonalSoftplus(c_raw)
    assert np.all(g.diagonal > 0)
    assert g.value(build_shen_baseplate(32, K), a) >= 0


def test_softplus_inverse():
    y = np.array([1e-6, 1e-4, 0.5, 3.0, 40.0])
    np.testing.assert_allclose(softplus(inverse_softplus(y)), y, rtol=1e-12)
    with pytest.raises(InvalidArgumentError):
        inverse_softplus(0.0)
    np.testing.assert_allclose(QuadraticDiagonalSoftplus.init(3, 1e-4).diagonal, 1e-4, rtol=1e-12)


def test_density_u2_is_squared_norm(bp):
    a = np.random.default_rng(6).standard_normal(K)
    g = DensityGenerator.polynomial({2: 1.0})
    # fine independent quadrature of (sum a_k (L_{k-1} - L_{k+1}))^2
    c = np.zeros(K + 2)
    c[:K] += a
    c[2:] -= a
    x, w = legendre.leggauss(200)
    want = np.sum(w * legendre.legval(x, c) ** 2)
    assert g.value(bp, a) == pytest.approx(want, rel=1e-12)
    assert g.value(bp, a) == pytest.approx(bp.weighted_norm(a) ** 2, rel=1e-12)


def test_density_cubic_gradient(bp):
    g = DensityGenerator.polynomial({3: 1 / 6})
    a = np.random.default_rng(7).standard_normal(K)
    u = bp.reconstruct(a)
    want = bp.basis_eval.T @ (bp.grid.weights * u ** 2 / 2)
    np.testing.assert_allclose(g.grad(bp, a), want, atol=1e-13)
    np.testing.assert_allclose(_fd_grad(g, bp, a), want, rtol=1e-6, atol=1e-9)


def test_density_linear_param_gradient(bp):
    g = DensityGenerator.polynomial({1: 2.5})
    v = np.random.default_rng(8).standard_normal(K)
    got = g.grad_param_vjp(bp, np.zeros(K), v=v)[0]
    assert got[0] == pytest.approx(v @ bp.basis_eval.T @ bp.grid.weights, rel=1e-13)


def test_density_node_permutation_invariance(bp):
    perm = np.random.default_rng(9).permutation(bp.grid.Q)
    shuffled = copy.copy(bp)
    shuffled.grid = QuadratureGrid(1, bp.grid.nodes[perm], bp.grid.weights[perm])
    shuffled.basis_eval = bp.basis_eval[perm]
    shuffled._weighted_basis = bp._weighted_basis[perm]
    a = np.random.default_rng(10).standard_normal(K)
    for g in (DensityGenerator.init(hidden=(5,), seed=1), DensityGenerator.polynomial({4: 1.0, 1: -0.3})):
        assert abs(g.value(bp, a) - g.value(shuffled, a)) <= 1e-13 * max(1.0, abs(g.value(bp, a)))
        np.testing.assert_allclose(g.grad(bp, a), g.grad(shuffled, a), atol=1e-13)


def test_density_lift_flag(bp):
    lift = dirichlet_lift(lambda t: 1.0, lambda t: 1.0, lambda t: 0.0, lambda t: 0.0)
    a = np.zeros(K)
    on, off = DensityGenerator.polynomial({2: 1.0}), DensityGenerator.polynomial({2: 1.0}, include_lift=False)
    assert on.value(bp, a, lift) == pytest.approx(2.0, rel=1e-13)
    assert off.value(bp, a, lift) == 0.0
    assert generator_from_dict(off.to_dict()).include_lift is False


@given(arrays(np.float64, K, elements=st.floats(-3, 3)))
def test_even_mlp_is_even(a):
    g = MlpGenerator(init_mlp([K, 6, 1], seed=0), None, "even")
    bp = build_shen_baseplate(32, K)
    assert g.value(bp, a) == g.value(bp, -a)
    np.testing.assert_allclose(g.grad(bp, a), -g.grad(bp, -a), atol=1e-14)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_value_raises(bp):
    g = DensityGenerator.polynomial({2: 1.0})
    with pytest.raises(NumericError):
        g.value(bp, np.full(K, 1e200))


def test_constructor_errors():
    with pytest.raises(InvalidArgumentError):
        MlpGenerator(init_mlp([3, 4, 2], seed=0))
    with pytest.raises(InvalidArgumentError):
        MlpGenerator(init_mlp([3, 4, 1], seed=0), parity="sym")
    with pytest.raises(InvalidArgumentError):
        MlpGenerator(init_mlp([3, 4, 1], seed=0), input_scale=[1.0, -1.0, 1.0])
    with pytest.raises(InvalidArgumentError):
        DensityGenerator(init_mlp([2, 4, 1], seed=0))
    with pytest.raises(InvalidArgumentError):
        generator_from_dict({"variant": "spline"})
