import numpy as np
import pytest
import scipy.linalg
from hypothesis import given
from hypothesis import strategies as st

from specblocks.baseplate import build_fourier2d_baseplate, build_shen_baseplate
from specblocks.blocks import Block, BlockSet
from specblocks.errors import InvalidArgumentError, NumericError
from specblocks.experiments import assemble, resolve_spec
from specblocks.generators import DensityGenerator, QuadraticDiagonalSoftplus
from specblocks.refops import make_reference_op
from specblocks.rollout import (
    StrangSchedule,
    Substep,
    build_strang_schedule,
    choose_integrator,
    reference_rollout,
    rollout,
    substep_crank_nicolson,
    substep_exact_diagonal,
    substep_heun,
    substep_implicit_midpoint,
    substep_pointwise_exact,
)

SHEN = build_shen_baseplate(24, 8)
ONE = build_shen_baseplate(8, 1)
TWO = build_shen_baseplate(8, 2)


def linear_block(bp, A, name="lin", kind="R"):
    A = np.asarray(A, dtype=float)
    return Block(name, kind, bp, field=lambda a, t: np.asarray(a) @ A.T, linear=True)


def diag_block(bp, c):
    g = QuadraticDiagonalSoftplus.init(bp.K, 1.0)
    g.c_raw = np.log(np.expm1(np.asarray(c, dtype=float)))
    return Block("d", "E", bp, generator=g)


def shen_diffusion(bp, nu=0.1):
    ref = make_reference_op("shen_uxx", bp)
    return Block.from_reference(ref, bp, scale=nu, name="diffusion")


def shen_transport(bp):
    return Block("transport", "H", bp, generator=DensityGenerator.polynomial({3: -1 / 6}),
                 structure="shen_derivative")


# -- exact diagonal -------------------------------------------------------

def test_exact_diagonal_trivial():
    b = diag_block(SHEN, np.ones(SHEN.K))
    a = np.arange(1.0, SHEN.K + 1)
    np.testing.assert_array_equal(substep_exact_diagonal(b, a, 0.0), a)
    np.testing.assert_allclose(substep_exact_diagonal(b, a, np.log(2.0)), a / 2, rtol=1e-14)


def test_exact_diagonal_matches_fine_heun():
    c = np.linspace(0.5, 3.0, SHEN.K)
    b = diag_block(SHEN, c)
    a = np.random.default_rng(0).standard_normal(SHEN.K)
    fine = substep_heun(lambda x, t: b(x), a, 0.3, 10 ** 4)
    np.testing.assert_allclose(substep_exact_diagonal(b, a, 0.3), fine, atol=1e-10)


def test_exact_diagonal_with_shift_is_affine_flow():
    b = diag_block(SHEN, np.full(SHEN.K, 2.0)).perturbed(np.full(SHEN.K, 0.5))
    a = np.zeros(SHEN.K)
    # a' = s (1 - e^{-c tau}) / c
    want = 0.5 * (1 - np.exp(-2.0 * 0.7)) / 2.0
    np.testing.assert_allclose(substep_exact_diagonal(b, a, 0.7), want, rtol=1e-14)
    fine = substep_heun(lambda x, t: b(x), a, 0.7, 10 ** 4)
    np.testing.assert_allclose(substep_exact_diagonal(b, a, 0.7), fine, atol=1e-10)


def test_exact_diagonal_rejects_nondiagonal():
    with pytest.raises(InvalidArgumentError):
        substep_exact_diagonal(shen_transport(SHEN), np.zeros(SHEN.K), 0.1)


# -- Crank-Nicolson -------------------------------------------------------

def test_cn_zero_and_scalar():
    a = np.array([1.3, -0.2])
    np.testing.assert_array_equal(substep_crank_nicolson(linear_block(TWO, np.zeros((2, 2))), a, 0.1), a)
    lam, tau = -3.0, 0.2
    out = substep_crank_nicolson(linear_block(ONE, [[lam]]), np.array([2.0]), tau)
    assert out[0] == pytest.approx(2.0 * (1 + tau * lam / 2) / (1 - tau * lam / 2), rel=1e-15)


def test_cn_singular():
    with pytest.raises(NumericError):
        substep_crank_nicolson(linear_block(ONE, [[2.0]]), np.array([1.0]), 1.0)


def test_cn_local_error_third_order():
    nu = 0.05
    b = shen_diffusion(SHEN, nu)
    A = b.linear_matrix()
    a = np.random.default_rng(1).standard_normal(SHEN.K) / np.arange(1, SHEN.K + 1)
    errs = []
    for tau in (2e-3, 1e-3, 5e-4):
        exact = scipy.linalg.expm(tau * A) @ a
        errs.append(np.max(np.abs(substep_crank_nicolson(b, a, tau) - exact)))
    r = np.array(errs[:-1]) / np.array(errs[1:])
    assert np.all((r > 7.0) & (r < 9.0))


# -- Heun -----------------------------------------------------------------

def test_heun_trivial():
    a = np.array([1.0, 2.0])
    np.testing.assert_array_equal(substep_heun(lambda x, t: 0 * x, a, 0.5), a)
    np.testing.assert_allclose(substep_heun(lambda x, t: -x, a, 0.1), 0.905 * a, rtol=1e-15)
    with pytest.raises(InvalidArgumentError):
        substep_heun(lambda x, t: x, a, 0.1, 0)


def test_heun_nonfinite():
    with pytest.raises(NumericError):
        substep_heun(lambda x, t: x * 1e300, np.array([1e10]), 1.0)


def test_heun_second_order_on_cubic_reaction():
    bp = build_fourier2d_baseplate(16, 4)
    ref = make_reference_op("pointwise", bp, map="allen_cahn")
    f = lambda x, t: ref(x)
    a = 0.3 * np.random.default_rng(2).standard_normal(bp.K) / np.sqrt(bp.K)
    tau = 0.2
    fine = substep_heun(f, a, tau, 1000)
    e = [np.max(np.abs(substep_heun(f, a, tau, n) - fine)) for n in (4, 8, 16)]
    orders = np.log2(np.array(e[:-1]) / np.array(e[1:]))
    assert np.all((orders > 1.8) & (orders < 2.2))


# -- implicit midpoint ------------------------------------------------------

def test_midpoint_zero_field_one_iteration():
    a = np.ones(3)
    out, it = substep_implicit_midpoint(lambda x, t: 0 * x, a, 0.1)
    assert it == 1
    np.testing.assert_array_equal(out, a)


def test_midpoint_rotation_conserves_norm():
    rot = lambda x, t: np.array([-x[1], x[0]])
    a = np.array([0.6, -1.1])
    x = a
    for _ in range(100):
        x, _ = substep_implicit_midpoint(rot, x, 0.1, tol=1e-14, max_iters=200)
    assert np.dot(x, x) == pytest.approx(np.dot(a, a), rel=1e-12)


def test_midpoint_no_convergence():
    with pytest.raises(NumericError):
        substep_implicit_midpoint(lambda x, t: 10 * x, np.ones(2), 1.0, max_iters=5)


def test_midpoint_hamiltonian_drift_third_order():
    b = shen_transport(SHEN)
    a = np.zeros(SHEN.K)
    a[:3] = [0.8, -0.4, 0.3]
    f = lambda x, t: b(x)
    H0 = b.generator_value(a)
    d = []
    for tau in (4e-2, 2e-2, 1e-2):
        x, _ = substep_implicit_midpoint(f, a, tau, tol=1e-15, max_iters=200)
        d.append(abs(b.generator_value(x) - H0))
    r = np.array(d[:-1]) / np.array(d[1:])
    assert np.all((r > 6.0) & (r < 10.0))


# -- pointwise exact -----------------------------------------------------

def test_pointwise_exact_matches_nodal_ode():
    from scipy.integrate import solve_ivp

    bp = build_fourier2d_baseplate(16, 4)
    ref = make_reference_op("pointwise", bp, map="ginzburg_landau")
    b = Block.from_reference(ref, bp)
    a = 0.4 * np.random.default_rng(3).standard_normal(bp.K)
    u0 = bp.reconstruct(a).ravel()
    sol = solve_ivp(lambda t, u: -(u + u ** 3), (0, 0.1), u0, rtol=1e-12, atol=1e-14)
    want = bp.project(sol.y[:, -1].reshape(bp.reconstruct(a).shape))
    np.testing.assert_allclose(substep_pointwise_exact(b, a, 0.1), want, atol=1e-10)
    with pytest.raises(InvalidArgumentError):
        substep_pointwise_exact(b.with_scale(2.0), a, 0.1)
    with pytest.raises(InvalidArgumentError):
        substep_pointwise_exact(shen_diffusion(SHEN), np.zeros(SHEN.K), 0.1)


# -- schedules -----------------------------------------------------------

def test_burgers_schedule():
    s = build_strang_schedule(["transport", "diffusion", "transport"])
    assert [(x.block, x.fraction) for x in s.substeps] == [
        ("transport", "half"), ("diffusion", "full"), ("transport", "half")]
    assert s.substeps[0].tau(0.1) == 0.05 and s.substeps[1].tau(0.1) == 0.1


def test_single_block_schedule():
    s = build_strang_schedule("diffusion")
    assert len(s.substeps) == 1 and s.substeps[0].fraction == "full"


def test_gl_schedule_ordering():
    spec = resolve_spec("gl1d", desk=True)
    s = assemble(spec).schedule
    assert [(x.block, x.fraction) for x in s.substeps] == [
        ("diffusion", "half"), ("reaction", "full"), ("diffusion", "half")]


def test_schedule_rejections():
    with pytest.raises(InvalidArgumentError):
        build_strang_schedule(["a", "b"])
    with pytest.raises(InvalidArgumentError):
        build_strang_schedule(["a", "b", "c"])
    with pytest.raises(InvalidArgumentError):
        build_strang_schedule(["a", "b/2", "a"])
    with pytest.raises(InvalidArgumentError):
        build_strang_schedule([])
    bs = BlockSet([shen_diffusion(SHEN)])
    with pytest.raises(InvalidArgumentError):
        build_strang_schedule(["transport", "diffusion", "transport"], bs)
    with pytest.raises(InvalidArgumentError):
        StrangSchedule((Substep("a", "half", "heun"), Substep("b", "full"), Substep("a", "half")))
    with pytest.raises(InvalidArgumentError):
        Substep("a", "quarter")


names = st.lists(st.sampled_from("abcde"), min_size=1, max_size=4)


@given(names)
def test_mirrored_patterns_accepted(half):
    pattern = half + half[-2::-1]
    s = build_strang_schedule(pattern) if pattern.count(half[-1]) == 1 else None
    if s is not None:
        seq = s.block_names
        assert seq == seq[::-1]
        assert sum(x.fraction == "full" for x in s.substeps) == 1


@given(st.lists(st.sampled_from("abc"), min_size=2, max_size=6))
def test_nonpalindromes_rejected(seq):
    if seq != seq[::-1]:
        with pytest.raises(InvalidArgumentError):
            build_strang_schedule(seq)


def test_schedule_roundtrip():
    s = build_strang_schedule(["t", "d", "t"], integrators={"t": "heun"}, subdivisions={"t": 2})
    assert StrangSchedule.from_dict(s.to_dict()) == s


# -- integrator policy -----------------------------------------------------

def test_choose_integrator_policy():
    assert choose_integrator(diag_block(SHEN, np.ones(SHEN.K))) == "exact_diagonal"
    assert choose_integrator(shen_diffusion(SHEN)) == "crank_nicolson"
    assert choose_integrator(shen_transport(SHEN)) == "implicit_midpoint"
    ref = make_reference_op("pointwise", SHEN, map="cube")
    assert choose_integrator(Block.from_reference(ref, SHEN)) == "heun"


# -- rollout engine --------------------------------------------------------

def burgers_set(bp):
    return BlockSet([shen_transport(bp), shen_diffusion(bp, 0.03)])


def test_rollout_zero_steps():
    bs = burgers_set(SHEN)
    a0 = np.random.default_rng(0).standard_normal(SHEN.K) * 0.1
    rec = rollout(SHEN, build_strang_schedule(["transport", "diffusion", "transport"]), bs, a0, 1e-3, 0)
    assert rec.states.shape == (1, SHEN.K) and rec.times.tolist() == [0.0]
    np.testing.assert_array_equal(rec.final, a0)


def test_rollout_zero_fields():
    z = Block.from_reference(make_reference_op("pointwise", SHEN, map="zero"), SHEN, name="z")
    a0 = np.arange(SHEN.K, dtype=float)
    rec = rollout(SHEN, build_strang_schedule("z"), BlockSet([z]), a0, 0.1, 5, stride=1)
    assert np.all(rec.states == a0)
    np.testing.assert_allclose(np.diff(rec.times), 0.1)


def test_rollout_stride_and_final():
    bs = burgers_set(SHEN)
    s = build_strang_schedule(["transport", "diffusion", "transport"])
    rec = rollout(SHEN, s, bs, 0.1 * np.ones(SHEN.K), 1e-3, 7, stride=3)
    assert rec.steps.tolist() == [0, 3, 6, 7]
    np.testing.assert_allclose(rec.times, rec.steps * 1e-3)


def test_rollout_argument_errors():
    bs = burgers_set(SHEN)
    s = build_strang_schedule(["transport", "diffusion", "transport"])
    a0 = np.zeros(SHEN.K)
    for kw in ({"dt": 0.0, "n_steps": 1}, {"dt": 1e-3, "n_steps": -1}):
        with pytest.raises(InvalidArgumentError):
            rollout(SHEN, s, bs, a0, **kw)
    with pytest.raises(InvalidArgumentError):
        rollout(build_shen_baseplate(24, 7), s, bs, np.zeros(7), 1e-3, 1)


def test_rollout_numeric_error_location():
    boom = Block("r", "R", SHEN, field=lambda a, t: np.full(SHEN.K, np.nan))
    s = build_strang_schedule("r")
    with pytest.raises(NumericError) as ei:
        rollout(SHEN, s, BlockSet([boom]), np.zeros(SHEN.K), 0.1, 3)
    assert ei.value.location == (1, 0)


def test_exact_generator_blocks_match_reference_fields():
    # the GL diffusion/reaction pair built from exact generators uses the same fields as the reference
    asm = assemble(resolve_spec("gl1d", desk=True, overrides={"T": 0.005}))
    L = rollout(asm.baseplate, asm.schedule, asm.blocks, asm.a0, 1e-4, 50)
    R = reference_rollout(asm.baseplate, asm.schedule, asm.reference, asm.a0, 1e-4, 50)
    np.testing.assert_allclose(L.final, R.final, atol=1e-10)
    assert L.meta["schedule"] == R.meta["schedule"]


def test_reference_rollout_mapping_form():
    bp = SHEN
    a0 = 0.1 * np.random.default_rng(5).standard_normal(bp.K)
    s = build_strang_schedule("diffusion")
    via_map = reference_rollout(bp, s, {"diffusion": (make_reference_op("shen_uxx", bp), 0.1)}, a0, 1e-3, 10)
    via_set = rollout(bp, s, BlockSet([shen_diffusion(bp, 0.1)]), a0, 1e-3, 10)
    np.testing.assert_array_equal(via_map.final, via_set.final)


def test_structure_logs_monotone_energy_and_small_drift():
    bp = SHEN
    a0 = np.zeros(bp.K)
    a0[:3] = [0.5, -0.3, 0.2]
    s = build_strang_schedule(["transport", "diffusion", "transport"])
    rec = rollout(bp, s, burgers_set(bp), a0, 1e-3, 20, log_structure=True)
    assert len(rec.logs) == 20 * 2  # the R-kind diffusion reference has no generator
    exact = assemble(resolve_spec("burgers1d", desk=True), exact=True)
    rec = rollout(exact.baseplate, exact.schedule, exact.blocks, exact.a0, 1e-4, 20, log_structure=True)
    e = [r for r in rec.logs if r["kind"] == "E"]
    h = [r for r in rec.logs if r["kind"] == "H"]
    assert e and h
    assert max(r["delta"] for r in e) <= 1e-12
    assert max(abs(r["delta"]) / (abs(r["before"]) + 1e-30) for r in h) <= 1e-8
    summ = rec.summary()
    assert summ["E_drift"]["max"] <= 1e-12 and "wall_time" not in summ


def test_record_csv(tmp_path):
    rec = rollout(SHEN, build_strang_schedule("diffusion"), BlockSet([shen_diffusion(SHEN)]),
                  np.ones(SHEN.K), 1e-3, 4, stride=2)
    p = tmp_path / "r.csv"
    rec.to_csv(p)
    rows = p.read_text().splitlines()
    assert rows[0].split(",")[:3] == ["step", "t", "a0"] and len(rows) == 4
    rec.to_csv(p, SHEN)
    assert p.read_text().splitlines()[0].split(",")[2] == "u0"


def test_lifted_boundary_exact():
    asm = assemble(resolve_spec("heat1d_lifted", desk=True, overrides={"T": 0.05}))
    rec = rollout(asm.baseplate, asm.schedule, asm.blocks, asm.a0, asm.dt, asm.n_steps, asm.lift, stride=5)
    from specblocks.experiments import heat_boundary_data

    A, B, _, _ = heat_boundary_data(asm.spec["params"])
    want = np.stack([A(rec.times), B(rec.times)], axis=1)
    np.testing.assert_allclose(rec.boundary, want, atol=1e-12, rtol=0)
