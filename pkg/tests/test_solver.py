import numpy as np
import pytest

from stochstokes.experiments import fit_rate
from stochstokes.fem import FEFunction, evaluate_on_fine_quadrature, norm, operators_for, project_Xh
from stochstokes.mesh import build_uniform_mesh
from stochstokes.noise import NoiseModel, assemble_noise_load, sample_increments
from stochstokes.solver import (
    DIV_TOL,
    Forcing,
    NonFiniteInputError,
    TimeGridError,
    build_step_system,
    coarse_increments,
    euler_step,
    march,
    n_steps_for,
    run_trajectory,
    step_ratio,
)


@pytest.fixture(scope="module")
def ops4():
    return operators_for(4)


def test_zero_rhs_zero_solution(ops4):
    s = build_step_system(ops4, 0.1)
    assert np.all(s.solve(np.zeros(s.size)) == 0)
    z = np.zeros(ops4.space.n_velocity)
    u, p = euler_step(s, z, z, z)
    assert np.all(u.coeffs == 0) and np.all(p.coeffs == 0)


def test_rejects_nonpositive_tau(ops4):
    with pytest.raises(ValueError):
        build_step_system(ops4, 0.0)


def test_small_tau_limit_is_projection(ops4):
    nu, npr = ops4.space.n_velocity, ops4.space.n_pressure

    def velocity(tau, c):
        return build_step_system(ops4, tau).solve(np.concatenate([ops4.M @ c, np.zeros(npr)]))[:nu]

    for f in (lambda x, y: (1 + 0 * x, 0 * x), lambda x, y: (y, x)):
        c = project_Xh(ops4.space, f, ops4).coeffs
        assert np.max(np.abs(velocity(1e-8, c) - c)) <= 1e-6
    # in general the deviation is tau * P M^-1 K_d c to first order
    c = project_Xh(ops4.space, lambda x, y: (np.sin(np.pi * y), np.cos(np.pi * x)), ops4).coeffs
    d8, d9 = (np.max(np.abs(velocity(t, c) - c)) for t in (1e-8, 1e-9))
    assert d8 < 1e-5 and d8 / d9 == pytest.approx(10, rel=1e-3)
    v = ops4.space.interpolate(lambda x, y: (x * x, x * y), bubbles=True).coeffs
    w = project_Xh(ops4.space, v, ops4).coeffs
    e8, e9 = (np.max(np.abs(velocity(t, v) - w)) for t in (1e-8, 1e-9))
    assert e8 < 1e-5 and e8 / e9 == pytest.approx(10, rel=1e-3)


@pytest.mark.parametrize("n", [2, 8, 32])
def test_random_rhs_residual(n):
    s = build_step_system(operators_for(n), 2.0**-5)
    b = np.random.default_rng(n).normal(size=s.size)
    assert s.residual(s.solve(b), b) <= 1e-10


def test_batch_solves_are_columnwise_identical(ops4):
    s = build_step_system(ops4, 2.0**-4)
    B = np.random.default_rng(3).normal(size=(s.size, 37))
    X = s.solve(B)
    for k in (0, 15, 16, 36):
        np.testing.assert_array_equal(X[:, k], s.solve(B[:, k]))
    perm = np.random.default_rng(4).permutation(37)
    np.testing.assert_array_equal(s.solve(B[:, perm]), X[:, perm])


def test_euler_step_rejects_nonfinite(ops4):
    s = build_step_system(ops4, 0.1)
    z = np.zeros(ops4.space.n_velocity)
    bad = z.copy()
    bad[3] = np.nan
    for args in ((bad, z, z), (z, bad, z), (z, z, np.inf + z)):
        with pytest.raises(NonFiniteInputError):
            euler_step(s, *args)
    with pytest.raises(ValueError):
        euler_step(s, z[:-1], z, z)


def test_one_step_energy_identity(ops4):
    tau = 2.0**-3
    s = build_step_system(ops4, tau)
    f = Forcing(ops4.space, ops4, (1.0, 1.0)).load(tau)
    u0 = np.zeros(ops4.space.n_velocity)
    u1, p1 = euler_step(s, u0, f, np.zeros_like(u0))
    M, K = ops4.M, ops4.K_d
    d = u1.coeffs - u0
    lhs = 0.5 * u1.coeffs @ M @ u1.coeffs - 0.5 * u0 @ M @ u0 + 0.5 * d @ M @ d + tau * u1.coeffs @ K @ u1.coeffs
    rhs = tau * f @ u1.coeffs
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(rhs))
    assert np.abs(ops4.B_div @ u1.coeffs).max() <= DIV_TOL * (1 + norm(u1, ops=ops4))


def test_single_mode_step_matches_dense_oracle():
    ops = operators_for(2)
    space = ops.space
    tau = 0.25
    s = build_step_system(ops, tau)
    model = NoiseModel(r=2.0, L=2)
    dW = np.zeros((3, 3))
    dW[0, 1] = 0.3
    u0 = project_Xh(space, lambda x, y: (np.sin(x), x * y), ops).coeffs
    nl = assemble_noise_load(space, model, u0, dW)
    f = Forcing(space, ops, (1.0, 1.0)).load(tau)
    u1, p1 = euler_step(s, u0, f, nl)
    A = np.block([[(ops.M + tau * ops.K_d).toarray(), -tau * ops.B_div.T.toarray()], [ops.B_div.toarray(), np.zeros((space.n_pressure,) * 2)]])
    b = np.concatenate([ops.M @ u0 + tau * f + nl, np.zeros(space.n_pressure)])
    x = np.linalg.solve(A, b)
    np.testing.assert_allclose(np.concatenate([u1.coeffs, p1.coeffs]), x, rtol=0, atol=1e-12 * np.abs(x).max())


def test_zero_noise_zero_forcing_is_zero():
    ops = operators_for(4)
    model = NoiseModel(r=2.0, L=4, scale=0.0)
    tab = sample_increments(4, 0.125, 8, 1, 0)
    tr = run_trajectory(ops.space, ops, model, 0.125, 1.0, (0.0, 0.0), tab)
    assert np.all(tr.final_velocity == 0) and np.all(tr.pressure_integral == 0)


def test_coarse_increments_preserve_brownian_mass():
    tab = sample_increments(3, 2.0**-6, 64, 9, 2)
    a = coarse_increments([tab], 2.0**-3, 1.0, 4)
    b = coarse_increments([tab], 2.0**-4, 1.0, 4)
    np.testing.assert_allclose(a.sum(axis=-1), b.sum(axis=-1), rtol=0, atol=1e-13)
    np.testing.assert_allclose(a.sum(axis=-1)[0], tab.increments.sum(axis=-1), rtol=0, atol=1e-13)
    # tau/2 pairs sum to the tau increments
    np.testing.assert_allclose(b[..., 0::2] + b[..., 1::2], a, rtol=0, atol=1e-14)


def test_time_grid_errors():
    assert n_steps_for(0.25, 1.0) == 4
    with pytest.raises(TimeGridError):
        n_steps_for(0.3, 1.0)
    assert step_ratio(0.25, 2.0**-6) == 16
    with pytest.raises(TimeGridError):
        step_ratio(0.1, 2.0**-6)
    ops = operators_for(2)
    model = NoiseModel(r=2.0, L=2)
    tab = sample_increments(2, 0.1, 10, 0, 0)
    with pytest.raises(TimeGridError):
        run_trajectory(ops.space, ops, model, 0.25, 1.0, (1.0, 1.0), tab)


def _paths(n=8, tau=2.0**-4, k=8, L=8):
    ops = operators_for(n)
    model = NoiseModel(r=2.0, L=L)
    tabs = [sample_increments(L, tau, int(1 / tau), 20240501, s) for s in range(k)]
    inc = coarse_increments(tabs, tau, 1.0, L + 1)
    return march(build_step_system(ops, tau), model, 1.0, (1.0, 1.0), inc, checkpoints=[0.5, 1.0])


def test_energy_identity_and_divergence_every_step():
    for tr in _paths():
        assert tr.energy_residuals.max() <= 1e-9
        assert tr.div_residuals.max() <= 1e-9
        assert tr.n_steps * tr.tau == tr.T
        assert set(tr.velocity) == {0.5, 1.0}


def test_trajectory_deterministic():
    a, b = _paths(k=3), _paths(k=3)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.final_velocity, y.final_velocity)
        np.testing.assert_array_equal(x.pressure_integral, y.pressure_integral)


def test_batched_march_matches_single_paths():
    ops = operators_for(4)
    model = NoiseModel(r=1.0, L=6)
    tau = 0.125
    system = build_step_system(ops, tau)
    tabs = [sample_increments(6, tau, 8, 5, s) for s in range(5)]
    batch = march(system, model, 1.0, (1.0, 1.0), coarse_increments(tabs, tau, 1.0, 7))
    for s in (0, 4):
        one = run_trajectory(ops.space, ops, model, tau, 1.0, (1.0, 1.0), tabs[s], system=system)
        np.testing.assert_array_equal(one.final_velocity, batch[s].final_velocity)


def test_pressure_integral_accumulates():
    ops = operators_for(4)
    model = NoiseModel(r=2.0, L=2, scale=0.0)
    tr = march(build_step_system(ops, 0.25), model, 1.0, (1.0, 1.0), None)[0]
    # deterministic problem with exact solution u = t(1,1), p = 0
    assert np.abs(tr.pressure_integral).max() < 1e-12
    assert tr.max_l2_sq == pytest.approx(2.0, rel=1e-12)


def test_initial_value_is_projected():
    ops = operators_for(4)
    model = NoiseModel(r=2.0, L=2, scale=0.0)
    tr = run_trajectory(ops.space, ops, model, 0.5, 1.0, (0.0, 0.0), None, checkpoints=[0.0, 1.0], u0=lambda x, y: (x, 0 * x))
    w = project_Xh(ops.space, lambda x, y: (x, 0 * x), ops).coeffs
    np.testing.assert_allclose(tr.velocity[0.0], w, atol=1e-14)


def test_deterministic_time_self_convergence_slope():
    """Zero noise, f=(1,1), n=8: tau = 2^-2..2^-6 against 2^-10, slope in [0.8, 1.2]."""
    ops = operators_for(8)
    model = NoiseModel(r=2.0, L=2, scale=0.0)
    ref = march(build_step_system(ops, 2.0**-10), model, 1.0, (1.0, 1.0), None)[0].final_velocity
    taus = [2.0**-k for k in range(2, 7)]
    errs = []
    for tau in taus:
        u = march(build_step_system(ops, tau), model, 1.0, (1.0, 1.0), None)[0].final_velocity
        errs.append(np.sqrt((u - ref) @ ops.M @ (u - ref)))
    slope, _ = fit_rate(errs, taus)
    assert 0.8 <= slope <= 1.2, errs


def test_time_dependent_forcing_first_order():
    # with a forcing that varies in time the Euler error is visible and first order
    ops = operators_for(8)
    model = NoiseModel(r=2.0, L=2, scale=0.0)

    def f(t, x, y):
        return (np.cos(2 * np.pi * t) * (1 + x), np.sin(2 * np.pi * t) * y)

    ref = march(build_step_system(ops, 2.0**-10), model, 1.0, f, None)[0].final_velocity
    taus = [2.0**-k for k in range(3, 7)]
    errs = []
    for tau in taus:
        u = march(build_step_system(ops, tau), model, 1.0, f, None)[0].final_velocity
        errs.append(np.sqrt((u - ref) @ ops.M @ (u - ref)))
    slope, _ = fit_rate(errs, taus)
    assert 0.8 <= slope <= 1.2, (slope, errs)


def test_forcing_callable_matches_constant():
    ops = operators_for(4)
    a = Forcing(ops.space, ops, (1.0, -2.0)).load(0.3)
    b = Forcing(ops.space, ops, lambda t, x, y: (1.0 + 0 * x, -2.0 + 0 * x)).load(0.3)
    np.testing.assert_allclose(a, b, atol=1e-14)
    with pytest.raises(ValueError):
        Forcing(ops.space, ops, (1.0, 2.0, 3.0))


def test_coupling_errors_decrease_with_refinement():
    """Median over 16 samples of the velocity error decreases across 3 nested levels."""
    from stochstokes.experiments import default_config, estimate_strong_error

    cfg = default_config("space", n_list=(2, 4, 8), ref_n=16, tau_list=(2.0**-4,), ref_tau=2.0**-4, samples=16)
    errs = np.array([[estimate_strong_error(cfg, li, s)[0] for s in range(16)] for li in range(3)])
    med = np.median(errs, axis=1)
    assert med[0] > med[1] > med[2], med
