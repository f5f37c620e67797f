import math

import numpy as np
import pytest

from ergostep.problems import (
    GridProblem,
    SdeProblem,
    SpectralProblem,
    make_nonlinearity,
    sample_noise_increment,
    trajectory_rng,
)
from ergostep.schemes import (
    NewtonConvergenceError,
    SchemeCoefficients,
    chain_step,
    postprocess,
    run_trajectory,
    step_linearized_euler,
    step_new_sde,
    step_new_spde,
    step_trapezoidal,
)
from ergostep.stability import amplification, noise_gain

SQRT2 = math.sqrt(2.0)


def scalar_problem(lam=1.0, sigma=1.0):
    return SpectralProblem(lam=[lam], q=[1.0], sigma=sigma)


# ---------------------------------------------------------------------------
# linearized implicit Euler


def test_euler_deterministic_contraction():
    p = scalar_problem(sigma=0.0)
    out = step_linearized_euler(p, 1.0, np.array([1.0]), np.zeros(1))
    assert out[0] == pytest.approx(0.5, abs=1e-15)


def test_euler_noise_gain():
    p = scalar_problem()
    out = step_linearized_euler(p, 1.0, np.array([0.0]), np.array([1.0]))
    assert out[0] == pytest.approx(0.5, abs=1e-15)


def test_euler_reduces_to_explicit_euler_without_stiff_part():
    # zero linear part, explicit drift f(v) = -v
    p = SdeProblem.linear([[0.0]], f2=lambda v: -v, sigma=0.0)
    out = step_linearized_euler(p, 0.5, np.array([1.0]), np.zeros(1))
    assert out[0] == pytest.approx(0.5, abs=1e-15)


# ---------------------------------------------------------------------------
# trapezoidal


def test_trapezoidal_amplification():
    p = scalar_problem(sigma=0.0)
    out = step_trapezoidal(p, 1.0, np.array([1.0]), np.zeros(1))
    assert out[0] == pytest.approx(1.0 / 3.0, rel=1e-14)


def test_trapezoidal_noise_gain():
    p = scalar_problem()
    out = step_trapezoidal(p, 1.0, np.array([0.0]), np.array([1.0]))
    assert out[0] == pytest.approx(2.0 / 3.0, rel=1e-14)


def test_trapezoidal_not_l_stable_in_stiff_limit():
    # |update factor| -> 1 as lambda h -> infinity
    p = scalar_problem(lam=1e6, sigma=0.0)
    out = step_trapezoidal(p, 1.0, np.array([1.0]), np.zeros(1))
    assert abs(abs(out[0]) - 1.0) < 1e-5


# ---------------------------------------------------------------------------
# postprocessed scheme, linear implicit part


def test_new_spde_scalar_oracle():
    p = scalar_problem()
    u1, u_bar = step_new_spde(p, 1.0, np.array([0.0]), np.array([1.0]))
    assert u1[0] == pytest.approx(0.5, abs=1e-14)
    # algebraic reduction of the noise coefficients at z = -1
    j2 = 1.0 / (1.0 + (3.0 - SQRT2) / 2.0)
    assert ((SQRT2 - 1.0) / 4.0 + (3.0 - SQRT2) / 2.0) * j2 == pytest.approx(0.5)
    # postprocessor from the chain value 0.5
    out = postprocess(p, 1.0, u1, np.array([1.0]))
    assert out[0] == pytest.approx(0.5 + 0.5 / math.sqrt(1.5), rel=1e-14)
    assert u_bar[0] == pytest.approx(0.0 + 0.5 / math.sqrt(1.5), rel=1e-14)


def test_new_spde_without_noise_equals_euler():
    p = SpectralProblem(lam=[1.0, 3.0, 9.0], q=[1.0, 1.0, 1.0], sigma=0.0)
    rng = np.random.default_rng(5)
    u = rng.standard_normal(3)
    xi = rng.standard_normal(3)
    a = step_new_spde(p, 0.3, u, xi)[0]
    b = step_linearized_euler(p, 0.3, u, xi)
    np.testing.assert_allclose(a, b, rtol=1e-15)


def test_one_step_moments_match_stability_functions():
    # mean A(z) x and variance sigma^2 h B(z)^2, z = -lambda h
    lam, h, x0 = 2.0, 0.4, 1.3
    p = scalar_problem(lam=lam)
    z = -lam * h
    rng = trajectory_rng(17)
    n = 100_000
    for scheme in ("euler", "trapezoidal", "new_method"):
        xi = rng.standard_normal((n, 1))
        out = chain_step(p, scheme, h, np.full((n, 1), x0), xi)[:, 0]
        a = float(amplification(scheme, z))
        b = float(noise_gain(scheme, z))
        se_mean = out.std(ddof=1) / math.sqrt(n)
        assert abs(out.mean() - a * x0) < 3.0 * se_mean
        var = out.var(ddof=1)
        se_var = var * math.sqrt(2.0 / n)
        assert abs(var - h * b * b) < 3.0 * se_var


# ---------------------------------------------------------------------------
# general implicit-explicit step


def test_new_sde_linear_scalar_matches_spde_step():
    p = SdeProblem.linear([[-1.0]])
    x1, x_bar = step_new_sde(p, SchemeCoefficients.canonical(), 1.0,
                             np.array([0.0]), np.array([1.0]))
    assert x1[0] == pytest.approx(0.5, abs=1e-14)
    assert x_bar[0] == pytest.approx(0.5 / math.sqrt(1.5), rel=1e-14)


def test_new_sde_nonlinear_path_reduces_to_linear():
    # f1 given as callables wrapping a symmetric matrix must match the
    # linear-part step to solver tolerance
    rng = np.random.default_rng(11)
    m = rng.standard_normal((4, 4))
    amat = -(m @ m.T) - 0.5 * np.eye(4)

    def f2(x):
        return np.sin(x)

    lin = SdeProblem.linear(amat, f2=f2, sigma=0.8)
    nonlin = SdeProblem.nonlinear(4, f1=lambda x: x @ amat.T,
                                  f1_jac=lambda x: amat, f2=f2, sigma=0.8)
    coeffs = SchemeCoefficients.canonical()
    for _ in range(10):
        x = rng.standard_normal(4)
        xi = rng.standard_normal(4)
        a1, abar1 = step_new_sde(lin, coeffs, 0.25, x, xi)
        a2, abar2 = step_new_sde(nonlin, coeffs, 0.25, x, xi)
        np.testing.assert_allclose(a1, a2, atol=1e-12)
        np.testing.assert_allclose(abar1, abar2, atol=1e-12)


def test_new_sde_reduction_without_implicit_part():
    # f1 = 0: X' = X + h f(X + 1/2 sigma sqrt(h) xi) + sigma sqrt(h) xi
    def f(x):
        return -x - np.sin(x)

    p = SdeProblem(dim=1, sigma=1.0, f2=f)
    coeffs = SchemeCoefficients.canonical()
    rng = np.random.default_rng(3)
    for _ in range(10):
        x = rng.standard_normal(1)
        xi = rng.standard_normal(1)
        h = 0.3
        got, got_bar = step_new_sde(p, coeffs, h, x, xi)
        sq = math.sqrt(h)
        expect = x + h * f(x + 0.5 * sq * xi) + sq * xi
        np.testing.assert_allclose(got, expect, rtol=1e-14)
        np.testing.assert_allclose(got_bar, x + 0.5 * sq * xi, rtol=1e-14)


def test_new_sde_pure_random_walk():
    p = SdeProblem(dim=1, sigma=1.0)
    coeffs = SchemeCoefficients.canonical()
    x = np.array([0.7])
    xi = np.array([-1.2])
    h = 0.5
    got, got_bar = step_new_sde(p, coeffs, h, x, xi)
    assert got[0] == pytest.approx(0.7 + math.sqrt(h) * (-1.2), rel=1e-15)
    assert got_bar[0] == pytest.approx(0.7 + 0.5 * math.sqrt(h) * (-1.2), rel=1e-15)


def test_new_sde_newton_failure_reports_step():
    # y - h y^2 = rhs has no real solution once h*rhs > 1/4
    p = SdeProblem.nonlinear(
        1, f1=lambda x: x**2, f1_jac=lambda x: np.array([[2.0 * x[0]]]),
        sigma=0.0,
    )
    with pytest.raises(NewtonConvergenceError) as info:
        run_trajectory(p, "new_method", 1.0, 3, seed=0, u0=np.array([2.0]))
    assert info.value.step_index == 0


def test_new_sde_implicit_postprocessor_branch():
    # b1 != 0 exercises the implicit postprocessor stage
    amat = np.array([[-2.0]])
    p = SdeProblem.linear(amat)
    coeffs = SchemeCoefficients(a1=0.1, a2=0.5, a3=-0.1, b1=0.2, b2=0.2, c=math.sqrt(0.45))
    x = np.array([1.0])
    xi = np.array([0.5])
    _, x_bar = step_new_sde(p, coeffs, 0.25, x, xi)
    # x_bar solves x_bar = x + b1 h A x_bar + c sqrt(h) J3 xi
    j3 = (1.0 + 0.25) ** -0.5  # (1 - (h/2) a)^{-1/2} with a = -2, h = 1/4
    rhs = 1.0 + coeffs.c * math.sqrt(0.25) * j3 * 0.5
    expect = rhs / (1.0 + 0.2 * 0.25 * 2.0)
    assert x_bar[0] == pytest.approx(expect, rel=1e-12)


# ---------------------------------------------------------------------------
# trajectory driver


def test_trajectory_deterministic_decay():
    p = SpectralProblem(lam=[1.0, 2.0], q=[1.0, 1.0], sigma=0.0)
    u0 = np.array([1.0, -2.0])
    res = run_trajectory(p, "euler", 0.5, 8, seed=0, u0=u0)
    expect = u0 / (1.0 + p.lam * 0.5) ** 8
    np.testing.assert_allclose(res.u, expect, rtol=1e-13)


def test_trajectory_zero_steps_returns_initial_state():
    p = scalar_problem()
    u0 = np.array([0.3])
    for scheme in ("euler", "trapezoidal", "new_method"):
        res = run_trajectory(p, scheme, 0.5, 0, seed=1, u0=u0)
        assert res.u[0] == 0.3
        assert res.u_bar[0] == 0.3


def test_trajectory_bit_reproducible():
    p = SpectralProblem(lam=[1.0, 4.0], q=[1.0, 0.5])
    a = run_trajectory(p, "new_method", 0.25, 20, seed=9)
    b = run_trajectory(p, "new_method", 0.25, 20, seed=9)
    assert np.array_equal(a.u, b.u) and np.array_equal(a.u_bar, b.u_bar)
    c = run_trajectory(p, "new_method", 0.25, 20, seed=10)
    assert not np.array_equal(a.u, c.u)


def test_trajectory_schemes_agree_in_law():
    # same seeds, different schemes: means both ~ 0; with a drift present the
    # paths differ (without one the two chains coincide algebraically)
    p = SpectralProblem(lam=[1.0], q=[1.0], b=[0.5])
    n = 10_000
    eu = np.array([run_trajectory(p, "euler", 0.5, 10, seed=s).u[0] for s in range(n)])
    nw = np.array([run_trajectory(p, "new_method", 0.5, 10, seed=s).u[0] for s in range(n)])
    assert np.max(np.abs(eu - nw)) > 1e-3
    for vals in (eu, nw):
        se = vals.std(ddof=1) / math.sqrt(n)
        assert abs(vals.mean()) < 3.0 * se


def test_driftfree_chains_coincide_and_postprocessor_differs():
    # with F = 0 the one-step noise coefficients of the implicit Euler chain
    # and the postprocessed method's chain are algebraically equal
    p = scalar_problem()
    eu = run_trajectory(p, "euler", 0.5, 10, seed=4)
    nw = run_trajectory(p, "new_method", 0.5, 10, seed=4)
    assert eu.u[0] == pytest.approx(nw.u[0], rel=1e-12)
    assert abs(nw.u_bar[0] - nw.u[0]) > 0.0


def test_trajectory_path_recording():
    p = GridProblem(n_points=4, sigma=1.0)
    res = run_trajectory(p, "new_method", 0.1, 6, seed=2,
                         record_every=2, record_postprocessed=True)
    assert res.path.shape == (4, 2 + 4)  # steps 0,2,4 plus final
    np.testing.assert_allclose(res.path[:, 0], [0, 2, 4, 6])
    np.testing.assert_allclose(res.path[:, 1], [0.0, 0.2, 0.4, 0.6])
    np.testing.assert_allclose(res.path[-1, 2:], res.u_bar)


# ---------------------------------------------------------------------------
# contraction and moment properties


def test_pathwise_contraction_under_common_noise():
    nl = make_nonlinearity("sin")  # L = 2
    p = SpectralProblem(lam=np.linspace(3.0, 40.0, 8), q=np.ones(8),
                        nonlinearity=nl, sigma=1.0)
    lam1, L, h = 3.0, 2.0, 0.37
    factor = (1.0 + L * h) / (1.0 + lam1 * h)
    rng = np.random.default_rng(21)
    for _ in range(200):
        u1 = rng.standard_normal(8)
        u2 = rng.standard_normal(8)
        for _ in range(4):
            xi = rng.standard_normal(8)
            v1 = chain_step(p, "new_method", h, u1, xi)
            v2 = chain_step(p, "new_method", h, u2, xi)
            gap_before = np.linalg.norm(u1 - u2)
            gap_after = np.linalg.norm(v1 - v2)
            assert gap_after <= factor * gap_before * (1.0 + 1e-12)
            # postprocessor shift cancels under common noise
            b1 = postprocess(p, h, v1, xi)
            b2 = postprocess(p, h, v2, xi)
            assert np.linalg.norm(b1 - b2) == pytest.approx(gap_after, rel=1e-12)
            u1, u2 = v1, v2


def test_moment_boundedness_across_step_sizes():
    # stiff spectrum, no blow-up of E|u_n| over 1000 steps for h in {1,...,1/8}
    n_modes = 64
    p_idx = np.arange(1, n_modes + 1)
    nl = make_nonlinearity("sin")
    problem = SpectralProblem(lam=(np.pi * p_idx) ** 2.0, q=np.ones(n_modes),
                              nonlinearity=nl, sigma=1.0)
    n_traj = 40
    for h in (1.0, 0.5, 0.25, 0.125):
        u = np.zeros((n_traj, n_modes))
        sup_mean = 0.0
        streams = [trajectory_rng(int(h * 1000), i) for i in range(n_traj)]
        for _ in range(1000):
            xi = np.stack([sample_noise_increment(problem, g) for g in streams])
            u = chain_step(problem, "new_method", h, u, xi)
            sup_mean = max(sup_mean, float(np.mean(np.linalg.norm(u, axis=1))))
        assert np.all(np.isfinite(u))
        assert sup_mean < 50.0
