import math

import numpy as np
import pytest
import scipy.sparse as sparse
import scipy.sparse.linalg as sparse_linalg

from ergostep.problems import (
    GridProblem,
    SpectralProblem,
    estimate_s_bar,
    load_problem,
    make_nonlinearity,
    noise_scale,
    resolvent_apply,
    sample_noise_increment,
    trajectory_rng,
)


def test_resolvent_j1_scalar():
    p = SpectralProblem(lam=[1.0], q=[1.0])
    out = resolvent_apply(p, "J1", 1.0, np.array([1.0]))
    assert out[0] == pytest.approx(0.5, abs=1e-15)


def test_resolvent_j2_scalar_matches_arithmetic_oracle():
    p = SpectralProblem(lam=[1.0], q=[1.0])
    out = resolvent_apply(p, "J2", 1.0, np.array([1.0]))
    oracle = 1.0 / (1.0 + (3.0 - math.sqrt(2.0)) / 2.0)
    assert out[0] == pytest.approx(oracle, rel=1e-15)
    assert out[0] == pytest.approx(0.557758, abs=1e-6)


def test_resolvent_j3_scalar():
    p = SpectralProblem(lam=[2.0], q=[1.0])
    out = resolvent_apply(p, "J3", 1.0, np.array([1.0]))
    assert out[0] == pytest.approx((1.0 + 1.0) ** -0.5, rel=1e-15)


def test_resolvent_rejects_bad_input():
    p = SpectralProblem(lam=[1.0, 2.0], q=[1.0, 1.0])
    with pytest.raises(ValueError):
        resolvent_apply(p, "J1", 1.0, np.zeros(3))
    with pytest.raises(ValueError):
        resolvent_apply(p, "J1", -0.5, np.zeros(2))
    with pytest.raises(ValueError):
        resolvent_apply(p, "J7", 1.0, np.zeros(2))


def test_resolvent_linearity():
    rng = np.random.default_rng(0)
    lam = np.sort(rng.uniform(0.5, 50.0, 12))
    p = SpectralProblem(lam=lam, q=np.ones(12))
    g = GridProblem(n_points=17)
    for problem in (p, g):
        u = rng.standard_normal(problem.dim)
        v = rng.standard_normal(problem.dim)
        for kind in ("J1", "J2", "J3"):
            lhs = resolvent_apply(problem, kind, 0.3, 2.0 * u - 1.5 * v)
            rhs = 2.0 * resolvent_apply(problem, kind, 0.3, u) - 1.5 * resolvent_apply(
                problem, kind, 0.3, v
            )
            np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


def test_j1_contraction_componentwise():
    rng = np.random.default_rng(1)
    lam = np.sort(rng.uniform(1.0, 100.0, 20))
    p = SpectralProblem(lam=lam, q=np.ones(20))
    v = rng.standard_normal(20)
    h = 0.7
    out = resolvent_apply(p, "J1", h, v)
    assert np.all(np.abs(out) <= np.abs(v) / (1.0 + lam[0] * h) + 1e-15)


def test_grid_j3_defining_property():
    # <J3^T J3 v, v> must equal <(I - h/2 A)^{-1} v, v>
    g = GridProblem(n_points=23)
    h = 0.05
    rng = np.random.default_rng(2)
    amat = g.operator_matrix()
    shifted = sparse.identity(23, format="csc") - (h / 2.0) * amat
    for _ in range(20):
        v = rng.standard_normal(23)
        j3v = resolvent_apply(g, "J3", h, v)
        lhs = float(np.dot(j3v, j3v))  # J3 symmetric
        rhs = float(np.dot(sparse_linalg.spsolve(shifted, v), v))
        assert lhs == pytest.approx(rhs, abs=1e-10)


def test_grid_eigenvalues_match_dense_solver():
    g = GridProblem(n_points=12)
    dense = -g.operator_matrix().toarray()
    np.testing.assert_allclose(np.sort(g.lam), np.linalg.eigvalsh(dense), rtol=1e-10)


def test_grid_operator_stencil():
    g = GridProblem(n_points=5)
    amat = g.operator_matrix().toarray()
    dx2 = g.dx**2
    assert np.allclose(np.diag(amat), -2.0 / dx2)
    assert np.allclose(np.diag(amat, 1), 1.0 / dx2)
    assert g.dx == pytest.approx(1.0 / 6.0)


def test_batched_apply_matches_rowwise():
    g = GridProblem(n_points=9)
    rng = np.random.default_rng(3)
    batch = rng.standard_normal((4, 9))
    for kind in ("J1", "J2", "J3"):
        out = resolvent_apply(g, kind, 0.2, batch)
        rows = np.stack([resolvent_apply(g, kind, 0.2, r) for r in batch])
        np.testing.assert_allclose(out, rows, rtol=1e-13)


# ---------------------------------------------------------------------------
# noise


def test_zero_covariance_gives_zero_increment():
    p = SpectralProblem(lam=[1.0, 2.0, 3.0], q=[0.0, 0.0, 0.0])
    xi = sample_noise_increment(p, trajectory_rng(0))
    assert np.all(xi == 0.0)


def test_spectral_increment_variance():
    p = SpectralProblem(lam=[1.0, 2.0], q=[1.0, 1.0])
    rng = trajectory_rng(7)
    draws = np.stack([sample_noise_increment(p, rng) for _ in range(100_000)])
    var = draws.var(axis=0, ddof=1)
    stderr = math.sqrt(2.0 / draws.shape[0])  # sample-variance stderr for unit variance
    assert np.all(np.abs(var - 1.0) < 3.0 * stderr)


def test_grid_increment_variance_is_inverse_dx():
    g = GridProblem(n_points=3)  # dx = 1/4
    rng = trajectory_rng(8)
    draws = np.stack([sample_noise_increment(g, rng) for _ in range(100_000)])
    var = draws.var(axis=0, ddof=1)
    stderr = 4.0 * math.sqrt(2.0 / draws.shape[0])
    assert np.all(np.abs(var - 4.0) < 3.0 * stderr)


def test_trajectory_rng_reproducible_and_keyed():
    a = trajectory_rng(1, 2).standard_normal(8)
    b = trajectory_rng(1, 2).standard_normal(8)
    c = trajectory_rng(1, 3).standard_normal(8)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


# ---------------------------------------------------------------------------
# validation


def test_spectral_invariant_violations():
    with pytest.raises(ValueError):
        SpectralProblem(lam=[0.0, 1.0], q=[1.0, 1.0])
    with pytest.raises(ValueError):
        SpectralProblem(lam=[2.0, 1.0], q=[1.0, 1.0])
    with pytest.raises(ValueError):
        SpectralProblem(lam=[1.0], q=[-1.0])
    with pytest.raises(ValueError):
        SpectralProblem(lam=[1.0], q=[1.0], b=[1.5])
    with pytest.raises(ValueError):
        SpectralProblem(lam=[1.0], q=[1.0], nonlinearity=make_nonlinearity("sin"))
    with pytest.raises(ValueError):
        SpectralProblem(
            lam=[3.0], q=[1.0], b=[0.5], nonlinearity=make_nonlinearity("linear:1")
        )


def test_cubic_nonlinearity_is_allowed_without_lipschitz():
    nl = make_nonlinearity("cubic")
    assert nl.lipschitz is None
    p = SpectralProblem(lam=[1.0], q=[1.0], nonlinearity=nl)
    assert p.nonlinearity.fn(np.array([2.0]))[0] == pytest.approx(-12.0)


def test_nonlinearity_registry():
    lin = make_nonlinearity("linear:2")
    assert lin.lipschitz == 2.0
    assert lin.fn(np.array([3.0]))[0] == pytest.approx(-6.0)
    sin = make_nonlinearity("sin")
    assert sin.lipschitz == 2.0
    assert make_nonlinearity("none") is None
    with pytest.raises(ValueError):
        make_nonlinearity("tanh")


# ---------------------------------------------------------------------------
# trace diagnostics


def test_s_bar_white_noise_dirichlet_spectrum():
    # lam_p = (pi p)^2 with unit noise: finite trace exactly for s < 1/2
    n = 200_000
    p = np.arange(1, n + 1)
    problem = SpectralProblem(lam=(np.pi * p) ** 2.0, q=np.ones(n))
    diag = estimate_s_bar(problem, [0.25, 0.5, 0.75], [n // 2, n])
    assert diag.verdicts[0.25] is True
    assert diag.verdicts[0.75] is False
    assert diag.s_bar == pytest.approx(0.25)


def test_s_bar_trace_class_noise():
    n = 2_000
    p = np.arange(1, n + 1)
    problem = SpectralProblem(lam=(np.pi * p) ** 2.0, q=2.0 ** (-p.astype(float)))
    diag = estimate_s_bar(problem, [0.1, 0.5, 0.9], [n // 2, n])
    assert all(diag.verdicts.values())
    assert diag.s_bar == pytest.approx(0.9)


def test_s_bar_partial_traces_monotone():
    n = 4_000
    p = np.arange(1, n + 1)
    problem = SpectralProblem(lam=(np.pi * p) ** 2.0, q=np.ones(n))
    diag = estimate_s_bar(problem, [0.3, 0.6], [500, 1000, 2000, 4000])
    for sums in diag.partial_traces.values():
        assert np.all(sums >= 0.0)
        assert np.all(np.diff(sums) >= 0.0)


def test_s_bar_rejects_bad_grids():
    problem = SpectralProblem(lam=[1.0, 2.0], q=[1.0, 1.0])
    with pytest.raises(ValueError):
        estimate_s_bar(problem, [], [1, 2])
    with pytest.raises(ValueError):
        estimate_s_bar(problem, [0.5], [2])
    with pytest.raises(ValueError):
        estimate_s_bar(problem, [1.5], [1, 2])


# ---------------------------------------------------------------------------
# config loading


def test_load_problem_spectral(tmp_path):
    cfg = {
        "model": "spectral",
        "n": 8,
        "lambda_law": "dirichlet_1d",
        "q_law": "white",
        "sigma": 2.0,
        "nonlinearity": "none",
        "b": 1.0,
    }
    path = tmp_path / "problem.json"
    path.write_text(__import__("json").dumps(cfg))
    p = load_problem(path)
    assert isinstance(p, SpectralProblem)
    assert p.n_modes == 8
    assert p.lam[0] == pytest.approx(np.pi**2)
    assert p.sigma == 2.0
    assert np.all(p.b == 1.0)


def test_load_problem_grid_and_explicit_lists():
    g = load_problem({"model": "grid", "n": 16, "nonlinearity": "sin"})
    assert isinstance(g, GridProblem)
    assert g.nonlinearity.name == "sin"
    p = load_problem({
        "model": "spectral", "n": 3,
        "lambda_law": [1.0, 2.0, 3.0], "q_law": [1.0, 0.5, 0.25],
    })
    np.testing.assert_allclose(p.lam, [1.0, 2.0, 3.0])
    np.testing.assert_allclose(p.q, [1.0, 0.5, 0.25])


def test_load_problem_geometric_q_and_lipschitz_override():
    p = load_problem({
        "model": "spectral", "n": 4, "q_law": "geometric:0.5",
        "nonlinearity": "linear:1", "lipschitz": 0.25,
    })
    np.testing.assert_allclose(p.q, [0.5, 0.25, 0.125, 0.0625])
    assert p.nonlinearity.lipschitz == 0.25


def test_noise_scale_shapes():
    p = SpectralProblem(lam=[1.0, 4.0], q=[4.0, 9.0])
    np.testing.assert_allclose(noise_scale(p), [2.0, 3.0])
    g = GridProblem(n_points=3)
    np.testing.assert_allclose(noise_scale(g), [2.0, 2.0, 2.0])
