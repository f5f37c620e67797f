import math

import numpy as np
import pytest

from ergostep.montecarlo import ergodic_average
from ergostep.problems import SpectralProblem
from ergostep.stability import (
    EXACTNESS_BOUND_CONSTANT,
    R,
    R_bar,
    R_bar_polynomial,
    RationalStability,
    UnstableSchemeError,
    amplification,
    is_stable,
    l_stability_verdict,
    lemma6_bound_check,
    noise_gain,
)

SQRT2 = math.sqrt(2.0)


def test_euler_limiting_variance_closed_form():
    # R = 2/(2 - z) at beta = 0
    assert R("euler", -2.0) == pytest.approx(0.5, rel=1e-14)
    assert R("euler", -1.0) == pytest.approx(2.0 / 3.0, rel=1e-14)
    z = -np.logspace(-3, 3, 50)
    np.testing.assert_allclose(R("euler", z), 2.0 / (2.0 - z), rtol=1e-12)


def test_euler_limiting_variance_against_chain_simulation():
    # stationary variance of the simulated chain ~ (sigma^2/2 lambda) R(z)
    lam, h = 1.0, 0.5
    problem = SpectralProblem(lam=[lam], q=[1.0])
    est = ergodic_average(problem, "euler", h, 300_000, 2_000, seed=6,
                          functional="second_moment")
    expect = 0.5 * float(R("euler", -lam * h))
    assert abs(est.mean - expect) < 4.0 * est.stderr


def test_trapezoidal_exact_at_beta_zero():
    z = -np.logspace(-4, 4, 60)
    np.testing.assert_allclose(R("trapezoidal", z), np.ones_like(z), rtol=1e-12)


def test_new_method_R_consistent_with_Rbar_identity():
    # Rbar = R - 2 z D(z)^2 must equal 1, so R(-1, 0) = 1 + 2 z D^2 = 2/3
    assert R("new_method", -1.0) == pytest.approx(2.0 / 3.0, rel=1e-13)


def test_exactness_lines():
    z = -np.logspace(-6, 6, 1000)
    vals = R_bar("new_method", z, 0.0)
    np.testing.assert_allclose(vals, 1.0, atol=1e-10)
    # z = 0 line holds for any beta (rational continuation)
    for beta in (-0.5, 0.5):
        assert R_bar("new_method", 0.0, beta, check_stability=False) == 1.0


def test_dual_route_agreement_on_random_stable_pairs():
    rng = np.random.default_rng(8)
    for _ in range(300):
        z = -rng.uniform(0.05, 50.0)
        beta = rng.uniform(-0.9, min(1.0, abs(z)) * 0.99)
        rs = RationalStability.for_method("new_method")
        definition = (
            rs.post_amp(z) ** 2 * R("new_method", z, beta)
            - 2.0 * (z + beta) * rs.post_gain(z) ** 2
        )
        poly = R_bar_polynomial(z, beta)
        assert definition == pytest.approx(poly, rel=1e-12, abs=1e-12)


def test_proposition_barrier_euler_not_exact():
    assert R("euler", -1.0) != pytest.approx(1.0, abs=1e-3)


def test_instability_raises_distinct_verdict():
    # euler with beta >= |z| has |A| >= 1
    with pytest.raises(UnstableSchemeError):
        R("euler", -0.5, 0.6)
    assert not is_stable("euler", -0.5, 0.6)
    # continuation still evaluable when explicitly requested
    value = R("euler", -0.5, 0.6, check_stability=False)
    assert np.isfinite(value)


def test_amplification_and_gain_shapes():
    z = np.array([-1.0, -2.0])
    assert amplification("euler", z).shape == (2,)
    assert noise_gain("new_method", z).shape == (2,)
    # new method shares the Euler amplification (the L-stable one)
    np.testing.assert_allclose(
        amplification("new_method", z, 0.3), amplification("euler", z, 0.3)
    )


def test_l_stability_verdicts():
    assert l_stability_verdict("euler") == "L_stable"
    assert l_stability_verdict("new_method") == "L_stable"
    assert l_stability_verdict("trapezoidal") == "A_stable_only"


def test_lemma6_zero_lines():
    report = lemma6_bound_check([0.0, -1.0], [0.0])
    assert report.max_ratio == 0.0
    assert report.passed


def test_lemma6_bound_on_grid():
    z = -np.logspace(-3, 3, 120)
    beta = np.concatenate([-np.linspace(0.01, 0.99, 30), np.linspace(0.01, 0.99, 30)])
    report = lemma6_bound_check(z, beta)
    assert report.passed
    assert 0.0 < report.max_ratio <= 1.0


def test_lemma6_near_origin_stays_below_extremal_constant():
    z = np.array([-1e-9, -1e-6, -1e-3])
    beta = np.array([-1e-6, 1e-6, -1e-9])
    report = lemma6_bound_check(z, beta)
    assert report.passed
    # the bound's constant is (P1(0)+P2(0))/P3(0) scaled by 4
    assert EXACTNESS_BOUND_CONSTANT == pytest.approx((30.0 - 12.0 * SQRT2) / 2.0)


def test_lemma6_rejects_positive_z():
    with pytest.raises(ValueError):
        lemma6_bound_check([1.0], [0.5])


def test_postprocessed_chain_samples_exactly():
    # time averages of the postprocessed chain match the stationary normal
    problem = SpectralProblem(lam=[1.0], q=[1.0])
    for h in (0.1, 0.5, 1.0):
        est = ergodic_average(problem, "new_method", h, 200_000, 2_000, seed=13,
                              functional="second_moment")
        expect = 0.5 * float(R_bar("new_method", -h, 0.0))
        assert expect == 1.0 * 0.5
        assert abs(est.mean - expect) < 4.0 * est.stderr
