"""Exact Gaussian invariant measures of the linear case and derived studies.

With a linear explicit drift (eigenvalues -b_p alongside the stiff -lam_p)
every mode is an independent scalar chain, so the invariant measures of the
continuous dynamics and of all three schemes are centered diagonal
Gaussians with per-mode variances in closed form:

* continuous:      sigma^2 q_p / (2 (lam_p + b_p))
* scheme chain:    fixed point of  v = A^2 v + h B^2 sigma^2 q_p
* postprocessed:   exact value times Rbar(-lam_p h, -b_p h)

Functional errors between two diagonal Gaussians are controlled by the
trace distance sum |q2_p - q1_p| (times half the sup of the Hessian of the
test function), which is also order-sharp; fitting log of that distance
against log h extracts the convergence order of a scheme's invariant
measure, and truncated Sobolev-moment sums classify the spatial regularity
of the sampled fields.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .problems import SpectralProblem
from .stability import (
    METHODS,
    R_bar_polynomial,
    UnstableSchemeError,
    amplification,
    noise_gain,
    post_noise_gain,
)

__all__ = [
    "DiagonalGaussian",
    "exact_invariant",
    "scheme_invariant",
    "trace_distance_bound",
    "exp_neg_sq_moment",
    "OrderStudy",
    "convergence_order_study",
    "RegularityProfile",
    "regularity_profile",
    "REGULARITY_TARGETS",
]


@dataclass(frozen=True)
class DiagonalGaussian:
    """Centered Gaussian on the truncated eigenbasis, one variance per mode."""

    variances: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.variances, dtype=float)
        object.__setattr__(self, "variances", v)
        if v.ndim != 1:
            raise ValueError("variances must be a 1D vector")
        if np.any(v < 0.0) or not np.all(np.isfinite(v)):
            raise ValueError("variances must be finite and nonnegative")

    @property
    def dim(self) -> int:
        return self.variances.size


def _drift_eigenvalues(problem: SpectralProblem) -> np.ndarray:
    if problem.nonlinearity is not None:
        raise ValueError("closed-form invariants need a linear problem")
    return problem.b if problem.b is not None else np.zeros(problem.n_modes)


def exact_invariant(problem: SpectralProblem) -> DiagonalGaussian:
    """Invariant measure of the continuous linear dynamics.

    Per-mode variance sigma^2 q_p / (2 (lam_p + b_p)); every lam_p + b_p
    must be positive.
    """
    b = _drift_eigenvalues(problem)
    alpha = problem.lam + b
    if np.any(alpha <= 0.0):
        p = int(np.argmax(alpha <= 0.0))
        raise ValueError(f"nonpositive lam_p + b_p at mode {p}")
    return DiagonalGaussian(problem.sigma**2 * problem.q / (2.0 * alpha))


def scheme_invariant(
    problem: SpectralProblem,
    method: str,
    h: float,
    which: str = "sampled",
) -> DiagonalGaussian:
    """Invariant measure of a scheme on the linear problem at step h.

    ``which="sampled"`` is the measure the method actually samples: the
    postprocessed one for the new method (closed form through Rbar, so the
    b = 0 exactness is exact in floating point), the chain for the
    baselines.  ``which="chain"`` forces the chain measure.  Per-mode chain
    variances are the exact fixed points v = A^2 v + h B^2 sigma^2 q_p of
    the linear one-step recursion; an unstable mode raises
    :class:`~ergostep.stability.UnstableSchemeError` with its index.
    """
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    if which not in ("sampled", "chain"):
        raise ValueError("which must be 'sampled' or 'chain'")
    if h <= 0.0:
        raise ValueError("h must be positive")
    b = _drift_eigenvalues(problem)
    z = -problem.lam * h
    beta = -b * h
    amp = amplification(method, z, beta)
    unstable = np.abs(amp) >= 1.0
    if np.any(unstable):
        p = int(np.argmax(unstable))
        raise UnstableSchemeError(
            f"{method} at h={h}: mode {p} is mean-square unstable "
            f"(|A| = {abs(amp[p]):.6g})"
        )
    if method == "new_method" and which == "sampled":
        exact = exact_invariant(problem).variances
        return DiagonalGaussian(exact * R_bar_polynomial(z, beta))
    gain = noise_gain(method, z, beta)
    chain = h * problem.sigma**2 * problem.q * gain**2 / (1.0 - amp**2)
    return DiagonalGaussian(chain)


def trace_distance_bound(
    g1: DiagonalGaussian, g2: DiagonalGaussian, hess_sup: float
) -> float:
    """Upper bound on |E_2 phi - E_1 phi| for sup ||D^2 phi|| <= hess_sup.

    Equals (hess_sup / 2) * sum_p |q2_p - q1_p|; sharp in order between
    diagonal Gaussians.
    """
    if g1.dim != g2.dim:
        raise ValueError("Gaussians must share the truncation level")
    return 0.5 * hess_sup * float(np.sum(np.abs(g2.variances - g1.variances)))


def exp_neg_sq_moment(g: DiagonalGaussian) -> float:
    """E[exp(-|u|^2)] under a centered diagonal Gaussian: prod (1+2 q_p)^(-1/2)."""
    return float(np.exp(-0.5 * np.sum(np.log1p(2.0 * g.variances))))


# ---------------------------------------------------------------------------
# order extraction


@dataclass
class OrderStudy:
    """Trace distances per h with fitted slopes.

    ``slope`` is fitted on the finest half of the grid (at least 4 points),
    where the asymptotic rate has set in; ``slope_all`` fits every point and
    ``pairwise_slopes`` are the successive two-point rates, coarse to fine.
    """

    h_grid: np.ndarray
    distances: np.ndarray
    slope: float
    slope_all: float
    pairwise_slopes: np.ndarray
    truncation_ratio: float


def convergence_order_study(
    problem: SpectralProblem,
    method: str,
    h_grid,
    truncation_rtol: float = 0.01,
) -> OrderStudy:
    """Distance of the sampled invariant measure to the exact one, per h.

    D(h) = sum_p |v_p^h - v_p|.  The problem's mode count doubles as the
    truncation check: the distance using half the modes must agree with the
    full sum to ``truncation_rtol`` at every h, otherwise the truncation is
    too small to trust a slope and a ValueError is raised.  Zero distances
    (the exact cases) yield slope nan.
    """
    hs = np.sort(np.asarray([float(h) for h in h_grid]))[::-1]
    if hs.size < 2:
        raise ValueError("h_grid needs at least two entries")
    exact = exact_invariant(problem).variances
    half = problem.n_modes // 2
    distances = np.empty(hs.size)
    worst_ratio = 0.0
    for i, h in enumerate(hs):
        per_mode = np.abs(
            scheme_invariant(problem, method, h).variances - exact
        )
        total = float(per_mode.sum())
        distances[i] = total
        if total > 0.0:
            ratio = float(per_mode[half:].sum()) / total
            worst_ratio = max(worst_ratio, ratio)
    if worst_ratio > truncation_rtol:
        raise ValueError(
            f"truncation tail carries {worst_ratio:.2%} of the distance; "
            "increase the mode count"
        )
    if np.any(distances <= 0.0):
        return OrderStudy(hs, distances, math.nan, math.nan,
                          np.full(hs.size - 1, math.nan), worst_ratio)
    logs_h = np.log(hs)
    logs_d = np.log(distances)
    tail = max(4, hs.size // 2)
    tail = min(tail, hs.size)
    slope = float(np.polyfit(logs_h[-tail:], logs_d[-tail:], 1)[0])
    slope_all = float(np.polyfit(logs_h, logs_d, 1)[0])
    pairwise = np.diff(logs_d) / np.diff(logs_h)
    return OrderStudy(hs, distances, slope, slope_all, pairwise, worst_ratio)


# ---------------------------------------------------------------------------
# spatial regularity


REGULARITY_TARGETS = ("exact", "euler_chain", "new_chain", "new_postprocessed")


@dataclass
class RegularityProfile:
    """Truncated Sobolev moments per s with convergence verdicts."""

    target: str
    s_values: np.ndarray
    moments: np.ndarray        # full-truncation sums
    moments_half: np.ndarray   # half-truncation sums
    verdicts: np.ndarray       # True = convergent
    reg_estimate: float


def _stationary_mode_variances(problem, target, h):
    lam, q, sig = problem.lam, problem.q, problem.sigma
    if target == "exact":
        return sig**2 * q / (2.0 * lam)
    z = -lam * h
    if target == "euler_chain":
        method = "euler"
    elif target in ("new_chain", "new_postprocessed"):
        method = "new_method"
    else:
        raise ValueError(f"target must be one of {REGULARITY_TARGETS}")
    amp = amplification(method, z, 0.0)
    gain = noise_gain(method, z, 0.0)
    var = h * sig**2 * q * gain**2 / (1.0 - amp**2)
    if target == "new_postprocessed":
        var = var + h * sig**2 * q * post_noise_gain("new_method", z) ** 2
    return var


def regularity_profile(
    problem: SpectralProblem,
    target: str,
    h: float,
    s_grid=None,
    divergence_ratio: float = 1.05,
) -> RegularityProfile:
    """Classify the Sobolev regularity of a stationary field, mode-sum style.

    For each s the truncated moment sum(var_p * lam_p^s) is compared between
    half and full truncation: a ratio above ``divergence_ratio`` means the
    series is diverging at that s.  The regularity estimate is the midpoint
    between the last convergent and first divergent grid point.  Linear
    problem with b = 0 only.
    """
    if problem.b is not None or problem.nonlinearity is not None:
        raise ValueError("regularity profile is defined for the pure linear case")
    if s_grid is None:
        s_grid = np.arange(0.05, 2.01, 0.05)
    s_values = np.asarray([float(s) for s in s_grid])
    if s_values.size == 0 or np.any(np.diff(s_values) <= 0.0):
        raise ValueError("s_grid must be increasing and nonempty")
    half = problem.n_modes // 2
    if half < 8:
        raise ValueError("need more modes for a truncation-doubling verdict")
    var = _stationary_mode_variances(problem, target, h)
    lam = problem.lam
    moments = np.empty(s_values.size)
    moments_half = np.empty(s_values.size)
    verdicts = np.empty(s_values.size, dtype=bool)
    for i, s in enumerate(s_values):
        terms = var * lam**s
        full = float(terms.sum())
        part = float(terms[:half].sum())
        moments[i] = full
        moments_half[i] = part
        verdicts[i] = full <= divergence_ratio * part
    if verdicts.all():
        reg = float(s_values[-1])
    elif not verdicts.any():
        reg = float(s_values[0])
    else:
        first_div = int(np.argmin(verdicts))  # first False
        reg = float(0.5 * (s_values[first_div - 1] + s_values[first_div])) \
            if first_div > 0 else float(s_values[0])
    return RegularityProfile(
        target=target,
        s_values=s_values,
        moments=moments,
        moments_half=moments_half,
        verdicts=verdicts,
        reg_estimate=reg,
    )
