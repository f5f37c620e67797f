"""Stability functions of the integrators on the scalar test equation.

On dX = -lambda X dt + sigma dW every scheme here is an affine recursion

    X_{n+1} = A(z, beta) X_n + B(z, beta) sqrt(h) sigma xi_n,
    z = -lambda h,

with an optional postprocessor Xbar_n = C(z) X_n + D(z) sqrt(h) sigma xi_n.
``beta`` is the second parameter entering when an additional bounded linear
drift with eigenvalue -beta/h acts explicitly (the per-mode reduction of the
linear semilinear case); ``beta = 0`` is the plain test equation.

The normalized limiting second moments

    R(z, beta)    = -2 (z + beta) B^2 / (1 - A^2)
    Rbar(z, beta) = C^2 R - 2 (z + beta) D^2

measure invariant-measure exactness: the chain samples the stationary
variance sigma^2/(2 lambda) exactly iff R = 1.  For the postprocessed
method Rbar also has a closed polynomial form

    Rbar(z, beta) = 1 + beta z (P1(z) beta + P2(z)) / ((2 + beta - z) P3(z))

which is evaluated alongside the definition and cross-checked; it makes the
exactness lines Rbar(z, 0) = Rbar(0, beta) = 1 hold exactly in floating
point.  The deviation obeys the uniform bound

    |1 - Rbar(z, beta)| <= |z beta| (15 - 6 sqrt(2)) / (4 (1 - z)^2)

for z <= 0 and beta in (-1, min(1, |z|)), checked pointwise by
:func:`lemma6_bound_check`.

The A, B factors of the baselines are derived from the scheme definitions
(not quoted formulas) and are cross-checked against chain simulations in the
test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "METHODS",
    "RationalStability",
    "UnstableSchemeError",
    "amplification",
    "noise_gain",
    "post_amplification",
    "post_noise_gain",
    "R",
    "R_bar",
    "R_bar_polynomial",
    "is_stable",
    "l_stability_verdict",
    "Lemma6Report",
    "lemma6_bound_check",
    "EXACTNESS_BOUND_CONSTANT",
]

METHODS = ("euler", "trapezoidal", "new_method")

_SQRT2 = math.sqrt(2.0)
_ALPHA = (3.0 - _SQRT2) / 2.0

# sup over the admissible region of 4 (1-z)^2 |1 - Rbar| / |z beta|
EXACTNESS_BOUND_CONSTANT = 15.0 - 6.0 * _SQRT2


class UnstableSchemeError(ValueError):
    """Raised when |A(z, beta)| >= 1: no limiting second moment exists."""


def _amp_euler(z, beta):
    return (1.0 + beta) / (1.0 - z)


def _gain_euler(z, beta):
    return 1.0 / (1.0 - z) + 0.0 * beta


def _amp_trapezoidal(z, beta):
    return (1.0 + 0.5 * z + beta) / (1.0 - 0.5 * z)


def _gain_trapezoidal(z, beta):
    return 1.0 / (1.0 - 0.5 * z) + 0.0 * beta


def _gain_new(z, beta):
    return (1.0 + 0.5 * beta - _ALPHA * z) / ((1.0 - z) * (1.0 - _ALPHA * z))


def _post_noise_new(z):
    return 0.5 / np.sqrt(1.0 - 0.5 * z)


def _zero(z):
    return 0.0 * z


def _one(z):
    return 1.0 + 0.0 * z


@dataclass(frozen=True)
class RationalStability:
    """Evaluators A(z, beta), B(z, beta), C(z), D(z) of one method."""

    method_id: str
    amp: Callable
    gain: Callable
    post_amp: Callable
    post_gain: Callable

    @classmethod
    def for_method(cls, method: str) -> "RationalStability":
        if method == "euler":
            return cls(method, _amp_euler, _gain_euler, _one, _zero)
        if method == "trapezoidal":
            return cls(method, _amp_trapezoidal, _gain_trapezoidal, _one, _zero)
        if method == "new_method":
            return cls(method, _amp_euler, _gain_new, _one, _post_noise_new)
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")


def amplification(method: str, z, beta=0.0):
    """A(z, beta): one-step factor on the state."""
    return RationalStability.for_method(method).amp(np.asarray(z, float), np.asarray(beta, float))


def noise_gain(method: str, z, beta=0.0):
    """B(z, beta): one-step factor on sqrt(h) sigma xi."""
    return RationalStability.for_method(method).gain(np.asarray(z, float), np.asarray(beta, float))


def post_amplification(method: str, z):
    return RationalStability.for_method(method).post_amp(np.asarray(z, float))


def post_noise_gain(method: str, z):
    return RationalStability.for_method(method).post_gain(np.asarray(z, float))


def is_stable(method: str, z, beta=0.0):
    """Mean-square stability |A(z, beta)| < 1 (elementwise)."""
    return np.abs(amplification(method, z, beta)) < 1.0


def _require_stable(method, z, beta, check_stability):
    if not check_stability:
        return
    amp = np.abs(amplification(method, z, beta))
    if np.any(amp >= 1.0):
        bad = np.argmax(amp >= 1.0) if np.ndim(amp) else None
        where = f" (first offending grid index {bad})" if bad is not None else ""
        raise UnstableSchemeError(
            f"{method}: |A(z, beta)| >= 1, the chain has no limiting second moment{where}"
        )


def R(method: str, z, beta=0.0, check_stability: bool = True):
    """Normalized limiting second moment of the chain.

    lim E|X_n|^2 = sigma^2/(2 lambda) * R(z, beta).  With
    ``check_stability`` (the default) an unstable (z, beta) raises
    :class:`UnstableSchemeError` instead of returning a number; disabling it
    evaluates the rational function as-is (useful on the exactness lines,
    where the formula extends by continuity).
    """
    z = np.asarray(z, dtype=float)
    beta = np.asarray(beta, dtype=float)
    _require_stable(method, z, beta, check_stability)
    a = amplification(method, z, beta)
    b = noise_gain(method, z, beta)
    return -2.0 * (z + beta) * b**2 / (1.0 - a**2)


def R_bar_polynomial(z, beta):
    """Closed polynomial form of Rbar for the postprocessed method."""
    z = np.asarray(z, dtype=float)
    beta = np.asarray(beta, dtype=float)
    p1 = 10.0 - 4.0 * _SQRT2 - (11.0 - 6.0 * _SQRT2) * z
    p2 = 20.0 - 8.0 * _SQRT2 - (44.0 - 24.0 * _SQRT2) * z + (11.0 - 6.0 * _SQRT2) * z**2
    p3 = (2.0 - z) * (2.0 - (3.0 - _SQRT2) * z) ** 2
    return 1.0 + beta * z * (p1 * beta + p2) / ((2.0 + beta - z) * p3)


def R_bar(method: str, z, beta=0.0, check_stability: bool = True):
    """Normalized limiting second moment of the postprocessed value.

    Rbar = C^2 R - 2 (z + beta) D^2.  For the postprocessed method the
    closed polynomial form is evaluated as a second route and the two are
    required to agree; the polynomial value is returned since it does not
    suffer the z -> 0 cancellation of the definition (in particular the
    exactness lines evaluate to exactly 1).
    """
    z = np.asarray(z, dtype=float)
    beta = np.asarray(beta, dtype=float)
    r = R(method, z, beta, check_stability)
    rs = RationalStability.for_method(method)
    value = rs.post_amp(z) ** 2 * r - 2.0 * (z + beta) * rs.post_gain(z) ** 2
    if method == "new_method":
        poly = R_bar_polynomial(z, beta)
        err = np.max(np.abs(value - poly) / np.maximum(1.0, np.abs(poly)))
        if err > 1e-9:
            raise RuntimeError(
                f"Rbar evaluation routes disagree by {err:.3e}; "
                "definition and polynomial form should match"
            )
        return poly
    return value


def l_stability_verdict(method: str) -> str:
    """Classify the severe-stiffness limit of |A(z)| at beta = 0.

    Evaluated at z = -1e12: below 1e-6 means damping of arbitrarily stiff
    modes (``L_stable``); within 1e-6 of 1 means bounded but undamped
    (``A_stable_only``); anything else is ``unstable_region``.
    """
    tail = abs(float(amplification(method, -1e12, 0.0)))
    if tail < 1e-6:
        return "L_stable"
    if abs(tail - 1.0) < 1e-6:
        return "A_stable_only"
    return "unstable_region"


@dataclass
class Lemma6Report:
    max_ratio: float
    n_points: int
    passed: bool


def lemma6_bound_check(z_grid, beta_grid) -> Lemma6Report:
    """Check |1 - Rbar| <= |z beta| (15 - 6 sqrt 2)/(4 (1-z)^2) pointwise.

    The grids are crossed and restricted to the admissible region z <= 0,
    -1 < beta < min(1, |z|).  On the exactness lines z = 0 or beta = 0 both
    sides vanish and the ratio is defined as 0 by continuity.  Returns the
    maximum ratio of left to right side, which must be <= 1.
    """
    z = np.asarray(z_grid, dtype=float).ravel()
    beta = np.asarray(beta_grid, dtype=float).ravel()
    if z.size == 0 or beta.size == 0:
        raise ValueError("z_grid and beta_grid must be nonempty")
    if np.any(z > 0.0):
        raise ValueError("z grid must be nonpositive")
    zz, bb = np.meshgrid(z, beta, indexing="ij")
    admissible = (bb > -1.0) & (bb < np.minimum(1.0, np.abs(zz)))
    on_line = (zz == 0.0) | (bb == 0.0)
    keep = admissible | on_line
    zz, bb = zz[keep], bb[keep]
    lhs = np.abs(1.0 - R_bar_polynomial(zz, bb))
    rhs = np.abs(zz * bb) * EXACTNESS_BOUND_CONSTANT / (4.0 * (1.0 - zz) ** 2)
    ratio = np.zeros_like(lhs)
    interior = rhs > 0.0
    ratio[interior] = lhs[interior] / rhs[interior]
    max_ratio = float(ratio.max()) if ratio.size else 0.0
    return Lemma6Report(
        max_ratio=max_ratio,
        n_points=int(zz.size),
        passed=bool(max_ratio <= 1.0 + 1e-12),
    )
