"""Second-order conditions of the modified-Euler family and order probes.

A perturbed linearized implicit Euler step with postprocessor, parameterized
by (a1, a2, a3, b1, b2, c), samples the invariant measure to second order
when four scalar residuals vanish,

    r1 = a1^2 + 2 a1 + b1 - c^2          r2 = a1 + a3 + 1/4 + b1 - c^2
    r3 = a2^2 + b2 - c^2                 r4 = -1/4 + a2 + b2 - c^2

together with the operator condition (b2 - b1) [f2, f1] = 0.  The Lie
bracket vanishes only for commuting flows, so b1 = b2 is required in
general; that part is carried as a boolean.  :func:`solve_family`
enumerates the real solutions for fixed b1 = b2 and :func:`check_conditions`
evaluates the residuals for arbitrary coefficients.

:func:`estimate_local_weak_order` closes the loop empirically: it measures
|E phi(X_1) - E phi(X(h))| over a geometric h grid for an implemented
scheme against an exact (or fine-step) reference flow coupled by common
random numbers and fits the local order exponent q + 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .montecarlo import OrderFit, global_order_fit
from .problems import SdeProblem, trajectory_rng
from .schemes import SCHEMES, SchemeCoefficients, chain_step

__all__ = [
    "ConditionResiduals",
    "check_conditions",
    "solve_family",
    "LocalOrderEstimate",
    "estimate_local_weak_order",
]

_SQRT5 = math.sqrt(5.0)


@dataclass(frozen=True)
class ConditionResiduals:
    """Residuals of the four scalar order-two conditions.

    ``commutator_required`` flags b1 != b2, in which case second order
    additionally demands that the implicit and explicit flows commute.
    """

    r1: float
    r2: float
    r3: float
    r4: float
    commutator_required: bool

    def as_array(self) -> np.ndarray:
        return np.array([self.r1, self.r2, self.r3, self.r4])

    @property
    def max_abs(self) -> float:
        return float(np.max(np.abs(self.as_array())))


def check_conditions(coeffs: SchemeCoefficients) -> ConditionResiduals:
    """Evaluate the order-two residuals for arbitrary coefficients."""
    a1, a2, a3, b1, b2, c = coeffs.as_tuple()
    return ConditionResiduals(
        r1=a1 * a1 + 2.0 * a1 + b1 - c * c,
        r2=a1 + a3 + 0.25 + b1 - c * c,
        r3=a2 * a2 + b2 - c * c,
        r4=-0.25 + a2 + b2 - c * c,
        commutator_required=(b1 != b2),
    )


def solve_family(b1: float, b2: float) -> list[SchemeCoefficients]:
    """Solve the residual system for (a1, a2, a3, c) at fixed b1 = b2.

    Subtracting r4 from r3 forces a2 = 1/2, then c^2 = 1/4 + b1, and r1
    reduces to a1^2 + 2 a1 - 1/4 = 0 independently of b1; finally
    a3 = -a1.  Exactly two real solutions exist whenever b1 >= -1/4 (the
    nonnegative root is taken for c); the one minimizing |a1| = |a3| comes
    first.
    """
    if b1 != b2:
        raise ValueError(
            "b1 must equal b2: the commutator term (b2 - b1)[f2, f1] vanishes "
            "only for commuting flows"
        )
    c_sq = 0.25 + b1
    if c_sq < 0.0:
        raise ValueError(f"no real solution: c^2 = 1/4 + b1 = {c_sq} < 0")
    c = math.sqrt(c_sq)
    solutions = []
    for a1 in ((-2.0 + _SQRT5) / 2.0, (-2.0 - _SQRT5) / 2.0):
        solutions.append(
            SchemeCoefficients(a1=a1, a2=0.5, a3=-a1, b1=b1, b2=b2, c=c)
        )
    return solutions


# ---------------------------------------------------------------------------
# empirical local weak order


@dataclass
class LocalOrderEstimate:
    """Fitted local-order exponent with the underlying error table."""

    fit: OrderFit
    table: list  # rows (h, |E phi(X_1) - E phi(X(h))|, stderr)

    @property
    def slope(self) -> float:
        return self.fit.slope


def _exact_ou_flow(problem: SdeProblem):
    """Exact one-step flow of the scalar linear problem, sharing the draw."""
    a = float(problem.a_matrix[0, 0])
    if a >= 0.0:
        raise ValueError("exact reference needs a dissipative linear part")

    def flow(x0, h, xi):
        mean = math.exp(a * h) * x0
        var = problem.sigma**2 * (1.0 - math.exp(2.0 * a * h)) / (-2.0 * a)
        return mean + math.sqrt(var) * xi

    return flow


def estimate_local_weak_order(
    scheme: str,
    problem: SdeProblem,
    phi: Callable[[np.ndarray], np.ndarray],
    h_grid,
    n_samples: int,
    x0: float = 2.0,
    seed: int = 0,
    fine_substeps: int = 64,
) -> LocalOrderEstimate:
    """Fit log|E phi(X_1) - E phi(X(h))| against log h over a geometric grid.

    The scheme takes a single step from ``x0``; the reference is the exact
    transition when the problem is scalar linear without explicit drift,
    otherwise a fine-step run of the postprocessed chain over the same
    Brownian increment (``fine_substeps`` substeps, common random numbers).
    A noisy fit is reported through the excluded points of the returned
    :class:`~ergostep.montecarlo.OrderFit`; the slope estimates q + 1 for a
    scheme of local weak order q.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"scheme must be one of {SCHEMES}")
    if problem.dim != 1 or not problem.is_linear or problem.a_matrix is None:
        raise ValueError("local-order estimation is implemented for scalar "
                         "problems with a linear implicit part")
    hs = sorted((float(h) for h in h_grid), reverse=True)
    if len(hs) < 4:
        raise ValueError("need at least 4 h values in geometric progression")
    exact = problem.f2 is None
    flow = _exact_ou_flow(problem) if exact else None
    rng = trajectory_rng(seed, 0)
    table = []
    for h in hs:
        if exact and problem.sigma == 0.0:
            x1 = chain_step(problem, scheme, h, np.array([x0]), np.zeros(1))
            diff = np.array([phi(x1[0]) - phi(flow(x0, h, 0.0))])
        elif exact:
            xi = rng.standard_normal(n_samples)
            x1 = chain_step(
                problem, scheme, h, np.full((n_samples, 1), x0), xi[:, None]
            )
            diff = phi(x1[:, 0]) - phi(flow(x0, h, xi))
        else:
            g = rng.standard_normal((n_samples, fine_substeps))
            xi = g.sum(axis=1) / math.sqrt(fine_substeps)
            x1 = chain_step(
                problem, scheme, h, np.full((n_samples, 1), x0), xi[:, None]
            )
            h_fine = h / fine_substeps
            y = np.full((n_samples, 1), x0)
            for k in range(fine_substeps):
                y = chain_step(problem, "new_method", h_fine, y, g[:, k][:, None])
            diff = phi(x1[:, 0]) - phi(y[:, 0])
        mean = float(diff.mean())
        stderr = float(diff.std(ddof=1) / math.sqrt(diff.size)) if diff.size > 1 else 0.0
        table.append((h, abs(mean), stderr))
    fit = global_order_fit(table)
    return LocalOrderEstimate(fit=fit, table=table)
