"""One-step maps and trajectory driver for the three time integrators.

All schemes treat the stiff linear part implicitly and the remaining drift
explicitly, advancing with time-normalized noise increments xi (one vector
per step, so that the stochastic term of a step is sigma * sqrt(h) * xi):

* linearized implicit Euler:   v' = J1 (v + h F(v) + sqrt(h) sigma xi)
* trapezoidal (Crank-Nicolson): (I - h/2 A) u' = (I + h/2 A) u + h F(u)
                                                + sqrt(h) sigma xi
* implicit-explicit sampler with postprocessor ("new method"): the chain

      u' = J1 (u + h F(u + 1/2 sqrt(h) sigma J2 xi)
               + (sqrt(2)-1)/2 sqrt(h) sigma J2 xi)
               + (3-sqrt(2))/2 sqrt(h) sigma J2 xi

  together with the cheap end-of-trajectory postprocessor
  u_bar = u + 1/2 sqrt(h) sigma J3 xi, which is what raises the order of
  invariant-measure sampling.  The general coefficient family behind it is
  parameterized by :class:`SchemeCoefficients`, and the fully nonlinear
  implicit version (a nonlinear implicitly treated term f1) is provided by
  :func:`step_new_sde` with a damped Newton solve of the implicit stage.

Step maps are pure functions of (state, noise) and accept batched states of
shape (batch, dim), which the Monte-Carlo driver relies on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .problems import (
    GridProblem,
    Problem,
    RESOLVENT_SHIFTS,
    SdeProblem,
    SpectralProblem,
    apply_linear,
    apply_sqrt_resolvent,
    drift,
    noise_scale,
    sample_noise_increment,
    solve_shifted,
    trajectory_rng,
)

__all__ = [
    "SCHEMES",
    "SchemeCoefficients",
    "StepperState",
    "TrajectoryResult",
    "NewtonConvergenceError",
    "step_linearized_euler",
    "step_trapezoidal",
    "step_new_spde",
    "step_new_sde",
    "chain_step",
    "postprocess",
    "run_trajectory",
    "save_path_record",
]

SCHEMES = ("euler", "trapezoidal", "new_method")

_SQRT2 = math.sqrt(2.0)
_SQRT5 = math.sqrt(5.0)
_J2_SHIFT = RESOLVENT_SHIFTS["J2"]


@dataclass(frozen=True)
class SchemeCoefficients:
    """Coefficients (a1, a2, a3, b1, b2, c) of the modified-Euler family.

    The canonical choice solving the second-order conditions with the
    simplest postprocessor is a1 = -a3 = (sqrt(5)-2)/2, a2 = c = 1/2,
    b1 = b2 = 0.
    """

    a1: float
    a2: float
    a3: float
    b1: float
    b2: float
    c: float

    @classmethod
    def canonical(cls) -> "SchemeCoefficients":
        a1 = (_SQRT5 - 2.0) / 2.0
        return cls(a1=a1, a2=0.5, a3=-a1, b1=0.0, b2=0.0, c=0.5)

    def as_tuple(self):
        return (self.a1, self.a2, self.a3, self.b1, self.b2, self.c)


@dataclass
class StepperState:
    """Markov pair (u_n, u_bar_{n-1}) plus bookkeeping.

    ``u_bar`` is the postprocessed value produced alongside u_n from the
    previous step's noise; it never feeds back into the dynamics.
    """

    u: np.ndarray
    u_bar: np.ndarray | None
    step_index: int
    h: float


@dataclass
class TrajectoryResult:
    u: np.ndarray
    u_bar: np.ndarray
    path: np.ndarray | None


class NewtonConvergenceError(RuntimeError):
    """Implicit stage failed to converge; carries the trajectory step index."""

    def __init__(self, message: str, step_index: int | None = None):
        super().__init__(message)
        self.step_index = step_index


def _check_scheme(scheme: str):
    if scheme not in SCHEMES:
        raise ValueError(f"scheme must be one of {SCHEMES}, got {scheme!r}")


# ---------------------------------------------------------------------------
# one-step maps (linear implicit part)


def step_linearized_euler(problem: Problem, h: float, u, xi) -> np.ndarray:
    """v' = J1 (v + h F(v) + sqrt(h) sigma xi)."""
    u = np.asarray(u, dtype=float)
    rhs = u + h * drift(problem, u) + math.sqrt(h) * problem.sigma * np.asarray(xi)
    return solve_shifted(problem, 1.0, h, rhs)


def step_trapezoidal(problem: Problem, h: float, u, xi) -> np.ndarray:
    """(I - h/2 A) u' = u + h/2 A u + h F(u) + sqrt(h) sigma xi."""
    u = np.asarray(u, dtype=float)
    rhs = (
        u
        + 0.5 * h * apply_linear(problem, u)
        + h * drift(problem, u)
        + math.sqrt(h) * problem.sigma * np.asarray(xi)
    )
    return solve_shifted(problem, 0.5, h, rhs)


def _new_chain_step(problem: Problem, h: float, u, xi) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    w = math.sqrt(h) * problem.sigma * solve_shifted(problem, _J2_SHIFT, h, np.asarray(xi))
    inner = u + h * drift(problem, u + 0.5 * w) + ((_SQRT2 - 1.0) / 2.0) * w
    return solve_shifted(problem, 1.0, h, inner) + ((3.0 - _SQRT2) / 2.0) * w


def postprocess(problem: Problem, h: float, u, xi) -> np.ndarray:
    """u_bar = u + 1/2 sqrt(h) sigma J3 xi, with the step's own noise draw."""
    u = np.asarray(u, dtype=float)
    return u + 0.5 * math.sqrt(h) * problem.sigma * apply_sqrt_resolvent(
        problem, h, np.asarray(xi)
    )


def step_new_spde(problem: Problem, h: float, u, xi):
    """One step of the postprocessed sampler with linear implicit part.

    Returns the pair (u_{n+1}, u_bar_n); both are functions of (u_n, xi_n).
    The postprocessed value need not be formed every step -- the driver
    computes it once at the end of a trajectory -- but is returned here for
    completeness.
    """
    return _new_chain_step(problem, h, u, xi), postprocess(problem, h, u, xi)


def chain_step(problem: Problem, scheme: str, h: float, u, xi) -> np.ndarray:
    """Advance the chain (no postprocessing) with the selected scheme."""
    _check_scheme(scheme)
    if scheme == "euler":
        return step_linearized_euler(problem, h, u, xi)
    if scheme == "trapezoidal":
        return step_trapezoidal(problem, h, u, xi)
    return _new_chain_step(problem, h, u, xi)


# ---------------------------------------------------------------------------
# nonlinear implicit part (general SDE form)


def _damped_newton(residual, jacobian, x0, tol: float = 1e-12, max_iter: int = 50):
    """Solve residual(x) = 0 by Newton with step halving on the residual norm."""
    x = np.array(x0, dtype=float)
    r = residual(x)
    rnorm = np.linalg.norm(r)
    for _ in range(max_iter):
        if rnorm <= tol:
            return x
        try:
            delta = np.linalg.solve(jacobian(x), -r)
        except np.linalg.LinAlgError as exc:
            raise NewtonConvergenceError(f"singular Jacobian factor: {exc}") from exc
        if not np.all(np.isfinite(delta)):
            raise NewtonConvergenceError("non-finite Newton update")
        step = 1.0
        for _ in range(30):
            x_new = x + step * delta
            r_new = residual(x_new)
            rnorm_new = np.linalg.norm(r_new)
            if np.isfinite(rnorm_new) and rnorm_new < rnorm:
                break
            step *= 0.5
        else:
            raise NewtonConvergenceError(
                f"Newton stalled with residual norm {rnorm:.3e}"
            )
        x, r, rnorm = x_new, r_new, rnorm_new
    if rnorm <= tol:
        return x
    raise NewtonConvergenceError(
        f"Newton did not reach tolerance {tol:.1e} in {max_iter} iterations "
        f"(residual norm {rnorm:.3e})"
    )


def step_new_sde(
    problem: SdeProblem,
    coeffs: SchemeCoefficients,
    h: float,
    x,
    xi,
    newton_tol: float = 1e-12,
    newton_max_iter: int = 50,
):
    """One step of the implicit-explicit sampler for a general (f1, f2) split.

    The operators are evaluated at the current state: Jn1 = (I - h f1')^{-1},
    Jn2 = (I - (3-sqrt(2))/2 h f1')^{-1} and Jn3 Jn3^T = (I - h/2 f1')^{-1}.
    The implicit stage

        x' = x + h f1(x' + a1 w) + h f2(x + a2 w) + (I - c1 h f1') w,
        w  = Jn2 sigma sqrt(h) xi,  c1 = (3-sqrt(2))/2 - a3,

    is solved by damped Newton (initial guess x, tolerance on the residual
    norm).  With f1(x) = A x this reduces exactly to the linear-part step of
    :func:`step_new_spde`.  Returns (x_{n+1}, x_bar_n).
    """
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    if x.ndim > 1 and not problem.is_linear:
        out = np.empty_like(x)
        out_bar = np.empty_like(x)
        for i in range(x.shape[0]):
            out[i], out_bar[i] = step_new_sde(
                problem, coeffs, h, x[i], xi[i], newton_tol, newton_max_iter
            )
        return out, out_bar

    sq = math.sqrt(h) * problem.sigma
    c1 = _J2_SHIFT - coeffs.a3

    if problem.is_linear:
        amat = problem.a_matrix
        w = sq * _solve_shifted_dense(problem, _J2_SHIFT, h, xi)
        f2term = h * (problem.f2(x + coeffs.a2 * w) if problem.f2 is not None else 0.0)
        aw = w @ amat.T if amat is not None else np.zeros_like(w)
        rhs = x + f2term + (coeffs.a1 - c1) * h * aw + w
        x_next = _solve_shifted_dense(problem, 1.0, h, rhs)
        x_bar = _postprocessor_stage(
            problem, coeffs, h, x, coeffs.c * sq * _sde_j3_apply(problem, h, x, xi),
            newton_tol, newton_max_iter,
        )
        return x_next, x_bar

    jac = np.atleast_2d(np.asarray(problem.f1_jac(x), dtype=float))
    eye = np.eye(problem.dim)
    w = sq * np.linalg.solve(eye - _J2_SHIFT * h * jac, xi)
    f2term = h * (problem.f2(x + coeffs.a2 * w) if problem.f2 is not None else 0.0)
    const = x + f2term + w - c1 * h * (jac @ w)
    shift = coeffs.a1 * w

    def residual(y):
        return y - h * problem.f1(y + shift) - const

    def jacobian(y):
        return eye - h * np.atleast_2d(problem.f1_jac(y + shift))

    x_next = _damped_newton(residual, jacobian, x, newton_tol, newton_max_iter)
    x_bar = _postprocessor_stage(
        problem, coeffs, h, x, coeffs.c * sq * _sde_j3_apply(problem, h, x, xi),
        newton_tol, newton_max_iter,
    )
    return x_next, x_bar


def _solve_shifted_dense(problem, c, h, v):
    if problem.a_matrix is not None:
        return solve_shifted(problem, c, h, v)
    # f1 absent entirely: (I - c h 0)^{-1} = I
    return np.asarray(v, dtype=float)


def _sde_j3_apply(problem: SdeProblem, h: float, x, xi) -> np.ndarray:
    """(I - (h/2) f1'(x))^{-1/2} xi; symmetric eigendecomposition when nonlinear."""
    if problem.is_linear:
        if problem.a_matrix is None:
            return np.asarray(xi, dtype=float)
        return apply_sqrt_resolvent(problem, h, xi)
    jac = np.atleast_2d(np.asarray(problem.f1_jac(x), dtype=float))
    half = np.eye(problem.dim) - 0.5 * h * jac
    w, vecs = np.linalg.eigh(half)
    if np.any(w <= 0.0):
        raise NewtonConvergenceError("I - (h/2) f1' is not positive definite")
    return vecs @ ((vecs.T @ np.asarray(xi, dtype=float)) * w**-0.5)


def _postprocessor_stage(problem, coeffs, h, x, noise_term,
                         newton_tol: float = 1e-12, newton_max_iter: int = 50):
    """x_bar = x + b1 h f1(x_bar) + b2 h f2(x) + noise_term (implicit if b1 != 0)."""
    f2term = (
        coeffs.b2 * h * problem.f2(x)
        if (coeffs.b2 != 0.0 and problem.f2 is not None)
        else 0.0
    )
    base = x + f2term + noise_term
    if coeffs.b1 == 0.0:
        return base
    if base.ndim > 1:
        return np.stack([
            _postprocessor_stage(problem, coeffs, h, x[i], noise_term[i],
                                 newton_tol, newton_max_iter)
            for i in range(base.shape[0])
        ])

    def f1_of(y):
        if problem.a_matrix is not None:
            return y @ problem.a_matrix.T
        if problem.f1 is None:
            return np.zeros_like(y)
        return problem.f1(y)

    def f1_jac_of(y):
        if problem.a_matrix is not None:
            return problem.a_matrix
        if problem.f1_jac is None:
            return np.zeros((problem.dim, problem.dim))
        return np.atleast_2d(problem.f1_jac(y))

    def residual(y):
        return y - coeffs.b1 * h * f1_of(y) - base

    def jacobian(y):
        return np.eye(problem.dim) - coeffs.b1 * h * f1_jac_of(y)

    return _damped_newton(residual, jacobian, base, newton_tol, newton_max_iter)


# ---------------------------------------------------------------------------
# trajectory driver


def run_trajectory(
    problem: Problem,
    scheme: str,
    h: float,
    n_steps: int,
    seed: int,
    u0=None,
    trajectory: int = 0,
    record_every: int | None = None,
    record_postprocessed: bool = False,
    coeffs: SchemeCoefficients | None = None,
) -> TrajectoryResult:
    """Iterate a scheme with a counter-based noise stream.

    The stream is keyed by (seed, trajectory): identical arguments give
    bit-identical output regardless of process or worker layout.  For the
    postprocessed scheme, u_bar is formed once at the end from one extra
    noise draw; with ``record_postprocessed`` the recorded rows hold the
    postprocessed value of every recorded step instead of the chain value.
    Other schemes report u_bar equal to the final state.
    """
    _check_scheme(scheme)
    if n_steps < 0:
        raise ValueError("n_steps must be nonnegative")
    if h <= 0.0:
        raise ValueError("h must be positive")
    rng = trajectory_rng(seed, trajectory)
    u = np.zeros(problem.dim) if u0 is None else np.array(u0, dtype=float)
    if u.shape != (problem.dim,):
        raise ValueError("u0 has wrong dimension")

    nonlinear_implicit = isinstance(problem, SdeProblem) and not problem.is_linear
    if nonlinear_implicit and scheme != "new_method":
        raise ValueError(f"scheme {scheme!r} needs a linear implicit part")
    if coeffs is None:
        coeffs = SchemeCoefficients.canonical()

    is_new = scheme == "new_method"
    record_pp = is_new and record_postprocessed
    rows = [] if record_every is not None else None

    def record(step, value):
        rows.append(np.concatenate(([float(step), step * h], value)))

    def pp(u_now, xi_now):
        if nonlinear_implicit:
            j3xi = _sde_j3_apply(problem, h, u_now, xi_now)
            return _postprocessor_stage(
                problem, coeffs, h, u_now,
                coeffs.c * math.sqrt(h) * problem.sigma * j3xi,
            )
        return postprocess(problem, h, u_now, xi_now)

    state = StepperState(u=u, u_bar=None, step_index=0, h=h)
    for n in range(n_steps):
        xi = sample_noise_increment(problem, rng)
        if rows is not None and n % record_every == 0:
            record(n, pp(state.u, xi) if record_pp else state.u)
        try:
            if nonlinear_implicit:
                u_next, u_bar = step_new_sde(problem, coeffs, h, state.u, xi)
            else:
                u_next = chain_step(problem, scheme, h, state.u, xi)
                u_bar = None
        except NewtonConvergenceError as exc:
            raise NewtonConvergenceError(f"step {n}: {exc}", step_index=n) from exc
        state = StepperState(u=u_next, u_bar=u_bar, step_index=n + 1, h=h)

    if is_new and n_steps > 0:
        xi = sample_noise_increment(problem, rng)
        u_bar = pp(state.u, xi)
    else:
        u_bar = state.u.copy()
    if rows is not None:
        record(n_steps, u_bar if record_pp else state.u)
    path = np.asarray(rows) if rows is not None else None
    return TrajectoryResult(u=state.u, u_bar=u_bar, path=path)


def save_path_record(path: np.ndarray, filename) -> None:
    """Write a recorded path as columnar text: step_index, t, components."""
    n_comp = path.shape[1] - 2
    header = "step_index,t," + ",".join(f"u{j}" for j in range(1, n_comp + 1))
    with open(filename, "w") as fh:
        fh.write(header + "\n")
        for row in path:
            cells = [str(int(row[0])), repr(float(row[1]))]
            cells += [repr(float(x)) for x in row[2:]]
            fh.write(",".join(cells) + "\n")
