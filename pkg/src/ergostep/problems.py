"""Problem definitions and linear-operator plumbing.

Three model classes share one operator interface:

* ``SpectralProblem`` -- diagonal model on a truncated eigenbasis: the stiff
  linear part acts as ``A e_p = -lam_p e_p`` and the noise covariance as
  ``Q e_p = q_p e_p``.  Everything is componentwise.
* ``GridProblem`` -- 1D finite differences with homogeneous Dirichlet ends:
  tridiagonal Laplacian with diagonal ``-2/dx^2`` and off-diagonals
  ``1/dx^2``, driven by discretized space-time white noise (``1/sqrt(dx)``
  per grid point).
* ``SdeProblem`` -- generic finite-dimensional SDE ``dX = (f1 + f2) dt +
  sigma dW`` with identity noise covariance; ``f1`` is the implicitly
  treated term.

The time steppers only need three operator actions, all provided here with
cached factorizations keyed by ``(kind, h)``:

* shifted solves ``(I - c h A)^{-1} v`` (tridiagonal LU on grids),
* the square-root solve ``(I - (h/2) A)^{-1/2} v`` (closed-form sine
  eigenbasis on grids, applied with an orthonormal DST),
* plain products ``A v``.

Noise increments are drawn from counter-based Philox streams keyed by
``(seed, trajectory)``, so any trajectory's draws are reproducible in
isolation and independent of how work is split across processes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import partial
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import scipy.fft
import scipy.linalg
import scipy.sparse as sparse
import scipy.sparse.linalg as sparse_linalg

__all__ = [
    "RESOLVENT_SHIFTS",
    "Nonlinearity",
    "make_nonlinearity",
    "SpectralProblem",
    "GridProblem",
    "SdeProblem",
    "TraceDiagnostics",
    "dirichlet_eigenvalues",
    "drift",
    "apply_linear",
    "solve_shifted",
    "apply_sqrt_resolvent",
    "resolvent_apply",
    "noise_scale",
    "trajectory_rng",
    "sample_noise_increment",
    "estimate_s_bar",
    "load_problem",
]

_MASK64 = (1 << 64) - 1

# Shift coefficients of the resolvent solves used by the steppers.  J1 is the
# implicit-Euler solve, J2 the solve applied to the noise, and J3 denotes the
# inverse square root of the half-shifted operator.
RESOLVENT_SHIFTS = {
    "J1": 1.0,
    "J2": (3.0 - math.sqrt(2.0)) / 2.0,
    "J3": 0.5,
}


# ---------------------------------------------------------------------------
# nonlinearities


@dataclass(frozen=True)
class Nonlinearity:
    """Componentwise drift map with its declared global Lipschitz constant.

    ``lipschitz=None`` marks a map that is not globally Lipschitz (e.g. the
    cubic drift); dissipation checks are skipped for those.
    """

    name: str
    fn: Callable[[np.ndarray], np.ndarray]
    lipschitz: float | None


def _linear_drift(k: float, u: np.ndarray) -> np.ndarray:
    return -k * u


def _damped_sine_drift(u: np.ndarray) -> np.ndarray:
    return -u - np.sin(u)


def _cubic_drift(u: np.ndarray) -> np.ndarray:
    return -2.0 * u - u**3


def make_nonlinearity(spec: str, lipschitz: float | None = None) -> Nonlinearity | None:
    """Build a registered nonlinearity from its config name.

    Accepted names: ``none``, ``linear:k`` (drift ``-k*u``), ``sin`` (the
    damped sine drift ``-u - sin(u)``) and ``cubic`` (``-2u - u^3``, not
    globally Lipschitz).  ``lipschitz`` overrides the registry constant.
    """
    spec = spec.strip()
    if spec == "none":
        return None
    if spec.startswith("linear:"):
        k = float(spec.split(":", 1)[1])
        default_l = abs(k)
        fn = partial(_linear_drift, k)
    elif spec == "sin":
        default_l = 2.0
        fn = _damped_sine_drift
    elif spec == "cubic":
        default_l = None
        fn = _cubic_drift
    else:
        raise ValueError(f"unknown nonlinearity {spec!r}")
    return Nonlinearity(spec, fn, default_l if lipschitz is None else lipschitz)


# ---------------------------------------------------------------------------
# problem classes


def _as_float_vector(x, name: str) -> np.ndarray:
    arr = np.ascontiguousarray(np.asarray(x, dtype=float))
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"{name} must be a nonempty 1D vector")
    return arr


@dataclass(frozen=True, eq=False)
class SpectralProblem:
    """Diagonal model: eigenvalues of -A, noise eigenvalues of Q.

    At most one of ``b`` (linear drift eigenvalues, ``B e_p = -b_p e_p``) and
    ``nonlinearity`` may be set.  A declared finite Lipschitz constant must
    satisfy the dissipation condition ``L < lam[0]``, as must ``max |b_p|``.
    """

    lam: np.ndarray
    q: np.ndarray
    b: np.ndarray | None = None
    nonlinearity: Nonlinearity | None = None
    sigma: float = 1.0

    def __post_init__(self):
        lam = _as_float_vector(self.lam, "lam")
        q = _as_float_vector(self.q, "q")
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "q", q)
        if q.shape != lam.shape:
            raise ValueError("q must match lam in length")
        if lam[0] <= 0.0:
            raise ValueError("eigenvalues of -A must be positive")
        if np.any(np.diff(lam) < 0.0):
            raise ValueError("lam must be nondecreasing")
        if np.any(q < 0.0):
            raise ValueError("noise eigenvalues must be nonnegative")
        if self.sigma < 0.0:
            raise ValueError("sigma must be nonnegative")
        if self.b is not None:
            b = _as_float_vector(self.b, "b")
            object.__setattr__(self, "b", b)
            if b.shape != lam.shape:
                raise ValueError("b must match lam in length")
            if np.max(np.abs(b)) >= lam[0]:
                raise ValueError("linear drift requires max |b_p| < lam[0]")
            if self.nonlinearity is not None:
                raise ValueError("at most one of b and nonlinearity may be active")
        nl = self.nonlinearity
        if nl is not None and nl.lipschitz is not None and nl.lipschitz >= lam[0]:
            raise ValueError(
                f"dissipation condition violated: L={nl.lipschitz} >= lam[0]={lam[0]}"
            )
        object.__setattr__(self, "_cache", {})

    @property
    def dim(self) -> int:
        return self.lam.size

    @property
    def n_modes(self) -> int:
        return self.lam.size

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_cache"] = {}
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)


def dirichlet_eigenvalues(n_points: int, dx: float) -> np.ndarray:
    """Eigenvalues (2/dx^2)(1 - cos(p pi dx)) of the Dirichlet tridiagonal."""
    p = np.arange(1, n_points + 1)
    return 2.0 / dx**2 * (1.0 - np.cos(p * np.pi * dx))


@dataclass(frozen=True, eq=False)
class GridProblem:
    """1D finite-difference model with space-time white noise."""

    n_points: int
    nonlinearity: Nonlinearity | None = None
    sigma: float = 1.0

    def __post_init__(self):
        if self.n_points < 1:
            raise ValueError("n_points must be positive")
        if self.sigma < 0.0:
            raise ValueError("sigma must be nonnegative")
        object.__setattr__(self, "_cache", {})

    @property
    def dx(self) -> float:
        return 1.0 / (self.n_points + 1)

    @property
    def dim(self) -> int:
        return self.n_points

    @property
    def lam(self) -> np.ndarray:
        cache = self._cache
        if "lam" not in cache:
            cache["lam"] = dirichlet_eigenvalues(self.n_points, self.dx)
        return cache["lam"]

    def operator_matrix(self) -> sparse.csc_matrix:
        """Sparse tridiagonal A (the discrete Laplacian, negative definite)."""
        cache = self._cache
        if "amat" not in cache:
            n, dx = self.n_points, self.dx
            main = np.full(n, -2.0 / dx**2)
            off = np.full(n - 1, 1.0 / dx**2)
            cache["amat"] = sparse.diags([off, main, off], [-1, 0, 1], format="csc")
        return cache["amat"]

    def grid_x(self) -> np.ndarray:
        """Interior grid points j*dx, j = 1..N."""
        return self.dx * np.arange(1, self.n_points + 1)

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_cache"] = {}
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)


@dataclass(frozen=True, eq=False)
class SdeProblem:
    """Finite-dimensional SDE dX = (f1(X) + f2(X)) dt + sigma dW, Q = I.

    When ``a_matrix`` is given, ``f1(x) = a_matrix @ x`` and every scheme is
    available with cached factorizations.  A nonlinear ``f1`` (callable pair
    ``f1``/``f1_jac``, with ``f1_jac`` symmetric as for gradient systems) is
    supported by the implicit-explicit sampler only.
    """

    dim: int
    sigma: float = 1.0
    a_matrix: np.ndarray | None = None
    f1: Callable[[np.ndarray], np.ndarray] | None = None
    f1_jac: Callable[[np.ndarray], np.ndarray] | None = None
    f2: Callable[[np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be positive")
        if self.sigma < 0.0:
            raise ValueError("sigma must be nonnegative")
        if self.a_matrix is not None:
            a = np.asarray(self.a_matrix, dtype=float)
            if a.shape != (self.dim, self.dim):
                raise ValueError("a_matrix must be dim x dim")
            object.__setattr__(self, "a_matrix", a)
            if self.f1 is not None or self.f1_jac is not None:
                raise ValueError("give either a_matrix or (f1, f1_jac), not both")
        elif (self.f1 is None) != (self.f1_jac is None):
            raise ValueError("nonlinear f1 requires both f1 and f1_jac")
        object.__setattr__(self, "_cache", {})

    @classmethod
    def linear(cls, a_matrix, f2=None, sigma: float = 1.0) -> "SdeProblem":
        a = np.atleast_2d(np.asarray(a_matrix, dtype=float))
        return cls(dim=a.shape[0], sigma=sigma, a_matrix=a, f2=f2)

    @classmethod
    def nonlinear(cls, dim, f1, f1_jac, f2=None, sigma: float = 1.0) -> "SdeProblem":
        return cls(dim=dim, sigma=sigma, f1=f1, f1_jac=f1_jac, f2=f2)

    @property
    def is_linear(self) -> bool:
        return self.a_matrix is not None or self.f1 is None

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_cache"] = {}
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)


Problem = SpectralProblem | GridProblem | SdeProblem


# ---------------------------------------------------------------------------
# operator actions


def _check_state(problem, v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape[-1] != problem.dim:
        raise ValueError(
            f"state has {v.shape[-1]} components, problem has {problem.dim}"
        )
    return v


def drift(problem: Problem, u: np.ndarray) -> np.ndarray:
    """Explicitly treated drift F(u): nonlinearity, Bu, or f2."""
    if isinstance(problem, SpectralProblem):
        if problem.nonlinearity is not None:
            return problem.nonlinearity.fn(u)
        if problem.b is not None:
            return -problem.b * u
        return np.zeros_like(u)
    if isinstance(problem, GridProblem):
        if problem.nonlinearity is not None:
            return problem.nonlinearity.fn(u)
        return np.zeros_like(u)
    if problem.f2 is not None:
        return problem.f2(u)
    return np.zeros_like(u)


def apply_linear(problem: Problem, u: np.ndarray) -> np.ndarray:
    """Stiff linear part A u (A negative definite)."""
    u = _check_state(problem, u)
    if isinstance(problem, SpectralProblem):
        return -problem.lam * u
    if isinstance(problem, GridProblem):
        amat = problem.operator_matrix()
        flat = u.reshape(-1, problem.dim)
        return np.asarray((amat @ flat.T).T).reshape(u.shape)
    if problem.a_matrix is None:
        raise ValueError("apply_linear needs a linear implicit part (a_matrix)")
    return u @ problem.a_matrix.T


def solve_shifted(problem: Problem, c: float, h: float, v: np.ndarray) -> np.ndarray:
    """Apply (I - c h A)^{-1} along the last axis; factorization cached per (c, h)."""
    if h <= 0.0:
        raise ValueError("h must be positive")
    v = _check_state(problem, v)
    if isinstance(problem, SpectralProblem):
        key = ("shift", c, h)
        factor = problem._cache.get(key)
        if factor is None:
            factor = 1.0 / (1.0 + c * h * problem.lam)
            problem._cache[key] = factor
        return factor * v
    if isinstance(problem, GridProblem):
        key = ("shift", c, h)
        lu = problem._cache.get(key)
        if lu is None:
            n = problem.n_points
            mat = sparse.identity(n, format="csc") - (c * h) * problem.operator_matrix()
            lu = sparse_linalg.splu(mat.tocsc())
            problem._cache[key] = lu
        flat = v.reshape(-1, problem.dim)
        return lu.solve(flat.T).T.reshape(v.shape)
    if problem.a_matrix is None:
        raise ValueError("solve_shifted needs a linear implicit part (a_matrix)")
    if problem.dim == 1:
        return v / (1.0 - c * h * problem.a_matrix[0, 0])
    key = ("shift", c, h)
    lu = problem._cache.get(key)
    if lu is None:
        mat = np.eye(problem.dim) - (c * h) * problem.a_matrix
        lu = scipy.linalg.lu_factor(mat)
        problem._cache[key] = lu
    flat = v.reshape(-1, problem.dim)
    return scipy.linalg.lu_solve(lu, flat.T).T.reshape(v.shape)


def _grid_dst(v: np.ndarray) -> np.ndarray:
    # orthonormal DST-I is symmetric and involutive: it is its own inverse
    return scipy.fft.dst(v, type=1, norm="ortho", axis=-1)


def apply_sqrt_resolvent(problem: Problem, h: float, v: np.ndarray) -> np.ndarray:
    """Apply the symmetric square-root solve (I - (h/2) A)^{-1/2}.

    Spectral problems act componentwise.  Grids use the closed-form sine
    eigenbasis of the tridiagonal operator, applied by orthonormal DST, which
    yields a symmetric root: J3 J3^T = (I - (h/2) A)^{-1}.  Dense linear SDE
    problems use a cached symmetric eigendecomposition.
    """
    if h <= 0.0:
        raise ValueError("h must be positive")
    v = _check_state(problem, v)
    if isinstance(problem, SpectralProblem):
        key = ("sqrt", h)
        factor = problem._cache.get(key)
        if factor is None:
            factor = (1.0 + 0.5 * h * problem.lam) ** -0.5
            problem._cache[key] = factor
        return factor * v
    if isinstance(problem, GridProblem):
        key = ("sqrt", h)
        factor = problem._cache.get(key)
        if factor is None:
            factor = (1.0 + 0.5 * h * problem.lam) ** -0.5
            problem._cache[key] = factor
        return _grid_dst(factor * _grid_dst(v))
    if problem.a_matrix is None:
        raise ValueError("apply_sqrt_resolvent needs a linear implicit part")
    if problem.dim == 1:
        return v * (1.0 - 0.5 * h * problem.a_matrix[0, 0]) ** -0.5
    key = ("sqrt", h)
    root = problem._cache.get(key)
    if root is None:
        mat = np.eye(problem.dim) - 0.5 * h * problem.a_matrix
        w, vecs = np.linalg.eigh(mat)
        if np.any(w <= 0.0):
            raise ValueError("I - (h/2) A is not positive definite")
        root = (vecs * w**-0.5) @ vecs.T
        problem._cache[key] = root
    return v @ root.T


def resolvent_apply(problem: Problem, kind: str, h: float, v: np.ndarray) -> np.ndarray:
    """Apply J1, J2 or J3 to a state vector (or batch of states).

    J1 and J2 are the shifted solves (I - c h A)^{-1} with c = 1 and
    c = (3 - sqrt(2))/2; J3 is the symmetric square root of the c = 1/2
    solve.
    """
    if kind not in RESOLVENT_SHIFTS:
        raise ValueError(f"kind must be one of {sorted(RESOLVENT_SHIFTS)}, got {kind!r}")
    if kind == "J3":
        return apply_sqrt_resolvent(problem, h, v)
    return solve_shifted(problem, RESOLVENT_SHIFTS[kind], h, v)


# ---------------------------------------------------------------------------
# noise


def noise_scale(problem: Problem) -> np.ndarray:
    """Componentwise standard deviation of the time-normalized increment."""
    if isinstance(problem, SpectralProblem):
        return np.sqrt(problem.q)
    if isinstance(problem, GridProblem):
        return np.full(problem.dim, problem.dx**-0.5)
    return np.ones(problem.dim)


def trajectory_rng(seed: int, trajectory: int = 0) -> np.random.Generator:
    """Counter-based Philox stream keyed by (seed, trajectory)."""
    key = np.array([seed & _MASK64, trajectory & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def sample_noise_increment(problem: Problem, rng: np.random.Generator) -> np.ndarray:
    """Draw one time-normalized noise increment (the xi of a single step).

    Spectral: independent sqrt(q_p) * N(0,1) per mode.  Grid: independent
    N(0,1)/sqrt(dx) per point.  SDE: standard normals.  One draw per mode per
    step, in mode order.
    """
    return noise_scale(problem) * rng.standard_normal(problem.dim)


# ---------------------------------------------------------------------------
# trace diagnostics


@dataclass
class TraceDiagnostics:
    """Truncated traces of (-A)^{-1+s} Q and the estimated supremum s_bar."""

    s_bar: float
    truncations: list[int]
    partial_traces: dict[float, np.ndarray]
    verdicts: dict[float, bool]


def estimate_s_bar(
    problem: SpectralProblem,
    s_grid,
    truncations,
    rtol: float = 0.01,
) -> TraceDiagnostics:
    """Estimate the largest s with a finite trace of (-A)^{-1+s} Q.

    For each s the truncated sums over the given increasing truncation levels
    are reported; a series is judged convergent when the last consecutive
    pair (S_N, S_M), N < M, satisfies |S_M - S_N| / S_M < rtol.  The estimate
    is the largest convergent s on the grid.
    """
    s_grid = [float(s) for s in s_grid]
    truncations = [int(n) for n in truncations]
    if not s_grid or not truncations:
        raise ValueError("s_grid and truncations must be nonempty")
    if any(not 0.0 < s < 1.0 for s in s_grid):
        raise ValueError("s values must lie in (0, 1)")
    if len(truncations) < 2 or any(np.diff(truncations) <= 0):
        raise ValueError("truncations must be increasing with at least two levels")
    if truncations[-1] > problem.n_modes:
        raise ValueError("largest truncation exceeds the problem's mode count")

    partial_traces: dict[float, np.ndarray] = {}
    verdicts: dict[float, bool] = {}
    for s in s_grid:
        terms = problem.q * problem.lam ** (-1.0 + s)
        csum = np.cumsum(terms)
        sums = np.array([csum[n - 1] for n in truncations])
        partial_traces[s] = sums
        last, prev = sums[-1], sums[-2]
        verdicts[s] = bool(last == 0.0 or abs(last - prev) / last < rtol)
    convergent = [s for s in s_grid if verdicts[s]]
    s_bar = max(convergent) if convergent else 0.0
    return TraceDiagnostics(s_bar, truncations, partial_traces, verdicts)


# ---------------------------------------------------------------------------
# config loading


def _resolve_law(value, n: int, name: str, laws: Mapping[str, Callable[[np.ndarray], np.ndarray]]):
    if isinstance(value, str):
        key = value.split(":", 1)[0]
        if key not in laws:
            raise ValueError(f"unknown {name} {value!r}")
        return laws[key](value, np.arange(1, n + 1))
    return np.asarray(value, dtype=float)


def _lambda_dirichlet(_, p):
    return (np.pi * p) ** 2


def _q_white(_, p):
    return np.ones_like(p, dtype=float)


def _q_geometric(value, p):
    r = float(value.split(":", 1)[1])
    return r**p


def load_problem(source: str | Path | Mapping) -> Problem:
    """Build a problem from a JSON config file or an equivalent mapping.

    Keys: ``model`` (``spectral`` | ``grid``), ``n``, ``lambda_law``
    (``dirichlet_1d`` or an explicit list), ``q_law`` (``white``,
    ``geometric:r`` or a list), ``sigma``, ``nonlinearity`` (``none`` |
    ``linear:k`` | ``sin`` | ``cubic``), ``lipschitz`` (optional override)
    and optional ``b`` (scalar or list of linear-drift eigenvalues).
    """
    if isinstance(source, Mapping):
        cfg = dict(source)
    else:
        cfg = json.loads(Path(source).read_text())
    model = cfg.get("model", "spectral")
    n = int(cfg.get("n", 1))
    sigma = float(cfg.get("sigma", 1.0))
    nl_spec = cfg.get("nonlinearity", "none")
    lipschitz = cfg.get("lipschitz")
    nonlinearity = make_nonlinearity(nl_spec, lipschitz)
    if model == "grid":
        return GridProblem(n_points=n, nonlinearity=nonlinearity, sigma=sigma)
    if model != "spectral":
        raise ValueError(f"unknown model {cfg['model']!r}")
    lam = _resolve_law(
        cfg.get("lambda_law", "dirichlet_1d"), n, "lambda_law",
        {"dirichlet_1d": _lambda_dirichlet},
    )
    q = _resolve_law(
        cfg.get("q_law", "white"), n, "q_law",
        {"white": _q_white, "geometric": _q_geometric},
    )
    b = cfg.get("b")
    if b is not None:
        b = np.full(n, float(b)) if np.isscalar(b) else np.asarray(b, dtype=float)
    return SpectralProblem(lam=lam, q=q, b=b, nonlinearity=nonlinearity, sigma=sigma)
