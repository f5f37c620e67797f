"""Monte-Carlo experiment driver with common-random-number coupling.

Trajectories are independent across a (seed, trajectory-index) keyed family
of counter-based Philox streams, so results are bit-reproducible for a fixed
configuration regardless of batch splitting or worker count.  Within one
trajectory all schemes and all step sizes consume the same underlying fine
noise matrix: the increments of a run with step h are block sums of the fine
rows, which is what couples the runs (common random numbers) and lets error
differences against a fine-step reference be estimated with far fewer
samples than the individual errors would need.

The postprocessed method's output functional is evaluated, for the built-in
functionals, as the exact conditional expectation over the final
postprocessor draw (the postprocessor adds an independent centered Gaussian
with known diagonal covariance in the operator eigenbasis, so
E[phi(u + S xi) | u] is in closed form for exp(-|.|^2) and |.|^2).  This is
unbiased for E[phi(u_bar)] and removes the O(sqrt(h)) noise floor that a
sampled postprocessor would put under coupled error estimates; without it
the small-h errors of the postprocessed method are not resolvable at
desk-scale sample counts.  Custom functionals fall back to sampling the
postprocessor draw.
"""

from __future__ import annotations

import math
import multiprocessing
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.fft

from .problems import (
    GridProblem,
    Problem,
    SdeProblem,
    SpectralProblem,
    noise_scale,
    trajectory_rng,
)
from .schemes import SCHEMES, chain_step, postprocess

__all__ = [
    "BUILTIN_FUNCTIONALS",
    "McConfig",
    "McEstimate",
    "McExperiment",
    "McFailureError",
    "OrderFit",
    "estimate_functional",
    "coupled_compare",
    "global_order_fit",
    "ergodic_average",
    "analytic_functional_value",
]

BUILTIN_FUNCTIONALS = ("exp_neg_sq_norm", "second_moment")

_MASK64 = (1 << 64) - 1


class McFailureError(RuntimeError):
    """Too many failed trajectories (non-finite states) in an experiment."""


@dataclass(frozen=True, eq=False)
class McConfig:
    """Configuration of a Monte-Carlo run.

    ``reference`` is ``"fine_h"`` (a fine-step run of the postprocessed
    method at ``h_ref``, default ``min(h_grid)/8``, coupled through the same
    noise), ``"analytic"`` (closed-form Gaussian value, linear problems
    only) or ``None``.  ``coupling`` shares the fine noise matrix across all
    runs; without it every run gets its own stream family.  ``batch_size``
    only tunes memory/speed except that summation grouping follows batches,
    so it is part of an experiment's identity (recorded in manifests);
    results are worker-count independent either way.
    """

    n_samples: int
    h_grid: tuple
    T: float
    functional: str | Callable = "exp_neg_sq_norm"
    seed: int = 0
    reference: str | None = "fine_h"
    h_ref: float | None = None
    coupling: bool = True
    batch_size: int | None = None
    workers: int = 1
    u0: np.ndarray | None = None
    max_failure_fraction: float = 1e-3

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be positive")
        hs = tuple(float(h) for h in self.h_grid)
        if not hs or any(h <= 0 for h in hs):
            raise ValueError("h_grid must be nonempty with positive entries")
        object.__setattr__(self, "h_grid", hs)
        if self.T <= 0:
            raise ValueError("T must be positive")
        if self.reference not in (None, "fine_h", "analytic"):
            raise ValueError("reference must be None, 'fine_h' or 'analytic'")
        if isinstance(self.functional, str) and self.functional not in BUILTIN_FUNCTIONALS:
            raise ValueError(f"unknown functional {self.functional!r}")


@dataclass(frozen=True)
class McEstimate:
    """Sample mean with its standard error and provenance."""

    mean: float
    stderr: float
    n: int
    seed: int


@dataclass
class McExperiment:
    """Results of a (possibly coupled) Monte-Carlo experiment."""

    schemes: tuple
    h_grid: tuple
    estimates: dict
    errors: dict | None
    differences: dict
    reference_estimate: McEstimate | None
    reference_value: float | None
    failures: dict

    def estimate(self, scheme: str, h: float) -> McEstimate:
        return self.estimates[(scheme, float(h))]

    def error(self, scheme: str, h: float) -> McEstimate:
        return self.errors[(scheme, float(h))]

    def error_table(self, scheme: str):
        """Rows (h, |error|, stderr) for order fitting, descending h."""
        rows = [
            (h, abs(self.errors[(scheme, h)].mean), self.errors[(scheme, h)].stderr)
            for h in sorted(self.h_grid, reverse=True)
        ]
        return rows


# ---------------------------------------------------------------------------
# functional evaluation


def _norm_weight(problem: Problem) -> float:
    # grid functionals approximate the continuum L2 norm: dx * sum of squares
    return problem.dx if isinstance(problem, GridProblem) else 1.0


def _functional_values(problem, u, functional):
    if callable(functional):
        return np.asarray(functional(u), dtype=float)
    w = _norm_weight(problem)
    sq = w * np.sum(u * u, axis=-1)
    if functional == "exp_neg_sq_norm":
        return np.exp(-sq)
    return sq


def _postprocessor_spectrum(problem, h):
    """Per-mode std of the postprocessor noise in the diagonalizing basis.

    Returns (stds, rotate) where rotate maps states into that basis (None
    for an identity rotation).
    """
    half = 0.5 * math.sqrt(h) * problem.sigma
    if isinstance(problem, SpectralProblem):
        return half * np.sqrt(problem.q) / np.sqrt(1.0 + 0.5 * h * problem.lam), None
    if isinstance(problem, GridProblem):
        stds = half * problem.dx**-0.5 / np.sqrt(1.0 + 0.5 * h * problem.lam)
        return stds, lambda u: scipy.fft.dst(u, type=1, norm="ortho", axis=-1)
    if problem.a_matrix is None:
        return np.full(problem.dim, half), None
    cache = problem._cache
    key = ("pp_eig", h)
    if key not in cache:
        amat = problem.a_matrix
        if not np.allclose(amat, amat.T, atol=1e-12):
            raise ValueError("postprocessor smoothing needs a symmetric a_matrix")
        w, vecs = np.linalg.eigh(np.eye(problem.dim) - 0.5 * h * amat)
        if np.any(w <= 0.0):
            raise ValueError("I - (h/2) A is not positive definite")
        cache[key] = (w, vecs)
    w, vecs = cache[key]
    return half / np.sqrt(w), (lambda u: u @ vecs)


def _smoothed_postprocessed_values(problem, h, u, functional):
    """E[phi(u + postprocessor noise) | u] for the built-in functionals."""
    stds, rotate = _postprocessor_spectrum(problem, h)
    w = _norm_weight(problem)
    if functional == "second_moment":
        return w * (np.sum(u * u, axis=-1) + np.sum(stds**2))
    v = rotate(u) if rotate is not None else u
    denom = 1.0 + 2.0 * w * stds**2
    log_pref = -0.5 * np.sum(np.log(denom))
    expo = -w * np.sum(v * v / denom, axis=-1)
    return np.exp(log_pref + expo)


def analytic_functional_value(problem, config: McConfig) -> float:
    """Closed-form E[phi(u(T))] for linear problems with built-in functionals.

    The solution from a deterministic start is Gaussian mode by mode; the
    value follows from the per-mode means and variances at the adjusted
    final time.  Raises ValueError when the problem or functional does not
    admit a closed form.
    """
    if callable(config.functional):
        raise ValueError("analytic reference needs a built-in functional")
    if isinstance(problem, SpectralProblem):
        if problem.nonlinearity is not None:
            raise ValueError("analytic reference needs a linear problem")
        alpha = problem.lam + (problem.b if problem.b is not None else 0.0)
        qvar = problem.q.astype(float)
        u0 = np.zeros(problem.dim) if config.u0 is None else np.asarray(config.u0, float)
    elif isinstance(problem, GridProblem):
        nl = problem.nonlinearity
        if nl is not None and not nl.name.startswith("linear:"):
            raise ValueError("analytic reference needs a linear problem")
        k = float(nl.name.split(":", 1)[1]) if nl is not None else 0.0
        alpha = problem.lam + k
        qvar = np.full(problem.dim, 1.0 / problem.dx)
        u0 = np.zeros(problem.dim) if config.u0 is None else np.asarray(config.u0, float)
        u0 = scipy.fft.dst(u0, type=1, norm="ortho")
    else:
        if not problem.is_linear or problem.f2 is not None:
            raise ValueError("analytic reference needs a linear problem")
        amat = problem.a_matrix
        if amat is None:
            raise ValueError("analytic reference needs a nonzero linear part")
        if not np.allclose(amat, amat.T, atol=1e-12):
            raise ValueError("analytic reference needs a symmetric a_matrix")
        w, vecs = np.linalg.eigh(amat)
        alpha = -w
        if np.any(alpha <= 0.0):
            raise ValueError("linear part must be negative definite")
        qvar = np.ones(problem.dim)
        u0 = np.zeros(problem.dim) if config.u0 is None else np.asarray(config.u0, float)
        u0 = u0 @ vecs
    if np.any(alpha <= 0.0):
        raise ValueError("drift must be dissipative for the analytic value")
    variances = problem.sigma**2 * qvar * (1.0 - np.exp(-2.0 * alpha * config.T)) / (2.0 * alpha)
    means = np.exp(-alpha * config.T) * u0
    w = _norm_weight(problem)
    if config.functional == "second_moment":
        return float(w * np.sum(variances + means**2))
    denom = 1.0 + 2.0 * w * variances
    return float(np.exp(-0.5 * np.sum(np.log(denom)) - w * np.sum(means**2 / denom)))


# ---------------------------------------------------------------------------
# noise streams


class _StreamFiller:
    """Fill matrix rows from the per-trajectory Philox streams.

    Reuses a single bit generator, resetting its key/counter state per row;
    the draws are bitwise identical to ``trajectory_rng(seed, traj)`` used
    in isolation.
    """

    def __init__(self, seed: int):
        self._bg = np.random.Philox(key=np.zeros(2, dtype=np.uint64))
        self._gen = np.random.Generator(self._bg)
        self._state = self._bg.state
        self._seed = seed & _MASK64

    def fill(self, out: np.ndarray, first_trajectory: int) -> None:
        state = self._state
        key = state["state"]["key"]
        counter = state["state"]["counter"]
        n = out.shape[1]
        for i in range(out.shape[0]):
            key[0] = self._seed
            key[1] = (first_trajectory + i) & _MASK64
            counter[:] = 0
            state["buffer_pos"] = 4
            state["has_uint32"] = 0
            state["uinteger"] = 0
            self._bg.state = state
            out[i] = self._gen.standard_normal(n)


def _run_seed(seed: int, tag: str) -> int:
    """Derived stream seed for uncoupled runs (stable across platforms)."""
    import hashlib

    digest = hashlib.blake2b(f"{seed}:{tag}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


# ---------------------------------------------------------------------------
# batched simulation


def _simulate_run(problem, scheme, h, n_steps, m, G, scale, functional, u0):
    """Advance a batch to T = n_steps*h on block-summed fine noise; return values."""
    B = G.shape[0]
    if u0 is None:
        u = np.zeros((B, problem.dim))
    else:
        u = np.broadcast_to(u0, (B, problem.dim)).copy()
    root_m = math.sqrt(m)
    with np.errstate(over="ignore", invalid="ignore"):
        for n in range(n_steps):
            xi = G[:, n * m : (n + 1) * m, :].sum(axis=1) * (scale / root_m)
            u = chain_step(problem, scheme, h, u, xi)
    # a diverged trajectory is a failure even when the functional would map
    # its non-finite state to something finite (exp(-inf) = 0)
    bad = ~np.all(np.isfinite(u), axis=-1)
    if scheme == "new_method":
        if not callable(functional):
            values = _smoothed_postprocessed_values(problem, h, u, functional)
        else:
            xi = G[:, n_steps * m : (n_steps + 1) * m, :].sum(axis=1) * (scale / root_m)
            values = _functional_values(problem, postprocess(problem, h, u, xi), functional)
    else:
        values = _functional_values(problem, u, functional)
    if np.any(bad):
        values = np.where(bad, np.nan, values)
    return values


def _accumulate(stats, values, ref_values):
    finite = np.isfinite(values)
    stats[0] += values.size
    stats[1] += int(finite.sum())
    ok = values[finite]
    stats[2] += float(ok.sum())
    stats[3] += float((ok * ok).sum())
    if ref_values is not None:
        joint = finite & np.isfinite(ref_values)
        d = values[joint] - ref_values[joint]
        stats[4] += int(joint.sum())
        stats[5] += float(d.sum())
        stats[6] += float((d * d).sum())


def _batch_worker(payload):
    (problem, runs, config, b0, b1, n_fine_total, ref_run) = payload
    dim = problem.dim
    scale = noise_scale(problem)
    u0 = None if config.u0 is None else np.asarray(config.u0, dtype=float)
    out = {run: np.zeros(7) for run in runs}
    B = b1 - b0

    if config.coupling:
        G = np.empty((B, n_fine_total * dim))
        _StreamFiller(config.seed).fill(G, b0)
        G = G.reshape(B, n_fine_total, dim)
        ref_values = None
        if ref_run is not None:
            h_ref, steps_ref, m_ref = ref_run
            ref_values = _simulate_run(
                problem, "new_method", h_ref, steps_ref, m_ref, G, scale,
                config.functional, u0,
            )
        for scheme, h, n_steps, m in runs:
            values = _simulate_run(
                problem, scheme, h, n_steps, m, G, scale, config.functional, u0
            )
            _accumulate(out[(scheme, h, n_steps, m)], values, ref_values)
        if ref_run is not None:
            ref_stats = np.zeros(7)
            _accumulate(ref_stats, ref_values, None)
            out["__reference__"] = ref_stats
    else:
        ref_values = None
        if ref_run is not None:
            h_ref, steps_ref, m_ref = ref_run
            n_fine = (steps_ref + 1) * m_ref
            G = np.empty((B, n_fine * dim))
            _StreamFiller(_run_seed(config.seed, "reference")).fill(G, b0)
            G = G.reshape(B, n_fine, dim)
            ref_values = _simulate_run(
                problem, "new_method", h_ref, steps_ref, m_ref, G, scale,
                config.functional, u0,
            )
            ref_stats = np.zeros(7)
            _accumulate(ref_stats, ref_values, None)
            out["__reference__"] = ref_stats
        for scheme, h, n_steps, m in runs:
            n_fine = n_steps + 1
            G = np.empty((B, n_fine * dim))
            _StreamFiller(_run_seed(config.seed, f"{scheme}:{h!r}")).fill(G, b0)
            G = G.reshape(B, n_fine, dim)
            values = _simulate_run(
                problem, scheme, h, n_steps, 1, G, scale, config.functional, u0
            )
            _accumulate(out[(scheme, h, n_steps, 1)], values, ref_values)
    return out


def _estimate_from_stats(n_ok, s1, s2, seed) -> McEstimate:
    if n_ok == 0:
        return McEstimate(math.nan, math.nan, 0, seed)
    mean = s1 / n_ok
    if n_ok > 1:
        var = max((s2 - n_ok * mean * mean) / (n_ok - 1), 0.0)
        stderr = math.sqrt(var / n_ok)
    else:
        stderr = math.nan
    return McEstimate(mean, stderr, int(n_ok), seed)


def _auto_batch_size(n_samples, n_fine_total, dim):
    budget = 2**23  # matrix elements per batch (~64 MB fine noise)
    b = max(1, budget // max(1, n_fine_total * dim))
    return min(n_samples, b)


def _mc_experiment(problem, schemes, config: McConfig) -> McExperiment:
    for s in schemes:
        if s not in SCHEMES:
            raise ValueError(f"unknown scheme {s!r}")
    h_grid = config.h_grid

    def steps_of(h):
        n = round(config.T / h)
        if n < 1:
            raise ValueError(f"h={h} exceeds T={config.T}")
        return n

    ref_run = None
    if config.reference == "fine_h":
        h_ref = config.h_ref if config.h_ref is not None else min(h_grid) / 8.0
        if not config.coupling:
            ref_run = (h_ref, steps_of(h_ref), 1)
    if config.coupling:
        h_fine = min(h_grid)
        if config.reference == "fine_h":
            h_fine = min(h_fine, h_ref)
        runs = []
        for scheme in schemes:
            for h in h_grid:
                m = round(h / h_fine)
                if m < 1 or abs(m * h_fine - h) > 1e-9 * h:
                    raise ValueError(
                        f"coupling requires every h to be a multiple of the fine "
                        f"step {h_fine}; got h={h}"
                    )
                runs.append((scheme, h, steps_of(h), m))
        if config.reference == "fine_h":
            m_ref = round(h_ref / h_fine)
            ref_run = (h_ref, steps_of(h_ref), m_ref)
        # one extra coarse block beyond T feeds sampled postprocessor draws;
        # built-in functionals integrate that draw out analytically instead
        extra = 0
        if callable(config.functional):
            extra = max((m for (s, _, _, m) in runs if s == "new_method"), default=0)
            if ref_run is not None:
                extra = max(extra, ref_run[2])
        n_fine_total = max(n * m for (_, _, n, m) in runs)
        if ref_run is not None:
            n_fine_total = max(n_fine_total, ref_run[1] * ref_run[2])
        n_fine_total += extra
        h_fine_val = h_fine
    else:
        runs = [(scheme, h, steps_of(h), 1) for scheme in schemes for h in h_grid]
        n_fine_total = max(n + 1 for (_, _, n, _) in runs)

    batch = config.batch_size or _auto_batch_size(config.n_samples, n_fine_total, problem.dim)
    bounds = list(range(0, config.n_samples, batch)) + [config.n_samples]
    tasks = [
        (problem, runs, config, bounds[i], bounds[i + 1], n_fine_total, ref_run)
        for i in range(len(bounds) - 1)
    ]
    if config.workers <= 1 or len(tasks) == 1:
        partials = [_batch_worker(t) for t in tasks]
    else:
        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(config.workers) as pool:
            partials = pool.map(_batch_worker, tasks, chunksize=1)

    totals = {run: np.zeros(7) for run in runs}
    ref_totals = np.zeros(7)
    for part in partials:  # merged in batch order: deterministic reduction
        for run in runs:
            totals[run] += part[run]
        if "__reference__" in part:
            ref_totals += part["__reference__"]

    reference_value = None
    reference_estimate = None
    if config.reference == "analytic":
        reference_value = analytic_functional_value(problem, config)
    elif config.reference == "fine_h":
        reference_estimate = _estimate_from_stats(
            ref_totals[1], ref_totals[2], ref_totals[3], config.seed
        )

    estimates, errors, failures = {}, {}, {}
    for scheme, h, n_steps, m in runs:
        stats = totals[(scheme, h, n_steps, m)]
        n_tot, n_ok = int(stats[0]), int(stats[1])
        n_failed = n_tot - n_ok
        failures[(scheme, h)] = n_failed
        if n_failed > config.max_failure_fraction * n_tot:
            raise McFailureError(
                f"{scheme} at h={h}: {n_failed}/{n_tot} trajectories failed"
            )
        est = _estimate_from_stats(n_ok, stats[2], stats[3], config.seed)
        estimates[(scheme, h)] = est
        if config.reference == "fine_h":
            errors[(scheme, h)] = _estimate_from_stats(
                stats[4], stats[5], stats[6], config.seed
            )
        elif config.reference == "analytic":
            errors[(scheme, h)] = McEstimate(
                est.mean - reference_value, est.stderr, est.n, est.seed
            )

    differences = {}
    if config.reference == "fine_h" and config.coupling:
        for i, s1 in enumerate(schemes):
            for s2 in schemes[i + 1 :]:
                for h in h_grid:
                    a, b = errors[(s1, h)], errors[(s2, h)]
                    # difference of paired differences against the shared
                    # reference; stderrs combine conservatively
                    differences[(s1, s2, h)] = McEstimate(
                        a.mean - b.mean,
                        math.hypot(a.stderr, b.stderr),
                        min(a.n, b.n),
                        config.seed,
                    )

    return McExperiment(
        schemes=tuple(schemes),
        h_grid=h_grid,
        estimates=estimates,
        errors=errors if config.reference is not None else None,
        differences=differences,
        reference_estimate=reference_estimate,
        reference_value=reference_value,
        failures=failures,
    )


def estimate_functional(problem, scheme: str, config: McConfig) -> McExperiment:
    """Estimate E[phi(state at T)] for one scheme on each h of the grid.

    The postprocessed method is evaluated through its postprocessor; the
    baselines use the final chain state.  Returns per-h estimates with
    standard errors, plus errors against the configured reference.
    """
    return _mc_experiment(problem, (scheme,), config)


def coupled_compare(problem, schemes: Sequence[str], config: McConfig) -> McExperiment:
    """Run several schemes on shared noise streams.

    All schemes (and the fine-step reference, when configured) consume
    identical draws per (trajectory, step, mode), so error differences
    between schemes carry drastically less variance than the individual
    estimates.
    """
    if not schemes:
        raise ValueError("schemes must be nonempty")
    return _mc_experiment(problem, tuple(schemes), config)


# ---------------------------------------------------------------------------
# order fitting


@dataclass
class OrderFit:
    slope: float
    slope_stderr: float
    intercept: float
    used_h: list
    excluded_h: list


def global_order_fit(errors, min_used: int = 3) -> OrderFit:
    """Weighted least-squares slope of log|error| against log h.

    ``errors`` holds rows (h, |error|, stderr).  Any point whose error does
    not exceed 3 standard errors is excluded from the fit and reported in
    ``excluded_h`` (never silently kept).  At least four points must be
    supplied and at least ``min_used`` must survive; weights follow the
    delta-method error of the log, stderr/|error|.
    """
    rows = [(float(h), float(e), float(s)) for (h, e, s) in errors]
    if len(rows) < 4:
        raise ValueError("order fit needs at least 4 h values")
    used, excluded = [], []
    for h, e, s in rows:
        if e > 0 and (s == 0.0 or e > 3.0 * s):
            used.append((h, e, s))
        else:
            excluded.append(h)
    if len(used) < min_used:
        raise ValueError(
            f"only {len(used)} of {len(rows)} points exceed 3 stderr; "
            "cannot fit an order"
        )
    x = np.log([u[0] for u in used])
    y = np.log([u[1] for u in used])
    sig = np.array([u[2] / u[1] if u[1] > 0 else 0.0 for u in used])
    sig = np.maximum(sig, 1e-8)
    w = 1.0 / sig**2
    design = np.column_stack([x, np.ones_like(x)])
    cov = np.linalg.inv(design.T @ (w[:, None] * design))
    coef = cov @ (design.T @ (w * y))
    return OrderFit(
        slope=float(coef[0]),
        slope_stderr=float(math.sqrt(max(cov[0, 0], 0.0))),
        intercept=float(coef[1]),
        used_h=[u[0] for u in used],
        excluded_h=excluded,
    )


# ---------------------------------------------------------------------------
# long-run time averages


def ergodic_average(
    problem,
    scheme: str,
    h: float,
    n_steps: int,
    burn_in: int,
    seed: int,
    functional: str | Callable = "exp_neg_sq_norm",
    block_count: int = 100,
    trajectory: int = 0,
) -> McEstimate:
    """Time average of phi along one trajectory, after burn-in.

    For the postprocessed method the average runs over the postprocessed
    values (formed every step from the step's own draw); baselines average
    over the chain.  The standard error comes from batch means over
    ``block_count`` blocks, which absorbs the chain's autocorrelation; steps
    beyond a whole number of blocks are dropped.
    """
    if n_steps < block_count:
        raise ValueError("need at least block_count steps after burn-in")
    rng = trajectory_rng(seed, trajectory)
    scale = noise_scale(problem)
    dim = problem.dim
    u = np.zeros(dim)
    is_new = scheme == "new_method"
    block_len = n_steps // block_count
    m_used = block_len * block_count
    values = np.empty(m_used)
    filled = 0
    total = burn_in + n_steps
    chunk = 8192
    done = 0
    while done < total:
        take = min(chunk, total - done)
        draws = rng.standard_normal((take, dim)) * scale
        for i in range(take):
            n = done + i
            xi = draws[i]
            if n >= burn_in and filled < m_used:
                state = postprocess(problem, h, u, xi) if is_new else u
                values[filled] = _functional_values(problem, state, functional)
                filled += 1
            u = chain_step(problem, scheme, h, u, xi)
        done += take
    blocks = values.reshape(block_count, block_len).mean(axis=1)
    mean = float(values.mean())
    stderr = float(blocks.std(ddof=1) / math.sqrt(block_count))
    return McEstimate(mean, stderr, m_used, seed)
