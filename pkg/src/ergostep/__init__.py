"""Postprocessed implicit-explicit integrators for invariant-measure sampling.

The package implements a modification of the linearized implicit Euler
method for stiff additive-noise SDEs and semilinear SPDEs which, combined
with a cheap end-of-trajectory postprocessor, samples the invariant
distribution at higher order while keeping L-stability, together with the
analysis apparatus to verify it: test-equation stability functions,
order-condition certificates, exact Gaussian invariant measures of the
linear case, spatial-regularity diagnostics, and a reproducible
Monte-Carlo experiment driver with common-random-number coupling.
"""

from .conditions import (
    ConditionResiduals,
    LocalOrderEstimate,
    check_conditions,
    estimate_local_weak_order,
    solve_family,
)
from .invariants import (
    DiagonalGaussian,
    OrderStudy,
    RegularityProfile,
    convergence_order_study,
    exact_invariant,
    exp_neg_sq_moment,
    regularity_profile,
    scheme_invariant,
    trace_distance_bound,
)
from .montecarlo import (
    McConfig,
    McEstimate,
    McExperiment,
    McFailureError,
    OrderFit,
    coupled_compare,
    ergodic_average,
    estimate_functional,
    global_order_fit,
)
from .problems import (
    GridProblem,
    Nonlinearity,
    SdeProblem,
    SpectralProblem,
    TraceDiagnostics,
    estimate_s_bar,
    load_problem,
    make_nonlinearity,
    resolvent_apply,
    sample_noise_increment,
    trajectory_rng,
)
from .schemes import (
    NewtonConvergenceError,
    SchemeCoefficients,
    StepperState,
    TrajectoryResult,
    chain_step,
    postprocess,
    run_trajectory,
    step_linearized_euler,
    step_new_sde,
    step_new_spde,
    step_trapezoidal,
)
from .stability import (
    Lemma6Report,
    R,
    R_bar,
    R_bar_polynomial,
    RationalStability,
    UnstableSchemeError,
    l_stability_verdict,
    lemma6_bound_check,
)

__version__ = "0.1.0"
