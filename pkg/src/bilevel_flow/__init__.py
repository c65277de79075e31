"""Continuous-time solvers for bilevel optimization.

Filtered gradient flows that keep the lower-level optimality condition
(exactly or within a chosen slack), prediction-correction tracking dynamics,
an RK-4 harness, and the matching runtime convergence certificates.
"""

from .certificates import (
    ENERGY_SLACK,
    BoundReport,
    EnergySeries,
    contraction_deviation,
    dual_bound,
    energy_integral_weight,
    feasibility_fraction,
    kkt_residual,
    pc_time_average_bound,
    pc_tracking_envelope,
    prediction_correction_energy,
    relaxed_flow_energy,
    safe_flow_energy,
)
from .config import (
    AidParams,
    ExperimentConfig,
    InitSpec,
    ProblemSpec,
    load_config,
    validate_config,
)
from .dynamics import (
    BarrierEval,
    FilterOutput,
    barrier_eval,
    compact_flow_velocity,
    gradient_flow_velocity,
    prediction_correction_velocity,
    relaxed_flow_velocity,
    safe_flow_velocity,
    surrogate_hypergradient,
)
from .errors import (
    BilevelFlowError,
    ConfigError,
    DegenerateConstraint,
    MissingConstant,
    NonConvergence,
    NotPositiveDefinite,
    SingularHessian,
)
from .harness import (
    HypercleaningReport,
    RunSummary,
    ablation_grid,
    aid_baseline,
    build_problem,
    hypercleaning_eval,
    init_state,
    run,
)
from .integrator import IntegratorConfig, Snapshot, Trajectory, integrate, rk4_step, stop_reason
from .linalg import SpdFactorization, random_conditioned, solve_gram_dual, solve_spd
from .problems import (
    BilevelProblem,
    FdReport,
    GroundTruth,
    ProblemConstants,
    SolverState,
    check_derivatives,
    make_hypercleaning,
    make_quadratic_ll,
    make_toy1,
    solve_lower,
)

__version__ = "0.1.0"
