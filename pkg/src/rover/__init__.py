"""Risk-aware macroscopic swarm planning over Gaussian mixtures.

The package splits into a macroscopic planner that moves a Gaussian
mixture model of the swarm across a fixed grid of candidate components
(transport LPs with CVaR collision constraints, solved by sequential
linear programming), a microscopic potential-field controller that makes
individual robots track the planned mixture, and a harness that runs
scenarios end to end and exports trajectories, figures and metrics.
"""

from .gauss import Gaussian2, Gmm, make_rng, sample, w2_gaussian, w2_gmm
from .geometry import (
    ConvexPolygon,
    signed_distance,
    signed_distance_batch,
    validate_polygon,
)
from .harness import (
    MetricsReport,
    RunAborted,
    Scenario,
    TrajectoryLog,
    compute_metrics,
    export,
    load_scenario,
    log_from_csv,
    run,
    scenario_from_dict,
)
from .micro import ApfParams, RobotState, apf_step, assign_targets, step_swarm
from .planner import (
    FtmpcConfig,
    OptiResult,
    PlannerError,
    PlanRun,
    opti_gmm,
    plan_full,
    prepare,
)
from .risk import (
    RiskParams,
    cvar_gaussian,
    cvar_gmm,
    cvar_grad_weights,
    sdf_gaussian,
    sdf_gmm,
    var_gmm,
)

__version__ = "0.1.0"

__all__ = [
    "Gaussian2",
    "Gmm",
    "make_rng",
    "sample",
    "w2_gaussian",
    "w2_gmm",
    "ConvexPolygon",
    "signed_distance",
    "signed_distance_batch",
    "validate_polygon",
    "RiskParams",
    "cvar_gaussian",
    "cvar_gmm",
    "cvar_grad_weights",
    "sdf_gaussian",
    "sdf_gmm",
    "var_gmm",
    "FtmpcConfig",
    "OptiResult",
    "PlannerError",
    "PlanRun",
    "opti_gmm",
    "plan_full",
    "prepare",
    "ApfParams",
    "RobotState",
    "apf_step",
    "assign_targets",
    "step_swarm",
    "Scenario",
    "TrajectoryLog",
    "MetricsReport",
    "RunAborted",
    "load_scenario",
    "scenario_from_dict",
    "run",
    "compute_metrics",
    "export",
    "log_from_csv",
    "__version__",
]
