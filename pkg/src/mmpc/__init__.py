"""Multiplexed model predictive control for constrained linear systems.

One input channel moves per fast step on a fixed cyclic schedule; the
others hold their last levels.  The package provides nominal and
disturbance-robust controllers in this pattern, a synchronous-update
baseline, the periodic Riccati / cost-comparison analysis behind them,
polytope arithmetic for constraint tightening, a dense active-set QP
solver, and a scenario runner with a CLI.
"""

from .controller import (
    ControllerError,
    DesignError,
    InfeasibleStepError,
    InvarianceReport,
    MmpcDesign,
    MovePattern,
    SyncDesign,
    TightenedSets,
    TighteningPolicy,
    build_tightened_sets,
    deadbeat_policy,
    dpre_terminal_weights,
    equilibrium_state,
    infer_disturbance,
    init_nominal,
    init_robust,
    make_smpc_state,
    min_norm_deadbeat_policy,
    nominal_mmpc_step,
    robust_mmpc_step,
    smpc_step,
    verify_periodic_invariance,
    verify_terminal_invariance,
)
from .lti_model import (
    ContinuousPlant,
    DiscretePlant,
    Schedule,
    augment_delta_u,
    build_prediction,
    discretize_zoh,
    is_stabilizable,
)
from .periodic_lq import (
    AugmentedSystem,
    CostMatrices,
    build_augmented,
    compare_designs,
    mmpc_cost_matrices,
    mmpc_qp_law_gains,
    periodic_gains,
    solve_dpre,
    step_disturbance_state,
    terminal_cost,
    unconstrained_mmpc_gains,
)
from .polytope import HPolytope, box, pontryagin_diff
from .qp import QpInstance, QpSolution, condense_all_channels, condense_nominal, condense_robust, solve
from .sim import (
    ControllerSpec,
    InputStepDisturbance,
    PulseDisturbance,
    RandomDisturbance,
    Scenario,
    SetsSpec,
    SimResult,
    TighteningSpec,
    bounded_random_disturbance,
    build_controller,
    build_plant,
    bundled_scenario,
    pulse_disturbance,
    run_closed_loop,
    run_many,
    spring_mass_plant,
    surrogate_aircraft_plant,
    tito_plant,
    tito_velocity_form,
    write_metrics_json,
    write_trace_csv,
)

__version__ = "0.1.0"

__all__ = [
    "AugmentedSystem",
    "ContinuousPlant",
    "ControllerError",
    "ControllerSpec",
    "CostMatrices",
    "DesignError",
    "DiscretePlant",
    "HPolytope",
    "InfeasibleStepError",
    "InputStepDisturbance",
    "InvarianceReport",
    "MmpcDesign",
    "MovePattern",
    "PulseDisturbance",
    "QpInstance",
    "QpSolution",
    "RandomDisturbance",
    "Scenario",
    "Schedule",
    "SetsSpec",
    "SimResult",
    "SyncDesign",
    "TightenedSets",
    "TighteningPolicy",
    "TighteningSpec",
    "augment_delta_u",
    "bounded_random_disturbance",
    "box",
    "build_augmented",
    "build_controller",
    "build_plant",
    "build_prediction",
    "build_tightened_sets",
    "bundled_scenario",
    "compare_designs",
    "condense_all_channels",
    "condense_nominal",
    "condense_robust",
    "deadbeat_policy",
    "discretize_zoh",
    "dpre_terminal_weights",
    "equilibrium_state",
    "infer_disturbance",
    "init_nominal",
    "init_robust",
    "is_stabilizable",
    "make_smpc_state",
    "min_norm_deadbeat_policy",
    "mmpc_cost_matrices",
    "mmpc_qp_law_gains",
    "nominal_mmpc_step",
    "periodic_gains",
    "pontryagin_diff",
    "pulse_disturbance",
    "robust_mmpc_step",
    "run_closed_loop",
    "run_many",
    "smpc_step",
    "solve",
    "solve_dpre",
    "spring_mass_plant",
    "step_disturbance_state",
    "surrogate_aircraft_plant",
    "terminal_cost",
    "tito_plant",
    "tito_velocity_form",
    "unconstrained_mmpc_gains",
    "verify_periodic_invariance",
    "verify_terminal_invariance",
    "write_metrics_json",
    "write_trace_csv",
]
