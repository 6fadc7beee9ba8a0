"""dicetab: stationary distribution correction estimation on tabular MDPs.

Solvers learn occupancy ratios w = d_pi / d_D from a logged dataset alone;
the extraction routines recover state-marginal corrections from per-policy
ones; the constrained module adds a cost budget via Lagrangian updates.
Everything is exact linear algebra or deterministic fixed-point iteration on
finite state spaces, so results are reproducible bit for bit.
"""

from .bench import (
    ExperimentConfig,
    SweepResult,
    default_config,
    emit_plots,
    run_constrained,
    run_fig1_sweep,
    run_ope_compare,
)
from .constrained import (
    ConstrainedResult,
    CostSpec,
    attach_random_costs,
    coptidice_solve,
    corsdice_solve,
    make_binding_instance,
    naive_constrained_semidice,
)
from .divergence import FGenerator, conjugate_pair_check, make_generator
from .extraction import (
    ExtractionResult,
    extract_bias_reduced,
    extract_direct,
    marginal_correction,
)
from .mdp import (
    Dataset,
    MleModel,
    TabularMdp,
    TabularPolicy,
    build_mle_model,
    collect_dataset,
    dataset_from_json,
    dataset_to_json,
    exact_policy_value,
    exact_stationary_distribution,
    generate_random_mdp,
    mdp_from_json,
    mdp_to_json,
    mixture_policy,
    undiscounted_occupancy,
    value_iteration,
)
from .metrics import (
    ViolationReport,
    bellman_flow_violation,
    flow_residual,
    ope_estimate,
    ope_rmse,
    policy_correction_violation,
    violation_report,
)
from .solvers import (
    CorrectionSet,
    OptimizerConfig,
    SolveReport,
    correction_from_json,
    correction_to_json,
    extract_tabular_policy,
    extract_tabular_policy_with_info,
    fdvl_solve,
    odice_solve,
    optidice_solve,
    semidice_solve,
    sql_solve,
    xql_solve,
)

__version__ = "0.1.0"

__all__ = [
    "FGenerator", "make_generator", "conjugate_pair_check",
    "TabularMdp", "TabularPolicy", "Dataset", "MleModel",
    "generate_random_mdp", "value_iteration", "mixture_policy",
    "exact_stationary_distribution", "undiscounted_occupancy",
    "exact_policy_value", "collect_dataset", "build_mle_model",
    "mdp_to_json", "mdp_from_json", "dataset_to_json", "dataset_from_json",
    "OptimizerConfig", "CorrectionSet", "SolveReport",
    "semidice_solve", "optidice_solve", "fdvl_solve", "odice_solve",
    "sql_solve", "xql_solve",
    "extract_tabular_policy", "extract_tabular_policy_with_info",
    "correction_to_json", "correction_from_json",
    "ExtractionResult", "extract_direct", "extract_bias_reduced",
    "marginal_correction",
    "ViolationReport", "flow_residual", "bellman_flow_violation",
    "policy_correction_violation", "ope_estimate", "ope_rmse",
    "violation_report",
    "CostSpec", "ConstrainedResult", "attach_random_costs",
    "coptidice_solve", "corsdice_solve", "naive_constrained_semidice",
    "make_binding_instance",
    "ExperimentConfig", "SweepResult", "default_config",
    "run_fig1_sweep", "run_ope_compare", "run_constrained", "emit_plots",
    "__version__",
]
