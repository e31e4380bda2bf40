"""Bayesian empirical-likelihood inference for contextual-bandit policies."""
from .bandit_sim import (
    RECIPES,
    BanditEnvironment,
    BanditLog,
    LearnedPolicy,
    Streams,
    build_logged_dataset,
    fit_arm_logistic,
    generate_log,
    learn_policy,
    mc_true_value,
    oracle_policy,
    policy_probs,
    sample_context,
    train_policy,
    upper_bound,
)
from .cli_io import (
    RunConfig,
    emit_results,
    export_weighted_csv,
    ingest_raw_csv,
    ingest_weighted_csv,
    validate_summary,
)
from .core import (
    BoxSupport,
    DualPoint,
    LoggedDataset,
    LoggedSample,
    MeleResult,
    build_dataset,
    dual_objective,
    is_estimate,
    log_el_diff,
    log_el_diff_grid,
    log_el_value,
    log_el_value_grid,
    mele,
    snis_estimate,
    solve_diff_dual,
    solve_value_dual,
    support_vertices,
)
from .errors import *  # noqa: F401,F403
from .experiments import (
    ComparisonConfig,
    ComparisonReport,
    CoverageConfig,
    CoverageReport,
    comparison_run,
    coverage_preset,
    coverage_run,
)
from .intervals import WilksInterval, chi2_quantile, normal_quantile, wilks_interval
from .posterior import (
    DIFF,
    VALUE,
    Absolute,
    BetaProduct,
    Complement,
    Conditional,
    Flat,
    GridPosterior,
    HalfPlane,
    Interval,
    Relative,
    SubSupport,
    Tabulated,
    build_posterior,
    hpd_interval,
    prob_diff,
    prob_greater,
    prob_region,
    sub_support,
    sub_support_dual,
)

__version__ = "0.1.0"
