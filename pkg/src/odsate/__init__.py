"""Average treatment effects from outcome-dependent samples with a misclassified binary outcome."""

from .core_model import (
    AdjustedLink,
    MismeasureSpec,
    ObservedSample,
    adjusted_link,
    adjusted_link_derivs,
    expit,
    forward_outcome_regression,
    invert_outcome_regression,
    observed_prevalence,
    sampling_ratio,
    true_prevalence_from_observed,
)
from .ee_solver import SolveDiagnostics, SolveOptions, newton_solve, sandwich_covariance
from .errors import *  # noqa: F401,F403
from .gam_ee import SplineConfig, build_gam_design, bspline_basis, difference_penalty, fit_gam_ee, select_lambda_bic
from .glm_ee import FitResult, compute_u_hat, fit_glm_ee, glm_score
from .sim_harness import (
    ScenarioMetrics,
    ScenarioSpec,
    case_control_sample,
    generate_pool,
    iptw_estimate,
    misclassify,
    naive_fit,
    run_replications,
    true_tau_mc,
)

__version__ = "0.1.0"
