"""Joint Value-at-Risk and expected shortfall modelling for return panels.

The package fits correlated quantile/shortfall recursions by maximum
likelihood under a multivariate asymmetric Laplace working density, scores
and backtests the resulting forecasts, and turns fitted states into
minimum-risk portfolio weights. ``quantes.cli`` exposes the same workflow as
a command line tool.
"""

__version__ = "1.0.0"

from .exceptions import (
    DegeneratePointError,
    InfeasibleAllocationError,
    NumericError,
    PathError,
    QuantesError,
    ValidationError,
)
from .mal import (
    ALParams,
    MALConstraints,
    MALParams,
    al_cdf,
    al_es,
    al_log_density,
    al_mean,
    al_quantile,
    as_levels,
    assemble_sigma,
    fixed_scale,
    fixed_skew,
    implied_covariance,
    linear_combine,
    mal_log_density,
    mal_sample,
)
from .dynamics import (
    AR,
    AS,
    IG,
    MULT,
    SAV,
    CaviarSpec,
    ESLink,
    RiskPath,
    one_step_forecast,
    quantile_path,
    quantile_step,
    risk_path,
)
from .estimation import (
    EMConfig,
    FitResult,
    ParameterSet,
    e_step,
    fit,
    observed_loglik,
)
from .scoring import ForecastRecord, s_al, s_al_sum, s_fz0, s_fzn, s_mal
from .backtests import TestReport, dm_test, dq_test, es_tests, lr_cc, lr_uc
from .portfolio import (
    AllocationResult,
    moment_smv_weights,
    performance_stats,
    portfolio_risk,
    smv_weights,
)
from .simulate import SimScenario, StudyResult, generate, reference_params, run_study
from .pipeline import (
    ReportBundle,
    ReturnsTable,
    RunConfig,
    emit_reports,
    load_returns,
    portfolio_run,
    rolling_forecast,
    summary_stats,
)

__all__ = [
    "ALParams",
    "AR",
    "AS",
    "AllocationResult",
    "CaviarSpec",
    "DegeneratePointError",
    "EMConfig",
    "ESLink",
    "FitResult",
    "ForecastRecord",
    "IG",
    "InfeasibleAllocationError",
    "MALConstraints",
    "MALParams",
    "MULT",
    "NumericError",
    "ParameterSet",
    "PathError",
    "QuantesError",
    "ReportBundle",
    "ReturnsTable",
    "RiskPath",
    "RunConfig",
    "SAV",
    "SimScenario",
    "StudyResult",
    "TestReport",
    "ValidationError",
    "al_cdf",
    "al_es",
    "al_log_density",
    "al_mean",
    "al_quantile",
    "as_levels",
    "assemble_sigma",
    "dm_test",
    "dq_test",
    "e_step",
    "emit_reports",
    "es_tests",
    "fit",
    "fixed_scale",
    "fixed_skew",
    "generate",
    "implied_covariance",
    "linear_combine",
    "load_returns",
    "lr_cc",
    "lr_uc",
    "mal_log_density",
    "mal_sample",
    "moment_smv_weights",
    "observed_loglik",
    "one_step_forecast",
    "performance_stats",
    "portfolio_risk",
    "portfolio_run",
    "quantile_path",
    "quantile_step",
    "reference_params",
    "risk_path",
    "rolling_forecast",
    "run_study",
    "s_al",
    "s_al_sum",
    "s_fz0",
    "s_fzn",
    "s_mal",
    "smv_weights",
    "summary_stats",
]
