"""Treatment-effect bias/variance analysis for matching plus linear regression.

The package quantifies, in closed form, how covariate omission biases the
OLS treatment coefficient and how matching trades that bias against
variance; it calibrates matching calipers by minimizing a normalized MSE,
and ships Monte-Carlo oracles for verification and power analysis.
"""

from .balance import (
    BalanceSummary,
    DesignInverseRow,
    balance_summary,
    inverse_first_block,
    orthogonalize_omitted,
    project,
)
from .calibration import (
    CalibrationCurve,
    GridPoint,
    OptimalCaliper,
    PowerEntry,
    PowerReport,
    PowerResult,
    VerifyResult,
    calibrate_caliper,
    compare_power,
    mc_verify,
    normalized_mse,
    power_mc,
)
from .config import RunConfig, load_config
from .data import (
    ColumnMeta,
    Dataset,
    DesignPartition,
    GenerativeModel,
    TermSpec,
    expand_terms,
    included_design,
    included_matrix,
    load_csv,
    omitted_matrix,
    simulate_outcome,
)
from .engine import (
    ErrorReport,
    ReplicationMap,
    bias_weights,
    error_report,
    normalized_bias_prefactor,
    te_bias,
    te_bias_normalized,
    te_variance,
    te_variance_normalized,
    te_variance_with_replacement,
    variance_lower_bound,
)
from .exceptions import (
    AbsorbedTermError,
    ConfigError,
    DataError,
    EmptyMatchError,
    InsufficientGroupError,
    MatchcalError,
    SeparationError,
    SingularDesignError,
    UndefinedRatioError,
    ZeroVarianceError,
)
from .matching import (
    BalanceDigest,
    MatchResult,
    PropensityModel,
    balance_digest,
    fit_propensity,
    match_caliper,
    match_mahalanobis,
    subset,
)
from .omitted import (
    AggregateBias,
    OmittedBiasReport,
    PerTermDiagnostic,
    absolute_bias_after_subset,
    aggregate_bias,
    omitted_bias_report,
    relative_squared_bias_reduction,
    single_term_normalized_bias,
)

__version__ = "0.1.0"

__all__ = [
    "AbsorbedTermError",
    "AggregateBias",
    "BalanceDigest",
    "BalanceSummary",
    "CalibrationCurve",
    "ColumnMeta",
    "ConfigError",
    "DataError",
    "Dataset",
    "DesignInverseRow",
    "DesignPartition",
    "EmptyMatchError",
    "ErrorReport",
    "GenerativeModel",
    "GridPoint",
    "InsufficientGroupError",
    "MatchResult",
    "MatchcalError",
    "OmittedBiasReport",
    "OptimalCaliper",
    "PerTermDiagnostic",
    "PowerEntry",
    "PowerReport",
    "PowerResult",
    "PropensityModel",
    "ReplicationMap",
    "RunConfig",
    "SeparationError",
    "SingularDesignError",
    "TermSpec",
    "UndefinedRatioError",
    "VerifyResult",
    "ZeroVarianceError",
    "absolute_bias_after_subset",
    "aggregate_bias",
    "balance_digest",
    "balance_summary",
    "bias_weights",
    "calibrate_caliper",
    "compare_power",
    "error_report",
    "expand_terms",
    "fit_propensity",
    "included_design",
    "included_matrix",
    "inverse_first_block",
    "load_config",
    "load_csv",
    "match_caliper",
    "match_mahalanobis",
    "mc_verify",
    "normalized_bias_prefactor",
    "normalized_mse",
    "omitted_bias_report",
    "omitted_matrix",
    "orthogonalize_omitted",
    "power_mc",
    "project",
    "relative_squared_bias_reduction",
    "simulate_outcome",
    "single_term_normalized_bias",
    "subset",
    "te_bias",
    "te_bias_normalized",
    "te_variance",
    "te_variance_normalized",
    "te_variance_with_replacement",
    "variance_lower_bound",
]
