"""Closed-form treatment-effect estimation bias and variance.

When the fitted regression ``y ~ w + 1 + Z_inc`` omits covariates that truly
drive the outcome, the treatment coefficient picks up a bias that is linear
in the omitted coefficients. Both the bias and the estimator variance have
closed forms in the leading row of ``(X'X)^-1``; this module evaluates them
in the direct ("standard") parameterization and in a shift/scale-invariant
("normalized") parameterization built from correlations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .balance import (
    BalanceSummary,
    balance_summary,
    inverse_first_block,
    RCOND_MIN,
)
from .data import Dataset, DesignPartition, included_matrix, omitted_matrix
from .exceptions import DataError, SingularDesignError


def bias_weights(dataset: Dataset, part: DesignPartition) -> np.ndarray:
    """Per-observation weights that turn omitted columns into treatment bias.

    For any omitted column ``z`` with coefficient ``c``, the induced bias is
    ``c * (weights @ z)``. The weights are the first row of
    ``(X'X)^-1 X'`` for the fitted design; they satisfy ``weights @ w == 1``
    and are orthogonal to the intercept and every included column.
    """
    row = inverse_first_block(dataset, part)
    g = row.treat_treat * dataset.treatment + row.treat_intercept
    if part.n_included:
        g = g + included_matrix(dataset, part) @ row.treat_covariate
    return g


def te_bias(dataset: Dataset, part: DesignPartition, gamma_omitted) -> float:
    """Treatment-effect bias induced by omitting columns with these coefficients."""
    gamma = np.asarray(gamma_omitted, dtype=float).reshape(-1)
    if gamma.shape[0] != part.n_omitted:
        raise DataError(
            f"gamma_omitted has length {gamma.shape[0]}, partition omits "
            f"{part.n_omitted} columns"
        )
    if part.n_omitted == 0:
        return 0.0
    g = bias_weights(dataset, part)
    return float(g @ (omitted_matrix(dataset, part) @ gamma))


def te_variance(dataset: Dataset, part: DesignPartition, sigma0_sq: float) -> float:
    """Variance of the estimated treatment coefficient under i.i.d. noise."""
    if sigma0_sq <= 0:
        raise ValueError("sigma0_sq must be positive")
    return sigma0_sq * inverse_first_block(dataset, part).treat_treat


def variance_lower_bound(n_treated: int, n_control: int, sigma0_sq: float) -> float:
    """Minimum achievable variance for given group sizes: ``sigma0^2 (1/n_t + 1/n_c)``."""
    return sigma0_sq * (1.0 / n_treated + 1.0 / n_control)


def normalized_bias_prefactor(n_treated: int, n_control: int) -> float:
    """Scalar in front of the correlation form of the bias.

    Equals ``sqrt(N (N-1) / (n_t n_c))``, the reciprocal of the constant that
    maps standardized mean differences to treatment correlations. This value
    is pinned by requiring exact agreement with the direct OLS form of the
    bias; reports carry it so downstream users can see which constant was
    applied.
    """
    n = n_treated + n_control
    return float(np.sqrt(n * (n - 1) / (n_treated * n_control)))


def _solve_scaled_scatter(summary: BalanceSummary) -> np.ndarray:
    """``scaled_scatter^-1 @ treat_corr`` with a conditioning check."""
    lam = summary.scaled_scatter
    if lam.shape[0] == 0:
        return np.zeros(0)
    rcond = 1.0 / np.linalg.cond(lam)
    if not np.isfinite(rcond) or rcond < RCOND_MIN:
        raise SingularDesignError(
            "scaled within-group scatter matrix is ill conditioned", condition=rcond
        )
    return np.linalg.solve(lam, summary.treat_corr)


def te_bias_normalized(dataset: Dataset, part: DesignPartition, gamma_omitted) -> float:
    """Bias evaluated through correlations and the scaled scatter matrix.

    Agrees with :func:`te_bias` to floating-point accuracy; useful because
    every ingredient is invariant to shifting and scaling of covariates.
    """
    gamma = np.asarray(gamma_omitted, dtype=float).reshape(-1)
    if gamma.shape[0] != part.n_omitted:
        raise DataError(
            f"gamma_omitted has length {gamma.shape[0]}, partition omits "
            f"{part.n_omitted} columns"
        )
    if part.n_omitted == 0:
        return 0.0
    summary = balance_summary(dataset, part)
    scaled_gamma = np.sqrt(summary.var_omitted) * gamma
    rho_o = summary.treat_corr_omitted
    if part.n_included == 0:
        core = rho_o
    else:
        lam_rho = _solve_scaled_scatter(summary)
        quad = float(summary.treat_corr @ lam_rho)
        core = (1.0 + quad) * rho_o - summary.cross_corr.T @ lam_rho
    prefactor = normalized_bias_prefactor(summary.n_treated, summary.n_control)
    return prefactor * float(core @ scaled_gamma)


def te_variance_normalized(
    dataset: Dataset, part: DesignPartition, sigma0_sq: float
) -> float:
    """Variance via the correlation form; agrees with :func:`te_variance`."""
    if sigma0_sq <= 0:
        raise ValueError("sigma0_sq must be positive")
    if part.n_included == 0:
        return variance_lower_bound(dataset.n_treated, dataset.n_control, sigma0_sq)
    summary = balance_summary(dataset, part)
    lam_rho = _solve_scaled_scatter(summary)
    quad = float(summary.treat_corr @ lam_rho)
    return variance_lower_bound(summary.n_treated, summary.n_control, sigma0_sq) * (
        1.0 + quad
    )


@dataclass(frozen=True)
class ReplicationMap:
    """Maps each row of a dataset to the original observation it was sampled from.

    Rows sharing an origin id must be identical in treatment and covariates;
    their noise terms are perfectly correlated, which inflates the estimator
    variance relative to the i.i.d. case.
    """

    origin: np.ndarray

    def __post_init__(self):
        origin = np.asarray(self.origin)
        if origin.ndim != 1:
            raise DataError("origin must be a 1-D integer vector")
        if not np.issubdtype(origin.dtype, np.integer):
            raise DataError("origin ids must be integers")
        origin = origin.copy()
        origin.setflags(write=False)
        object.__setattr__(self, "origin", origin)

    @classmethod
    def identity(cls, n: int) -> "ReplicationMap":
        return cls(np.arange(n))

    def validate(self, dataset: Dataset) -> None:
        if self.origin.shape[0] != dataset.n:
            raise DataError(
                f"replication map length {self.origin.shape[0]} != dataset rows {dataset.n}"
            )
        for origin_id in np.unique(self.origin):
            rows = np.flatnonzero(self.origin == origin_id)
            first = rows[0]
            if not np.all(dataset.treatment[rows] == dataset.treatment[first]):
                raise DataError(
                    f"rows with origin {int(origin_id)} differ in treatment"
                )
            if not np.all(dataset.covariates[rows] == dataset.covariates[first]):
                raise DataError(
                    f"rows with origin {int(origin_id)} differ in covariates"
                )


def te_variance_with_replacement(
    dataset: Dataset,
    part: DesignPartition,
    replication: ReplicationMap,
    sigma0_sq: float,
) -> float:
    """Treatment-effect variance when rows may be resampled copies.

    Evaluates the top-left element of ``D Psi D'`` exactly, where ``D`` is the
    OLS hat operator ``(X'X)^-1 X'`` and ``Psi`` the block noise covariance
    implied by the replication map: since equal-origin rows carry equal bias
    weights, the element reduces to ``sigma0^2 * sum_m (sum of weights in
    origin group m)^2``. This path is exact for unbalanced data too; the
    duplicate-pair counting formula for balanced data is a special case.
    """
    if sigma0_sq <= 0:
        raise ValueError("sigma0_sq must be positive")
    replication.validate(dataset)
    g = bias_weights(dataset, part)
    order = np.argsort(replication.origin, kind="stable")
    sorted_origin = replication.origin[order]
    group_sums = np.add.reduceat(
        g[order], np.flatnonzero(np.r_[True, sorted_origin[1:] != sorted_origin[:-1]])
    )
    return sigma0_sq * float(group_sums @ group_sums)


@dataclass(frozen=True)
class ErrorReport:
    """Bias/variance bundle for one dataset, partition, and noise level."""

    bias: float
    variance: float
    variance_min: float
    normalized_variance: float
    weights: np.ndarray
    sigma0_sq: float

    def to_json_dict(self) -> dict:
        return {
            "bias": self.bias,
            "variance": self.variance,
            "variance_min": self.variance_min,
            "normalized_variance": self.normalized_variance,
            "sigma0_sq": self.sigma0_sq,
        }


def error_report(
    dataset: Dataset,
    part: DesignPartition,
    gamma_omitted,
    sigma0_sq: float,
) -> ErrorReport:
    """Evaluate bias, variance, and the variance floor in one pass."""
    g = bias_weights(dataset, part)
    gamma = np.asarray(gamma_omitted, dtype=float).reshape(-1)
    if gamma.shape[0] != part.n_omitted:
        raise DataError(
            f"gamma_omitted has length {gamma.shape[0]}, partition omits "
            f"{part.n_omitted} columns"
        )
    if sigma0_sq <= 0:
        raise ValueError("sigma0_sq must be positive")
    bias = float(g @ (omitted_matrix(dataset, part) @ gamma)) if part.n_omitted else 0.0
    # ||weights||^2 equals the leading element of (X'X)^-1.
    lead = float(g @ g)
    return ErrorReport(
        bias=bias,
        variance=sigma0_sq * lead,
        variance_min=variance_lower_bound(
            dataset.n_treated, dataset.n_control, sigma0_sq
        ),
        normalized_variance=lead,
        weights=g,
        sigma0_sq=sigma0_sq,
    )
