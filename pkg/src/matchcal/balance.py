"""Balance summaries, subspace projections, and the leading row of the design inverse.

The fitted design is ``X = [w | 1 | Z_inc]``. Treatment-effect bias and
variance only need the first row of ``(X'X)^-1``, which has a closed form in
terms of group sizes, the vector of group mean differences, and the pooled
within-group scatter matrix of the included columns.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .data import Dataset, DesignPartition, included_design, included_matrix, omitted_matrix
from .exceptions import InsufficientGroupError, SingularDesignError, ZeroVarianceError

# Reciprocal condition estimate below which the design is treated as singular.
# No silent pseudo-inverse: the closed forms presume a unique OLS solution.
RCOND_MIN = 1e-12

# Relative column-drop tolerance of the rank-revealing QR used for projections.
PROJECT_DROP_TOL = 1e-10

# A candidate column whose residual keeps less than this fraction of its norm
# after projecting out the included design counts as in-span ("absorbed").
ABSORB_TOL = 1e-8


@dataclass(frozen=True)
class BalanceSummary:
    """Moment summaries of a dataset under a given column partition.

    ``mean_diff`` is control mean minus treated mean per included column;
    ``smd`` is the standardized mean difference (treated minus control, over
    the full-sample standard deviation). ``pooled_scatter`` is
    ``(n_t-1)*cov_T + (n_c-1)*cov_C`` and ``scaled_scatter`` is the same
    matrix rescaled by full-sample standard deviations and ``1/(N-1)``, which
    puts it on the scale of a correlation matrix.
    """

    n_treated: int
    n_control: int
    mean_diff: np.ndarray            # included: mean_C - mean_T
    mean_diff_omitted: np.ndarray
    smd: np.ndarray                  # included: (mean_T - mean_C) / sd
    smd_omitted: np.ndarray
    treat_corr: np.ndarray           # Pearson corr(w, column), included
    treat_corr_omitted: np.ndarray
    treated_sums: np.ndarray         # column sums over treated rows
    total_sums: np.ndarray           # column sums over all rows
    pooled_scatter: np.ndarray
    scaled_scatter: np.ndarray
    var_included: np.ndarray         # full-sample variances (ddof=1)
    var_omitted: np.ndarray
    mean_included: np.ndarray
    mean_omitted: np.ndarray
    cross_corr: np.ndarray           # corr(included_k, omitted_l), K_inc x K_omi
    cov_treated: np.ndarray          # within-group covariance, treated rows
    cov_control: np.ndarray

    @property
    def n(self) -> int:
        return self.n_treated + self.n_control


@dataclass(frozen=True)
class DesignInverseRow:
    """First row of ``(X'X)^-1`` for the fitted design ``[w | 1 | Z_inc]``.

    ``treat_treat`` is the leading element (the variance of the estimated
    treatment coefficient in units of the noise variance), ``treat_intercept``
    the element pairing treatment with the intercept, and ``treat_covariate``
    the remaining entries. By symmetry this is also the first column.
    """

    treat_treat: float
    treat_intercept: float
    treat_covariate: np.ndarray

    def as_array(self) -> np.ndarray:
        return np.concatenate(
            [[self.treat_treat, self.treat_intercept], self.treat_covariate]
        )


def _group_cov(block: np.ndarray) -> np.ndarray:
    """Within-group covariance matrix (ddof=1) of a rows-by-columns block."""
    if block.shape[1] == 0:
        return np.zeros((0, 0))
    centered = block - block.mean(axis=0)
    return centered.T @ centered / (block.shape[0] - 1)


def _pearson_with_treatment(w: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Direct Pearson correlation of each column of ``z`` with ``w``."""
    n = w.shape[0]
    wc = w - w.mean()
    zc = z - z.mean(axis=0)
    sw = np.sqrt(wc @ wc / (n - 1))
    sz = np.sqrt(np.sum(zc * zc, axis=0) / (n - 1))
    return (wc @ zc) / ((n - 1) * sw * sz)


def _check_groups(dataset: Dataset) -> None:
    if dataset.n_treated < 2 or dataset.n_control < 2:
        raise InsufficientGroupError(
            f"need at least 2 treated and 2 controls, have "
            f"{dataset.n_treated} and {dataset.n_control}"
        )


def _check_constant_columns(dataset: Dataset, indices: tuple[int, ...]) -> None:
    for j in indices:
        col = dataset.covariates[:, j]
        if np.all(col == col[0]):
            raise ZeroVarianceError(dataset.column_meta[j].name)


def balance_summary(dataset: Dataset, part: DesignPartition) -> BalanceSummary:
    """Compute all balance moments for a dataset under a partition.

    Raises:
        InsufficientGroupError: fewer than 2 treated or 2 control rows.
        ZeroVarianceError: an included or omitted column is constant.
    """
    part.validate(dataset)
    _check_groups(dataset)
    _check_constant_columns(dataset, part.included + part.omitted)

    w = dataset.treatment
    mask = dataset.treated_mask
    n_t, n_c = dataset.n_treated, dataset.n_control
    n = dataset.n
    z_inc = included_matrix(dataset, part)
    z_omi = omitted_matrix(dataset, part)

    def moments(z: np.ndarray):
        if z.shape[1] == 0:
            empty = np.zeros(0)
            return empty, empty, empty, empty, empty
        mean_t = z[mask].mean(axis=0)
        mean_c = z[~mask].mean(axis=0)
        u = mean_c - mean_t
        var = z.var(axis=0, ddof=1)
        smd = -u / np.sqrt(var)
        rho = _pearson_with_treatment(w, z)
        return u, smd, rho, var, z.mean(axis=0)

    u_i, smd_i, rho_i, var_i, mu_i = moments(z_inc)
    u_o, smd_o, rho_o, var_o, mu_o = moments(z_omi)

    cov_t = _group_cov(z_inc[mask])
    cov_c = _group_cov(z_inc[~mask])
    pooled = (n_t - 1) * cov_t + (n_c - 1) * cov_c
    if part.n_included:
        inv_sd = 1.0 / np.sqrt(var_i)
        scaled = pooled * np.outer(inv_sd, inv_sd) / (n - 1)
    else:
        scaled = np.zeros((0, 0))

    if part.n_included and part.n_omitted:
        zc_i = z_inc - mu_i
        zc_o = z_omi - mu_o
        cross = (zc_i.T @ zc_o) / ((n - 1) * np.sqrt(np.outer(var_i, var_o)))
    else:
        cross = np.zeros((part.n_included, part.n_omitted))

    return BalanceSummary(
        n_treated=n_t,
        n_control=n_c,
        mean_diff=u_i,
        mean_diff_omitted=u_o,
        smd=smd_i,
        smd_omitted=smd_o,
        treat_corr=rho_i,
        treat_corr_omitted=rho_o,
        treated_sums=z_inc.T @ w,
        total_sums=z_inc.sum(axis=0),
        pooled_scatter=pooled,
        scaled_scatter=scaled,
        var_included=var_i,
        var_omitted=var_o,
        mean_included=mu_i,
        mean_omitted=mu_o,
        cross_corr=cross,
        cov_treated=cov_t,
        cov_control=cov_c,
    )


def _require_regression_size(dataset: Dataset, part: DesignPartition) -> None:
    needed = part.n_included + 3
    if dataset.n < needed:
        raise InsufficientGroupError(
            f"regression needs N >= {needed} rows for {part.n_included} "
            f"included columns, have {dataset.n}"
        )


def _solve_pooled_scatter(pooled: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve ``pooled @ x = rhs`` after a conditioning check."""
    if pooled.shape[0] == 0:
        return np.zeros(0)
    rcond = 1.0 / np.linalg.cond(pooled)
    if not np.isfinite(rcond) or rcond < RCOND_MIN:
        raise SingularDesignError(
            "pooled within-group scatter matrix is ill conditioned", condition=rcond
        )
    return np.linalg.solve(pooled, rhs)


def inverse_first_block(dataset: Dataset, part: DesignPartition) -> DesignInverseRow:
    """Leading row of ``(X'X)^-1`` without forming the full inverse.

    ``treat_treat = 1/n_t + 1/n_c + u' A^-1 u`` where ``u`` is the vector of
    control-minus-treated means and ``A`` the pooled within-group scatter of
    the included columns.

    Raises:
        SingularDesignError: rank-deficient design or ill-conditioned scatter.
    """
    part.validate(dataset)
    _require_regression_size(dataset, part)
    n_t, n_c = dataset.n_treated, dataset.n_control
    if part.n_included == 0:
        return DesignInverseRow(1.0 / n_t + 1.0 / n_c, -1.0 / n_c, np.zeros(0))
    _check_groups(dataset)
    _check_constant_columns(dataset, part.included)

    w = dataset.treatment
    z = included_matrix(dataset, part)
    mask = dataset.treated_mask
    u = z[~mask].mean(axis=0) - z[mask].mean(axis=0)
    p = z.T @ w
    q = z.sum(axis=0)
    pooled = (n_t - 1) * _group_cov(z[mask]) + (n_c - 1) * _group_cov(z[~mask])

    design = included_design(dataset, part)
    if np.linalg.matrix_rank(design) < part.n_included + 2:
        raise SingularDesignError("included design matrix is rank deficient")

    solved = _solve_pooled_scatter(pooled, u)
    a = 1.0 / n_t + 1.0 / n_c + float(u @ solved)
    b = -1.0 / n_c + float((p - q) @ solved) / n_c
    return DesignInverseRow(a, b, solved)


def project(target: np.ndarray, basis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split ``target`` into components inside and orthogonal to span(basis).

    Uses a pivoted (rank-revealing) QR factorization; basis columns whose
    pivot falls below ``PROJECT_DROP_TOL`` relative to the largest are
    dropped, so near-collinear bases do not poison the projection.

    Returns:
        ``(parallel, orthogonal)`` with ``parallel + orthogonal == target``.
    """
    target = np.asarray(target, dtype=float).reshape(-1)
    basis = np.asarray(basis, dtype=float)
    if basis.ndim == 1:
        basis = basis[:, None]
    if basis.shape[0] != target.shape[0]:
        raise ValueError(
            f"basis has {basis.shape[0]} rows for a target of length {target.shape[0]}"
        )
    if basis.shape[1] == 0:
        return np.zeros_like(target), target.copy()
    q_mat, r_mat, _ = scipy.linalg.qr(basis, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r_mat))
    if diag.size == 0 or diag[0] == 0.0:
        return np.zeros_like(target), target.copy()
    rank = int(np.sum(diag > PROJECT_DROP_TOL * diag[0]))
    q_kept = q_mat[:, :rank]
    parallel = q_kept @ (q_kept.T @ target)
    return parallel, target - parallel


def orthogonalize_omitted(
    dataset: Dataset, part: DesignPartition
) -> tuple[np.ndarray, np.ndarray]:
    """Residualize each omitted column against span(1, included columns).

    Returns:
        ``(residuals, absorbed)`` where ``residuals`` is N x K_omitted and
        ``absorbed[k]`` is True when column k keeps less than ``ABSORB_TOL``
        of its norm (it then lies in the included span and induces no bias).
    """
    part.validate(dataset)
    z_omi = omitted_matrix(dataset, part)
    if part.n_omitted == 0:
        return z_omi.copy(), np.zeros(0, dtype=bool)
    basis = np.column_stack([np.ones(dataset.n), included_matrix(dataset, part)])
    q_mat, r_mat, _ = scipy.linalg.qr(basis, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r_mat))
    rank = int(np.sum(diag > PROJECT_DROP_TOL * diag[0])) if diag[0] > 0 else 0
    q_kept = q_mat[:, :rank]
    residuals = z_omi - q_kept @ (q_kept.T @ z_omi)
    original_norms = np.linalg.norm(z_omi, axis=0)
    residual_norms = np.linalg.norm(residuals, axis=0)
    absorbed = residual_norms < ABSORB_TOL * original_norms
    return residuals, absorbed
