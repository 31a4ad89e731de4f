"""Propensity and Mahalanobis matching without replacement, plus balance digests.

Matching here is deliberately simple and fully deterministic: a greedy 1:1
nearest-neighbor pass without replacement, with a caliper constraint and a
fixed processing order, so that identical inputs always reproduce identical
pair sets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, DesignPartition
from .exceptions import (
    DataError,
    EmptyMatchError,
    InsufficientGroupError,
    SeparationError,
    SingularDesignError,
)

PROPENSITY_TOL = 1e-8
PROPENSITY_MAX_ITER = 100
# Coefficient norm beyond which the logistic fit is declared separated.
SEPARATION_NORM = 1e6
# Fitted probabilities this close to 0/1 on every observation mean separation.
# Matches the score tolerance: under separation the score criterion would
# otherwise "converge" while coefficients are still drifting to infinity.
PINNED_EPS = 1e-8
_SATURATION_ETA = 18.420680743952367  # -log(PINNED_EPS)


@dataclass(frozen=True)
class PropensityModel:
    """Logistic model of treatment on a term set, fitted by IRLS.

    ``linear_scores`` are on the log-odds scale: intercept plus the term
    row dotted with the slope coefficients.
    """

    coefficients: np.ndarray  # intercept first, then one slope per term
    linear_scores: np.ndarray
    converged: bool
    iterations: int


@dataclass(frozen=True)
class BalanceDigest:
    """Standardized mean differences over all covariate columns of a sample.

    ``smd[k]`` is (treated mean - control mean) / full-sample SD for column k;
    NaN when the column is constant in the sample.
    """

    n_treated: int
    n_control: int
    labels: tuple[str, ...]
    smd: tuple[float, ...]

    def to_json_dict(self) -> dict:
        return {
            "n_treated": self.n_treated,
            "n_control": self.n_control,
            "smd": {
                label: (None if np.isnan(value) else value)
                for label, value in zip(self.labels, self.smd)
            },
        }


@dataclass(frozen=True)
class MatchResult:
    """Outcome of a greedy 1:1 matching pass.

    ``pairs`` holds (treated_row, control_row) dataset indices; ``retained``
    is the sorted union of pair members. ``caliper`` is the requested value
    (None means unconstrained) and ``threshold`` the absolute cut it implied.
    """

    pairs: tuple[tuple[int, int], ...]
    retained: tuple[int, ...]
    caliper: float | None
    threshold: float
    dropped_treated: tuple[int, ...]
    replacement: bool
    balance_before: BalanceDigest
    balance_after: BalanceDigest

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)

    def to_json_dict(self) -> dict:
        return {
            "pairs": [list(p) for p in self.pairs],
            "retained": list(self.retained),
            "caliper": self.caliper if self.caliper not in (np.inf,) else "inf",
            "threshold": self.threshold if np.isfinite(self.threshold) else "inf",
            "dropped_treated": list(self.dropped_treated),
            "replacement": self.replacement,
            "balance_before": self.balance_before.to_json_dict(),
            "balance_after": self.balance_after.to_json_dict(),
        }


def balance_digest(dataset: Dataset) -> BalanceDigest:
    """SMD of every covariate column, treated minus control over full-sample SD."""
    mask = dataset.treated_mask
    mean_t = dataset.covariates[mask].mean(axis=0)
    mean_c = dataset.covariates[~mask].mean(axis=0)
    if dataset.n > 1:
        sd = np.sqrt(dataset.covariates.var(axis=0, ddof=1))
    else:
        sd = np.zeros(dataset.n_columns)
    with np.errstate(divide="ignore", invalid="ignore"):
        smd = np.where(sd > 0, (mean_t - mean_c) / sd, np.nan)
    return BalanceDigest(
        n_treated=dataset.n_treated,
        n_control=dataset.n_control,
        labels=dataset.names,
        smd=tuple(float(v) for v in smd),
    )


def _expit(eta: np.ndarray) -> np.ndarray:
    out = np.empty_like(eta)
    pos = eta >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-eta[pos]))
    expeta = np.exp(eta[~pos])
    out[~pos] = expeta / (1.0 + expeta)
    return out


def fit_propensity(dataset: Dataset, term_cols) -> PropensityModel:
    """Maximum-likelihood logistic regression of treatment on selected columns.

    Iteratively reweighted least squares; converged when the largest score
    component ``max |X'(w - p)|`` drops below 1e-8, capped at 100 iterations.

    Raises:
        SeparationError: the groups are (quasi-)completely separated, so the
            maximum-likelihood estimate does not exist.
        SingularDesignError: the term matrix is rank deficient.
    """
    cols = [int(c) for c in term_cols]
    if any(c < 0 or c >= dataset.n_columns for c in cols):
        raise DataError(f"term column indices out of range: {cols}")
    if dataset.n < len(cols) + 2:
        raise InsufficientGroupError(
            f"logistic fit needs N >= {len(cols) + 2}, have {dataset.n}"
        )
    design = np.column_stack([np.ones(dataset.n), dataset.covariates[:, cols]])
    if np.linalg.matrix_rank(design) < design.shape[1]:
        raise SingularDesignError("propensity term matrix is rank deficient")
    w = dataset.treatment
    beta = np.zeros(design.shape[1])
    converged = False
    iterations = 0
    for iterations in range(1, PROPENSITY_MAX_ITER + 1):
        eta = design @ beta
        prob = _expit(eta)
        perfectly_classified = bool(np.all((eta > 0) == (w == 1.0)))
        pinned = perfectly_classified and float(np.min(np.abs(eta))) > _SATURATION_ETA
        if pinned or np.linalg.norm(beta) > SEPARATION_NORM:
            raise SeparationError(
                "treatment groups are completely or quasi-completely separated"
            )
        score = design.T @ (w - prob)
        if np.max(np.abs(score)) < PROPENSITY_TOL:
            converged = True
            break
        weight = prob * (1.0 - prob)
        hessian = design.T @ (design * weight[:, None])
        try:
            step = np.linalg.solve(hessian, score)
        except np.linalg.LinAlgError:
            if perfectly_classified:
                raise SeparationError(
                    "treatment groups are completely or quasi-completely separated"
                ) from None
            raise SingularDesignError(
                "weighted normal equations became singular during the logistic fit"
            ) from None
        beta = beta + step
    scores = design @ beta
    beta.setflags(write=False)
    scores.setflags(write=False)
    return PropensityModel(
        coefficients=beta,
        linear_scores=scores,
        converged=converged,
        iterations=iterations,
    )


def _greedy_match(
    distance: np.ndarray,
    treated_rows: np.ndarray,
    control_rows: np.ndarray,
    order: np.ndarray,
    threshold: float,
) -> tuple[list[tuple[int, int]], list[int]]:
    """Greedy without-replacement pass over a treated-by-control distance matrix.

    ``order`` lists treated positions in processing order. Each treated unit
    takes its nearest still-unused control; exact ties resolve to the lowest
    control row index (controls are column-ordered by original index, so the
    first argmin wins). Units whose best distance exceeds ``threshold`` are
    dropped.
    """
    available = np.ones(distance.shape[1], dtype=bool)
    pairs: list[tuple[int, int]] = []
    dropped: list[int] = []
    for t_pos in order:
        if not available.any():
            dropped.append(int(treated_rows[t_pos]))
            continue
        row = distance[t_pos]
        candidates = np.flatnonzero(available)
        best_local = candidates[np.argmin(row[candidates])]
        if row[best_local] <= threshold:
            pairs.append((int(treated_rows[t_pos]), int(control_rows[best_local])))
            available[best_local] = False
        else:
            dropped.append(int(treated_rows[t_pos]))
    return pairs, dropped


def _finish_match(
    dataset: Dataset,
    pairs: list[tuple[int, int]],
    dropped: list[int],
    caliper: float | None,
    threshold: float,
) -> MatchResult:
    if not pairs:
        raise EmptyMatchError("no treated unit found a control within the caliper")
    retained = tuple(sorted({i for pair in pairs for i in pair}))
    before = balance_digest(dataset)
    after = balance_digest(subset(dataset, retained))
    return MatchResult(
        pairs=tuple(pairs),
        retained=retained,
        caliper=caliper,
        threshold=float(threshold),
        dropped_treated=tuple(dropped),
        replacement=False,
        balance_before=before,
        balance_after=after,
    )


def match_caliper(
    scores: np.ndarray,
    dataset: Dataset,
    caliper: float | None,
    raw_units: bool = False,
) -> MatchResult:
    """Greedy 1:1 nearest-neighbor matching on a score vector.

    Treated units are processed in descending score order (stable on ties)
    and each takes the nearest unused control by absolute score difference.
    The caliper is expressed in multiples of the score standard deviation
    unless ``raw_units`` is set; ``None`` disables the constraint.
    """
    scores = np.asarray(scores, dtype=float).reshape(-1)
    if scores.shape[0] != dataset.n:
        raise DataError(f"scores length {scores.shape[0]} != dataset rows {dataset.n}")
    if not np.all(np.isfinite(scores)):
        raise DataError("scores must be finite")
    if caliper is not None and caliper <= 0:
        raise DataError("caliper must be positive (or None for no constraint)")
    if caliper is None or np.isinf(caliper):
        threshold = np.inf
    elif raw_units:
        threshold = float(caliper)
    else:
        threshold = float(caliper) * float(np.std(scores, ddof=1))
    mask = dataset.treated_mask
    treated_rows = np.flatnonzero(mask)
    control_rows = np.flatnonzero(~mask)
    t_scores = scores[treated_rows]
    distance = np.abs(t_scores[:, None] - scores[control_rows][None, :])
    order = np.argsort(-t_scores, kind="stable")
    pairs, dropped = _greedy_match(distance, treated_rows, control_rows, order, threshold)
    stored = None if caliper is None else float(caliper)
    return _finish_match(dataset, pairs, dropped, stored, threshold)


def match_mahalanobis(
    dataset: Dataset,
    cols,
    caliper: float | None,
) -> MatchResult:
    """Greedy 1:1 matching on Mahalanobis distance over selected columns.

    Distances use the pooled within-group covariance of the selected columns;
    treated units are processed in descending distance from the control-group
    centroid (hardest-to-match first). The caliper is in distance units.
    """
    cols = [int(c) for c in cols]
    if not cols:
        raise DataError("mahalanobis matching needs at least one column")
    if any(c < 0 or c >= dataset.n_columns for c in cols):
        raise DataError(f"column indices out of range: {cols}")
    if caliper is not None and caliper <= 0:
        raise DataError("caliper must be positive (or None for no constraint)")
    if dataset.n_treated < 2 or dataset.n_control < 2:
        raise InsufficientGroupError(
            "pooled within-group covariance needs at least 2 rows per group"
        )
    z = dataset.covariates[:, cols]
    mask = dataset.treated_mask
    z_t = z[mask]
    z_c = z[~mask]

    def centered_scatter(block: np.ndarray) -> np.ndarray:
        centered = block - block.mean(axis=0)
        return centered.T @ centered

    pooled_cov = (centered_scatter(z_t) + centered_scatter(z_c)) / (dataset.n - 2)
    rcond = 1.0 / np.linalg.cond(pooled_cov)
    if not np.isfinite(rcond) or rcond < 1e-12:
        raise SingularDesignError(
            "pooled within-group covariance is singular; drop collinear or "
            "constant columns from the matching set",
            condition=rcond,
        )
    inv_cov = np.linalg.inv(pooled_cov)

    def mahal(diff: np.ndarray) -> np.ndarray:
        return np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", diff, inv_cov, diff), 0.0))

    treated_rows = np.flatnonzero(mask)
    control_rows = np.flatnonzero(~mask)
    centroid = z_c.mean(axis=0)
    centroid_dist = mahal(z_t - centroid)
    order = np.argsort(-centroid_dist, kind="stable")
    diff = z_t[:, None, :] - z_c[None, :, :]
    quad = np.einsum("tcj,jk,tck->tc", diff, inv_cov, diff)
    distance = np.sqrt(np.maximum(quad, 0.0))
    threshold = np.inf if caliper is None else float(caliper)
    pairs, dropped = _greedy_match(distance, treated_rows, control_rows, order, threshold)
    stored = None if caliper is None else float(caliper)
    return _finish_match(dataset, pairs, dropped, stored, threshold)


def subset(dataset: Dataset, retained) -> Dataset:
    """Row-subset a dataset (ascending original order), keeping column metadata."""
    rows = sorted({int(i) for i in retained})
    if not rows:
        raise InsufficientGroupError("retained set is empty")
    if rows[0] < 0 or rows[-1] >= dataset.n:
        raise DataError(f"retained indices out of range 0..{dataset.n - 1}")
    treatment = dataset.treatment[rows]
    if treatment.sum() < 1 or (len(rows) - treatment.sum()) < 1:
        raise InsufficientGroupError("subset lost an entire treatment arm")
    return Dataset(
        treatment,
        dataset.covariates[rows],
        dataset.column_meta,
        treatment_name=dataset.treatment_name,
        expanded=dataset.expanded,
    )
