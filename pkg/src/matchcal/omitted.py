"""Outcome-free quantification of bias from candidate omitted covariates.

All diagnostics here are built from the bias weights alone, never from the
outcome, so they can be computed before outcomes exist and cannot overfit.
Per-term values are expressed as "normalized bias": the fraction of omitted
signal that turns into treatment-effect bias, scaled by sqrt(N).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .balance import balance_summary, orthogonalize_omitted, project
from .data import Dataset, DesignPartition, omitted_matrix
from .diagnostics import emit_warning
from .engine import bias_weights
from .exceptions import AbsorbedTermError, DataError, UndefinedRatioError
from .matching import MatchResult, subset

AGGREGATE_METHODS = ("single", "subspace", "absolute")


def _check_term_index(part: DesignPartition, term_index: int) -> int:
    term_index = int(term_index)
    if not 0 <= term_index < part.n_omitted:
        raise DataError(
            f"term_index {term_index} out of range for {part.n_omitted} omitted columns"
        )
    return term_index


def single_term_normalized_bias(
    dataset: Dataset, part: DesignPartition, term_index: int
) -> float:
    """Signed normalized bias if exactly this candidate term were omitted.

    ``sqrt(N) * (weights @ residual) / ||residual||`` where ``residual`` is
    the term orthogonalized against span(1, included columns). The sign
    corresponds to a unit positive coefficient; rankings use the magnitude.

    Raises:
        AbsorbedTermError: the term lies in the included span, so its bias is
            exactly zero and it is excluded from rankings.
    """
    term_index = _check_term_index(part, term_index)
    residuals, absorbed = orthogonalize_omitted(dataset, part)
    if absorbed[term_index]:
        raise AbsorbedTermError(dataset.column_meta[part.omitted[term_index]].name)
    residual = residuals[:, term_index]
    g = bias_weights(dataset, part)
    return float(np.sqrt(dataset.n) * (g @ residual) / np.linalg.norm(residual))


def relative_squared_bias_reduction(
    dataset: Dataset,
    part: DesignPartition,
    term_index: int,
    matched: MatchResult,
) -> float:
    """Fraction of one term's squared bias removed by a matching pass.

    ``(before^2 - after^2) / before^2`` where before/after are the biases a
    unit-coefficient omission of the term would induce on the full and on
    the matched sample. Independent of the (unknown) true coefficient; can
    be negative when matching worsens the term.

    Raises:
        UndefinedRatioError: the pre-matching bias is exactly zero.
    """
    term_index = _check_term_index(part, term_index)
    column = part.omitted[term_index]
    g_full = bias_weights(dataset, part)
    before = float(g_full @ dataset.covariates[:, column])
    if before == 0.0:
        raise UndefinedRatioError(
            f"term {dataset.column_meta[column].name!r} has exactly zero "
            "pre-matching bias; the relative reduction is undefined"
        )
    matched_data = subset(dataset, matched.retained)
    g_sub = bias_weights(matched_data, part)
    after = float(g_sub @ matched_data.covariates[:, column])
    return (before**2 - after**2) / before**2


def aggregate_bias(
    dataset: Dataset,
    part: DesignPartition,
    method: str,
    reduce: str = "max",
) -> float:
    """Aggregate normalized bias over an eligible subspace of omitted directions.

    Methods, from most to least constrained:

    * ``"single"`` - best (or mean, with ``reduce="mean"``) of the per-term
      magnitudes, one candidate term at a time.
    * ``"subspace"`` - worst linear combination of the orthogonalized
      candidate terms: ``sqrt(N) * ||projection of weights onto their span||``.
    * ``"absolute"`` - worst direction with no reference to candidates at
      all: ``sqrt(N) * ||weights||``, the ceiling of the other two.

    Absorbed terms contribute nothing; if every candidate is absorbed the
    single/subspace estimates are 0 and a warning record is emitted.
    """
    if method not in AGGREGATE_METHODS:
        raise DataError(f"unknown aggregation method {method!r}")
    if reduce not in ("max", "mean"):
        raise DataError(f"unknown reduce operator {reduce!r}")
    g = bias_weights(dataset, part)
    root_n = np.sqrt(dataset.n)
    if method == "absolute":
        return float(root_n * np.linalg.norm(g))
    if part.n_omitted == 0:
        raise DataError(f"method {method!r} needs at least one candidate omitted term")
    residuals, absorbed = orthogonalize_omitted(dataset, part)
    kept = ~absorbed
    if not kept.any():
        emit_warning(
            "all_terms_absorbed",
            method=method,
            labels=[dataset.column_meta[j].name for j in part.omitted],
        )
        return 0.0
    if method == "single":
        values = np.abs(
            root_n * (g @ residuals[:, kept]) / np.linalg.norm(residuals[:, kept], axis=0)
        )
        return float(values.max() if reduce == "max" else values.mean())
    parallel, _ = project(g, residuals[:, kept])
    return float(root_n * np.linalg.norm(parallel))


def absolute_bias_after_subset(
    dataset: Dataset, part: DesignPartition, retained
) -> float:
    """Absolute-maximization estimate re-evaluated on a row subset.

    The worst-case omitted direction found on the full sample (the bias
    weights, scaled to unit omitted signal there) is kept fixed -- not
    re-normalized on the subset -- and its bias is evaluated with the
    subset's own weights. As long as the retained design has full rank this
    reproduces the full-sample estimate exactly, which is why the
    absolute-maximization estimate is invariant under matching.
    """
    g_full = bias_weights(dataset, part)
    direction = np.sqrt(dataset.n) * g_full / np.linalg.norm(g_full)
    rows = sorted({int(i) for i in retained})
    sub = subset(dataset, rows)
    g_sub = bias_weights(sub, part)
    return float(g_sub @ direction[rows])


@dataclass(frozen=True)
class PerTermDiagnostic:
    """Diagnostics for one candidate omitted term, before and after matching."""

    label: str
    absorbed: bool
    normalized_bias_before: float | None
    normalized_bias_after: float | None
    sq_normalized_bias_before: float | None
    sq_normalized_bias_after: float | None
    smd_before: float | None
    smd_after: float | None
    rel_sq_bias_reduction: float | None

    def to_json_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class AggregateBias:
    """The three aggregate estimates on one sample, all on the normalized scale."""

    single_max: float
    subspace_max: float
    absolute_max: float

    def to_json_dict(self) -> dict:
        return {
            "single_max": self.single_max,
            "subspace_max": self.subspace_max,
            "absolute_max": self.absolute_max,
        }


@dataclass(frozen=True)
class OmittedBiasReport:
    """Per-term and aggregate omitted-bias diagnostics.

    ``aggregate`` is evaluated on the diagnosed sample (the matched subset
    when matching was applied, the full sample otherwise);
    ``aggregate_before`` always refers to the full sample.
    ``absolute_invariant`` is the absolute-maximization estimate evaluated on
    the subset while keeping the full-sample worst direction fixed, which by
    construction should equal the full-sample value.
    """

    per_term: tuple[PerTermDiagnostic, ...]
    aggregate: AggregateBias
    aggregate_before: AggregateBias
    absolute_invariant: float | None
    absorbed_terms: tuple[str, ...]

    def to_json_dict(self) -> dict:
        return {
            "per_term": [t.to_json_dict() for t in self.per_term],
            "aggregate": self.aggregate.to_json_dict(),
            "aggregate_before": self.aggregate_before.to_json_dict(),
            "absolute_invariant": self.absolute_invariant,
            "absorbed_terms": list(self.absorbed_terms),
        }


def _sample_diagnostics(dataset: Dataset, part: DesignPartition):
    """Per-term normalized bias (NaN when absorbed) and SMD on one sample."""
    residuals, absorbed = orthogonalize_omitted(dataset, part)
    g = bias_weights(dataset, part)
    root_n = np.sqrt(dataset.n)
    norms = np.linalg.norm(residuals, axis=0)
    values = np.full(part.n_omitted, np.nan)
    ok = ~absorbed
    values[ok] = root_n * (g @ residuals[:, ok]) / norms[ok]
    summary = balance_summary(dataset, part)
    return values, absorbed, summary.smd_omitted


def _aggregates(dataset: Dataset, part: DesignPartition) -> AggregateBias:
    return AggregateBias(
        single_max=aggregate_bias(dataset, part, "single"),
        subspace_max=aggregate_bias(dataset, part, "subspace"),
        absolute_max=aggregate_bias(dataset, part, "absolute"),
    )


def omitted_bias_report(
    dataset: Dataset,
    part: DesignPartition,
    matched: MatchResult | None = None,
) -> OmittedBiasReport:
    """Assemble the full per-term and aggregate diagnostic table.

    With ``matched`` given, "after" columns and the headline aggregates are
    computed on the matched subset; otherwise they repeat the full-sample
    values and the relative reduction is identically zero.
    """
    if part.n_omitted == 0:
        raise DataError("omitted-bias report needs at least one candidate term")
    before_vals, before_abs, smd_before = _sample_diagnostics(dataset, part)
    matched_data = subset(dataset, matched.retained) if matched is not None else None
    if matched_data is not None:
        after_vals, after_abs, smd_after = _sample_diagnostics(matched_data, part)
    else:
        after_vals, after_abs, smd_after = before_vals, before_abs, smd_before

    per_term: list[PerTermDiagnostic] = []
    absorbed_labels: list[str] = []
    for k in range(part.n_omitted):
        label = dataset.column_meta[part.omitted[k]].name
        absorbed = bool(before_abs[k] or after_abs[k])
        if absorbed:
            absorbed_labels.append(label)
            reduction = None
        elif matched is None:
            reduction = 0.0
        else:
            try:
                reduction = relative_squared_bias_reduction(dataset, part, k, matched)
            except UndefinedRatioError:
                absorbed = True
                absorbed_labels.append(label)
                reduction = None

        def value(raw: float) -> float | None:
            return None if np.isnan(raw) else float(raw)

        nb_before = value(before_vals[k])
        nb_after = value(after_vals[k])
        per_term.append(
            PerTermDiagnostic(
                label=label,
                absorbed=absorbed,
                normalized_bias_before=nb_before,
                normalized_bias_after=nb_after,
                sq_normalized_bias_before=None if nb_before is None else nb_before**2,
                sq_normalized_bias_after=None if nb_after is None else nb_after**2,
                smd_before=float(smd_before[k]),
                smd_after=float(smd_after[k]),
                rel_sq_bias_reduction=reduction,
            )
        )
    aggregate_before = _aggregates(dataset, part)
    if matched_data is not None:
        aggregate_after = _aggregates(matched_data, part)
        invariant = absolute_bias_after_subset(dataset, part, matched.retained)
    else:
        aggregate_after = aggregate_before
        invariant = None
    return OmittedBiasReport(
        per_term=tuple(per_term),
        aggregate=aggregate_after,
        aggregate_before=aggregate_before,
        absolute_invariant=invariant,
        absorbed_terms=tuple(absorbed_labels),
    )
