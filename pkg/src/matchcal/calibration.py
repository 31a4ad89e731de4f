"""Normalized-MSE calibration of matching calipers and Monte-Carlo analyses.

Bias and variance live on different scales until a belief about how much
outcome variation the omitted terms carry ("omitted R-squared", the ratio of
orthogonalized omitted signal to noise variance) converts normalized squared
bias into variance units:

    normalized MSE = normalized variance + R_o^2 * normalized squared bias

Scanning calipers and minimizing this objective per R_o^2 calibrates the
matching step without ever touching outcomes. The Monte-Carlo routines keep
per-iteration RNG streams derived from (seed, iteration index) and a fixed
chunked reduction order, so results are bit-identical regardless of how many
threads execute them.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.stats

from .balance import inverse_first_block
from .data import (
    Dataset,
    DesignPartition,
    GenerativeModel,
    included_design,
    included_matrix,
    omitted_matrix,
)
from .diagnostics import emit_warning
from .exceptions import (
    DataError,
    EmptyMatchError,
    InsufficientGroupError,
    SingularDesignError,
    ZeroVarianceError,
)
from .omitted import aggregate_bias
from .matching import MatchResult, match_caliper, subset

# Iterations per scheduling unit. Fixed so that chunk boundaries (and hence
# floating-point reduction order) never depend on the thread count.
MC_CHUNK = 256

_SKIPPABLE = (
    EmptyMatchError,
    InsufficientGroupError,
    SingularDesignError,
    ZeroVarianceError,
)


@dataclass(frozen=True)
class GridPoint:
    """One (caliper, R_o^2) evaluation of the normalized-MSE objective.

    ``caliper`` is the requested value, ``math.inf`` for matching without a
    caliper constraint, or ``None`` for the unmatched full sample.
    """

    caliper: float | None
    matched: bool
    r_o_sq: float
    normalized_variance: float
    normalized_sq_bias: float
    normalized_mse: float
    n_treated: int
    n_control: int

    def to_json_dict(self) -> dict:
        return {
            "caliper": _caliper_json(self.caliper),
            "matched": self.matched,
            "r_o_sq": self.r_o_sq,
            "normalized_variance": self.normalized_variance,
            "normalized_sq_bias": self.normalized_sq_bias,
            "normalized_mse": self.normalized_mse,
            "n_treated": self.n_treated,
            "n_control": self.n_control,
        }


@dataclass(frozen=True)
class OptimalCaliper:
    """MSE-minimizing configuration for one R_o^2 value."""

    r_o_sq: float
    caliper: float | None  # None means the unmatched configuration won
    normalized_mse: float

    def to_json_dict(self) -> dict:
        return {
            "r_o_sq": self.r_o_sq,
            "caliper": _caliper_json(self.caliper),
            "normalized_mse": self.normalized_mse,
        }


@dataclass(frozen=True)
class CalibrationCurve:
    """Full normalized-MSE grid plus the per-R_o^2 minimizers."""

    grid: tuple[GridPoint, ...]
    optimal: tuple[OptimalCaliper, ...]
    skipped_calipers: tuple[float, ...]
    bias_method: str

    def to_json_dict(self) -> dict:
        return {
            "bias_method": self.bias_method,
            "grid": [p.to_json_dict() for p in self.grid],
            "optimal": [o.to_json_dict() for o in self.optimal],
            "skipped_calipers": [_caliper_json(c) for c in self.skipped_calipers],
        }


def _caliper_json(value: float | None):
    if value is None:
        return None
    return "inf" if math.isinf(value) else value


def _caliper_order_key(point_caliper: float | None, matched: bool) -> tuple:
    """Sort key: finite calipers ascending, then uncapped matching, then unmatched."""
    if not matched:
        return (2,)
    if point_caliper is None or math.isinf(point_caliper):
        return (1,)
    return (0, point_caliper)


def normalized_mse(
    dataset: Dataset,
    part: DesignPartition,
    matched: MatchResult | None,
    r_o_sq: float,
    bias_method: str,
) -> GridPoint:
    """Evaluate one grid point on the matched subset (or the full sample).

    ``normalized_sq_bias`` is the squared aggregate normalized bias divided by
    the sample size, so that multiplying it by R_o^2 lands exactly on
    ``bias^2 / sigma0^2`` for an omitted signal of that strength.
    """
    if r_o_sq < 0:
        raise DataError("r_o_sq must be nonnegative")
    if matched is not None:
        sample = subset(dataset, matched.retained)
        caliper = matched.caliper if matched.caliper is not None else math.inf
        is_matched = True
    else:
        sample = dataset
        caliper = None
        is_matched = False
    variance = inverse_first_block(sample, part).treat_treat
    aggregate = aggregate_bias(sample, part, bias_method)
    sq_bias = aggregate**2 / sample.n
    return GridPoint(
        caliper=caliper,
        matched=is_matched,
        r_o_sq=float(r_o_sq),
        normalized_variance=float(variance),
        normalized_sq_bias=float(sq_bias),
        normalized_mse=float(variance + r_o_sq * sq_bias),
        n_treated=sample.n_treated,
        n_control=sample.n_control,
    )


def calibrate_caliper(
    dataset: Dataset,
    part: DesignPartition,
    scores: np.ndarray,
    calipers,
    r_o_grid,
    bias_method: str,
    raw_units: bool = False,
) -> CalibrationCurve:
    """Scan calipers against an R_o^2 grid and pick per-R_o^2 minimizers.

    Calipers that yield fewer than two pairs or a degenerate retained design
    are skipped with a ``caliper_skipped`` warning record. The unmatched full
    sample always enters the grid as an extra configuration. Ties resolve to
    the smallest caliper (most aggressive bias removal).

    Raises:
        EmptyMatchError: every requested caliper was infeasible.
    """
    calipers = [float(c) for c in calipers]
    r_o_grid = [float(r) for r in r_o_grid]
    if not calipers or not r_o_grid:
        raise DataError("caliper and R_o^2 grids must be nonempty")
    evaluated: list[GridPoint] = []
    skipped: list[float] = []
    feasible = 0
    for caliper in calipers:
        try:
            result = match_caliper(scores, dataset, caliper, raw_units=raw_units)
            if result.n_pairs < 2:
                raise EmptyMatchError(f"caliper {caliper} keeps fewer than 2 pairs")
            base = normalized_mse(dataset, part, result, 0.0, bias_method)
        except _SKIPPABLE as exc:
            emit_warning("caliper_skipped", caliper=caliper, reason=str(exc))
            skipped.append(caliper)
            continue
        feasible += 1
        evaluated.append(base)
    if feasible == 0:
        raise EmptyMatchError(f"all calipers infeasible: {calipers}")
    evaluated.append(normalized_mse(dataset, part, None, 0.0, bias_method))

    grid: list[GridPoint] = []
    optimal: list[OptimalCaliper] = []
    for r_o_sq in r_o_grid:
        candidates: list[GridPoint] = []
        for base in evaluated:
            point = GridPoint(
                caliper=base.caliper,
                matched=base.matched,
                r_o_sq=r_o_sq,
                normalized_variance=base.normalized_variance,
                normalized_sq_bias=base.normalized_sq_bias,
                normalized_mse=base.normalized_variance
                + r_o_sq * base.normalized_sq_bias,
                n_treated=base.n_treated,
                n_control=base.n_control,
            )
            grid.append(point)
            candidates.append(point)
        best = min(
            candidates,
            key=lambda p: (p.normalized_mse, _caliper_order_key(p.caliper, p.matched)),
        )
        optimal.append(
            OptimalCaliper(
                r_o_sq=r_o_sq,
                caliper=best.caliper if best.matched else None,
                normalized_mse=best.normalized_mse,
            )
        )
    return CalibrationCurve(
        grid=tuple(grid),
        optimal=tuple(optimal),
        skipped_calipers=tuple(skipped),
        bias_method=bias_method,
    )


GRID_CSV_HEADER = (
    "caliper",
    "matched",
    "r_o_sq",
    "normalized_variance",
    "normalized_sq_bias",
    "normalized_mse",
    "n_treated",
    "n_control",
)


def _caliper_csv(value: float | None) -> str:
    if value is None:
        return "none"
    return "inf" if math.isinf(value) else repr(value)


def grid_csv_rows(curve: CalibrationCurve) -> list[list[str]]:
    rows = []
    for p in curve.grid:
        rows.append(
            [
                _caliper_csv(p.caliper),
                str(p.matched).lower(),
                repr(p.r_o_sq),
                repr(p.normalized_variance),
                repr(p.normalized_sq_bias),
                repr(p.normalized_mse),
                str(p.n_treated),
                str(p.n_control),
            ]
        )
    return rows


OPTIMAL_CSV_HEADER = ("r_o_sq", "caliper", "normalized_mse")


def optimal_csv_rows(curve: CalibrationCurve) -> list[list[str]]:
    return [
        [repr(o.r_o_sq), _caliper_csv(o.caliper), repr(o.normalized_mse)]
        for o in curve.optimal
    ]


# ---------------------------------------------------------------------------
# Monte-Carlo machinery
# ---------------------------------------------------------------------------


def _iteration_streams(seed, iterations: int) -> list[np.random.SeedSequence]:
    base = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return base.spawn(iterations)


def _chunks(n: int) -> list[range]:
    return [range(start, min(start + MC_CHUNK, n)) for start in range(0, n, MC_CHUNK)]


def _run_chunks(worker, iterations: int, threads: int) -> list:
    spans = _chunks(iterations)
    if threads <= 1 or len(spans) == 1:
        return [worker(span) for span in spans]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(worker, spans))


def _ols_fit(design: np.ndarray, outcomes: np.ndarray):
    """Generic batched OLS: coefficient matrix and per-column residual SS."""
    xtx = design.T @ design
    coefs = np.linalg.solve(xtx, design.T @ outcomes)
    residuals = outcomes - design @ coefs
    return coefs, np.sum(residuals * residuals, axis=0)


@dataclass(frozen=True)
class PowerResult:
    """Rejection rate of the treatment t-test for one configuration."""

    power: float
    mc_se: float
    n_treated: int
    n_control: int
    rejections: int
    iterations: int
    mode: str
    effect_size: float
    alpha: float

    def to_json_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _power_preconditions(
    dataset: Dataset, part: DesignPartition, effect_size, alpha, iterations
) -> None:
    if iterations < 100:
        raise DataError("power analysis needs at least 100 iterations")
    if not 0.0 < alpha < 1.0:
        raise DataError("alpha must lie strictly between 0 and 1")
    if dataset.n <= part.n_included + 2:
        raise InsufficientGroupError(
            f"sample of {dataset.n} leaves no residual degrees of freedom for "
            f"{part.n_included} included columns"
        )


def power_mc(
    dataset: Dataset,
    part: DesignPartition,
    mode: str,
    effect_size: float,
    alpha: float,
    iterations: int,
    seed,
    subset_sizes: tuple[int, int] | None = None,
    gamma_included: np.ndarray | None = None,
    intercept: float = 0.0,
    threads: int = 1,
) -> PowerResult:
    """Monte-Carlo power of the two-sided treatment t-test at level ``alpha``.

    Outcomes are simulated with unit noise, ``tau = effect_size`` and a
    correctly specified mean (no omitted signal), then refitted by OLS on the
    included design. ``mode="matched"`` treats ``dataset`` as the analysis
    sample itself; ``mode="random"`` draws, per iteration, a uniform
    subsample of ``subset_sizes = (n_treated, n_control)`` rows from
    ``dataset`` and analyzes that.
    """
    if mode not in ("matched", "random"):
        raise DataError(f"unknown power mode {mode!r}")
    _power_preconditions(dataset, part, effect_size, alpha, iterations)
    gamma = (
        np.zeros(part.n_included)
        if gamma_included is None
        else np.asarray(gamma_included, dtype=float).reshape(-1)
    )
    if gamma.shape[0] != part.n_included:
        raise DataError(
            f"gamma_included has length {gamma.shape[0]}, partition includes "
            f"{part.n_included} columns"
        )
    streams = _iteration_streams(seed, iterations)

    if mode == "matched":
        design = included_design(dataset, part)
        if np.linalg.matrix_rank(design) < design.shape[1]:
            raise SingularDesignError("included design on the sample is rank deficient")
        mean = (
            effect_size * dataset.treatment
            + intercept
            + included_matrix(dataset, part) @ gamma
        )
        df = dataset.n - design.shape[1]
        t_crit = float(scipy.stats.t.ppf(1.0 - alpha / 2.0, df))
        inv_lead = float(np.linalg.inv(design.T @ design)[0, 0])
        n_treated, n_control = dataset.n_treated, dataset.n_control

        def worker(span: range) -> np.ndarray:
            noise = np.column_stack(
                [np.random.default_rng(streams[i]).normal(size=dataset.n) for i in span]
            )
            coefs, rss = _ols_fit(design, mean[:, None] + noise)
            se = np.sqrt(rss / df * inv_lead)
            return np.abs(coefs[0] / se) > t_crit

    else:
        if subset_sizes is None:
            raise DataError("random mode needs subset_sizes=(n_treated, n_control)")
        n_t_sub, n_c_sub = int(subset_sizes[0]), int(subset_sizes[1])
        if n_t_sub < 1 or n_c_sub < 1:
            raise DataError("subset sizes must be at least 1 per group")
        if n_t_sub > dataset.n_treated or n_c_sub > dataset.n_control:
            raise DataError("subset sizes exceed available group sizes")
        n_sub = n_t_sub + n_c_sub
        p = part.n_included + 2
        if n_sub <= p:
            raise InsufficientGroupError(
                f"subsample of {n_sub} leaves no residual degrees of freedom"
            )
        df = n_sub - p
        t_crit = float(scipy.stats.t.ppf(1.0 - alpha / 2.0, df))
        treated_rows = np.flatnonzero(dataset.treated_mask)
        control_rows = np.flatnonzero(~dataset.treated_mask)
        full_design = included_design(dataset, part)
        full_mean = (
            effect_size * dataset.treatment
            + intercept
            + included_matrix(dataset, part) @ gamma
        )
        n_treated, n_control = n_t_sub, n_c_sub

        def worker(span: range) -> np.ndarray:
            rejected = np.zeros(len(span), dtype=bool)
            for k, i in enumerate(span):
                rng = np.random.default_rng(streams[i])
                rows = np.sort(
                    np.concatenate(
                        [
                            rng.permutation(treated_rows)[:n_t_sub],
                            rng.permutation(control_rows)[:n_c_sub],
                        ]
                    )
                )
                design = full_design[rows]
                y = full_mean[rows] + rng.normal(size=n_sub)
                try:
                    coefs, rss = _ols_fit(design, y[:, None])
                except np.linalg.LinAlgError:
                    continue  # degenerate draw: count as non-rejection
                inv_lead = float(np.linalg.inv(design.T @ design)[0, 0])
                se = math.sqrt(rss[0] / df * inv_lead)
                rejected[k] = abs(coefs[0, 0] / se) > t_crit
            return rejected

    rejected = np.concatenate(_run_chunks(worker, iterations, threads))
    power = float(rejected.mean())
    return PowerResult(
        power=power,
        mc_se=math.sqrt(power * (1.0 - power) / iterations),
        n_treated=n_treated,
        n_control=n_control,
        rejections=int(rejected.sum()),
        iterations=iterations,
        mode=mode,
        effect_size=float(effect_size),
        alpha=float(alpha),
    )


@dataclass(frozen=True)
class PowerEntry:
    """Matched vs random-subsample power at one caliper."""

    caliper: float | None  # None for the unmatched reference entry
    n_treated: int
    n_control: int
    power_matched: float
    power_random: float
    mc_se: float  # largest single-estimate binomial SE of the two powers

    def to_json_dict(self) -> dict:
        return {
            "caliper": _caliper_json(self.caliper),
            "n_treated": self.n_treated,
            "n_control": self.n_control,
            "power_matched": self.power_matched,
            "power_random": self.power_random,
            "mc_se": self.mc_se,
        }


@dataclass(frozen=True)
class PowerReport:
    """Power comparison across a caliper grid."""

    effect_size: float
    alpha: float
    iterations: int
    seed: int
    entries: tuple[PowerEntry, ...]
    skipped_calipers: tuple[float, ...]

    def to_json_dict(self) -> dict:
        return {
            "effect_size": self.effect_size,
            "alpha": self.alpha,
            "iterations": self.iterations,
            "seed": self.seed,
            "entries": [e.to_json_dict() for e in self.entries],
            "skipped_calipers": [_caliper_json(c) for c in self.skipped_calipers],
        }


POWER_CSV_HEADER = (
    "caliper",
    "n_treated",
    "n_control",
    "power_matched",
    "power_random",
    "mc_se",
)


def power_csv_rows(report: PowerReport) -> list[list[str]]:
    return [
        [
            _caliper_csv(e.caliper),
            str(e.n_treated),
            str(e.n_control),
            repr(e.power_matched),
            repr(e.power_random),
            repr(e.mc_se),
        ]
        for e in report.entries
    ]


def compare_power(
    dataset: Dataset,
    part: DesignPartition,
    scores: np.ndarray,
    calipers,
    effect_size: float,
    alpha: float,
    iterations: int,
    seed: int,
    raw_units: bool = False,
    gamma_included: np.ndarray | None = None,
    threads: int = 1,
    include_unmatched: bool = True,
) -> PowerReport:
    """Power of matched subsets vs same-size uniform subsamples per caliper.

    Every (caliper, mode) combination gets an independent, deterministic
    RNG stream derived from ``seed``, so the report is reproducible and
    insensitive to execution order.
    """
    entries: list[PowerEntry] = []
    skipped: list[float] = []
    configs: list[tuple[float | None, Dataset]] = []
    for caliper in calipers:
        try:
            result = match_caliper(scores, dataset, float(caliper), raw_units=raw_units)
            configs.append((float(caliper), subset(dataset, result.retained)))
        except _SKIPPABLE as exc:
            emit_warning("caliper_skipped", caliper=float(caliper), reason=str(exc))
            skipped.append(float(caliper))
    if include_unmatched:
        configs.append((None, dataset))
    for index, (caliper, sample) in enumerate(configs):
        matched_run = power_mc(
            sample,
            part,
            "matched",
            effect_size,
            alpha,
            iterations,
            np.random.SeedSequence(entropy=seed, spawn_key=(index, 0)),
            gamma_included=gamma_included,
            threads=threads,
        )
        random_run = power_mc(
            dataset,
            part,
            "random",
            effect_size,
            alpha,
            iterations,
            np.random.SeedSequence(entropy=seed, spawn_key=(index, 1)),
            subset_sizes=(sample.n_treated, sample.n_control),
            gamma_included=gamma_included,
            threads=threads,
        )
        entries.append(
            PowerEntry(
                caliper=caliper,
                n_treated=sample.n_treated,
                n_control=sample.n_control,
                power_matched=matched_run.power,
                power_random=random_run.power,
                mc_se=max(matched_run.mc_se, random_run.mc_se),
            )
        )
    return PowerReport(
        effect_size=float(effect_size),
        alpha=float(alpha),
        iterations=int(iterations),
        seed=int(seed),
        entries=tuple(entries),
        skipped_calipers=tuple(skipped),
    )


@dataclass(frozen=True)
class VerifyResult:
    """Closed-form bias/variance against Monte-Carlo moments of the OLS estimate."""

    bias_closed: float
    bias_empirical: float
    bias_mc_se: float
    bias_z: float
    variance_closed: float
    variance_empirical: float
    variance_mc_se: float
    variance_z: float
    iterations: int
    seed: int
    tau: float

    def to_json_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


VERIFY_CSV_HEADER = (
    "quantity",
    "closed_form",
    "empirical",
    "mc_se",
    "z_score",
)


def verify_csv_rows(result: VerifyResult) -> list[list[str]]:
    return [
        [
            "bias",
            repr(result.bias_closed),
            repr(result.bias_empirical),
            repr(result.bias_mc_se),
            repr(result.bias_z),
        ],
        [
            "variance",
            repr(result.variance_closed),
            repr(result.variance_empirical),
            repr(result.variance_mc_se),
            repr(result.variance_z),
        ],
    ]


def mc_verify(
    dataset: Dataset,
    part: DesignPartition,
    model: GenerativeModel,
    iterations: int,
    seed: int,
    threads: int = 1,
) -> VerifyResult:
    """Check the closed forms against brute-force simulation.

    Simulates outcomes from the full generative model, refits OLS on the
    included design through a generic dense solve (independent of the closed
    forms), and compares moments: mean(tau_hat) - tau against the bias
    expression and var(tau_hat) against the variance expression, each with
    its Monte-Carlo standard error and a z-score of the discrepancy.
    """
    from .engine import te_bias, te_variance  # local import avoids cycle at module load

    if iterations < 1000:
        raise DataError("mc_verify needs at least 1000 iterations")
    if model.noise_sd <= 0:
        raise DataError("mc_verify needs a positive noise_sd")
    part.validate(dataset)
    bias_closed = te_bias(dataset, part, model.gamma_omitted)
    variance_closed = te_variance(dataset, part, model.noise_sd**2)

    design = included_design(dataset, part)
    mean = (
        model.tau * dataset.treatment
        + model.intercept
        + included_matrix(dataset, part) @ model.gamma_included
        + omitted_matrix(dataset, part) @ model.gamma_omitted
    )
    streams = _iteration_streams(seed, iterations)

    def worker(span: range) -> np.ndarray:
        noise = np.column_stack(
            [
                np.random.default_rng(streams[i]).normal(
                    0.0, model.noise_sd, size=dataset.n
                )
                for i in span
            ]
        )
        coefs, _ = _ols_fit(design, mean[:, None] + noise)
        return coefs[0]

    tau_hats = np.concatenate(_run_chunks(worker, iterations, threads))
    bias_empirical = float(tau_hats.mean() - model.tau)
    variance_empirical = float(tau_hats.var(ddof=1))
    bias_mc_se = float(tau_hats.std(ddof=1) / math.sqrt(iterations))
    variance_mc_se = float(variance_empirical * math.sqrt(2.0 / (iterations - 1)))

    def z_score(diff: float, se: float) -> float:
        if se == 0.0:
            return 0.0 if diff == 0.0 else math.inf
        return diff / se

    return VerifyResult(
        bias_closed=bias_closed,
        bias_empirical=bias_empirical,
        bias_mc_se=bias_mc_se,
        bias_z=z_score(bias_empirical - bias_closed, bias_mc_se),
        variance_closed=variance_closed,
        variance_empirical=variance_empirical,
        variance_mc_se=variance_mc_se,
        variance_z=z_score(variance_empirical - variance_closed, variance_mc_se),
        iterations=int(iterations),
        seed=int(seed),
        tau=float(model.tau),
    )
