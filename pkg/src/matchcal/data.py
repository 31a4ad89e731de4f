"""Dataset model, CSV ingestion, derived-term generation, and outcome simulation."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from .diagnostics import emit_warning
from .exceptions import DataError

NUMERIC = "numeric"
BINARY = "binary"


def infer_kind(values: np.ndarray) -> str:
    """A column is binary iff every observed value is 0 or 1."""
    return BINARY if bool(np.all((values == 0.0) | (values == 1.0))) else NUMERIC


@dataclass(frozen=True)
class ColumnMeta:
    """Name and kind ("numeric" or "binary") of one covariate column."""

    name: str
    kind: str

    def __post_init__(self):
        if self.kind not in (NUMERIC, BINARY):
            raise DataError(f"unknown column kind {self.kind!r} for column {self.name!r}")


@dataclass(frozen=True)
class Dataset:
    """Immutable treatment/covariate table.

    Attributes:
        treatment: Length-N vector whose entries are exactly 0 (control) or
            1 (treated).
        covariates: N x K float matrix with no missing entries.
        column_meta: One :class:`ColumnMeta` per covariate column.
        treatment_name: Header used when the table is written back to CSV.
        expanded: True once derived terms have been appended; guards against
            re-expansion, which would silently create third-order terms.
    """

    treatment: np.ndarray
    covariates: np.ndarray
    column_meta: tuple[ColumnMeta, ...]
    treatment_name: str = "treatment"
    expanded: bool = False

    def __post_init__(self):
        w = np.array(self.treatment, dtype=float).reshape(-1)
        z = np.array(self.covariates, dtype=float)
        meta = tuple(self.column_meta)
        if z.ndim != 2:
            raise DataError(f"covariates must be a 2-D matrix, got ndim={z.ndim}")
        if w.shape[0] != z.shape[0]:
            raise DataError(
                f"treatment length {w.shape[0]} != covariate rows {z.shape[0]}"
            )
        if w.size == 0:
            raise DataError("dataset is empty")
        if not np.all((w == 0.0) | (w == 1.0)):
            raise DataError("treatment entries must be exactly 0 or 1")
        n_treated = int(w.sum())
        if n_treated < 1 or w.size - n_treated < 1:
            raise DataError("need at least one treated and one control observation")
        if not np.all(np.isfinite(z)):
            raise DataError("covariate matrix contains missing or non-finite entries")
        if len(meta) != z.shape[1]:
            raise DataError(
                f"column_meta has {len(meta)} entries for {z.shape[1]} columns"
            )
        names = [m.name for m in meta]
        if len(set(names)) != len(names):
            raise DataError("covariate column names must be unique")
        if self.treatment_name in names:
            raise DataError("treatment column name collides with a covariate name")
        for j, m in enumerate(meta):
            if m.kind == BINARY and not np.all((z[:, j] == 0.0) | (z[:, j] == 1.0)):
                raise DataError(f"binary column {m.name!r} has values outside {{0, 1}}")
        w.setflags(write=False)
        z.setflags(write=False)
        object.__setattr__(self, "treatment", w)
        object.__setattr__(self, "covariates", z)
        object.__setattr__(self, "column_meta", meta)

    @property
    def n(self) -> int:
        return self.treatment.shape[0]

    @property
    def n_treated(self) -> int:
        return int(self.treatment.sum())

    @property
    def n_control(self) -> int:
        return self.n - self.n_treated

    @property
    def n_columns(self) -> int:
        return self.covariates.shape[1]

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(m.name for m in self.column_meta)

    @property
    def treated_mask(self) -> np.ndarray:
        return self.treatment == 1.0

    def column_index(self, name: str) -> int:
        for j, m in enumerate(self.column_meta):
            if m.name == name:
                return j
        raise DataError(f"no covariate column named {name!r}")

    def to_csv(self, path: str | Path) -> None:
        """Write the table as RFC-4180 CSV; float cells round-trip exactly."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow([self.treatment_name, *self.names])
            for i in range(self.n):
                writer.writerow(
                    [repr(float(self.treatment[i]))]
                    + [repr(float(v)) for v in self.covariates[i]]
                )


@dataclass(frozen=True)
class DesignPartition:
    """Split of covariate columns into regression-included and candidate-omitted sets.

    Indices refer to :attr:`Dataset.covariates` columns; either side may be
    empty. The implied fitted design is ``[w | 1 | included columns]``.
    """

    included: tuple[int, ...]
    omitted: tuple[int, ...]

    def __post_init__(self):
        inc = tuple(int(i) for i in self.included)
        omi = tuple(int(i) for i in self.omitted)
        if len(set(inc)) != len(inc) or len(set(omi)) != len(omi):
            raise DataError("partition index lists must not contain duplicates")
        if set(inc) & set(omi):
            raise DataError("included and omitted column sets must be disjoint")
        if any(i < 0 for i in inc + omi):
            raise DataError("partition indices must be nonnegative")
        object.__setattr__(self, "included", inc)
        object.__setattr__(self, "omitted", omi)

    @property
    def n_included(self) -> int:
        return len(self.included)

    @property
    def n_omitted(self) -> int:
        return len(self.omitted)

    def validate(self, dataset: Dataset) -> None:
        top = max(self.included + self.omitted, default=-1)
        if top >= dataset.n_columns:
            raise DataError(
                f"partition references column {top} but dataset has "
                f"{dataset.n_columns} columns"
            )


def included_matrix(dataset: Dataset, part: DesignPartition) -> np.ndarray:
    part.validate(dataset)
    return dataset.covariates[:, list(part.included)]


def omitted_matrix(dataset: Dataset, part: DesignPartition) -> np.ndarray:
    part.validate(dataset)
    return dataset.covariates[:, list(part.omitted)]


def included_design(dataset: Dataset, part: DesignPartition) -> np.ndarray:
    """Fitted design matrix ``[w | 1 | included columns]``."""
    return np.column_stack(
        [dataset.treatment, np.ones(dataset.n), included_matrix(dataset, part)]
    )


@dataclass(frozen=True)
class GenerativeModel:
    """Coefficients of the linear outcome model used by simulation oracles.

    ``noise_sd`` may be zero, in which case simulated outcomes equal the mean
    surface exactly.
    """

    tau: float
    intercept: float
    gamma_included: np.ndarray
    gamma_omitted: np.ndarray
    noise_sd: float

    def __post_init__(self):
        gi = np.array(self.gamma_included, dtype=float).reshape(-1)
        go = np.array(self.gamma_omitted, dtype=float).reshape(-1)
        if self.noise_sd < 0:
            raise DataError("noise_sd must be nonnegative")
        gi.setflags(write=False)
        go.setflags(write=False)
        object.__setattr__(self, "gamma_included", gi)
        object.__setattr__(self, "gamma_omitted", go)


@dataclass(frozen=True)
class TermSpec:
    """One generated candidate term: an interaction or the square of a column."""

    kind: str  # "interaction" | "square"
    columns: tuple[str, ...]
    label: str

    def __post_init__(self):
        if self.kind not in ("interaction", "square"):
            raise DataError(f"unknown term kind {self.kind!r}")
        if self.kind == "interaction" and len(set(self.columns)) != 2:
            raise DataError("interaction terms need two distinct source columns")
        if self.kind == "square" and len(self.columns) != 1:
            raise DataError("square terms take exactly one source column")


def load_csv(
    path: str | Path,
    treatment_col: str,
    covariate_cols: list[str] | tuple[str, ...],
) -> Dataset:
    """Read an RFC-4180 CSV (header row, '.' decimals, UTF-8) into a Dataset.

    Column kinds are inferred: binary iff all values lie in {0, 1}. Row order
    is preserved.

    Raises:
        DataError: missing file or column, non-numeric cell, non-binary
            treatment values, or an empty table.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"input file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: file is empty (header row required)") from None
        positions = {name: j for j, name in enumerate(header)}
        for name in [treatment_col, *covariate_cols]:
            if name not in positions:
                raise DataError(f"{path}: column {name!r} not found in header")
        wanted = [positions[treatment_col]] + [positions[c] for c in covariate_cols]
        rows: list[list[float]] = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(
                    f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}"
                )
            parsed = []
            for j in wanted:
                try:
                    parsed.append(float(row[j]))
                except ValueError:
                    raise DataError(
                        f"{path}:{lineno}: non-numeric value {row[j]!r} "
                        f"in column {header[j]!r}"
                    ) from None
            rows.append(parsed)
    if not rows:
        raise DataError(f"{path}: no data rows")
    table = np.asarray(rows, dtype=float)
    treatment = table[:, 0]
    if not np.all((treatment == 0.0) | (treatment == 1.0)):
        bad = sorted(set(np.unique(treatment)) - {0.0, 1.0})
        raise DataError(
            f"{path}: treatment column {treatment_col!r} is not binary "
            f"(unexpected values {bad})"
        )
    covariates = table[:, 1:]
    meta = tuple(
        ColumnMeta(name, infer_kind(covariates[:, j]))
        for j, name in enumerate(covariate_cols)
    )
    return Dataset(treatment, covariates, meta, treatment_name=treatment_col)


def expand_terms(
    dataset: Dataset,
    include_squares: bool = True,
    include_interactions: bool = True,
) -> tuple[Dataset, list[TermSpec]]:
    """Append second-order candidate terms to the covariate matrix.

    Interactions are generated for every unordered pair of columns; squares
    only for numeric columns (a binary squared duplicates itself). Generated
    columns that are constant are dropped with a ``term_dropped`` warning
    record. Labels are deterministic: ``"a:b"`` and ``"a^2"``.

    Re-expanding an already-expanded dataset is rejected rather than
    deduplicated so that third-order terms can never appear silently.

    Returns:
        ``(augmented dataset, kept TermSpec list)``; the new columns sit after
        the original ones, in TermSpec order.
    """
    if dataset.expanded:
        raise DataError("dataset already contains generated terms; re-expansion is rejected")
    specs: list[TermSpec] = []
    cols: list[np.ndarray] = []
    names = dataset.names
    if include_interactions:
        for a, b in combinations(range(dataset.n_columns), 2):
            specs.append(
                TermSpec("interaction", (names[a], names[b]), f"{names[a]}:{names[b]}")
            )
            cols.append(dataset.covariates[:, a] * dataset.covariates[:, b])
    if include_squares:
        for j, m in enumerate(dataset.column_meta):
            if m.kind == NUMERIC:
                specs.append(TermSpec("square", (m.name,), f"{m.name}^2"))
                cols.append(dataset.covariates[:, j] ** 2)
    kept_specs: list[TermSpec] = []
    kept_cols: list[np.ndarray] = []
    for spec, col in zip(specs, cols):
        if np.all(col == col[0]):
            emit_warning("term_dropped", label=spec.label, reason="zero_variance")
            continue
        kept_specs.append(spec)
        kept_cols.append(col)
    if kept_cols:
        covariates = np.column_stack([dataset.covariates, *kept_cols])
    else:
        covariates = dataset.covariates
    meta = list(dataset.column_meta)
    for spec, col in zip(kept_specs, kept_cols):
        meta.append(ColumnMeta(spec.label, infer_kind(col)))
    augmented = Dataset(
        dataset.treatment,
        covariates,
        tuple(meta),
        treatment_name=dataset.treatment_name,
        expanded=True,
    )
    return augmented, kept_specs


def simulate_outcome(
    dataset: Dataset,
    part: DesignPartition,
    model: GenerativeModel,
    seed: int,
) -> np.ndarray:
    """Draw one outcome vector from the linear model with seeded Gaussian noise.

    ``y = tau*w + intercept + Z_inc @ gamma_included + Z_omi @ gamma_omitted + eps``
    with ``eps ~ Normal(0, noise_sd^2)`` i.i.d. from ``numpy`` PCG64 seeded with
    ``seed``; identical seeds give bitwise-identical vectors.
    """
    part.validate(dataset)
    if model.gamma_included.shape[0] != part.n_included:
        raise DataError(
            f"gamma_included has length {model.gamma_included.shape[0]}, "
            f"partition includes {part.n_included} columns"
        )
    if model.gamma_omitted.shape[0] != part.n_omitted:
        raise DataError(
            f"gamma_omitted has length {model.gamma_omitted.shape[0]}, "
            f"partition omits {part.n_omitted} columns"
        )
    mean = (
        model.tau * dataset.treatment
        + model.intercept
        + included_matrix(dataset, part) @ model.gamma_included
        + omitted_matrix(dataset, part) @ model.gamma_omitted
    )
    rng = np.random.default_rng(seed)
    return mean + rng.normal(0.0, model.noise_sd, size=dataset.n)
