"""Shared generators and fixtures for the test suite."""

from __future__ import annotations

import io

import numpy as np
import pytest

from matchcal import ColumnMeta, Dataset, DesignPartition
from matchcal.diagnostics import set_warning_stream


def numeric_meta(k: int, prefix: str = "x") -> tuple[ColumnMeta, ...]:
    return tuple(ColumnMeta(f"{prefix}{j}", "numeric") for j in range(k))


def random_dataset(
    rng: np.random.Generator,
    n_treated: int,
    n_control: int,
    n_cols: int,
    shift: float = 0.0,
    binary_cols: int = 0,
) -> Dataset:
    """Gaussian covariates; ``shift`` confounds treated means per column."""
    n = n_treated + n_control
    w = np.r_[np.ones(n_treated), np.zeros(n_control)]
    z = rng.normal(size=(n, n_cols))
    if shift:
        z = z + shift * w[:, None] * rng.normal(size=n_cols)
    meta = list(numeric_meta(n_cols))
    for j in range(binary_cols):
        col = n_cols - 1 - j
        prob = 0.35 + (0.25 * shift if shift else 0.0)
        z[:, col] = (rng.random(n) < np.clip(prob + 0.2 * w, 0.05, 0.95)).astype(float)
        meta[col] = ColumnMeta(meta[col].name, "binary")
    return Dataset(w, z, tuple(meta))


def perfectly_matched_dataset(
    rng: np.random.Generator, n_pairs: int, n_cols: int
) -> Dataset:
    """Every treated row has a bitwise-identical control row."""
    block = rng.normal(size=(n_pairs, n_cols))
    w = np.r_[np.ones(n_pairs), np.zeros(n_pairs)]
    return Dataset(w, np.vstack([block, block]), numeric_meta(n_cols))


def split_partition(n_included: int, n_omitted: int) -> DesignPartition:
    return DesignPartition(
        tuple(range(n_included)),
        tuple(range(n_included, n_included + n_omitted)),
    )


@pytest.fixture
def warning_stream():
    """Capture diagnostic warning records emitted during a test."""
    stream = io.StringIO()
    previous = set_warning_stream(stream)
    try:
        yield stream
    finally:
        set_warning_stream(previous)
