"""Declarative run configuration: one JSON file plus a few flag overrides."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .exceptions import ConfigError

MATCH_METHODS = ("psm", "mahalanobis", "none")
BIAS_METHODS = ("single", "subspace", "absolute")


@dataclass
class RunConfig:
    """Everything a batch command needs, with defaults recorded for provenance.

    ``omitted_squares`` / ``omitted_interactions`` control second-order term
    generation; ``omitted_columns`` instead designates existing covariate
    columns as the candidate omitted set (mutually exclusive with the flags).
    """

    input: str = ""
    treatment_col: str = ""
    covariate_cols: list[str] = field(default_factory=list)
    included: list[str] | None = None  # None: all covariate_cols
    omitted_squares: bool = True
    omitted_interactions: bool = True
    omitted_columns: list[str] | None = None
    match_method: str = "psm"
    caliper: float | None = None
    caliper_grid: list[float] = field(default_factory=list)
    raw_caliper_units: bool = False
    propensity_terms: list[str] | None = None  # None: included columns
    mahalanobis_cols: list[str] | None = None  # None: included columns
    r_o_sq_grid: list[float] = field(default_factory=lambda: [0.0, 0.01, 0.05, 0.1])
    bias_method: str = "subspace"
    sigma0: float = 1.0
    effect_size: float = 0.3
    alpha: float = 0.05
    iterations: int = 1000
    seed: int | None = None
    threads: int = 1
    out_dir: str = "out"
    genmodel: dict | None = None  # tau, intercept, gamma_included, gamma_omitted, noise_sd

    def validate(self) -> None:
        if not self.input:
            raise ConfigError("config field 'input' is required")
        if not self.treatment_col:
            raise ConfigError("config field 'treatment_col' is required")
        if not self.covariate_cols:
            raise ConfigError("config field 'covariate_cols' must be nonempty")
        if self.match_method not in MATCH_METHODS:
            raise ConfigError(
                f"match_method must be one of {MATCH_METHODS}, got {self.match_method!r}"
            )
        if self.bias_method not in BIAS_METHODS:
            raise ConfigError(
                f"bias_method must be one of {BIAS_METHODS}, got {self.bias_method!r}"
            )
        if self.omitted_columns is not None and (
            self.omitted_squares or self.omitted_interactions
        ):
            raise ConfigError(
                "omitted_columns is mutually exclusive with the square/interaction flags"
            )
        if self.omitted_columns is None and not (
            self.omitted_squares or self.omitted_interactions
        ):
            raise ConfigError("no candidate omitted terms configured")
        known = set(self.covariate_cols)
        for name, values in (
            ("included", self.included),
            ("omitted_columns", self.omitted_columns),
            ("propensity_terms", self.propensity_terms),
            ("mahalanobis_cols", self.mahalanobis_cols),
        ):
            if values is not None:
                unknown = [v for v in values if v not in known]
                if unknown:
                    raise ConfigError(f"{name} references unknown columns: {unknown}")
        if any(r < 0 for r in self.r_o_sq_grid):
            raise ConfigError("r_o_sq_grid values must be nonnegative")
        if self.caliper is not None and self.caliper <= 0:
            raise ConfigError("caliper must be positive")
        if any(c <= 0 for c in self.caliper_grid):
            raise ConfigError("caliper_grid values must be positive")
        if self.sigma0 <= 0:
            raise ConfigError("sigma0 must be positive")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("alpha must lie strictly between 0 and 1")
        if self.iterations < 1:
            raise ConfigError("iterations must be positive")
        if self.threads < 1:
            raise ConfigError("threads must be positive")

    def require_seed(self, command: str) -> int:
        if self.seed is None:
            raise ConfigError(f"command {command!r} runs Monte Carlo and needs a seed")
        return int(self.seed)

    def to_json_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}


_FIELDS = set(RunConfig.__dataclass_fields__)


def load_config(path: str | Path) -> RunConfig:
    """Parse a JSON config file; unknown keys are an error."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    unknown = sorted(set(raw) - _FIELDS)
    if unknown:
        raise ConfigError(f"{path}: unknown config keys: {unknown}")
    return RunConfig(**raw)
