"""Batch command-line interface.

Subcommands: diagnose, calibrate, power, verify, match, simulate. Every value
in the emitted CSV/JSON files is reproducible through direct library calls
with the same configuration; the CLI only orchestrates and serializes.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .calibration import (
    GRID_CSV_HEADER,
    OPTIMAL_CSV_HEADER,
    POWER_CSV_HEADER,
    VERIFY_CSV_HEADER,
    calibrate_caliper,
    compare_power,
    grid_csv_rows,
    mc_verify,
    optimal_csv_rows,
    power_csv_rows,
    verify_csv_rows,
)
from .config import RunConfig, load_config
from .data import Dataset, DesignPartition, GenerativeModel, expand_terms, load_csv, simulate_outcome
from .engine import normalized_bias_prefactor
from .exceptions import (
    ConfigError,
    DataError,
    MatchcalError,
)
from .matching import MatchResult, fit_propensity, match_caliper, match_mahalanobis, subset
from .omitted import omitted_bias_report

SCHEMA_VERSION = "1"

_EXIT_CODES = (
    (ConfigError, 2),
    (DataError, 3),
    (MatchcalError, 4),
)


def _exit_code(exc: MatchcalError) -> int:
    for klass, code in _EXIT_CODES:
        if isinstance(exc, klass):
            return code
    return 1


def _sanitize(obj):
    """Make an object JSON-safe: NaN -> null, infinities -> strings."""
    if isinstance(obj, dict):
        return {k: _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        value = float(obj)
        if math.isnan(value):
            return None
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return value
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return [_sanitize(v) for v in obj.tolist()]
    return obj


def _write_json(path: Path, payload: dict) -> None:
    payload = {"schema_version": SCHEMA_VERSION, **payload}
    path.write_text(
        json.dumps(_sanitize(payload), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class PreparedRun:
    """Dataset, partition, and resolved matching inputs for one command."""

    dataset: Dataset
    part: DesignPartition
    term_labels: tuple[str, ...]
    propensity_cols: tuple[int, ...]
    mahalanobis_cols: tuple[int, ...]


def _prepare(cfg: RunConfig) -> PreparedRun:
    if cfg.omitted_columns is not None:
        dataset = load_csv(cfg.input, cfg.treatment_col, cfg.covariate_cols)
        omitted = tuple(dataset.column_index(c) for c in cfg.omitted_columns)
        if cfg.included is not None:
            included = tuple(dataset.column_index(c) for c in cfg.included)
        else:
            included = tuple(
                j for j in range(dataset.n_columns) if j not in set(omitted)
            )
        part = DesignPartition(included, omitted)
        term_labels = tuple(cfg.omitted_columns)
    else:
        base_cols = cfg.included if cfg.included is not None else cfg.covariate_cols
        base = load_csv(cfg.input, cfg.treatment_col, base_cols)
        dataset, specs = expand_terms(
            base,
            include_squares=cfg.omitted_squares,
            include_interactions=cfg.omitted_interactions,
        )
        n_base = base.n_columns
        part = DesignPartition(
            tuple(range(n_base)), tuple(range(n_base, dataset.n_columns))
        )
        term_labels = tuple(s.label for s in specs)

    def resolve(names: list[str] | None) -> tuple[int, ...]:
        if names is None:
            return part.included
        try:
            return tuple(dataset.column_index(n) for n in names)
        except DataError as exc:
            raise ConfigError(str(exc)) from None

    return PreparedRun(
        dataset=dataset,
        part=part,
        term_labels=term_labels,
        propensity_cols=resolve(cfg.propensity_terms),
        mahalanobis_cols=resolve(cfg.mahalanobis_cols),
    )


def _propensity_scores(run: PreparedRun) -> np.ndarray:
    return fit_propensity(run.dataset, run.propensity_cols).linear_scores


def _run_matching(run: PreparedRun, cfg: RunConfig) -> MatchResult | None:
    if cfg.match_method == "none":
        return None
    if cfg.match_method == "psm":
        return match_caliper(
            _propensity_scores(run),
            run.dataset,
            cfg.caliper,
            raw_units=cfg.raw_caliper_units,
        )
    return match_mahalanobis(run.dataset, run.mahalanobis_cols, cfg.caliper)


def _metadata(cfg: RunConfig, command: str, run: PreparedRun, outputs: list[str]) -> dict:
    return {
        "command": command,
        "config": cfg.to_json_dict(),
        "outputs": outputs,
        "n": run.dataset.n,
        "n_treated": run.dataset.n_treated,
        "n_control": run.dataset.n_control,
        "candidate_terms": list(run.term_labels),
        "notes": {
            "binary_interactions": "binary-by-binary interactions are kept as "
            "candidates unless the product column is constant",
            "normalized_bias_prefactor": normalized_bias_prefactor(
                run.dataset.n_treated, run.dataset.n_control
            ),
            "caliper_units": "multiples of the score standard deviation unless "
            "raw_caliper_units is set; mahalanobis calipers are raw distances",
        },
    }


DIAGNOSE_CSV_HEADER = (
    "label",
    "absorbed",
    "smd_before",
    "smd_after",
    "normalized_bias_before",
    "normalized_bias_after",
    "sq_normalized_bias_before",
    "sq_normalized_bias_after",
    "rel_sq_bias_reduction",
)


def cmd_diagnose(cfg: RunConfig, out_dir: Path, run: PreparedRun) -> None:
    matched = _run_matching(run, cfg)
    report = omitted_bias_report(run.dataset, run.part, matched)
    rows = [
        [
            term.label,
            _fmt(term.absorbed),
            _fmt(term.smd_before),
            _fmt(term.smd_after),
            _fmt(term.normalized_bias_before),
            _fmt(term.normalized_bias_after),
            _fmt(term.sq_normalized_bias_before),
            _fmt(term.sq_normalized_bias_after),
            _fmt(term.rel_sq_bias_reduction),
        ]
        for term in report.per_term
    ]
    _write_csv(out_dir / "diagnose_terms.csv", DIAGNOSE_CSV_HEADER, rows)
    payload = {"report": report.to_json_dict()}
    if matched is not None:
        payload["match"] = matched.to_json_dict()
    _write_json(out_dir / "diagnose_summary.json", payload)
    _write_json(
        out_dir / "run_metadata.json",
        _metadata(cfg, "diagnose", run, ["diagnose_terms.csv", "diagnose_summary.json"]),
    )


def cmd_calibrate(cfg: RunConfig, out_dir: Path, run: PreparedRun) -> None:
    if cfg.match_method != "psm":
        raise ConfigError("calibrate scans propensity-score calipers; set match_method='psm'")
    if not cfg.caliper_grid:
        raise ConfigError("calibrate needs a nonempty caliper_grid")
    curve = calibrate_caliper(
        run.dataset,
        run.part,
        _propensity_scores(run),
        cfg.caliper_grid,
        cfg.r_o_sq_grid,
        cfg.bias_method,
        raw_units=cfg.raw_caliper_units,
    )
    _write_csv(out_dir / "calibration_grid.csv", GRID_CSV_HEADER, grid_csv_rows(curve))
    _write_csv(
        out_dir / "calibration_optimal.csv", OPTIMAL_CSV_HEADER, optimal_csv_rows(curve)
    )
    _write_json(out_dir / "calibration.json", {"curve": curve.to_json_dict()})
    _write_json(
        out_dir / "run_metadata.json",
        _metadata(
            cfg,
            "calibrate",
            run,
            ["calibration_grid.csv", "calibration_optimal.csv", "calibration.json"],
        ),
    )


def _gamma_included(cfg: RunConfig, run: PreparedRun) -> np.ndarray | None:
    if cfg.genmodel and "gamma_included" in cfg.genmodel:
        return np.asarray(cfg.genmodel["gamma_included"], dtype=float)
    return None


def cmd_power(cfg: RunConfig, out_dir: Path, run: PreparedRun) -> None:
    if cfg.match_method != "psm":
        raise ConfigError("power compares propensity-score matched subsets; set match_method='psm'")
    if not cfg.caliper_grid:
        raise ConfigError("power needs a nonempty caliper_grid")
    seed = cfg.require_seed("power")
    report = compare_power(
        run.dataset,
        run.part,
        _propensity_scores(run),
        cfg.caliper_grid,
        cfg.effect_size,
        cfg.alpha,
        cfg.iterations,
        seed,
        raw_units=cfg.raw_caliper_units,
        gamma_included=_gamma_included(cfg, run),
        threads=cfg.threads,
    )
    _write_csv(out_dir / "power.csv", POWER_CSV_HEADER, power_csv_rows(report))
    _write_json(out_dir / "power.json", {"report": report.to_json_dict()})
    _write_json(
        out_dir / "run_metadata.json",
        _metadata(cfg, "power", run, ["power.csv", "power.json"]),
    )


def _generative_model(cfg: RunConfig, run: PreparedRun) -> GenerativeModel:
    if not cfg.genmodel:
        raise ConfigError("this command needs a 'genmodel' config section")
    spec = dict(cfg.genmodel)
    unknown = sorted(
        set(spec) - {"tau", "intercept", "gamma_included", "gamma_omitted", "noise_sd"}
    )
    if unknown:
        raise ConfigError(f"unknown genmodel keys: {unknown}")
    model = GenerativeModel(
        tau=float(spec.get("tau", 0.0)),
        intercept=float(spec.get("intercept", 0.0)),
        gamma_included=np.asarray(
            spec.get("gamma_included", np.zeros(run.part.n_included)), dtype=float
        ),
        gamma_omitted=np.asarray(
            spec.get("gamma_omitted", np.zeros(run.part.n_omitted)), dtype=float
        ),
        noise_sd=float(spec.get("noise_sd", cfg.sigma0)),
    )
    if model.gamma_included.shape[0] != run.part.n_included:
        raise ConfigError(
            f"genmodel.gamma_included needs {run.part.n_included} entries"
        )
    if model.gamma_omitted.shape[0] != run.part.n_omitted:
        raise ConfigError(f"genmodel.gamma_omitted needs {run.part.n_omitted} entries")
    return model


def cmd_verify(cfg: RunConfig, out_dir: Path, run: PreparedRun) -> None:
    seed = cfg.require_seed("verify")
    model = _generative_model(cfg, run)
    result = mc_verify(
        run.dataset, run.part, model, cfg.iterations, seed, threads=cfg.threads
    )
    _write_csv(out_dir / "verify.csv", VERIFY_CSV_HEADER, verify_csv_rows(result))
    _write_json(out_dir / "verify.json", {"result": result.to_json_dict()})
    _write_json(
        out_dir / "run_metadata.json",
        _metadata(cfg, "verify", run, ["verify.csv", "verify.json"]),
    )


def cmd_match(cfg: RunConfig, out_dir: Path, run: PreparedRun) -> None:
    if cfg.match_method == "none":
        raise ConfigError("match needs match_method 'psm' or 'mahalanobis'")
    result = _run_matching(run, cfg)
    assert result is not None
    _write_csv(
        out_dir / "match_pairs.csv",
        ("treated_index", "control_index"),
        [[str(t), str(c)] for t, c in result.pairs],
    )
    subset(run.dataset, result.retained).to_csv(out_dir / "matched_rows.csv")
    _write_json(out_dir / "match.json", {"match": result.to_json_dict()})
    _write_json(
        out_dir / "run_metadata.json",
        _metadata(
            cfg, "match", run, ["match_pairs.csv", "matched_rows.csv", "match.json"]
        ),
    )


def cmd_simulate(cfg: RunConfig, out_dir: Path, run: PreparedRun) -> None:
    seed = cfg.require_seed("simulate")
    model = _generative_model(cfg, run)
    outcome = simulate_outcome(run.dataset, run.part, model, seed)
    dataset = run.dataset
    with open(out_dir / "simulated.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([dataset.treatment_name, *dataset.names, "outcome"])
        for i in range(dataset.n):
            writer.writerow(
                [repr(float(dataset.treatment[i]))]
                + [repr(float(v)) for v in dataset.covariates[i]]
                + [repr(float(outcome[i]))]
            )
    _write_json(
        out_dir / "run_metadata.json",
        _metadata(cfg, "simulate", run, ["simulated.csv"]),
    )


_COMMANDS = {
    "diagnose": cmd_diagnose,
    "calibrate": cmd_calibrate,
    "power": cmd_power,
    "verify": cmd_verify,
    "match": cmd_match,
    "simulate": cmd_simulate,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="matchcal",
        description="Bias/variance diagnostics and caliper calibration for "
        "matching combined with linear regression.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("diagnose", "per-term omitted-bias table before/after matching"),
        ("calibrate", "normalized-MSE grid over calipers and omitted R-squared"),
        ("power", "Monte-Carlo power of matched vs random subsamples"),
        ("verify", "closed-form bias/variance against Monte-Carlo moments"),
        ("match", "run one matching pass and emit pairs plus retained rows"),
        ("simulate", "draw one outcome vector from the configured model"),
    ):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", required=True, help="path to the JSON run config")
        cmd.add_argument("--seed", type=int, help="override the config seed")
        cmd.add_argument("--out", help="override the config output directory")
        cmd.add_argument("--threads", type=int, help="max parallelism for MC workloads")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out is not None:
            cfg.out_dir = args.out
        if args.threads is not None:
            cfg.threads = args.threads
        cfg.validate()
        out_dir = Path(cfg.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        run = _prepare(cfg)
        _COMMANDS[args.command](cfg, out_dir, run)
    except MatchcalError as exc:
        code = _exit_code(exc)
        sys.stderr.write(
            json.dumps(
                {
                    "schema_version": SCHEMA_VERSION,
                    "error": {
                        "type": type(exc).__name__,
                        "message": str(exc),
                        "exit_code": code,
                    },
                },
                sort_keys=True,
            )
            + "\n"
        )
        return code
    return 0


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
