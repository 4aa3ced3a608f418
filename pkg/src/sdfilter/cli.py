"""Command-line front end.

Every subcommand reads a JSON configuration file (``--config``), writes its
outputs to ``--out`` and is a pure function of the configuration, the input
files and the seed. Relative input paths are resolved against the directory
of the configuration file.

Exit codes: 0 success, 1 configuration or validation error, 2 numerical
failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys

import jsonschema
import numpy as np

from .errors import (
    ConfigError,
    EstimationFailure,
    ExperimentAborted,
    IdentificationError,
    InternalInvariantError,
    InvalidInputError,
    InvalidParameterError,
    NumericalFailureError,
    ParticleDegeneracyError,
    PriorDomainError,
    SdFilterError,
    SingularInnovationError,
)
from .estimation import FAMILIES, FitConfig, FitResult, config_from_dict, fit
from .models import DESIGNS, design, simulate_ssm
from .oracle_harness import ExperimentConfig, run_experiment
from .score_engine import sd_filter, sd_smoother
from .uncertainty import (
    BandSpec,
    bands_combined,
    bands_filtering_only,
    bands_parameter_only,
)

log = logging.getLogger("sdfilter")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3
UINT64_MAX = 2**64 - 1

_SEED = {"type": "integer", "minimum": 0, "maximum": UINT64_MAX}
_NUM = {"type": "number"}
_FIT_SETTINGS = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "normalization": {"enum": ["kalman", "scaled"]},
        "n_starts": {"type": "integer", "minimum": 1},
        "starts": {"type": "array", "items": {"type": "object"}},
        "fixed": {"type": ["object", "null"], "additionalProperties": _NUM},
        "model_options": {"type": "object"},
        "d": {"type": ["number", "null"]},
        "jitter": {"type": "number", "minimum": 0},
        "seed": _SEED,
        "maxiter": {"type": "integer", "minimum": 1},
        "gtol": {"type": "number", "exclusiveMinimum": 0},
        "ftol": {"type": "number", "exclusiveMinimum": 0},
        "fd_step": {"type": "number", "exclusiveMinimum": 0},
    },
}
_OVERRIDES = {"type": "object", "additionalProperties": {"type": ["number", "string"]}}
_SERIES_INPUT = {
    "input": {"type": "string"},
    "column": {"type": "string"},
    "fit_result": {"type": "string"},
    "output": {"type": "string"},
}

SCHEMAS = {
    "simulate": {
        "type": "object",
        "additionalProperties": False,
        "required": ["model", "n"],
        "properties": {
            "model": {"enum": sorted(DESIGNS)},
            "overrides": _OVERRIDES,
            "n": {"type": "integer", "minimum": 1},
            "seed": _SEED,
            "output": {"type": "string"},
        },
    },
    "fit": {
        "type": "object",
        "additionalProperties": False,
        "required": ["model", "input"],
        "properties": {
            "model": {"enum": list(FAMILIES)},
            "input": {"type": "string"},
            "column": {"type": "string"},
            "fit": _FIT_SETTINGS,
            "seed": _SEED,
            "output": {"type": "string"},
        },
    },
    "filter": {
        "type": "object",
        "additionalProperties": False,
        "required": ["input", "fit_result"],
        "properties": dict(_SERIES_INPUT),
    },
    "smooth": {
        "type": "object",
        "additionalProperties": False,
        "required": ["input", "fit_result"],
        "properties": dict(_SERIES_INPUT),
    },
    "bands": {
        "type": "object",
        "additionalProperties": False,
        "required": ["input", "fit_result"],
        "properties": dict(
            _SERIES_INPUT,
            level={"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            regime={"enum": ["filtering", "parameter", "combined"]},
            target={"enum": ["predictive", "update", "smoothed"]},
            draws={"type": "integer", "minimum": 1},
            seed=_SEED,
            loading={"type": "array", "items": _NUM},
        ),
    },
    "experiment": {
        "type": "object",
        "additionalProperties": False,
        "properties": {
            "models": {"type": "array", "items": {"enum": sorted(DESIGNS)}, "minItems": 1},
            "overrides": {"type": "object", "additionalProperties": _OVERRIDES},
            "replications": {"type": "integer", "minimum": 1},
            "n": {"type": "integer", "minimum": 100, "multipleOf": 2},
            "particles": {"type": "integer", "minimum": 100},
            "trajectories": {"type": "integer", "minimum": 1},
            "seed": _SEED,
            "normalization": {"enum": ["kalman", "scaled"]},
            "oracle_params": {"enum": ["sd_fit", "true", "pf_fit"]},
            "oracle_true_reference": {"type": "boolean"},
            "pf_fit_particles": {"type": "integer", "minimum": 100},
            "coverage": {"type": "boolean"},
            "levels": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0,
                                                  "exclusiveMaximum": 1}},
            "band_draws": {"type": "integer", "minimum": 100},
            "fit": _FIT_SETTINGS,
            "max_failure_rate": {"type": "number", "minimum": 0, "maximum": 1},
            "raw": {"type": "boolean"},
        },
    },
}

DEFAULT_OUTPUTS = {
    "simulate": "simulated.csv",
    "fit": "fit.json",
    "filter": "filtered.csv",
    "smooth": "smoothed.csv",
    "bands": "bands.csv",
}


class InputFileError(OSError):
    """Unreadable or malformed input file."""


def _g(x) -> str:
    return format(float(x), ".17g")


def load_config(path: str, command: str) -> dict:
    """Read and validate a JSON configuration; unknown keys are rejected."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise InputFileError(f"cannot read config {path}: {exc}") from None
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    try:
        jsonschema.validate(cfg, SCHEMAS[command])
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{path}: {where}: {exc.message}") from None
    return cfg


def read_series(path: str, column: str | None = None) -> np.ndarray:
    """Read one numeric column (default ``observation``, else the only column) of a CSV."""
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise InputFileError(f"cannot read {path}: {exc}") from None
    if len(rows) < 2:
        raise InputFileError(f"{path}: no data rows")
    header = rows[0]
    if column is None:
        column = "observation" if "observation" in header else None
        if column is None and len(header) == 1:
            column = header[0]
    if column not in header:
        raise InputFileError(f"{path}: column {column!r} not found in {header}")
    j = header.index(column)
    try:
        return np.array([float(r[j]) for r in rows[1:] if r], dtype=float)
    except (ValueError, IndexError) as exc:
        raise InputFileError(f"{path}: malformed row: {exc}") from None


def _write(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _resolve(base: str, path: str) -> str:
    return path if os.path.isabs(path) else os.path.join(base, path)


def _load_fit(path: str) -> FitResult:
    try:
        with open(path, encoding="utf-8") as fh:
            return FitResult.from_json(fh.read())
    except OSError as exc:
        raise InputFileError(f"cannot read {path}: {exc}") from None
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise InputFileError(f"{path}: malformed fit result: {exc}") from None


def _series_and_fit(cfg, base):
    y = read_series(_resolve(base, cfg["input"]), cfg.get("column"))
    res = _load_fit(_resolve(base, cfg["fit_result"]))
    return y, res


def cmd_simulate(cfg: dict, out: str, base: str) -> list[str]:
    model, trans = design(cfg["model"], **cfg.get("overrides", {}))
    sample = simulate_ssm(model, trans, cfg["n"], seed=cfg.get("seed", 0))
    m = sample.states.shape[1]
    header = ["step"] + [f"state_{i}" for i in range(m)] + ["observation"]
    rows = [[t] + [_g(v) for v in sample.states[t]] + [_g(sample.observations[t])]
            for t in range(cfg["n"])]
    path = os.path.join(out, cfg.get("output", DEFAULT_OUTPUTS["simulate"]))
    _write(path, _csv_text(header, rows))
    y = sample.observations
    print(f"simulated {y.size} observations of {cfg['model']}: mean {y.mean():.6g}, "
          f"sd {y.std():.6g}, min {y.min():.6g}, max {y.max():.6g}")
    return [path]


def cmd_fit(cfg: dict, out: str, base: str) -> list[str]:
    y = read_series(_resolve(base, cfg["input"]), cfg.get("column"))
    settings = dict(cfg.get("fit", {}))
    if "seed" in cfg:
        settings["seed"] = cfg["seed"]
    res = fit(cfg["model"], y, config_from_dict(settings))
    path = os.path.join(out, cfg.get("output", DEFAULT_OUTPUTS["fit"]))
    _write(path, res.to_json(indent=2, sort_keys=True) + "\n")
    for name, est, se in zip(res.theta.names, res.theta.values, res.std_errors):
        print(f"{name:>8s} = {est: .6g}  (se {se:.3g})")
    print(f"log-likelihood {res.loglik:.6f}")
    return [path]


def filter_table(y, res: FitResult):
    """Header and rows of the per-step filter CSV."""
    model, trans, norm = res.build()
    run = sd_filter(model, trans, y, norm)
    m = run.a_pred.shape[1]
    header = ["step"]
    for kind in ("pred", "upd"):
        header += [f"{kind}_mean_{i}" for i in range(m)] + [f"{kind}_var_{i}" for i in range(m)]
    header += ["signal", "loglik"]
    sig = [model.signal(a) for a in run.a_pred]
    rows = []
    for t in range(run.a_pred.shape[0]):
        row = [t]
        for a, P in ((run.a_pred, run.P_pred), (run.a_upd, run.P_upd)):
            row += [_g(v) for v in a[t]] + [_g(P[t, i, i]) for i in range(m)]
        rows.append(row + [_g(sig[t]), _g(run.loglik_terms[t])])
    return header, rows


def smooth_table(y, res: FitResult):
    """Header and rows of the per-step smoother CSV."""
    model, trans, norm = res.build()
    run = sd_filter(model, trans, y, norm)
    sm = sd_smoother(model, trans, run)
    m = sm.alpha_hat.shape[1]
    header = (["step"] + [f"mean_{i}" for i in range(m)] + [f"var_{i}" for i in range(m)]
              + ["signal"])
    sig = [model.signal(a) for a in sm.alpha_hat]
    rows = [[t] + [_g(v) for v in sm.alpha_hat[t]] + [_g(sm.P_hat[t, i, i]) for i in range(m)]
            + [_g(sig[t])] for t in range(sm.alpha_hat.shape[0])]
    return header, rows


def cmd_filter(cfg: dict, out: str, base: str) -> list[str]:
    y, res = _series_and_fit(cfg, base)
    path = os.path.join(out, cfg.get("output", DEFAULT_OUTPUTS["filter"]))
    _write(path, _csv_text(*filter_table(y, res)))
    return [path]


def cmd_smooth(cfg: dict, out: str, base: str) -> list[str]:
    y, res = _series_and_fit(cfg, base)
    path = os.path.join(out, cfg.get("output", DEFAULT_OUTPUTS["smooth"]))
    _write(path, _csv_text(*smooth_table(y, res)))
    return [path]


def cmd_bands(cfg: dict, out: str, base: str) -> list[str]:
    y, res = _series_and_fit(cfg, base)
    spec = BandSpec(level=cfg.get("level", 0.95), regime=cfg.get("regime", "filtering"),
                    target=cfg.get("target", "predictive"), draws=cfg.get("draws", 200),
                    seed=cfg.get("seed", 0))
    loading = cfg.get("loading")
    if spec.regime == "filtering":
        model, trans, norm = res.build()
        run = sd_filter(model, trans, y, norm)
        if spec.target == "smoothed":
            run = sd_smoother(model, trans, run)
        bands = bands_filtering_only(run, spec, loading)
    elif spec.regime == "parameter":
        bands = bands_parameter_only(y, res, spec, loading)
    else:
        bands = bands_combined(y, res, spec, loading)
    path = os.path.join(out, cfg.get("output", DEFAULT_OUTPUTS["bands"]))
    _write(path, bands.to_csv())
    return [path]


def cmd_experiment(cfg: dict, out: str, base: str, threads: int = 1) -> list[str]:
    cfg = dict(cfg)
    raw = cfg.pop("raw", False)
    exp = ExperimentConfig(threads=threads, **cfg)
    FitConfig(**exp.fit)  # validate early
    report = run_experiment(exp)
    paths = report.write(out, include_raw=raw)
    print(report.table3_csv(), end="")
    return paths


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "filter": cmd_filter,
    "smooth": cmd_smooth,
    "bands": cmd_bands,
    "experiment": cmd_experiment,
}

_CONFIG_ERRORS = (ConfigError, InvalidInputError, InvalidParameterError, IdentificationError)
_NUMERICAL_ERRORS = (NumericalFailureError, SingularInnovationError, EstimationFailure,
                     ParticleDegeneracyError, PriorDomainError, ExperimentAborted,
                     InternalInvariantError, SdFilterError, FloatingPointError)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sdfilter", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name, help=f"run the {name} command")
        s.add_argument("--config", required=True, metavar="PATH", help="JSON configuration")
        s.add_argument("--out", default=".", metavar="DIR", help="output directory")
        s.add_argument("--seed", type=int, metavar="U64", help="root seed (overrides config)")
        s.add_argument("--threads", type=int, default=os.cpu_count() or 1, metavar="N",
                       help="worker processes for experiments")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.seed is not None and not 0 <= args.seed <= UINT64_MAX:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        if args.threads < 1:
            raise ConfigError("--threads must be positive")
        cfg = load_config(args.config, args.command)
        if args.seed is not None:
            cfg["seed"] = args.seed
        base = os.path.dirname(os.path.abspath(args.config))
        os.makedirs(args.out, exist_ok=True)
        if args.command == "experiment":
            paths = cmd_experiment(cfg, args.out, base, args.threads)
        else:
            paths = COMMANDS[args.command](cfg, args.out, base)
    except _CONFIG_ERRORS as exc:
        print(f"sdfilter {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _NUMERICAL_ERRORS as exc:
        print(f"sdfilter {args.command}: numerical failure: {type(exc).__name__}: {exc}",
              file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"sdfilter {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    for path in paths:
        log.info("wrote %s", path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
