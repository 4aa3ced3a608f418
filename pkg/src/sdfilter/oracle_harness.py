"""Monte Carlo harness comparing score-driven estimates with a particle oracle.

Each replication simulates a design, estimates the static parameters on the
first half of the sample, then runs the score-driven filter/smoother and the
particle filter/smoother on the second half. Mean-square errors against the
simulated states and coverage rates of the confidence bands are averaged
over replications.

The oracle is a bootstrap particle filter with a backward-simulation
smoother; it is labelled ``oracle`` (not importance sampling) in all outputs.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import optimize

from .errors import ExperimentAborted, InvalidInputError, SdFilterError
from .estimation import (
    FitConfig,
    ParameterVector,
    build,
    default_fixed,
    fit,
    heuristic_start,
    parameter_layout,
)
from .models import DESIGNS, design, simulate_ssm
from .particles import (
    MIN_PARTICLES,
    draw_randoms,
    particle_filter,
    particle_smoother,
)
from .score_engine import sd_filter, sd_smoother
from .uncertainty import bands_from_ensemble, coverage_rate, parameter_ensemble

log = logging.getLogger(__name__)

TARGETS = ("predictive", "update", "smoothed")
LEVELS = (0.90, 0.95, 0.99)
ORACLE_PARAMS = ("sd_fit", "true", "pf_fit")


@dataclass
class ExperimentConfig:
    """Settings of a Monte Carlo experiment.

    ``oracle_params`` selects the static parameters handed to the particle
    oracle: the score-driven (Kalman-consistent) estimates, whose parameters
    coincide with those of the data-generating process (``"sd_fit"``), the
    true values (``"true"``), or particle-likelihood estimates (``"pf_fit"``).
    ``oracle_true_reference`` additionally runs the oracle at the true values
    and reports it as a separate row.
    """

    models: list = field(default_factory=lambda: list(DESIGNS))
    overrides: dict = field(default_factory=dict)
    replications: int = 100
    n: int = 2000
    particles: int = 1000
    trajectories: int = 200
    seed: int = 0
    normalization: str = "kalman"
    oracle_params: str = "sd_fit"
    oracle_true_reference: bool = True
    pf_fit_particles: int = 400
    coverage: bool = True
    levels: list = field(default_factory=lambda: list(LEVELS))
    band_draws: int = 200
    fit: dict = field(default_factory=dict)
    max_failure_rate: float = 0.10
    threads: int = 1

    def __post_init__(self):
        if self.n % 2 or self.n < 2 * 50:
            raise InvalidInputError("n must be even and at least 100")
        if self.replications < 1:
            raise InvalidInputError("replications must be at least 1")
        if self.particles < MIN_PARTICLES or self.pf_fit_particles < MIN_PARTICLES:
            raise InvalidInputError(f"particle counts must be at least {MIN_PARTICLES}")
        if self.trajectories < 1:
            raise InvalidInputError("trajectories must be positive")
        if self.oracle_params not in ORACLE_PARAMS:
            raise InvalidInputError(f"oracle_params must be one of {ORACLE_PARAMS}")
        if self.oracle_params == "sd_fit" and self.normalization != "kalman":
            raise InvalidInputError("oracle_params 'sd_fit' needs the Kalman-consistent "
                                    "normalization, whose parameters are those of the DGP")
        for name in self.models:
            if name not in DESIGNS:
                raise InvalidInputError(f"unknown design {name!r}")
        for lv in self.levels:
            if not 0 < lv < 1:
                raise InvalidInputError("levels must lie in (0, 1)")
        if self.threads < 1:
            raise InvalidInputError("threads must be positive")

    def fit_config(self) -> FitConfig:
        return FitConfig(normalization=self.normalization, **self.fit)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("threads")
        return d


@dataclass
class ExperimentReport:
    """Aggregated losses, coverage rates and parameter summaries.

    ``timing`` holds wall-clock totals; it is kept out of :meth:`to_json` so
    that the report itself is a pure function of the configuration.
    """

    config: dict
    mse: dict
    ratios: dict
    coverage: dict
    parameters: dict
    failures: list
    replications: dict
    timing: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    def to_dict(self, include_raw: bool = False) -> dict:
        d = {
            "config": self.config,
            "oracle": "bootstrap particle filter / backward-simulation smoother",
            "mse_state": "alpha_t",
            "mse": self.mse,
            "ratio_sd_to_oracle": self.ratios,
            "coverage": self.coverage,
            "parameters": self.parameters,
            "replications": self.replications,
            "failures": self.failures,
        }
        if include_raw:
            d["raw"] = self.raw
        return d

    def to_json(self, include_raw: bool = False) -> str:
        return json.dumps(self.to_dict(include_raw), indent=2, sort_keys=True) + "\n"

    def table3_csv(self) -> str:
        """MSE table: one row per (method, target), one column per model."""
        models = list(self.mse)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "target"] + models)
        methods = sorted({k.split(":")[0] for m in models for k in self.mse[m]},
                         key=_method_order)
        for meth in methods:
            for tgt in TARGETS:
                key = f"{meth}:{tgt}"
                w.writerow([meth, tgt] + [_fmt(self.mse[m].get(key)) for m in models])
        return buf.getvalue()

    def table4_csv(self) -> str:
        """Coverage table: one row per (level, regime, target), one column per model."""
        models = list(self.coverage)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["level", "regime", "target"] + models)
        if models:
            for key in self.coverage[models[0]]:
                lv, regime, tgt = key.split(":")
                w.writerow([lv, regime, tgt] + [_fmt(self.coverage[m].get(key)) for m in models])
        return buf.getvalue()

    def write(self, out_dir: str, include_raw: bool = False) -> list[str]:
        os.makedirs(out_dir, exist_ok=True)
        files = {
            "report.json": self.to_json(include_raw),
            "table3.csv": self.table3_csv(),
            "table4.csv": self.table4_csv(),
            "timing.json": json.dumps(self.timing, indent=2, sort_keys=True) + "\n",
        }
        paths = []
        for name, text in files.items():
            path = os.path.join(out_dir, name)
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
            paths.append(path)
        return paths


def _method_order(m: str) -> tuple:
    return ({"sd": 0, "oracle": 1, "oracle_true": 2}.get(m, 3), m)


def _fmt(v) -> str:
    return "" if v is None else format(float(v), ".17g")


def _mse(est: np.ndarray, truth: np.ndarray) -> float:
    d = est.reshape(-1) - truth.reshape(-1)
    return float(np.mean(d * d))


def _oracle_losses(model, trans, y, truth, cfg, ss_pf, ss_sm) -> dict:
    pf = particle_filter(model, trans, y, cfg.particles, seed=np.random.default_rng(ss_pf))
    ps = particle_smoother(pf, trans, cfg.trajectories, seed=np.random.default_rng(ss_sm))
    return {"predictive": _mse(pf.pred_mean[:, 0], truth),
            "update": _mse(pf.filt_mean[:, 0], truth),
            "smoothed": _mse(ps.mean[:, 0], truth)}


def run_replication(cfg: ExperimentConfig, model_name: str, rep: int) -> dict:
    """One simulate / fit / filter / oracle cycle with seeds derived from ``(model, rep)``."""
    midx = list(DESIGNS).index(model_name)
    root = np.random.SeedSequence(cfg.seed, spawn_key=(midx, rep))
    ss_sim, ss_fit, ss_pf, ss_sm, ss_band, ss_true_pf, ss_true_sm, ss_pffit = root.spawn(8)
    model, trans = design(model_name, **cfg.overrides.get(model_name, {}))
    sample = simulate_ssm(model, trans, cfg.n, seed=np.random.default_rng(ss_sim))
    half = cfg.n // 2
    y_fit, y = sample.observations[:half], sample.observations[half:]
    truth = sample.states[half:, 0]
    out = {"model": model_name, "rep": rep, "mse": {}, "coverage": {}, "timing": {}}

    t0 = time.perf_counter()
    fcfg = cfg.fit_config()
    fcfg.seed = int(ss_fit.generate_state(1)[0])
    res = fit(model_name, y_fit, fcfg)
    m_hat, tr_hat, norm = res.build()
    run = sd_filter(m_hat, tr_hat, y, norm, report=False)
    sm = sd_smoother(m_hat, tr_hat, run)
    out["timing"]["sd"] = time.perf_counter() - t0
    out["params"] = res.theta.as_dict()
    out["mse"]["sd"] = {"predictive": _mse(run.a_pred[:, 0], truth),
                        "update": _mse(run.a_upd[:, 0], truth),
                        "smoothed": _mse(sm.alpha_hat[:, 0], truth)}

    t0 = time.perf_counter()
    if cfg.oracle_params == "true":
        m_or, tr_or = model, trans
    elif cfg.oracle_params == "sd_fit":
        m_or, tr_or = m_hat, tr_hat
    else:
        pres = fit_particle_likelihood(model_name, y_fit, cfg.pf_fit_particles,
                                       seed=np.random.default_rng(ss_pffit), config=fcfg)
        m_or, tr_or, _ = build(model_name, pres.params, "kalman", fcfg.model_options)
        out["params_oracle"] = pres.theta.as_dict()
    out["mse"]["oracle"] = _oracle_losses(m_or, tr_or, y, truth, cfg, ss_pf, ss_sm)
    out["timing"]["oracle"] = time.perf_counter() - t0
    if cfg.oracle_true_reference and cfg.oracle_params != "true":
        out["mse"]["oracle_true"] = _oracle_losses(model, trans, y, truth, cfg, ss_true_pf,
                                                   ss_true_sm)

    if cfg.coverage:
        band_rng = np.random.default_rng(ss_band)
        for tgt in TARGETS:
            ens = parameter_ensemble(y, res, cfg.band_draws, seed=band_rng, target=tgt)
            for lv in cfg.levels:
                key = f"{lv:g}:combined:{tgt}"
                out["coverage"][key] = coverage_rate(bands_from_ensemble(ens, lv, "combined"),
                                                     truth)
                if tgt == "predictive":
                    key = f"{lv:g}:parameter:{tgt}"
                    out["coverage"][key] = coverage_rate(
                        bands_from_ensemble(ens, lv, "parameter"), truth)
    return out


def _safe_replication(args):
    cfg, model_name, rep = args
    try:
        return run_replication(cfg, model_name, rep)
    except SdFilterError as exc:
        return {"model": model_name, "rep": rep, "error": f"{type(exc).__name__}: {exc}"}


def _summarize(values: np.ndarray) -> dict:
    return {"mean": float(np.mean(values)), "std": float(np.std(values, ddof=1))
            if values.size > 1 else 0.0, "median": float(np.median(values)),
            "q05": float(np.quantile(values, 0.05)), "q95": float(np.quantile(values, 0.95))}


def run_experiment(cfg: ExperimentConfig, progress=None) -> ExperimentReport:
    """Run every replication of every model and aggregate the results.

    Replications run in a process pool when ``cfg.threads > 1``. Results are
    aggregated in (model, replication) order, so the report does not depend
    on scheduling.

    Raises
    ------
    ExperimentAborted
        If more than ``max_failure_rate`` of the replications of a model fail.
    """
    jobs = [(cfg, m, r) for m in cfg.models for r in range(cfg.replications)]
    t0 = time.perf_counter()
    if cfg.threads > 1:
        with ProcessPoolExecutor(max_workers=cfg.threads) as ex:
            results = []
            for res in ex.map(_safe_replication, jobs, chunksize=1):
                results.append(res)
                if progress:
                    progress(len(results), len(jobs))
    else:
        results = []
        for job in jobs:
            results.append(_safe_replication(job))
            if progress:
                progress(len(results), len(jobs))
    wall = time.perf_counter() - t0

    mse, ratios, coverage, params, reps = {}, {}, {}, {}, {}
    failures = [r for r in results if "error" in r]
    raw = {}
    timing = {"wall_clock": wall, "sd": 0.0, "oracle": 0.0}
    for name in cfg.models:
        ok = [r for r in results if r["model"] == name and "error" not in r]
        n_fail = cfg.replications - len(ok)
        reps[name] = {"completed": len(ok), "failed": n_fail}
        if n_fail > cfg.max_failure_rate * cfg.replications or not ok:
            raise ExperimentAborted(
                f"{n_fail} of {cfg.replications} replications failed for {name}",
                [f for f in failures if f["model"] == name])
        mse[name] = {}
        for meth in ok[0]["mse"]:
            for tgt in TARGETS:
                mse[name][f"{meth}:{tgt}"] = float(np.mean([r["mse"][meth][tgt] for r in ok]))
        ratios[name] = {tgt: mse[name][f"sd:{tgt}"] / mse[name][f"oracle:{tgt}"]
                        for tgt in TARGETS}
        if cfg.coverage:
            coverage[name] = {k: float(np.mean([r["coverage"][k] for r in ok]))
                              for k in ok[0]["coverage"]}
        params[name] = {p: _summarize(np.array([r["params"][p] for r in ok]))
                        for p in ok[0]["params"]}
        timing["sd"] += sum(r["timing"]["sd"] for r in ok)
        timing["oracle"] += sum(r["timing"]["oracle"] for r in ok)
        raw[name] = [{"rep": r["rep"], "mse": r["mse"], "params": r["params"]} for r in ok]
    timing["oracle_to_sd"] = timing["oracle"] / timing["sd"] if timing["sd"] else None
    return ExperimentReport(cfg.to_dict(), mse, ratios, coverage, params,
                            [{"model": f["model"], "rep": f["rep"], "error": f["error"]}
                             for f in failures], reps, timing, raw)


@dataclass
class ParticleFitResult:
    """Maximizer of the particle-filter log-likelihood (common random numbers)."""

    theta: ParameterVector
    params: dict
    loglik: float
    diagnostics: dict


def fit_particle_likelihood(family: str, y, N: int = 400, seed=0,
                            config: FitConfig | None = None) -> ParticleFitResult:
    """Maximize the particle-filter log-likelihood by Nelder-Mead.

    The same random numbers are reused at every parameter value so that the
    objective is a deterministic function of the parameters. Start points
    follow the same multistart scheme as :func:`fit`. Only the
    Kalman-consistent parameterization (the DGP parameters) is supported.
    """
    config = config or FitConfig()
    y = np.asarray(y, dtype=float)
    layout = parameter_layout(family, "kalman")
    fixed = default_fixed(family) if config.fixed is None else dict(config.fixed)
    free = [(n, t) for n, t in layout if n not in fixed]
    names = [n for n, _ in free]
    start = heuristic_start(family, y, "kalman", fixed, config.model_options)
    proto = ParameterVector(names, [start[n] for n in names], [t for _, t in free])
    m = 2 if family == "two_component_sv" else 1
    rand = draw_randoms(y.size, N, m, seed)

    def objective(u):
        values = proto.from_unconstrained(u)
        if not proto.in_domain(values):
            return 1e10
        params = dict(fixed)
        params.update(zip(names, values))
        try:
            model, trans, _ = build(family, params, "kalman", config.model_options)
            pf = particle_filter(model, trans, y, N, randoms=rand, store=False)
        except SdFilterError:
            return 1e10
        return -pf.loglik / y.size if np.isfinite(pf.loglik) else 1e10

    rng = np.random.default_rng(config.seed)
    u0 = proto.to_unconstrained()
    starts = [u0] + [u0 + config.jitter * rng.standard_normal(u0.size)
                     for _ in range(config.n_starts - 1)]
    best, diags = None, []
    for i, s in enumerate(starts):
        res = optimize.minimize(objective, s, method="Nelder-Mead",
                                options={"maxiter": 400 * s.size})
        diags.append({"start": i, "nfev": int(res.nfev), "objective": float(res.fun * y.size)})
        if best is None or res.fun < best.fun:
            best = res
    values = proto.from_unconstrained(best.x)
    params = dict(fixed)
    params.update(zip(names, (float(v) for v in values)))
    return ParticleFitResult(proto.with_values(values), params, -float(best.fun) * y.size,
                             {"starts": diags})


def timing_comparison(family: str, y, N: int = 400, seed=0,
                      config: FitConfig | None = None) -> dict:
    """Wall-clock of score-driven fit+filter versus particle-likelihood fitting."""
    config = config or FitConfig()
    t0 = time.perf_counter()
    res = fit(family, y, config)
    model, trans, norm = res.build()
    sd_filter(model, trans, y, norm, report=False)
    t_sd = time.perf_counter() - t0
    t0 = time.perf_counter()
    fit_particle_likelihood(family, y, N, seed, config)
    t_pf = time.perf_counter() - t0
    return {"sd_seconds": t_sd, "pf_seconds": t_pf, "ratio": t_pf / t_sd}


def error_scaling(q_values=(0.1, 0.01, 0.001), n: int = 1000, N: int = 10000, seed=0,
                  family: str = "gaussian_scale") -> dict:
    """Gap between the oracle and score-driven update filters as ``q`` shrinks.

    For each state-noise variance the design is simulated once and both
    filters run at the true parameters. Returns the mean absolute gap
    ``|E[alpha_t | Y_t] - a_{t|t}|``, the mean predictive variance ``p_t`` and
    the least-squares slope of log gap on log mean ``p_t``; a first-order
    approximation error gives a slope near one.
    """
    root = np.random.SeedSequence(seed)
    gaps, pbar = [], []
    for q, ss in zip(q_values, root.spawn(len(q_values))):
        s_sim, s_pf = ss.spawn(2)
        model, trans = design(family, q=q)
        y = simulate_ssm(model, trans, n, seed=np.random.default_rng(s_sim)).observations
        run = sd_filter(model, trans, y, report=False)
        pf = particle_filter(model, trans, y, N, seed=np.random.default_rng(s_pf), store=False)
        gaps.append(float(np.mean(np.abs(pf.filt_mean[:, 0] - run.a_upd[:, 0]))))
        pbar.append(float(np.mean(run.P_pred[:, 0, 0])))
    slope = float(np.polyfit(np.log(pbar), np.log(gaps), 1)[0])
    return {"q": list(q_values), "gap": gaps, "mean_p": pbar, "slope": slope}
