"""Confidence bands under filtering, parameter and combined uncertainty.

With ``theta`` drawn from the asymptotic distribution ``N(theta_hat, Sigma)``
of the maximum-likelihood estimate, the conditional state variance splits as::

    Var = E_theta[P_t^theta] + E_theta[(a_t^theta - a_t^theta_hat)^2]

The first term is filtering uncertainty, the second parameter uncertainty.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import (
    InternalInvariantError,
    InvalidInputError,
    NumericalFailureError,
    PriorDomainError,
    SdFilterError,
)
from .score_engine import sd_filter, sd_smoother

log = logging.getLogger(__name__)

REGIMES = ("filtering", "parameter", "combined")
TARGETS = ("predictive", "update", "smoothed")
MIN_DRAWS = 100
CSV_COLUMNS = ("step", "mean", "lower", "upper", "var_total", "var_filtering", "var_parameter")


@dataclass
class BandSpec:
    """Nominal level, regime, target and simulation settings of a band."""

    level: float = 0.95
    regime: str = "filtering"
    target: str = "predictive"
    draws: int = 200
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.level < 1:
            raise InvalidInputError("level must lie in (0, 1)")
        if self.regime not in REGIMES:
            raise InvalidInputError(f"regime must be one of {REGIMES}")
        if self.target not in TARGETS:
            raise InvalidInputError(f"target must be one of {TARGETS}")
        if self.regime != "filtering" and self.draws < MIN_DRAWS:
            raise InvalidInputError(f"simulation regimes need at least {MIN_DRAWS} draws")

    @property
    def z(self) -> float:
        return float(stats.norm.ppf(0.5 * (1 + self.level)))


@dataclass
class BandSeries:
    """Per-step band and variance decomposition for one target."""

    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    var_total: np.ndarray
    var_filtering: np.ndarray
    var_parameter: np.ndarray
    level: float
    regime: str
    target: str

    @property
    def n(self) -> int:
        return self.mean.size

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def to_csv(self, path=None) -> str:
        """Write (or return) the CSV with 17 significant digits per float."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        cols = (self.mean, self.lower, self.upper, self.var_total, self.var_filtering,
                self.var_parameter)
        for t in range(self.n):
            w.writerow([t] + [format(float(c[t]), ".17g") for c in cols])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        return text


def _loading(m: int, loading) -> np.ndarray:
    if loading is None:
        if m != 1:
            raise InvalidInputError("a loading vector is required for multi-component states")
        return np.ones(1)
    w = np.asarray(loading, dtype=float).reshape(-1)
    if w.size != m:
        raise InvalidInputError(f"loading must have length {m}")
    return w


def target_moments(run, target: str):
    """State mean ``(n, m)`` and covariance ``(n, m, m)`` of a filter or smoother run."""
    if target == "smoothed":
        if not hasattr(run, "alpha_hat"):
            raise InvalidInputError("smoothed bands need a smoother run")
        return run.alpha_hat, run.P_hat
    if not hasattr(run, "a_pred"):
        raise InvalidInputError(f"{target} bands need a filter run")
    if target == "predictive":
        return run.a_pred, run.P_pred
    return run.a_upd, run.P_upd


def _project(mean, cov, w):
    mu = mean @ w
    var = np.einsum("i,tij,j->t", w, cov, w)
    scale = np.maximum(1.0, np.abs(np.einsum("tii->t", cov)))
    if np.any(var < -1e-10 * scale):
        t = int(np.flatnonzero(var < -1e-10 * scale)[0])
        raise InternalInvariantError(f"negative variance {var[t]:.3g} at step {t}")
    return mu, np.maximum(var, 0.0)


def bands_filtering_only(run, spec: BandSpec, loading=None) -> BandSeries:
    """Normal bands ``mean +/- z sqrt(var)`` from one filter or smoother run."""
    mean, cov = target_moments(run, spec.target)
    mu, var = _project(mean, cov, _loading(mean.shape[1], loading))
    half = spec.z * np.sqrt(var)
    return BandSeries(mu, mu - half, mu + half, var.copy(), var, np.zeros_like(var),
                      spec.level, "filtering", spec.target)


@dataclass
class ParameterEnsemble:
    """Projected means and variances at ``theta_hat`` and at each prior draw."""

    mean_hat: np.ndarray
    var_hat: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    draws: np.ndarray
    n_rejected: int
    target: str


def _run_target(fit, values, y, target, init):
    model, trans, norm = fit.build(values)
    run = sd_filter(model, trans, y, norm, init=init, report=False)
    if target == "smoothed":
        run = sd_smoother(model, trans, run, report=False)
    return target_moments(run, target)


def parameter_ensemble(y, fit, draws: int, seed=0, target: str = "predictive",
                       loading=None, init=None) -> ParameterEnsemble:
    """Rerun the filter at ``draws`` parameter values drawn from ``N(theta_hat, Sigma)``.

    Draws outside the parameter domain, or at which the filter fails, are
    rejected and redrawn. Every draw starts from the same initial state,
    by default the stationary distribution at ``theta_hat``, so that the
    spread across draws reflects parameter uncertainty only (a draw close
    to the unit root would otherwise start from a nearly diffuse state).

    Raises
    ------
    PriorDomainError
        If more than half of all proposals are rejected.
    """
    if target not in TARGETS:
        raise InvalidInputError(f"target must be one of {TARGETS}")
    y = np.asarray(y, dtype=float)
    theta = fit.theta
    cov = 0.5 * (fit.cov + fit.cov.T)
    if np.linalg.eigvalsh(cov).min() < -1e-10 * max(1.0, np.abs(cov).max()):
        raise InvalidInputError("parameter covariance must be positive semidefinite")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if init is None:
        init = fit.build()[1].stationary()
    mean0, cov0 = _run_target(fit, theta.values, y, target, init)
    w = _loading(mean0.shape[1], loading)
    mu_hat, var_hat = _project(mean0, cov0, w)

    # eigen factor so that a zero covariance reproduces theta_hat exactly
    ev, V = np.linalg.eigh(cov)
    factor = V * np.sqrt(np.clip(ev, 0.0, None))
    means = np.empty((draws, mu_hat.size))
    variances = np.empty((draws, mu_hat.size))
    values = np.empty((draws, theta.k))
    accepted = rejected = 0
    while accepted < draws:
        if rejected > draws:
            raise PriorDomainError(f"{rejected} of {accepted + rejected} parameter draws "
                                   "were rejected")
        v = theta.values + factor @ rng.standard_normal(theta.k)
        if not theta.in_domain(v):
            rejected += 1
            continue
        try:
            mb, cb = _run_target(fit, v, y, target, init)
            if not (np.all(np.isfinite(mb)) and np.all(np.isfinite(cb))):
                raise NumericalFailureError("non-finite filter output")
            means[accepted], variances[accepted] = _project(mb, cb, w)
        except SdFilterError as exc:
            log.info("parameter draw rejected: %s", exc)
            rejected += 1
            continue
        values[accepted] = v
        accepted += 1
    if rejected:
        log.info("%d of %d parameter draws rejected", rejected, accepted + rejected)
    return ParameterEnsemble(mu_hat, var_hat, means, variances, values, rejected, target)


def bands_from_ensemble(ens: ParameterEnsemble, level: float, regime: str) -> BandSeries:
    """Parameter-only (empirical quantile) or combined (normal) bands."""
    dev = ens.means - ens.mean_hat
    var_par = np.mean(dev * dev, axis=0)
    if regime == "parameter":
        lo, hi = np.quantile(ens.means, [0.5 * (1 - level), 0.5 * (1 + level)], axis=0)
        zero = np.zeros_like(var_par)
        return BandSeries(ens.mean_hat.copy(), lo, hi, var_par.copy(), zero, var_par,
                          level, "parameter", ens.target)
    if regime != "combined":
        raise InvalidInputError("regime must be 'parameter' or 'combined'")
    var_filt = ens.var_hat + np.mean(ens.variances - ens.var_hat, axis=0)
    var_filt = np.maximum(var_filt, 0.0)
    total = var_filt + var_par
    half = float(stats.norm.ppf(0.5 * (1 + level))) * np.sqrt(total)
    return BandSeries(ens.mean_hat.copy(), ens.mean_hat - half, ens.mean_hat + half, total,
                      var_filt, var_par, level, "combined", ens.target)


def bands_parameter_only(y, fit, spec: BandSpec, loading=None, init=None) -> BandSeries:
    """Empirical type-7 quantile bands of ``a_t^theta`` over prior draws."""
    ens = parameter_ensemble(y, fit, spec.draws, spec.seed, spec.target, loading, init)
    return bands_from_ensemble(ens, spec.level, "parameter")


def bands_combined(y, fit, spec: BandSpec, loading=None, init=None) -> BandSeries:
    """Normal bands on the total (filtering plus parameter) variance."""
    ens = parameter_ensemble(y, fit, spec.draws, spec.seed, spec.target, loading, init)
    return bands_from_ensemble(ens, spec.level, "combined")


def coverage_rate(bands: BandSeries, truth) -> float:
    """Fraction of steps with ``lower <= truth <= upper``."""
    truth = np.asarray(truth, dtype=float).reshape(-1)
    if truth.size != bands.n:
        raise InvalidInputError("truth and bands must have equal length")
    return float(np.mean((bands.lower <= truth) & (truth <= bands.upper)))
