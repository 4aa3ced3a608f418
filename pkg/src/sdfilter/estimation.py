"""Maximum-likelihood estimation of static parameters.

The objective is the approximate log-likelihood ``sum_t log p(y_t | alpha_t)``
evaluated at the score-driven predictive filter. Parameters are optimized in
unconstrained coordinates; gradients are central finite differences. The
asymptotic covariance is the inverse numerical Hessian of the negative
log-likelihood in natural coordinates.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import optimize

from .errors import (
    EstimationFailure,
    InvalidInputError,
    InvalidParameterError,
    SdFilterError,
)
from .models import DESIGNS, MODEL_CLASSES, TwoComponentSvParams
from .score_engine import KalmanConsistent, ScaledScore, TransitionSpec, sd_filter

log = logging.getLogger(__name__)

MIN_LENGTH = 50
PENALTY = 1e10

# transform name -> (to unconstrained, to natural, domain check)
TRANSFORMS = {
    "identity": (lambda x: x, lambda u: u, lambda x: np.isfinite(x)),
    "log": (np.log, np.exp, lambda x: x > 0 and np.isfinite(x)),
    "tanh": (np.arctanh, np.tanh, lambda x: -1 < x < 1),
    "log_nu": (lambda x: np.log(x - 2.0), lambda u: 2.0 + np.exp(u),
               lambda x: x > 2 and np.isfinite(x)),
}


@dataclass
class ParameterVector:
    """Ordered named parameters with a transformation tag per entry."""

    names: tuple
    values: np.ndarray
    transforms: tuple

    def __post_init__(self):
        self.names = tuple(self.names)
        self.transforms = tuple(self.transforms)
        self.values = np.asarray(self.values, dtype=float).reshape(-1)
        if not (len(self.names) == len(self.transforms) == self.values.size):
            raise InvalidInputError("names, values and transforms must have equal length")
        for t in self.transforms:
            if t not in TRANSFORMS:
                raise InvalidInputError(f"unknown transform {t!r}")
        if not self.in_domain(self.values):
            raise InvalidParameterError(f"parameters out of domain: {self.as_dict()}")

    @property
    def k(self) -> int:
        return self.values.size

    def in_domain(self, values) -> bool:
        return all(bool(TRANSFORMS[t][2](float(v))) for t, v in zip(self.transforms, values))

    def to_unconstrained(self, values=None) -> np.ndarray:
        values = self.values if values is None else values
        return np.array([TRANSFORMS[t][0](float(v)) for t, v in zip(self.transforms, values)])

    def from_unconstrained(self, u) -> np.ndarray:
        # optimizer excursions may overflow to inf; the domain check rejects those
        with np.errstate(over="ignore"):
            return np.array([TRANSFORMS[t][1](float(x)) for t, x in zip(self.transforms, u)])

    def with_values(self, values) -> "ParameterVector":
        return ParameterVector(self.names, values, self.transforms)

    def as_dict(self) -> dict:
        return {n: float(v) for n, v in zip(self.names, self.values)}


# Observation parameters per family: (name, transform).
_OBS_PARAMS = {
    "student_t_location": [("lam", "identity"), ("nu", "log_nu")],
    "gaussian_scale": [("omega", "identity")],
    "student_t_scale": [("omega", "identity"), ("nu", "log_nu")],
    "poisson_duration": [],
}
# omega and c both shift the log-variance level; omega is held fixed by default.
_DEFAULT_FIXED = {
    "gaussian_scale": {"omega": DESIGNS["gaussian_scale"]["model"]["omega"]},
    "student_t_scale": {"omega": DESIGNS["student_t_scale"]["model"]["omega"]},
}
_DEFAULT_OPTIONS = {"poisson_duration": {"link": "log"}}
_TWO_COMPONENT = [("omega", "identity"), ("nu", "log_nu"), ("phi1", "tanh"),
                  ("phi2", "tanh"), ("q11", "log"), ("q22", "log"), ("rho12", "tanh")]

FAMILIES = tuple(_OBS_PARAMS) + ("two_component_sv",)


def parameter_layout(family: str, normalization: str = "kalman") -> list[tuple[str, str]]:
    """Full ``(name, transform)`` list of a family under a normalization."""
    if family == "two_component_sv":
        if normalization != "kalman":
            raise InvalidInputError("the two-component model requires the Kalman-consistent "
                                    "normalization")
        return list(_TWO_COMPONENT)
    if family not in _OBS_PARAMS:
        raise InvalidInputError(f"unknown family {family!r}; choose from {list(FAMILIES)}")
    if normalization == "kalman":
        trans = [("c", "identity"), ("phi", "tanh"), ("q", "log")]
    elif normalization == "scaled":
        trans = [("c", "identity"), ("phi", "tanh"), ("A", "log")]
    else:
        raise InvalidInputError(f"unknown normalization {normalization!r}")
    return trans + _OBS_PARAMS[family]


def default_fixed(family: str) -> dict:
    return dict(_DEFAULT_FIXED.get(family, {}))


def build(family: str, params: dict, normalization: str = "kalman",
          model_options: dict | None = None, d=None):
    """Model, transition and normalization from a full parameter dictionary."""
    opts = dict(_DEFAULT_OPTIONS.get(family, {}))
    opts.update(model_options or {})
    if family == "two_component_sv":
        s = np.sqrt(params["q11"] * params["q22"])
        Q = np.array([[params["q11"], params["rho12"] * s], [params["rho12"] * s, params["q22"]]])
        tc = TwoComponentSvParams(params["omega"], params["nu"], params["phi1"], params["phi2"], Q)
        return tc.model(), tc.transition(), KalmanConsistent()
    obs = {n: params[n] for n, _ in _OBS_PARAMS[family]}
    model = MODEL_CLASSES[family](**obs, **opts)
    if normalization == "kalman":
        trans = TransitionSpec.univariate(params["c"], params["phi"], params["q"])
        return model, trans, KalmanConsistent()
    # q is not a parameter of the scaled-score filter; its stationary start uses q = A.
    trans = TransitionSpec.univariate(params["c"], params["phi"], params["A"])
    return model, trans, ScaledScore(np.array([[params["A"]]]), d=d)


def heuristic_start(family: str, y, normalization: str = "kalman",
                    fixed: dict | None = None, model_options: dict | None = None) -> dict:
    """Moment-based starting values for every parameter of a family."""
    y = np.asarray(y, dtype=float)
    fixed = fixed or {}
    phi0 = 0.95
    var = max(float(np.var(y)), 1e-8)
    start = {"phi": phi0, "q": 0.01, "A": 0.1, "nu": 8.0}
    if family == "student_t_location":
        start.update(c=(1 - phi0) * float(np.mean(y)), lam=np.log(var / 2.0))
    elif family in ("gaussian_scale", "student_t_scale"):
        omega = fixed.get("omega", np.log(var))
        start.update(omega=np.log(var), c=(1 - phi0) * (np.log(var) - omega))
    elif family == "poisson_duration":
        link = {**_DEFAULT_OPTIONS[family], **(model_options or {})}["link"]
        mean = max(float(np.mean(y)), 1e-3)
        level = np.log(mean) if link == "log" else mean
        start.update(c=(1 - phi0) * level)
    elif family == "two_component_sv":
        start = dict(omega=np.log(var), nu=8.0, phi1=0.98, phi2=0.8, q11=0.005, q22=0.05,
                     rho12=0.0)
    return start


@dataclass
class FitConfig:
    """Optimizer settings.

    ``starts`` lists explicit start points (dicts of free parameters); when
    empty, one heuristic start plus ``n_starts - 1`` jittered copies are used.
    """

    normalization: str = "kalman"
    n_starts: int = 5
    starts: list = field(default_factory=list)
    fixed: dict | None = None
    model_options: dict = field(default_factory=dict)
    d: float | None = None
    jitter: float = 0.3
    seed: int = 0
    maxiter: int = 500
    gtol: float = 1e-6
    ftol: float = 1e-10
    fd_step: float = 1e-5


@dataclass
class FitResult:
    """Estimates, log-likelihood, asymptotic covariance and diagnostics."""

    family: str
    theta: ParameterVector
    loglik: float
    cov: np.ndarray
    diagnostics: dict
    normalization: str = "kalman"
    fixed: dict = field(default_factory=dict)
    model_options: dict = field(default_factory=dict)
    d: float | None = None

    def params(self, values=None) -> dict:
        """Full parameter dictionary (free and fixed)."""
        out = dict(self.fixed)
        vals = self.theta.values if values is None else values
        out.update({n: float(v) for n, v in zip(self.theta.names, vals)})
        return out

    def build(self, values=None):
        return build(self.family, self.params(values), self.normalization,
                     self.model_options, self.d)

    @property
    def std_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "normalization": self.normalization,
            "d": self.d,
            "names": list(self.theta.names),
            "transforms": list(self.theta.transforms),
            "estimates": [float(v) for v in self.theta.values],
            "std_errors": [float(v) for v in self.std_errors],
            "cov": [[float(v) for v in row] for row in self.cov],
            "loglik": float(self.loglik),
            "fixed": {k: float(v) for k, v in self.fixed.items()},
            "model_options": dict(self.model_options),
            "diagnostics": self.diagnostics,
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        theta = ParameterVector(d["names"], d["estimates"], d["transforms"])
        cov = np.asarray(d["cov"], dtype=float).reshape(theta.k, theta.k)
        return cls(d["family"], theta, float(d["loglik"]), cov, d.get("diagnostics", {}),
                   d.get("normalization", "kalman"), dict(d.get("fixed", {})),
                   dict(d.get("model_options", {})), d.get("d"))

    @classmethod
    def from_json(cls, text: str) -> "FitResult":
        return cls.from_dict(json.loads(text))


def approx_loglik(family, params, y, normalization="kalman", model_options=None, d=None):
    """Approximate log-likelihood at a full parameter dictionary."""
    model, trans, norm = build(family, params, normalization, model_options, d)
    run = sd_filter(model, trans, y, norm, report=False)
    return float(np.sum(run.loglik_terms))


def _fd_gradient(f, x, h):
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def numerical_hessian(objective, theta, project_psd: bool = False,
                      step: float = 1e-4) -> np.ndarray:
    """Central second differences with step ``max(step, step |theta_i|)``.

    Parameters
    ----------
    objective : callable
        Scalar function of a 1-d array.
    theta : array_like
        Evaluation point, interior to the objective's domain.
    project_psd : bool
        Floor the eigenvalues at 1e-10 (with a warning) when the symmetrized
        result is not positive semidefinite. Used for negative log-likelihoods.
    step : float
        Base step scale, 1e-4 by default.

    Raises
    ------
    EstimationFailure
        If any entry is not finite.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.ndim != 1:
        raise InvalidInputError("theta must be a 1-d array")
    k = theta.size
    if not step > 0:
        raise InvalidInputError("step must be positive")
    h = np.maximum(step, step * np.abs(theta))
    f0 = float(objective(theta))
    H = np.empty((k, k))
    for i in range(k):
        ei = np.zeros(k)
        ei[i] = h[i]
        H[i, i] = (objective(theta + ei) - 2 * f0 + objective(theta - ei)) / h[i] ** 2
        for j in range(i):
            ej = np.zeros(k)
            ej[j] = h[j]
            fpp = objective(theta + ei + ej)
            fpm = objective(theta + ei - ej)
            fmp = objective(theta - ei + ej)
            fmm = objective(theta - ei - ej)
            H[i, j] = H[j, i] = (fpp - fpm - fmp + fmm) / (4 * h[i] * h[j])
    if not np.all(np.isfinite(H)):
        raise EstimationFailure("numerical Hessian has non-finite entries")
    H = 0.5 * (H + H.T)
    if project_psd:
        w, V = np.linalg.eigh(H)
        if w.min() < 1e-10:
            log.warning("numerical Hessian not positive definite (min eigenvalue %.3g); "
                        "projecting", w.min())
            H = (V * np.maximum(w, 1e-10)) @ V.T
            H = 0.5 * (H + H.T)
    return H


def _free_layout(family, config: FitConfig):
    layout = parameter_layout(family, config.normalization)
    fixed = default_fixed(family) if config.fixed is None else dict(config.fixed)
    names = [n for n, _ in layout]
    for k in fixed:
        if k not in names:
            raise InvalidInputError(f"cannot fix unknown parameter {k!r}")
    free = [(n, t) for n, t in layout if n not in fixed]
    if not free:
        raise InvalidInputError("at least one parameter must be free")
    return free, fixed


def fit(family: str, y, config: FitConfig | None = None) -> FitResult:
    """Maximize the approximate log-likelihood over the free parameters.

    Each start runs L-BFGS-B in unconstrained coordinates with central
    finite-difference gradients; a Nelder-Mead search takes over when it
    fails. The best converged start is returned.

    Raises
    ------
    InvalidInputError
        If ``y`` has fewer than 50 observations.
    EstimationFailure
        If no start converges.
    """
    config = config or FitConfig()
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.size < MIN_LENGTH:
        raise InvalidInputError(f"series length must be at least {MIN_LENGTH}, got {y.size}")
    if not np.all(np.isfinite(y)):
        raise InvalidInputError("observations must be finite")
    free, fixed = _free_layout(family, config)
    names = [n for n, _ in free]
    proto_vals = heuristic_start(family, y, config.normalization, fixed, config.model_options)
    proto = ParameterVector(names, [proto_vals[n] for n in names], [t for _, t in free])
    n = y.size

    def natural_objective(values):
        # mean negative log-likelihood; penalized outside the domain
        if not proto.in_domain(values):
            return PENALTY
        params = dict(fixed)
        params.update(zip(names, (float(v) for v in values)))
        try:
            ll = approx_loglik(family, params, y, config.normalization,
                               config.model_options, config.d)
        except SdFilterError:
            return PENALTY
        return -ll / n if np.isfinite(ll) else PENALTY

    def objective(u):
        return natural_objective(proto.from_unconstrained(u))

    def gradient(u):
        return _fd_gradient(objective, u, config.fd_step)

    starts = [proto.to_unconstrained([s[n] for n in names]) for s in config.starts]
    if not starts:
        rng = np.random.default_rng(config.seed)
        u0 = proto.to_unconstrained()
        starts = [u0] + [u0 + config.jitter * rng.standard_normal(u0.size)
                         for _ in range(config.n_starts - 1)]

    diagnostics = []
    best = None
    for i, u0 in enumerate(starts):
        f0 = objective(u0)
        if not np.isfinite(f0) or f0 >= PENALTY:
            log.info("start %d discarded: objective not finite", i)
            diagnostics.append({"start": i, "status": "discarded"})
            continue
        res = optimize.minimize(objective, u0, jac=gradient, method="L-BFGS-B",
                                options={"maxiter": config.maxiter, "gtol": config.gtol,
                                         "ftol": config.ftol})
        method = "L-BFGS-B"
        converged = bool(res.success) and res.fun < PENALTY
        if not converged:
            nm = optimize.minimize(objective, res.x if res.fun < f0 else u0,
                                   method="Nelder-Mead",
                                   options={"maxiter": 400 * u0.size, "xatol": 1e-8,
                                            "fatol": config.ftol})
            if nm.fun <= res.fun:
                res = nm
            method = "Nelder-Mead"
            converged = bool(nm.success) and res.fun < PENALTY
        gnorm = float(np.linalg.norm(gradient(res.x)))
        diag = {"start": i, "status": "converged" if converged else "failed",
                "method": method, "iterations": int(res.nit),
                "objective": float(res.fun * n), "grad_norm": gnorm}
        diagnostics.append(diag)
        if converged and (best is None or res.fun < best[0].fun):
            best = (res, i)
    if best is None:
        raise EstimationFailure(f"no start converged for {family}", diagnostics)

    res, idx = best
    values = proto.from_unconstrained(res.x)
    theta = proto.with_values(values)

    def nll(v):
        return natural_objective(v) * n

    H = numerical_hessian(nll, values)
    if np.linalg.eigvalsh(H).min() < 1e-10:
        # strongly curved ridges (phi near one) defeat the default step
        log.info("numerical Hessian indefinite; retrying with step 1e-5")
        H = numerical_hessian(nll, values, project_psd=True, step=1e-5)
    cov = np.linalg.inv(H)
    cov = 0.5 * (cov + cov.T)
    summary = {"best_start": idx, "iterations": diagnostics[idx]["iterations"],
               "grad_norm": diagnostics[idx]["grad_norm"], "starts": diagnostics}
    return FitResult(family, theta, -float(res.fun) * n, cov, summary, config.normalization,
                     fixed, dict(config.model_options), config.d)


def config_from_dict(d: dict) -> FitConfig:
    known = set(asdict(FitConfig()))
    unknown = set(d) - known
    if unknown:
        raise InvalidInputError(f"unknown fit settings: {sorted(unknown)}")
    return FitConfig(**d)


__all__ = [
    "FAMILIES", "FitConfig", "FitResult", "ParameterVector", "approx_loglik", "build",
    "default_fixed", "fit", "heuristic_start", "numerical_hessian", "parameter_layout",
]
