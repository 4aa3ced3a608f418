"""Observation models, the simulation designs and the state-space simulator.

All built-in families depend on the state only through the scalar signal
``kappa = omega + Z a``:

* ``StudentTLocation``: ``y = kappa + e``, ``e`` Student-t with variance ``e^lambda``.
* ``GaussianScale``: ``y ~ N(0, e^kappa)``; ``e^kappa`` is the variance.
* ``StudentTScale``: ``y = e^(kappa/2) eps`` with variance-standardized Student-t ``eps``.
* ``PoissonDuration``: ``y ~ Poisson(kappa)`` (identity link, intensity floored
  at ``1e-8``) or ``Poisson(e^kappa)`` (log link).
* ``TwoComponentSV``: Student-t scale with ``Z = (1, 1)`` over two AR(1) factors.

Student-t densities use the variance-standardized form
``(1 + u^2 / ((nu - 2) s))^(-(nu + 1) / 2)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .errors import InvalidInputError, InvalidParameterError
from .lgss import LOG_2PI, symmetrize
from .score_engine import TransitionSpec

INTENSITY_FLOOR = 1e-8


class ObservationModel:
    """Conditional density ``p(y_t | a)`` used by the score-driven recursions.

    ``P`` is the predictive state covariance. Densities of the form
    ``p(y_t | alpha_t)`` evaluated at ``a`` ignore it; the linear-Gaussian
    model uses it to form the exact predictive density.
    """

    state_dim: int = 1
    obs_dim: int = 1

    def log_density(self, y, a, P=None) -> float:
        raise NotImplementedError

    def score(self, y, a, P=None) -> np.ndarray:
        raise NotImplementedError

    def hessian(self, y, a, P=None) -> np.ndarray:
        raise NotImplementedError

    def information(self, a, P=None) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no closed-form information")

    def normalization(self, a) -> np.ndarray:
        raise NotImplementedError

    def signal(self, a):
        raise NotImplementedError

    def simulate_observation(self, alpha, rng: np.random.Generator):
        return self.simulate(np.atleast_2d(alpha), rng)[0]

    def simulate(self, states: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def particle_log_density(self, y, states: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class ScalarSignalModel(ObservationModel):
    """Base class for families whose density depends on ``kappa = omega + Z a``."""

    code: int
    Z: np.ndarray = np.ones(1)
    omega: float = 0.0

    def _pars(self) -> tuple[float, float]:
        return 0.0, 0.0

    @property
    def state_dim(self) -> int:
        return self.Z.size

    def kernel_args(self):
        p1, p2 = self._pars()
        return self.code, self.Z, float(self.omega), float(p1), float(p2)

    def signal(self, a):
        return float(self.omega + self.Z @ np.asarray(a, dtype=float).reshape(-1))

    def log_density(self, y, a, P=None) -> float:
        return K.logpdf(self.code, float(y), self.signal(a), *self._pars())

    def score(self, y, a, P=None) -> np.ndarray:
        return self.Z * K.dlogpdf(self.code, float(y), self.signal(a), *self._pars())

    def hessian(self, y, a, P=None) -> np.ndarray:
        h = K.d2logpdf(self.code, float(y), self.signal(a), *self._pars())
        return np.outer(self.Z, self.Z) * h

    def information(self, a, P=None) -> np.ndarray:
        i = K.information(self.code, self.signal(a), *self._pars())
        return np.outer(self.Z, self.Z) * i

    def normalization(self, a) -> np.ndarray:
        s = K.table_normalization(self.code, self.signal(a), *self._pars())
        return s * np.eye(self.state_dim)

    def particle_log_density(self, y, states) -> np.ndarray:
        states = np.asarray(states, dtype=float).reshape(-1, self.state_dim)
        kappas = np.ascontiguousarray(self.omega + states @ self.Z)
        return K.logpdf_many(self.code, float(y), kappas, *self._pars())

    def _kappas(self, states) -> np.ndarray:
        states = np.asarray(states, dtype=float).reshape(-1, self.state_dim)
        return self.omega + states @ self.Z


def _check_nu(nu: float) -> float:
    nu = float(nu)
    if not (nu > 2.0) or not np.isfinite(nu):
        raise InvalidParameterError(f"nu must be finite and > 2, got {nu}")
    return nu


def _check_finite(**kw) -> None:
    for k, v in kw.items():
        if not np.isfinite(v):
            raise InvalidParameterError(f"{k} must be finite, got {v}")


def _std_t(nu: float, size: int, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_t(nu, size) * np.sqrt((nu - 2.0) / nu)


@dataclass
class StudentTLocation(ScalarSignalModel):
    """Student-t location: ``y_t = alpha_t + e_t`` with ``Var(e_t) = e^lam``."""

    lam: float = 0.0
    nu: float = 5.0
    code = K.STUDENT_T_LOCATION

    def __post_init__(self):
        _check_finite(lam=self.lam)
        self.nu = _check_nu(self.nu)

    def _pars(self):
        return self.lam, self.nu

    def simulate(self, states, rng):
        k = self._kappas(states)
        return k + np.exp(0.5 * self.lam) * _std_t(self.nu, k.size, rng)


@dataclass
class GaussianScale(ScalarSignalModel):
    """Gaussian scale: ``y_t ~ N(0, exp(omega + alpha_t))``."""

    omega: float = 0.0
    code = K.GAUSSIAN_SCALE

    def __post_init__(self):
        _check_finite(omega=self.omega)

    def simulate(self, states, rng):
        k = self._kappas(states)
        return np.exp(0.5 * k) * rng.standard_normal(k.size)


@dataclass
class StudentTScale(ScalarSignalModel):
    """Student-t scale: ``y_t = exp((omega + alpha_t)/2) eps_t``, ``Var(eps_t) = 1``."""

    omega: float = 0.0
    nu: float = 5.0
    code = K.STUDENT_T_SCALE

    def __post_init__(self):
        _check_finite(omega=self.omega)
        self.nu = _check_nu(self.nu)

    def _pars(self):
        return 0.0, self.nu

    def simulate(self, states, rng):
        k = self._kappas(states)
        return np.exp(0.5 * k) * _std_t(self.nu, k.size, rng)


@dataclass
class PoissonDuration(ScalarSignalModel):
    """Poisson counts with intensity ``alpha_t`` (``link="identity"``) or ``exp(alpha_t)``.

    Under the identity link the intensity is floored at ``floor`` before any
    evaluation, since the linear transition does not keep it positive.
    """

    link: str = "identity"
    floor: float = INTENSITY_FLOOR

    def __post_init__(self):
        if self.link not in ("identity", "log"):
            raise InvalidParameterError(f"unknown link {self.link!r}")
        if not self.floor > 0:
            raise InvalidParameterError("floor must be positive")

    @property
    def code(self) -> int:
        return K.POISSON_IDENTITY if self.link == "identity" else K.POISSON_LOG

    def _pars(self):
        return self.floor, 0.0

    def simulate(self, states, rng):
        k = self._kappas(states)
        lam = np.exp(k) if self.link == "log" else np.maximum(k, 0.0)
        return rng.poisson(lam).astype(float)


@dataclass
class TwoComponentSV(ScalarSignalModel):
    """Student-t stochastic volatility with log-variance ``omega + alpha_1 + alpha_2``."""

    omega: float = 0.0
    nu: float = 10.0
    code = K.STUDENT_T_SCALE
    Z: np.ndarray = field(default_factory=lambda: np.ones(2), init=False, repr=False)

    def __post_init__(self):
        _check_finite(omega=self.omega)
        self.nu = _check_nu(self.nu)
        self.Z = np.ones(2)

    def _pars(self):
        return 0.0, self.nu

    def simulate(self, states, rng):
        k = self._kappas(states)
        return np.exp(0.5 * k) * _std_t(self.nu, k.size, rng)


@dataclass
class TwoComponentSvParams:
    """Static parameters of the two-component volatility model."""

    omega: float
    nu: float
    phi1: float
    phi2: float
    Q: np.ndarray

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=float).reshape(2, 2)
        _check_nu(self.nu)
        if not (abs(self.phi1) < 1 and abs(self.phi2) < 1):
            raise InvalidParameterError("component persistences must lie in (-1, 1)")
        if np.linalg.eigvalsh(symmetrize(self.Q)).min() < -1e-12:
            raise InvalidParameterError("Q must be positive semidefinite")

    @property
    def Z(self) -> np.ndarray:
        return np.ones(2)

    def model(self) -> TwoComponentSV:
        return TwoComponentSV(omega=self.omega, nu=self.nu)

    def transition(self) -> TransitionSpec:
        return TransitionSpec(np.zeros(2), np.diag([self.phi1, self.phi2]), self.Q)


def two_component_signal(a, params: TwoComponentSvParams) -> float:
    """Log-variance signal ``omega + a_1 + a_2``."""
    a = np.asarray(a, dtype=float).reshape(2)
    return float(params.omega + params.Z @ a)


@dataclass
class LinearGaussianObservation(ObservationModel):
    """Exact predictive density ``N(Z a, Z P Z' + H)`` of a linear-Gaussian model.

    With this model the score-driven recursions reproduce the Kalman filter.
    """

    Z: np.ndarray
    H: np.ndarray

    def __post_init__(self):
        self.Z = np.atleast_2d(np.asarray(self.Z, dtype=float))
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))

    @property
    def state_dim(self) -> int:
        return self.Z.shape[1]

    @property
    def obs_dim(self) -> int:
        return self.Z.shape[0]

    def _pieces(self, y, a, P):
        if P is None:
            raise InvalidInputError("the linear-Gaussian density needs the predictive covariance")
        v = np.asarray(y, dtype=float).reshape(-1) - self.Z @ a
        F = symmetrize(self.Z @ P @ self.Z.T + self.H)
        return v, F

    def log_density(self, y, a, P=None) -> float:
        v, F = self._pieces(y, a, P)
        L = np.linalg.cholesky(F)
        w = np.linalg.solve(L, v)
        return float(-0.5 * (v.size * LOG_2PI + 2 * np.sum(np.log(np.diag(L))) + w @ w))

    def score(self, y, a, P=None) -> np.ndarray:
        v, F = self._pieces(y, a, P)
        return self.Z.T @ np.linalg.solve(F, v)

    def hessian(self, y, a, P=None) -> np.ndarray:
        _, F = self._pieces(self.Z @ a, a, P)
        return -self.Z.T @ np.linalg.solve(F, self.Z)

    def information(self, a, P=None) -> np.ndarray:
        return -self.hessian(None, a, P)

    def normalization(self, a) -> np.ndarray:
        return np.eye(self.state_dim)

    def signal(self, a):
        return self.Z @ a

    def simulate(self, states, rng):
        states = np.atleast_2d(states)
        mean = states @ self.Z.T
        noise = rng.multivariate_normal(np.zeros(self.obs_dim), self.H, size=len(states),
                                        method="eigh")
        return mean + noise

    def particle_log_density(self, y, states) -> np.ndarray:
        v = np.asarray(y, dtype=float).reshape(1, -1) - np.atleast_2d(states) @ self.Z.T
        L = np.linalg.cholesky(self.H)
        w = np.linalg.solve(L, v.T)
        return -0.5 * (self.obs_dim * LOG_2PI + 2 * np.sum(np.log(np.diag(L)))
                       + np.sum(w * w, axis=0))


@dataclass
class SsmSample:
    """Simulated states ``(n, m)`` and observations drawn from one seed."""

    states: np.ndarray
    observations: np.ndarray
    seed: int | None = None


def simulate_ssm(model: ObservationModel, trans: TransitionSpec, n: int,
                 seed=None) -> SsmSample:
    """Simulate ``n`` steps starting from the stationary state distribution.

    ``seed`` may be an integer, a ``SeedSequence`` or a ``Generator``.
    """
    if n < 1:
        raise InvalidInputError("n must be at least 1")
    try:
        start = trans.stationary()
    except InvalidInputError as exc:
        raise InvalidParameterError(str(exc)) from None
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    m = trans.m
    eta = rng.multivariate_normal(np.zeros(m), trans.Q, size=n, method="eigh")
    alpha = np.empty((n, m))
    alpha[0] = rng.multivariate_normal(start.a, start.P, method="eigh")
    for t in range(n - 1):
        alpha[t + 1] = trans.c + trans.T @ alpha[t] + eta[t]
    y = model.simulate(alpha, rng)
    return SsmSample(alpha, y, seed if isinstance(seed, (int, np.integer)) else None)


# Table of simulation designs: (model, transition) per family.
DESIGNS = {
    "student_t_location": dict(model=dict(lam=0.01, nu=5.0), c=0.01, phi=0.98, q=0.01),
    "gaussian_scale": dict(model=dict(omega=0.1), c=0.0, phi=0.98, q=0.01),
    "student_t_scale": dict(model=dict(omega=0.1, nu=5.0), c=0.0, phi=0.98, q=0.01),
    "poisson_duration": dict(model=dict(link="log"), c=0.001, phi=0.98, q=0.01),
}

MODEL_CLASSES = {
    "student_t_location": StudentTLocation,
    "gaussian_scale": GaussianScale,
    "student_t_scale": StudentTScale,
    "poisson_duration": PoissonDuration,
    "two_component_sv": TwoComponentSV,
}


def design(name: str, **overrides) -> tuple[ScalarSignalModel, TransitionSpec]:
    """Model and transition of a named simulation design.

    ``overrides`` may replace ``c``, ``phi``, ``q`` or any model field.
    """
    if name not in DESIGNS:
        raise InvalidInputError(f"unknown design {name!r}; choose from {sorted(DESIGNS)}")
    spec = DESIGNS[name]
    mpars = dict(spec["model"])
    tpars = {k: spec[k] for k in ("c", "phi", "q")}
    for k, v in overrides.items():
        if k in tpars:
            tpars[k] = v
        else:
            mpars[k] = v
    model = MODEL_CLASSES[name](**mpars)
    return model, TransitionSpec.univariate(tpars["c"], tpars["phi"], tpars["q"])
