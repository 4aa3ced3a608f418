"""Exact Kalman filtering and smoothing for linear-Gaussian state-space models.

The model is::

    y_t       = Z alpha_t + eps_t,        eps_t ~ N(0, H)
    alpha_t+1 = c + T alpha_t + eta_t,    eta_t ~ N(0, Q)

Two algebraically equivalent implementations are provided. The innovation
form is the textbook recursion written with v_t, F_t and K_t. The score form
rewrites the same recursion through the score ``Z' F^-1 v`` and the Hessian
``-Z' F^-1 Z`` of the predictive log-density with respect to ``a_t``; it is the
template for the score-driven engine in :mod:`sdfilter.score_engine`.

Arrays are time-major: ``a_pred[t]`` is the predictive mean for observation
``t`` (0-based).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from . import _kernels
from .errors import InvalidInputError, SingularInnovationError

LOG_2PI = float(np.log(2.0 * np.pi))
COND_LIMIT = 1e12
PSD_TOL = 1e-10


def symmetrize(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.swapaxes(-1, -2))


def _as_matrix(x, name: str) -> np.ndarray:
    M = np.atleast_2d(np.asarray(x, dtype=float))
    if M.ndim != 2:
        raise InvalidInputError(f"{name} must be a matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise InvalidInputError(f"{name} has non-finite entries")
    return M


def check_psd(M: np.ndarray, name: str, tol: float = PSD_TOL) -> None:
    if M.shape[0] != M.shape[1]:
        raise InvalidInputError(f"{name} must be square, got {M.shape}")
    if M.shape == (1, 1):
        if M[0, 0] < -tol:
            raise InvalidInputError(f"{name} is not positive semidefinite")
        return
    if not np.allclose(M, M.T, rtol=1e-10, atol=1e-12):
        raise InvalidInputError(f"{name} is not symmetric")
    if M.size and np.linalg.eigvalsh(symmetrize(M)).min() < -tol:
        raise InvalidInputError(f"{name} is not positive semidefinite")


@dataclass
class SystemMatrices:
    """System matrices ``(Z, H, T, Q, c)`` of a linear-Gaussian model."""

    Z: np.ndarray
    H: np.ndarray
    T: np.ndarray
    Q: np.ndarray
    c: np.ndarray | None = None

    def __post_init__(self):
        self.Z = _as_matrix(self.Z, "Z")
        self.H = _as_matrix(self.H, "H")
        self.T = _as_matrix(self.T, "T")
        self.Q = _as_matrix(self.Q, "Q")
        p, m = self.Z.shape
        if self.c is None:
            self.c = np.zeros(m)
        self.c = np.asarray(self.c, dtype=float).reshape(-1)
        if self.H.shape != (p, p):
            raise InvalidInputError(f"H must be {p}x{p}, got {self.H.shape}")
        if self.T.shape != (m, m):
            raise InvalidInputError(f"T must be {m}x{m}, got {self.T.shape}")
        if self.Q.shape != (m, m):
            raise InvalidInputError(f"Q must be {m}x{m}, got {self.Q.shape}")
        if self.c.shape != (m,) or not np.all(np.isfinite(self.c)):
            raise InvalidInputError(f"c must be a finite {m}-vector")
        check_psd(self.H, "H")
        check_psd(self.Q, "Q")

    @property
    def m(self) -> int:
        return self.Z.shape[1]

    @property
    def p(self) -> int:
        return self.Z.shape[0]


@dataclass
class GaussianState:
    """Conditional mean ``a`` and covariance ``P`` of the state at one step."""

    a: np.ndarray
    P: np.ndarray

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=float).reshape(-1)
        self.P = _as_matrix(self.P, "P")
        if self.P.shape != (self.a.size, self.a.size):
            raise InvalidInputError(
                f"P must be {self.a.size}x{self.a.size}, got {self.P.shape}"
            )
        if not np.all(np.isfinite(self.a)):
            raise InvalidInputError("a has non-finite entries")
        check_psd(self.P, "P")


def spectral_radius(T: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(T)))) if T.size else 0.0


def stationary_state(T, c, Q) -> GaussianState:
    """Stationary distribution of ``alpha_t+1 = c + T alpha_t + eta_t``.

    The mean is ``(I - T)^-1 c`` and the covariance solves the discrete
    Lyapunov equation ``P = T P T' + Q``.
    """
    T = np.atleast_2d(np.asarray(T, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    c = np.asarray(c, dtype=float).reshape(-1)
    if T.shape == (1, 1):
        phi = T[0, 0]
        if abs(phi) >= 1.0:
            raise InvalidInputError("transition is not stationary (|phi| >= 1); "
                                    "an explicit initial state is required")
        return GaussianState(c / (1.0 - phi), Q / (1.0 - phi * phi))
    if spectral_radius(T) >= 1.0:
        raise InvalidInputError(
            "transition is not stationary (spectral radius >= 1); "
            "an explicit initial state is required"
        )
    a = np.linalg.solve(np.eye(T.shape[0]) - T, c)
    P = symmetrize(linalg.solve_discrete_lyapunov(T, Q))
    return GaussianState(a, P)


@dataclass
class FilterRun:
    """Output of a full forward pass.

    Attributes
    ----------
    v, F : innovations ``(n, p)`` and their covariances ``(n, p, p)``
    a_pred, P_pred : predictive moments ``a_t, P_t``
    a_upd, P_upd : update moments ``a_t|t, P_t|t``
    K : gains ``T P_t Z' F_t^-1`` with shape ``(n, m, p)``
    score, hessian : ``Z' F_t^-1 v_t`` and ``-Z' F_t^-1 Z``
    loglik_terms : per-step Gaussian log predictive densities
    """

    v: np.ndarray
    F: np.ndarray
    a_pred: np.ndarray
    P_pred: np.ndarray
    a_upd: np.ndarray
    P_upd: np.ndarray
    K: np.ndarray
    score: np.ndarray
    hessian: np.ndarray
    loglik_terms: np.ndarray

    @property
    def n(self) -> int:
        return self.a_pred.shape[0]

    @property
    def loglik(self) -> float:
        return float(np.sum(self.loglik_terms))


@dataclass
class SmootherRun:
    """Output of a backward pass.

    ``r[t]`` and ``N[t]`` hold ``r_{t-1}`` and ``N_{t-1}`` in 1-based notation,
    i.e. the quantities that produce the smoothed moments of step ``t``.
    """

    r: np.ndarray
    N: np.ndarray
    alpha_hat: np.ndarray
    P_hat: np.ndarray
    L: np.ndarray
    n_clipped: int = 0


def _observations(y, p: int) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y.reshape(-1, 1) if p == 1 else y.reshape(1, -1)
    if y.ndim != 2 or y.shape[1] != p:
        raise InvalidInputError(f"observations must have shape (n, {p}), got {y.shape}")
    if y.shape[0] < 1:
        raise InvalidInputError("at least one observation is required")
    if not np.all(np.isfinite(y)):
        raise InvalidInputError("missing or non-finite observations are not supported")
    return y


def _init(sys: SystemMatrices, init: GaussianState | None) -> GaussianState:
    if init is None:
        return stationary_state(sys.T, sys.c, sys.Q)
    if init.a.size != sys.m:
        raise InvalidInputError(f"initial state must have dimension {sys.m}")
    return init


FILTER_FIELDS = ("v", "F", "a_pred", "P_pred", "a_upd", "P_upd", "K", "score", "hessian",
                 "loglik_terms")


def _run_filter(sys: SystemMatrices, y, init: GaussianState | None, score_form: bool):
    y = _observations(y, sys.p)
    state = _init(sys, init)
    *arrays, fail, cond = _kernels.lgss_filter_kernel(
        sys.Z, sys.H, sys.T, sys.Q, sys.c, y, np.array(state.a, dtype=float),
        np.array(state.P, dtype=float), score_form, COND_LIMIT)
    if fail >= 0:
        raise SingularInnovationError(int(fail), float(cond))
    run = FilterRun(**dict(zip(FILTER_FIELDS, arrays)))
    if not np.isfinite(run.loglik):
        raise InvalidInputError("log-likelihood is not finite")
    return run


def kalman_filter(sys: SystemMatrices, y, init: GaussianState | None = None) -> FilterRun:
    """Innovation-form Kalman filter.

    If ``init`` is omitted the filter starts from the stationary distribution
    of the transition equation.

    Raises
    ------
    InvalidInputError
        On inconsistent shapes, non-finite observations or a non-PSD ``init.P``.
    SingularInnovationError
        When ``F_t`` has condition number above ``1e12``.
    """
    return _run_filter(sys, y, init, score_form=False)


def kalman_filter_score_form(
    sys: SystemMatrices, y, init: GaussianState | None = None
) -> FilterRun:
    """Kalman filter written through the score and Hessian of the predictive density.

    Produces a :class:`FilterRun` equal to :func:`kalman_filter` up to
    round-off.
    """
    return _run_filter(sys, y, init, score_form=True)


def _check_run(sys: SystemMatrices, filt: FilterRun) -> None:
    n = filt.a_pred.shape[0]
    if filt.a_pred.shape != (n, sys.m) or filt.P_pred.shape != (n, sys.m, sys.m):
        raise InvalidInputError("filter output does not match the state dimension")
    if filt.v.shape != (n, sys.p) or filt.K.shape != (n, sys.m, sys.p):
        raise InvalidInputError("filter output does not match the observation dimension")


def kalman_smoother(sys: SystemMatrices, filt: FilterRun) -> SmootherRun:
    """Backward smoothing pass with ``L_t = T - K_t Z`` and ``r_n = 0, N_n = 0``."""
    _check_run(sys, filt)
    return SmootherRun(*_kernels.lgss_smoother_kernel(
        sys.Z, sys.T, filt.F, filt.v, filt.K, filt.a_pred, filt.P_pred))


def kalman_smoother_score_form(sys: SystemMatrices, filt: FilterRun) -> SmootherRun:
    """Backward pass driven by the stored scores and Hessians.

    Uses ``L_t = T (I + P_t H_t)``, ``r_{t-1} = grad_t + L_t' r_t`` and
    ``N_{t-1} = -H_t + L_t' N_t L_t``.
    """
    _check_run(sys, filt)
    return SmootherRun(*_kernels.lgss_smoother_score_kernel(
        sys.T, filt.score, filt.hessian, filt.a_pred, filt.P_pred))
