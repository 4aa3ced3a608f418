"""Score-driven filtering, updating and smoothing for arbitrary observation densities.

The recursions are the score form of the Kalman filter with the score and
Hessian of a general conditional log-density evaluated at the predictive
filter ``a_t``::

    a_t|t   = a_t + P_t grad_t
    a_t+1   = c + T a_t + T P_t grad_t
    P_t|t   = P_t + P_t H_t P_t
    P_t+1   = T P_t|t T' + Q              (Kalman-consistent normalization)

Under a scaled-score normalization the covariance is instead implied by the
score loading, ``P_t = T^-1 A S_t``.

Models exposing ``kernel_args()`` (all built-in scalar-signal families) run
through compiled loops; any other object implementing the observation model
interface runs through the reference Python loop.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import (
    IdentificationError,
    InvalidInputError,
    InvalidParameterError,
    NumericalFailureError,
)
from .lgss import GaussianState, SmootherRun, check_psd, stationary_state, symmetrize

log = logging.getLogger(__name__)


@dataclass
class TransitionSpec:
    """Linear transition ``alpha_t+1 = c + T alpha_t + eta_t`` with ``Var(eta) = Q``."""

    c: np.ndarray
    T: np.ndarray
    Q: np.ndarray

    def __post_init__(self):
        self.T = np.atleast_2d(np.asarray(self.T, dtype=float))
        m = self.T.shape[0]
        self.c = np.asarray(self.c, dtype=float).reshape(-1)
        if self.c.size == 1 and m > 1:
            self.c = np.full(m, self.c[0])
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        if self.T.shape != (m, m) or self.Q.shape != (m, m) or self.c.shape != (m,):
            raise InvalidInputError("transition dimensions are inconsistent")
        if not (np.all(np.isfinite(self.T)) and np.all(np.isfinite(self.Q))
                and np.all(np.isfinite(self.c))):
            raise InvalidInputError("transition has non-finite entries")
        check_psd(self.Q, "Q")

    @classmethod
    def univariate(cls, c: float, phi: float, q: float) -> "TransitionSpec":
        return cls(np.array([c]), np.array([[phi]]), np.array([[q]]))

    @property
    def m(self) -> int:
        return self.T.shape[0]

    def stationary(self) -> GaussianState:
        return stationary_state(self.T, self.c, self.Q)


@dataclass(frozen=True)
class KalmanConsistent:
    """Normalization ``S_t = A^-1 T P_t`` with ``P_t`` from the covariance recursion."""

    name = "kalman"


@dataclass
class ScaledScore:
    """Normalization ``A S_t`` with the implied covariance ``P_t = T^-1 A S_t``.

    ``d=None`` uses the model's own normalization (``model.normalization``);
    otherwise ``S_t`` is the conditional information raised to ``-d``.
    """

    A: np.ndarray
    d: float | None = None
    name = "scaled"

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        if self.A.shape[0] != self.A.shape[1]:
            raise InvalidInputError("A must be square")
        if np.linalg.matrix_rank(self.A) < self.A.shape[1]:
            raise InvalidParameterError("A must have full column rank")
        if self.d is not None and self.d not in (0, 0.5, 1):
            raise InvalidParameterError("d must be one of 0, 0.5, 1")


@dataclass
class SdFilterRun:
    """Per-step output of :func:`sd_filter` (time-major arrays)."""

    a_pred: np.ndarray
    P_pred: np.ndarray
    a_upd: np.ndarray
    P_upd: np.ndarray
    score: np.ndarray
    hessian: np.ndarray
    loglik_terms: np.ndarray
    normalization: object = field(default_factory=KalmanConsistent)
    obs_dim: int = 1
    n_clipped: int = 0
    n_floored: int = 0

    @property
    def n(self) -> int:
        return self.a_pred.shape[0]


def _scaled_inputs(norm: ScaledScore, trans: TransitionSpec) -> np.ndarray:
    if norm.A.shape != trans.T.shape:
        raise InvalidInputError("A must match the state dimension")
    try:
        return np.linalg.solve(trans.T, norm.A)
    except np.linalg.LinAlgError:
        raise InvalidParameterError("T must be invertible under a scaled-score normalization")


def _inverse_power(info: np.ndarray, d: float) -> np.ndarray:
    if d == 0:
        return np.eye(info.shape[0])
    w, V = np.linalg.eigh(symmetrize(info))
    if w.min() <= 0.0:
        raise IdentificationError(
            "conditional information is singular; use the Kalman-consistent normalization"
        )
    return (V * w ** (-d)) @ V.T


def sd_filter(
    model,
    trans: TransitionSpec,
    y,
    norm=None,
    init: GaussianState | None = None,
    hessian: str = "exact",
    use_kernel: bool | None = None,
    report: bool = True,
) -> SdFilterRun:
    """Run the score-driven predictive and update filters.

    Parameters
    ----------
    model : observation model
        Object exposing ``score``, ``hessian``, ``log_density`` (and
        ``information``/``normalization`` for scaled scores).
    trans : TransitionSpec
    y : array_like
        Observations, shape ``(n,)`` for scalar observations.
    norm : KalmanConsistent or ScaledScore, default KalmanConsistent
    init : GaussianState, optional
        Defaults to the stationary distribution of ``trans``.
    hessian : {"exact", "outer"}
        ``"outer"`` replaces the Hessian by minus the squared score in the
        variance recursion.
    use_kernel : bool, optional
        Force (or forbid) the compiled loop. By default it is used whenever
        the model supports it.
    report : bool
        Log PSD-enforcement and intensity-floor counts. Likelihood
        optimization turns this off.

    Raises
    ------
    NumericalFailureError
        If the score, Hessian or log-density is not finite at some step.
    """
    norm = KalmanConsistent() if norm is None else norm
    if hessian not in ("exact", "outer"):
        raise InvalidInputError("hessian must be 'exact' or 'outer'")
    m = trans.m
    if getattr(model, "state_dim", m) != m:
        raise InvalidInputError("model and transition state dimensions differ")
    y = np.asarray(y, dtype=float)
    if y.shape[0] < 1 or not np.all(np.isfinite(y)):
        raise InvalidInputError("observations must be finite and non-empty")
    if init is None:
        init = trans.stationary()
    if init.a.size != m:
        raise InvalidInputError(f"initial state must have dimension {m}")

    scaled = isinstance(norm, ScaledScore)
    TinvA = _scaled_inputs(norm, trans) if scaled else np.zeros((m, m))
    kernel_ok = hasattr(model, "kernel_args") and (not scaled or m == 1)
    if use_kernel is None:
        use_kernel = kernel_ok
    if use_kernel and not kernel_ok:
        raise InvalidInputError("model/normalization has no compiled path")

    outer = hessian == "outer"
    if use_kernel:
        code, Z, omega, p1, p2 = model.kernel_args()
        d = -1.0 if (not scaled or norm.d is None) else float(norm.d)
        out = _kernels.sd_filter_kernel(
            code, np.ascontiguousarray(y.reshape(-1)), Z, omega, p1, p2,
            trans.c, trans.T, trans.Q, init.a, init.P, scaled, TinvA, d, outer,
        )
        *arrays, n_clip, n_floor, fail = out
        if fail >= 0:
            raise NumericalFailureError("non-finite score or Hessian", step=int(fail))
        run = SdFilterRun(*arrays, normalization=norm, obs_dim=1,
                          n_clipped=int(n_clip), n_floored=int(n_floor))
    else:
        run = _sd_filter_python(model, trans, y, norm, init, TinvA, outer)
    if report:
        _log_enforcement(run)
    return run


def _clip(M: np.ndarray) -> tuple[np.ndarray, bool]:
    M = symmetrize(M)
    if M.shape[0] == 1:
        if M[0, 0] < 0.0:
            return np.full((1, 1), _kernels.CLIP_VALUE), True
        return M, False
    w, V = np.linalg.eigh(M)
    if w[0] >= 0.0:
        return M, False
    w = np.where(w < 0.0, _kernels.CLIP_VALUE, w)
    return symmetrize((V * w) @ V.T), True


def _sd_filter_python(model, trans, y, norm, init, TinvA, outer) -> SdFilterRun:
    c, T, Q = trans.c, trans.T, trans.Q
    n, m = y.shape[0], trans.m
    scaled = isinstance(norm, ScaledScore)
    a, P = init.a.copy(), init.P.copy()
    a_pred = np.empty((n, m))
    P_pred = np.empty((n, m, m))
    a_upd = np.empty((n, m))
    P_upd = np.empty((n, m, m))
    score = np.empty((n, m))
    hess = np.empty((n, m, m))
    ll = np.empty(n)
    n_clip = 0

    for t in range(n):
        if scaled:
            if norm.d is None:
                S = model.normalization(a)
            else:
                S = _inverse_power(model.information(a, P), norm.d)
            P, clipped = _clip(TinvA @ S)
            n_clip += clipped
        grad = np.asarray(model.score(y[t], a, P), dtype=float).reshape(m)
        if outer:
            H = -np.outer(grad, grad)
        else:
            H = np.asarray(model.hessian(y[t], a, P), dtype=float).reshape(m, m)
        lp = float(model.log_density(y[t], a, P))
        if not (np.all(np.isfinite(grad)) and np.all(np.isfinite(H)) and np.isfinite(lp)):
            raise NumericalFailureError("non-finite score or Hessian", step=t, state=(a, P))
        a_pred[t] = a
        P_pred[t] = P
        score[t] = grad
        hess[t] = H
        ll[t] = lp
        a_upd[t] = a + P @ grad
        Pu, clipped = _clip(P + P @ H @ P)
        n_clip += clipped
        P_upd[t] = Pu
        a = c + T @ a + T @ P @ grad
        if not scaled:
            P = symmetrize(T @ Pu @ T.T + Q)

    return SdFilterRun(a_pred, P_pred, a_upd, P_upd, score, hess, ll,
                       normalization=norm, obs_dim=getattr(model, "obs_dim", 1),
                       n_clipped=n_clip)


def _log_enforcement(run: SdFilterRun) -> None:
    if run.n_clipped > 0.01 * 2 * run.n:
        log.warning("PSD enforcement triggered on %d of %d covariances",
                    run.n_clipped, 2 * run.n)
    if run.n_floored:
        log.info("intensity floor applied at %d steps", run.n_floored)


def sd_smoother(model, trans: TransitionSpec, run: SdFilterRun, clip: bool = True,
                report: bool = True) -> SmootherRun:
    """Backward smoothing pass over a score-driven filter run.

    ``clip`` floors negative smoothed variances at ``1e-10``; ``report`` logs
    the clip count when it exceeds 1% of the steps.

    Raises
    ------
    IdentificationError
        For scaled-score runs with more states than observed signals, where
        ``P_t`` (and hence the smoother) is not identified.
    """
    m = trans.m
    if run.a_pred.shape[1] != m:
        raise InvalidInputError("filter run does not match the transition")
    if isinstance(run.normalization, ScaledScore) and m > run.obs_dim:
        raise IdentificationError(
            "with more latent components than signals only P_t Z' is identified under a "
            "scaled score; rerun the filter with the Kalman-consistent normalization"
        )
    r, N, alpha_hat, P_hat, L, n_clip = _kernels.sd_smoother_kernel(
        run.a_pred, run.P_pred, run.score, run.hessian, trans.T, clip
    )
    if report and n_clip > 0.01 * run.n:
        log.warning("smoothed covariance clipped at %d of %d steps", n_clip, run.n)
    return SmootherRun(r, N, alpha_hat, P_hat, L, n_clipped=int(n_clip))


def sd_loglik(run: SdFilterRun) -> float:
    """Approximate log-likelihood: the sum of ``log p(y_t | alpha_t)`` at ``a_t``."""
    bad = np.flatnonzero(~np.isfinite(run.loglik_terms))
    if bad.size:
        raise NumericalFailureError("non-finite log-likelihood contribution", step=int(bad[0]))
    return float(np.sum(run.loglik_terms))
