"""Bootstrap particle filter and backward-simulation particle smoother.

These provide the simulation-based reference ("oracle") against which the
score-driven approximations are measured. All random numbers are drawn up
front from a ``numpy.random.Generator`` so that the compiled and the pure
numpy paths consume identical streams and results depend only on the seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from . import _kernels as K
from .errors import InvalidInputError, ParticleDegeneracyError
from .lgss import GaussianState, symmetrize

MIN_PARTICLES = 100


@dataclass
class ParticleCloud:
    """Weighted particle approximation at one step."""

    particles: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.particles = np.asarray(self.particles, dtype=float)
        if self.particles.ndim == 1:
            self.particles = self.particles[:, None]
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (self.particles.shape[0],) or np.any(w < 0):
            raise InvalidInputError("weights must be non-negative, one per particle")
        self.weights = w / w.sum()

    @property
    def ess(self) -> float:
        return float(1.0 / np.sum(self.weights ** 2))

    def mean(self) -> np.ndarray:
        return self.weights @ self.particles

    def cov(self) -> np.ndarray:
        d = self.particles - self.mean()
        return (d * self.weights[:, None]).T @ d


@dataclass
class ParticleFilterRun:
    """Per-step moments of the predictive and filtering particle clouds."""

    pred_mean: np.ndarray
    pred_var: np.ndarray
    filt_mean: np.ndarray
    filt_var: np.ndarray
    loglik: float
    ess: np.ndarray
    resampled: np.ndarray
    particles: np.ndarray | None = None
    weights: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.filt_mean.shape[0]

    def cloud(self, t: int) -> ParticleCloud:
        if self.particles is None:
            raise InvalidInputError("particle clouds were not retained")
        return ParticleCloud(self.particles[t], self.weights[t])


@dataclass
class ParticleSmootherRun:
    """Smoothed moments from ``M`` backward trajectories."""

    mean: np.ndarray
    var: np.ndarray
    trajectories: np.ndarray


def _noise_factor(Q: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(symmetrize(Q))
    return V * np.sqrt(np.clip(w, 0.0, None))


@njit(cache=True)
def _systematic(W, u, out):
    N = W.shape[0]
    cum = 0.0
    j = 0
    for i in range(N):
        pos = (u + i) / N
        while j < N - 1 and cum + W[j] < pos:
            cum += W[j]
            j += 1
        out[i] = j


def systematic_resample(weights, u: float) -> np.ndarray:
    """Indices drawn by systematic resampling with offset ``u`` in [0, 1)."""
    W = np.ascontiguousarray(weights, dtype=float)
    idx = np.empty(W.shape[0], dtype=np.int64)
    _systematic(W / W.sum(), float(u), idx)
    return idx


@njit(cache=True)
def _moments(X, W, mean, cov):
    N, m = X.shape
    for i in range(m):
        s = 0.0
        for k in range(N):
            s += W[k] * X[k, i]
        mean[i] = s
    for i in range(m):
        for j in range(i, m):
            s = 0.0
            for k in range(N):
                s += W[k] * (X[k, i] - mean[i]) * (X[k, j] - mean[j])
            cov[i, j] = s
            cov[j, i] = s


@njit(cache=True)
def _pf_kernel(code, y, Z, omega, p1, p2, c, T, L, X0, eps, u, store):
    n = y.shape[0]
    N, m = X0.shape
    pred_mean = np.empty((n, m))
    pred_var = np.empty((n, m, m))
    filt_mean = np.empty((n, m))
    filt_var = np.empty((n, m, m))
    ess = np.empty(n)
    resampled = np.zeros(n, dtype=np.bool_)
    Xs = np.empty((n if store else 0, N, m))
    Ws = np.empty((n if store else 0, N))
    X = X0.copy()
    Xn = np.empty((N, m))
    W = np.full(N, 1.0 / N)
    lw = np.empty(N)
    idx = np.empty(N, dtype=np.int64)
    loglik = 0.0
    for t in range(n):
        _moments(X, W, pred_mean[t], pred_var[t])
        mx = -np.inf
        for k in range(N):
            kap = omega
            for i in range(m):
                kap += Z[i] * X[k, i]
            lw[k] = (math.log(W[k]) if W[k] > 0.0 else -np.inf) + K.logpdf(code, y[t], kap, p1, p2)
            if lw[k] > mx:
                mx = lw[k]
        if not math.isfinite(mx):
            return (pred_mean, pred_var, filt_mean, filt_var, loglik, ess, resampled,
                    Xs, Ws, t)
        s = 0.0
        for k in range(N):
            W[k] = math.exp(lw[k] - mx)
            s += W[k]
        loglik += mx + math.log(s)
        s2 = 0.0
        for k in range(N):
            W[k] /= s
            s2 += W[k] * W[k]
        ess[t] = 1.0 / s2
        _moments(X, W, filt_mean[t], filt_var[t])
        if store:
            Xs[t] = X
            Ws[t] = W
        if t == n - 1:
            break
        if ess[t] < 0.5 * N:
            _systematic(W, u[t], idx)
            for k in range(N):
                Xn[k] = X[idx[k]]
            W[:] = 1.0 / N
            resampled[t] = True
        else:
            Xn[:, :] = X
        for k in range(N):
            for i in range(m):
                v = c[i]
                for j in range(m):
                    v += T[i, j] * Xn[k, j] + L[i, j] * eps[t, k, j]
                X[k, i] = v
    return pred_mean, pred_var, filt_mean, filt_var, loglik, ess, resampled, Xs, Ws, -1


def _pf_python(model, y, c, T, L, X0, eps, u, store):
    n = y.shape[0]
    N, m = X0.shape
    pred_mean = np.empty((n, m))
    pred_var = np.empty((n, m, m))
    filt_mean = np.empty((n, m))
    filt_var = np.empty((n, m, m))
    ess = np.empty(n)
    resampled = np.zeros(n, dtype=bool)
    Xs = np.empty((n if store else 0, N, m))
    Ws = np.empty((n if store else 0, N))
    X = X0.copy()
    W = np.full(N, 1.0 / N)
    loglik = 0.0
    for t in range(n):
        _moments(X, W, pred_mean[t], pred_var[t])
        with np.errstate(divide="ignore"):
            lw = np.log(W) + model.particle_log_density(y[t], X)
        mx = lw.max()
        if not np.isfinite(mx):
            raise ParticleDegeneracyError(t)
        w = np.exp(lw - mx)
        s = w.sum()
        loglik += mx + np.log(s)
        W = w / s
        ess[t] = 1.0 / np.sum(W * W)
        _moments(X, W, filt_mean[t], filt_var[t])
        if store:
            Xs[t] = X
            Ws[t] = W
        if t == n - 1:
            break
        if ess[t] < 0.5 * N:
            X = X[systematic_resample(W, u[t])]
            W = np.full(N, 1.0 / N)
            resampled[t] = True
        X = c + X @ T.T + eps[t] @ L.T
    return pred_mean, pred_var, filt_mean, filt_var, loglik, ess, resampled, Xs, Ws


@dataclass
class PfRandoms:
    """Standard normal and uniform draws consumed by one particle-filter run."""

    z0: np.ndarray
    eps: np.ndarray
    u: np.ndarray


def draw_randoms(n: int, N: int, m: int, seed=None) -> PfRandoms:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    z0 = rng.standard_normal((N, m))
    eps = rng.standard_normal((n, N, m))
    return PfRandoms(z0, eps, rng.random(n))


def particle_filter(model, trans, y, N: int = 1000, seed=None,
                    init: GaussianState | None = None, store: bool = True,
                    use_kernel: bool | None = None,
                    randoms: "PfRandoms | None" = None) -> ParticleFilterRun:
    """Bootstrap particle filter with ESS-triggered systematic resampling.

    Particles are propagated through the transition, weighted by the
    observation density and resampled whenever the effective sample size
    drops below ``N / 2``. The log-likelihood estimate accumulates the log of
    the weighted mean incremental weight.

    Parameters
    ----------
    model : observation model
        Must provide ``particle_log_density`` (or ``kernel_args``).
    trans : TransitionSpec
    y : array_like
    N : int
        Number of particles, at least 100.
    seed : int, SeedSequence or Generator
    init : GaussianState, optional
        Initial state distribution; stationary by default.
    store : bool
        Retain per-step clouds (needed by :func:`particle_smoother`).
    randoms : PfRandoms, optional
        Pre-drawn random numbers; passing the same bundle to repeated calls
        gives common random numbers across parameter values.

    Raises
    ------
    ParticleDegeneracyError
        If every particle weight underflows at some step.
    """
    if N < MIN_PARTICLES:
        raise InvalidInputError(f"N must be at least {MIN_PARTICLES}")
    y = np.asarray(y, dtype=float)
    if y.ndim != 1 and not (y.ndim == 2 and not hasattr(model, "kernel_args")):
        raise InvalidInputError("observations must be a 1-d array")
    if y.shape[0] < 1 or not np.all(np.isfinite(y)):
        raise InvalidInputError("observations must be finite and non-empty")
    rand = randoms if randoms is not None else draw_randoms(y.shape[0], N, trans.m, seed)
    if rand.eps.shape[:2] != (y.shape[0], N) or rand.eps.shape[2] != trans.m:
        raise InvalidInputError("pre-drawn random numbers do not match (n, N, m)")
    init = trans.stationary() if init is None else init
    L0 = _noise_factor(init.P)
    L = _noise_factor(trans.Q)
    X0 = init.a + rand.z0 @ L0.T
    eps, u = rand.eps, rand.u
    if use_kernel is None:
        use_kernel = hasattr(model, "kernel_args")
    if use_kernel:
        code, Z, omega, p1, p2 = model.kernel_args()
        *out, fail = _pf_kernel(code, y, Z, omega, p1, p2, trans.c, trans.T, L, X0, eps, u,
                                store)
        if fail >= 0:
            raise ParticleDegeneracyError(int(fail))
    else:
        out = _pf_python(model, y, trans.c, trans.T, L, X0, eps, u, store)
    pm, pv, fm, fv, ll, ess, res, Xs, Ws = out
    return ParticleFilterRun(pm, pv, fm, fv, float(ll), ess, res,
                             Xs if store else None, Ws if store else None)


@njit(cache=True)
def _pick(cum, pos):
    # first index with cum[k] >= pos (binary search)
    lo = 0
    hi = cum.shape[0] - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if cum[mid] < pos:
            lo = mid + 1
        else:
            hi = mid
    return lo


@njit(cache=True)
def _pick_row(cum, t, pos):
    lo = 0
    hi = cum.shape[1] - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if cum[t, mid] < pos:
            lo = mid + 1
        else:
            hi = mid
    return lo


@njit(cache=True, fastmath=True)
def _ffbsi_1d(x, W, c, phi, q, M, seed, max_tries):
    np.random.seed(seed)
    n, N = x.shape
    traj = np.empty((n, M))
    cum = np.empty((n, N))
    for t in range(n):
        s = 0.0
        for k in range(N):
            s += W[t, k]
            cum[t, k] = s
        for k in range(N):
            cum[t, k] /= s
    lb = np.empty(N)
    h = 0.5 / q
    n_exact = 0
    for j in range(M):
        k = _pick_row(cum, n - 1, np.random.random())
        traj[n - 1, j] = x[n - 1, k]
        for t in range(n - 2, -1, -1):
            target = traj[t + 1, j] - c
            found = -1
            for _ in range(max_tries):
                k = _pick_row(cum, t, np.random.random())
                d = target - phi * x[t, k]
                if np.random.random() < math.exp(-h * d * d):
                    found = k
                    break
            if found < 0:
                n_exact += 1
                dmin = np.inf
                for k in range(N):
                    d = target - phi * x[t, k]
                    d = d * d
                    lb[k] = d
                    if d < dmin:
                        dmin = d
                s = 0.0
                for k in range(N):
                    s += W[t, k] * math.exp(-h * (lb[k] - dmin))
                    lb[k] = s
                found = _pick(lb, np.random.random() * s)
            traj[t, j] = x[t, found]
    return traj, n_exact


@njit(cache=True)
def _ffbsi_kernel(X, W, c, T, Qinv, M, seed, max_tries):
    np.random.seed(seed)
    n, N, m = X.shape
    traj = np.empty((n, M, m))
    cum = np.empty((n, N))
    for t in range(n):
        s = 0.0
        for k in range(N):
            s += W[t, k]
            cum[t, k] = s
        for k in range(N):
            cum[t, k] /= s
    lb = np.empty(N)
    d = np.empty(m)
    n_exact = 0
    for j in range(M):
        k = _pick(cum[n - 1], np.random.random())
        traj[n - 1, j] = X[n - 1, k]
        for t in range(n - 2, -1, -1):
            nxt = traj[t + 1, j]
            found = -1
            # rejection step: the Gaussian kernel is bounded by its value at zero
            for _ in range(max_tries):
                k = _pick(cum[t], np.random.random())
                q = 0.0
                for i in range(m):
                    v = nxt[i] - c[i]
                    for l in range(m):
                        v -= T[i, l] * X[t, k, l]
                    d[i] = v
                for i in range(m):
                    for l in range(m):
                        q += d[i] * Qinv[i, l] * d[l]
                if np.random.random() < math.exp(-0.5 * q):
                    found = k
                    break
            if found < 0:
                n_exact += 1
                qmin = np.inf
                for k in range(N):
                    q = 0.0
                    for i in range(m):
                        v = nxt[i] - c[i]
                        for l in range(m):
                            v -= T[i, l] * X[t, k, l]
                        d[i] = v
                    for i in range(m):
                        for l in range(m):
                            q += d[i] * Qinv[i, l] * d[l]
                    lb[k] = q
                    if q < qmin:
                        qmin = q
                s = 0.0
                for k in range(N):
                    s += W[t, k] * math.exp(-0.5 * (lb[k] - qmin))
                    lb[k] = s
                found = _pick(lb, np.random.random() * s)
            traj[t, j] = X[t, found]
    return traj, n_exact


def particle_smoother(filt: ParticleFilterRun, trans, M: int = 100, seed=None,
                      max_tries: int = 32) -> ParticleSmootherRun:
    """Backward-simulation smoother drawing ``M`` trajectories.

    Each trajectory starts from the final filtering cloud and moves backwards
    by resampling the step-``t`` particles with weights proportional to
    ``W_t^i p(x_t+1 | x_t^i)``. Draws use rejection sampling against the
    bounded Gaussian transition kernel, falling back to the exact O(N) draw
    after ``max_tries`` rejections; either way the draw is exact.
    """
    if filt.particles is None:
        raise InvalidInputError("the filter run must retain its particle clouds")
    if M < 1:
        raise InvalidInputError("M must be positive")
    w = np.linalg.eigvalsh(symmetrize(trans.Q))
    if w.min() <= 0.0:
        raise InvalidInputError("backward simulation needs a non-singular transition covariance")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    kseed = int(rng.integers(0, 2**32 - 1))
    Qinv = np.linalg.inv(trans.Q)
    if trans.m == 1:
        traj, _ = _ffbsi_1d(np.ascontiguousarray(filt.particles[:, :, 0]), filt.weights,
                            trans.c[0], trans.T[0, 0], trans.Q[0, 0], M, kseed, max_tries)
        traj = traj[:, :, None]
    else:
        traj, _ = _ffbsi_kernel(filt.particles, filt.weights, trans.c, trans.T, Qinv, M,
                                kseed, max_tries)
    mean = traj.mean(axis=1)
    d = traj - mean[:, None, :]
    var = np.einsum("tki,tkj->tij", d, d) / M
    return ParticleSmootherRun(mean, var, traj)
