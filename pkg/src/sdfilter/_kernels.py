"""Compiled scalar-signal densities, score-driven recursions and Kalman recursions.

Every built-in observation model depends on the state only through a scalar
signal ``kappa = omega + Z a``. The log-density and its first two derivatives
with respect to ``kappa`` are written once here as scalar functions and are
shared by the Python model classes, the particle filter and the compiled
filter/smoother loops below.

Family codes: 0 Student-t location, 1 Gaussian scale, 2 Student-t scale,
3 Poisson (identity link), 4 Poisson (log link). ``p1``/``p2`` carry the
family's static parameters: ``(lambda, nu)`` for code 0, ``nu`` in ``p2`` for
code 2 and the intensity floor in ``p1`` for code 3.
"""

import math

import numpy as np
from numba import njit

STUDENT_T_LOCATION = 0
GAUSSIAN_SCALE = 1
STUDENT_T_SCALE = 2
POISSON_IDENTITY = 3
POISSON_LOG = 4

CLIP_VALUE = 1e-10
LOG_2PI = math.log(2.0 * math.pi)


@njit(cache=True)
def _t_const(nu):
    return math.lgamma(0.5 * (nu + 1.0)) - math.lgamma(0.5 * nu)


@njit(cache=True)
def logpdf(code, y, k, p1, p2):
    if code == 0:
        s = (p2 - 2.0) * math.exp(p1)
        u = y - k
        return _t_const(p2) - 0.5 * math.log(math.pi * s) - 0.5 * (p2 + 1.0) * math.log1p(u * u / s)
    if code == 1:
        return -0.5 * (LOG_2PI + k + y * y * math.exp(-k))
    if code == 2:
        w = y * y * math.exp(-k) / (p2 - 2.0)
        return (_t_const(p2) - 0.5 * math.log(math.pi * (p2 - 2.0))
                - 0.5 * k - 0.5 * (p2 + 1.0) * math.log1p(w))
    if code == 3:
        kk = max(k, p1)
        return y * math.log(kk) - kk - math.lgamma(y + 1.0)
    return y * k - math.exp(k) - math.lgamma(y + 1.0)


@njit(cache=True)
def dlogpdf(code, y, k, p1, p2):
    if code == 0:
        s = (p2 - 2.0) * math.exp(p1)
        u = y - k
        return (p2 + 1.0) * u / (s + u * u)
    if code == 1:
        return 0.5 * (y * y * math.exp(-k) - 1.0)
    if code == 2:
        w = y * y * math.exp(-k) / (p2 - 2.0)
        return -0.5 + 0.5 * (p2 + 1.0) * w / (1.0 + w)
    if code == 3:
        kk = max(k, p1)
        return y / kk - 1.0
    return y - math.exp(k)


@njit(cache=True)
def d2logpdf(code, y, k, p1, p2):
    if code == 0:
        s = (p2 - 2.0) * math.exp(p1)
        u = y - k
        den = s + u * u
        return (p2 + 1.0) * (u * u - s) / (den * den)
    if code == 1:
        return -0.5 * y * y * math.exp(-k)
    if code == 2:
        w = y * y * math.exp(-k) / (p2 - 2.0)
        return -0.5 * (p2 + 1.0) * w / ((1.0 + w) * (1.0 + w))
    if code == 3:
        kk = max(k, p1)
        return -y / (kk * kk)
    return -math.exp(k)


@njit(cache=True)
def information(code, k, p1, p2):
    if code == 0:
        s = (p2 - 2.0) * math.exp(p1)
        return p2 * (p2 + 1.0) / ((p2 + 3.0) * s)
    if code == 1:
        return 0.5
    if code == 2:
        return p2 / (2.0 * (p2 + 3.0))
    if code == 3:
        return 1.0 / max(k, p1)
    return math.exp(k)


@njit(cache=True)
def table_normalization(code, k, p1, p2):
    if code == 0:
        return p2 / (p2 + 1.0) * math.exp(2.0 * p1)
    if code == 1 or code == 2:
        return 1.0
    return math.exp(-k)


@njit(cache=True)
def logpdf_many(code, y, kappas, p1, p2):
    out = np.empty(kappas.shape[0])
    for i in range(kappas.shape[0]):
        out[i] = logpdf(code, y, kappas[i], p1, p2)
    return out


@njit(cache=True)
def _clip_psd(M):
    m = M.shape[0]
    if m == 1:
        if M[0, 0] < 0.0:
            M[0, 0] = CLIP_VALUE
            return True
        return False
    S = 0.5 * (M + M.T)
    w, V = np.linalg.eigh(S)
    if w[0] >= 0.0:
        for i in range(m):
            for j in range(m):
                M[i, j] = S[i, j]
        return False
    for i in range(m):
        if w[i] < 0.0:
            w[i] = CLIP_VALUE
    R = (V * w) @ V.T
    for i in range(m):
        for j in range(m):
            M[i, j] = 0.5 * (R[i, j] + R[j, i])
    return True


@njit(cache=True)
def _filter_1d(code, y, z, omega, p1, p2, c, phi, q, a, P, scaled, tinva, d, outer):
    n = y.shape[0]
    a_pred = np.empty((n, 1))
    P_pred = np.empty((n, 1, 1))
    a_upd = np.empty((n, 1))
    P_upd = np.empty((n, 1, 1))
    score = np.empty((n, 1))
    hess = np.empty((n, 1, 1))
    ll = np.empty(n)
    n_clip = 0
    n_floor = 0
    fail = -1
    for t in range(n):
        k = omega + z * a
        if code == 3 and k < p1:
            n_floor += 1
        g = dlogpdf(code, y[t], k, p1, p2)
        if outer:
            h = -g * g
        else:
            h = d2logpdf(code, y[t], k, p1, p2)
        lp = logpdf(code, y[t], k, p1, p2)
        if not (math.isfinite(g) and math.isfinite(h) and math.isfinite(lp)):
            fail = t
            break
        if scaled:
            if d < 0.0:
                s = table_normalization(code, k, p1, p2)
            else:
                s = information(code, k, p1, p2) ** (-d)
            P = tinva * s
            if P < 0.0:
                P = CLIP_VALUE
                n_clip += 1
        grad = z * g
        hz = z * z * h
        a_pred[t, 0] = a
        P_pred[t, 0, 0] = P
        score[t, 0] = grad
        hess[t, 0, 0] = hz
        ll[t] = lp
        a_upd[t, 0] = a + P * grad
        pu = P + P * hz * P
        if pu < 0.0:
            pu = CLIP_VALUE
            n_clip += 1
        P_upd[t, 0, 0] = pu
        a = c + phi * a + phi * P * grad
        if not scaled:
            P = phi * pu * phi + q
    return a_pred, P_pred, a_upd, P_upd, score, hess, ll, n_clip, n_floor, fail


@njit(cache=True)
def sd_filter_kernel(code, y, Z, omega, p1, p2, c, T, Q, a1, P1,
                     scaled, TinvA, d, outer):
    """Forward score-driven recursion for a scalar-signal model.

    Returns the filter arrays plus ``(n_clipped, n_floored, fail_step)``;
    ``fail_step`` is -1 unless a non-finite score or Hessian was met.
    """
    n = y.shape[0]
    m = Z.shape[0]
    if m == 1:
        return _filter_1d(code, y, Z[0], omega, p1, p2, c[0], T[0, 0], Q[0, 0],
                          a1[0], P1[0, 0], scaled, TinvA[0, 0], d, outer)
    a_pred = np.empty((n, m))
    P_pred = np.empty((n, m, m))
    a_upd = np.empty((n, m))
    P_upd = np.empty((n, m, m))
    score = np.empty((n, m))
    hess = np.empty((n, m, m))
    ll = np.empty(n)
    ZZ = np.outer(Z, Z)
    a = a1.copy()
    P = P1.copy()
    n_clip = 0
    n_floor = 0
    fail = -1
    for t in range(n):
        k = omega + np.dot(Z, a)
        if code == 3 and k < p1:
            n_floor += 1
        g = dlogpdf(code, y[t], k, p1, p2)
        if outer:
            h = -g * g
        else:
            h = d2logpdf(code, y[t], k, p1, p2)
        lp = logpdf(code, y[t], k, p1, p2)
        if not (math.isfinite(g) and math.isfinite(h) and math.isfinite(lp)):
            fail = t
            break
        if scaled:
            if d < 0.0:
                s = table_normalization(code, k, p1, p2)
            else:
                s = information(code, k, p1, p2) ** (-d)
            P = TinvA * s
            if _clip_psd(P):
                n_clip += 1
        grad = Z * g
        H = ZZ * h
        PZ = P @ Z
        a_pred[t] = a
        P_pred[t] = P
        score[t] = grad
        hess[t] = H
        ll[t] = lp
        a_upd[t] = a + PZ * g
        Pu = P + h * np.outer(PZ, PZ)
        Pu = 0.5 * (Pu + Pu.T)
        if _clip_psd(Pu):
            n_clip += 1
        P_upd[t] = Pu
        a = c + T @ a + T @ PZ * g
        if not scaled:
            P = T @ Pu @ T.T + Q
            P = 0.5 * (P + P.T)
    return a_pred, P_pred, a_upd, P_upd, score, hess, ll, n_clip, n_floor, fail


@njit(cache=True)
def _smoother_1d(a_pred, P_pred, score, hess, phi, clip):
    n = a_pred.shape[0]
    out_r = np.empty((n, 1))
    out_N = np.empty((n, 1, 1))
    alpha_hat = np.empty((n, 1))
    P_hat = np.empty((n, 1, 1))
    out_L = np.empty((n, 1, 1))
    r = 0.0
    N = 0.0
    n_clip = 0
    for t in range(n - 1, -1, -1):
        P = P_pred[t, 0, 0]
        h = hess[t, 0, 0]
        L = phi * (1.0 + P * h)
        r = score[t, 0] + L * r
        N = -h + L * N * L
        out_r[t, 0] = r
        out_N[t, 0, 0] = N
        out_L[t, 0, 0] = L
        alpha_hat[t, 0] = a_pred[t, 0] + P * r
        ph = P - P * N * P
        if clip and ph < 0.0:
            ph = CLIP_VALUE
            n_clip += 1
        P_hat[t, 0, 0] = ph
    return out_r, out_N, alpha_hat, P_hat, out_L, n_clip


@njit(cache=True)
def sd_smoother_kernel(a_pred, P_pred, score, hess, T, clip):
    n, m = a_pred.shape
    if m == 1:
        return _smoother_1d(a_pred, P_pred, score, hess, T[0, 0], clip)
    r = np.zeros(m)
    N = np.zeros((m, m))
    eye = np.eye(m)
    out_r = np.empty((n, m))
    out_N = np.empty((n, m, m))
    alpha_hat = np.empty((n, m))
    P_hat = np.empty((n, m, m))
    out_L = np.empty((n, m, m))
    n_clip = 0
    for t in range(n - 1, -1, -1):
        P = P_pred[t]
        L = T @ (eye + P @ hess[t])
        r = score[t] + L.T @ r
        N = -hess[t] + L.T @ N @ L
        N = 0.5 * (N + N.T)
        out_r[t] = r
        out_N[t] = N
        out_L[t] = L
        alpha_hat[t] = a_pred[t] + P @ r
        Ph = P - P @ N @ P
        Ph = 0.5 * (Ph + Ph.T)
        if clip and _clip_psd(Ph):
            n_clip += 1
        P_hat[t] = Ph
    return out_r, out_N, alpha_hat, P_hat, out_L, n_clip


# ---------------------------------------------------------------------------
# Exact linear-Gaussian recursions (module lgss)


@njit(cache=True)
def _sym(M):
    return 0.5 * (M + M.T)


@njit(cache=True)
def lgss_filter_kernel(Z, H, T, Q, c, y, a, P, score_form, cond_limit):
    """Kalman filter in innovation form or score form.

    Returns the per-step arrays followed by ``(fail_step, cond)``; ``fail_step``
    is -1 on success, otherwise the step whose ``F_t`` is singular or
    ill-conditioned (the arrays are then only filled up to that step).
    """
    n, p = y.shape
    m = a.shape[0]
    v_out = np.zeros((n, p))
    F_out = np.zeros((n, p, p))
    a_pred = np.zeros((n, m))
    P_pred = np.zeros((n, m, m))
    a_upd = np.zeros((n, m))
    P_upd = np.zeros((n, m, m))
    K_out = np.zeros((n, m, p))
    score = np.zeros((n, m))
    hess = np.zeros((n, m, m))
    ll = np.zeros(n)
    log2pi = math.log(2.0 * math.pi)
    a = a.copy()
    P = P.copy()
    for t in range(n):
        v = y[t] - Z @ a
        F = _sym(Z @ P @ Z.T + H)
        w, V = np.linalg.eigh(F)
        if w[0] <= 0.0:
            return (v_out, F_out, a_pred, P_pred, a_upd, P_upd, K_out, score, hess, ll,
                    t, np.inf)
        if w[-1] / w[0] > cond_limit:
            return (v_out, F_out, a_pred, P_pred, a_upd, P_upd, K_out, score, hess, ll,
                    t, w[-1] / w[0])
        Finv = _sym((V / w) @ V.T)
        Finv_v = Finv @ v
        Finv_Z = Finv @ Z
        logdet = np.sum(np.log(w))
        v_out[t] = v
        F_out[t] = F
        a_pred[t] = a
        P_pred[t] = P
        ll[t] = -0.5 * (p * log2pi + logdet + v @ Finv_v)
        if score_form:
            g = Z.T @ Finv_v
            Hs = -Z.T @ Finv_Z
            TP = T @ P
            a_upd[t] = a + P @ g
            P_upd[t] = _sym(P + P @ Hs @ P)
            K_out[t] = TP @ Finv_Z.T
            score[t] = g
            hess[t] = Hs
            a = c + T @ a + TP @ g
            P = _sym(TP @ (T + TP @ Hs).T + Q)
        else:
            PZt = P @ Z.T
            K = T @ P @ Finv_Z.T
            a_upd[t] = a + PZt @ Finv_v
            P_upd[t] = _sym(P - PZt @ Finv_Z @ P)
            K_out[t] = K
            score[t] = Z.T @ Finv_v
            hess[t] = -Z.T @ Finv_Z
            a = c + T @ a + K @ v
            P = _sym(T @ P @ (T - K @ Z).T + Q)
    return v_out, F_out, a_pred, P_pred, a_upd, P_upd, K_out, score, hess, ll, -1, 0.0


@njit(cache=True)
def lgss_smoother_kernel(Z, T, F, v, K, a_pred, P_pred):
    """Backward pass with ``L_t = T - K_t Z`` from innovation-form output."""
    n, m = a_pred.shape
    r = np.zeros(m)
    N = np.zeros((m, m))
    out_r = np.zeros((n, m))
    out_N = np.zeros((n, m, m))
    alpha_hat = np.zeros((n, m))
    P_hat = np.zeros((n, m, m))
    out_L = np.zeros((n, m, m))
    for t in range(n - 1, -1, -1):
        Finv = np.linalg.inv(F[t])
        Finv = _sym(Finv)
        L = T - K[t] @ Z
        r = Z.T @ (Finv @ v[t]) + L.T @ r
        N = _sym(Z.T @ Finv @ Z + L.T @ N @ L)
        P = P_pred[t]
        out_r[t] = r
        out_N[t] = N
        out_L[t] = L
        alpha_hat[t] = a_pred[t] + P @ r
        P_hat[t] = _sym(P - P @ N @ P)
    return out_r, out_N, alpha_hat, P_hat, out_L


@njit(cache=True)
def lgss_smoother_score_kernel(T, score, hess, a_pred, P_pred):
    """Backward pass with ``L_t = T (I + P_t H_t)`` from stored scores and Hessians."""
    n, m = a_pred.shape
    eye = np.eye(m)
    r = np.zeros(m)
    N = np.zeros((m, m))
    out_r = np.zeros((n, m))
    out_N = np.zeros((n, m, m))
    alpha_hat = np.zeros((n, m))
    P_hat = np.zeros((n, m, m))
    out_L = np.zeros((n, m, m))
    for t in range(n - 1, -1, -1):
        P = P_pred[t]
        L = T @ (eye + P @ hess[t])
        r = score[t] + L.T @ r
        N = _sym(-hess[t] + L.T @ N @ L)
        out_r[t] = r
        out_N[t] = N
        out_L[t] = L
        alpha_hat[t] = a_pred[t] + P @ r
        P_hat[t] = _sym(P - P @ N @ P)
    return out_r, out_N, alpha_hat, P_hat, out_L
