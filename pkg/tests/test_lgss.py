import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import stats

from conftest import assert_rel_close, random_init, random_system, simulate_linear
from sdfilter.errors import InvalidInputError, SingularInnovationError
from sdfilter.lgss import (
    GaussianState,
    SystemMatrices,
    kalman_filter,
    kalman_filter_score_form,
    kalman_smoother,
    kalman_smoother_score_form,
    stationary_state,
)

GOLDEN = (1 + np.sqrt(5)) / 2


def local_level(h=1.0, q=1.0):
    return SystemMatrices(Z=[[1.0]], H=[[h]], T=[[1.0]], Q=[[q]], c=[0.0])


def joint_loglik(sys, y, init):
    """Log-density of the stacked observation vector, built from the joint moments."""
    n, p = y.shape
    m = sys.m
    means = np.empty((n, m))
    covs = np.empty((n, m, m))
    means[0], covs[0] = init.a, init.P
    for t in range(1, n):
        means[t] = sys.c + sys.T @ means[t - 1]
        covs[t] = sys.T @ covs[t - 1] @ sys.T.T + sys.Q
    S = np.zeros((n * p, n * p))
    for s in range(n):
        cross = covs[s]
        for t in range(s, n):
            block = sys.Z @ cross @ sys.Z.T
            S[t * p:(t + 1) * p, s * p:(s + 1) * p] = block
            S[s * p:(s + 1) * p, t * p:(t + 1) * p] = block.T
            cross = sys.T @ cross
        S[s * p:(s + 1) * p, s * p:(s + 1) * p] += sys.H
    mu = (means @ sys.Z.T).reshape(-1)
    return stats.multivariate_normal(mu, S).logpdf(y.reshape(-1))


def test_zero_transition_keeps_prediction_fixed():
    sys = SystemMatrices(Z=[[1.0]], H=[[1.0]], T=[[0.0]], Q=[[1.0]], c=[0.0])
    y = np.random.default_rng(0).standard_normal(20)
    run = kalman_filter(sys, y, GaussianState([0.0], [[1.0]]))
    assert_allclose(run.a_pred, 0.0)
    assert_allclose(run.P_pred, 1.0)
    assert_allclose(run.F, 2.0)


@pytest.mark.parametrize("filt", [kalman_filter, kalman_filter_score_form])
def test_local_level_golden_ratio(filt):
    # fixed point of p -> p / (p + 1) + 1, iterated independently
    p = 1.0
    for _ in range(200):
        p = p / (p + 1) + 1
    assert abs(p - GOLDEN) < 1e-15
    run = filt(local_level(), np.zeros(60), GaussianState([0.0], [[1.0]]))
    assert abs(run.P_pred[50, 0, 0] - p) < 1e-9


def test_loglik_matches_joint_density(rng):
    sys = random_system(rng, 2, 2)
    y = simulate_linear(rng, sys, 200)
    init = random_init(rng, 2)
    run = kalman_filter(sys, y, init)
    assert_allclose(run.loglik, joint_loglik(sys, y, init), rtol=1e-9)


def test_loglik_matches_per_step_density(rng):
    sys = random_system(rng, 2, 1)
    y = simulate_linear(rng, sys, 50)
    run = kalman_filter(sys, y)
    direct = [stats.multivariate_normal(sys.Z @ run.a_pred[t], run.F[t]).logpdf(y[t])
              for t in range(50)]
    assert_allclose(run.loglik_terms, direct, rtol=1e-12)


def test_smoother_last_step_equals_update(rng):
    sys = random_system(rng, 3, 2)
    y = simulate_linear(rng, sys, 40)
    run = kalman_filter(sys, y)
    sm = kalman_smoother(sys, run)
    assert_allclose(sm.alpha_hat[-1], run.a_upd[-1], atol=1e-12)
    assert_allclose(sm.P_hat[-1], run.P_upd[-1], atol=1e-12)


def test_fixed_state_smoother_is_gls(rng):
    m, p, n = 2, 3, 30
    Z = rng.standard_normal((p, m))
    H = np.diag(rng.uniform(0.5, 2.0, p))
    sys = SystemMatrices(Z=Z, H=H, T=np.eye(m), Q=np.zeros((m, m)), c=np.zeros(m))
    init = GaussianState(np.array([0.3, -0.2]), np.diag([2.0, 0.5]))
    y = rng.standard_normal((n, p)) + Z @ np.array([1.0, -1.0])
    sm = kalman_smoother(sys, kalman_filter(sys, y, init))
    Hi = np.linalg.inv(H)
    P1i = np.linalg.inv(init.P)
    prec = P1i + n * Z.T @ Hi @ Z
    gls = np.linalg.solve(prec, P1i @ init.a + Z.T @ Hi @ y.sum(axis=0))
    assert_allclose(sm.alpha_hat, np.tile(gls, (n, 1)), atol=1e-10)


def test_monotone_uncertainty(rng):
    sys = random_system(rng, 2, 1)
    y = simulate_linear(rng, sys, 100)
    run = kalman_filter(sys, y)
    sm = kalman_smoother(sys, run)
    for t in range(100):
        assert np.linalg.eigvalsh(run.P_upd[t] - sm.P_hat[t]).min() >= -1e-9
        assert np.linalg.eigvalsh(run.P_pred[t] - run.P_upd[t]).min() >= -1e-9
        assert np.linalg.eigvalsh(sm.N[t]).min() >= -1e-9


def test_covariances_symmetric(rng):
    sys = random_system(rng, 3, 2)
    y = simulate_linear(rng, sys, 60)
    run = kalman_filter_score_form(sys, y)
    sm = kalman_smoother_score_form(sys, run)
    for M in (run.P_pred, run.P_upd, sm.P_hat, sm.N):
        assert np.abs(M - np.swapaxes(M, 1, 2)).max() <= 1e-12


def test_score_form_zero_covariance_no_update():
    sys = SystemMatrices(Z=[[1.0]], H=[[1.0]], T=[[0.5]], Q=[[1.0]], c=[0.0])
    run = kalman_filter_score_form(sys, [3.0], GaussianState([0.2], [[0.0]]))
    assert run.a_upd[0, 0] == 0.2
    assert run.P_upd[0, 0, 0] == 0.0


def test_loading_identity(rng):
    # T (I + P H) equals T - K Z at every step
    sys = random_system(rng, 3, 2)
    y = simulate_linear(rng, sys, 30)
    run = kalman_filter(sys, y)
    sm = kalman_smoother_score_form(sys, run)
    for t in range(30):
        assert_allclose(sm.L[t], sys.T - run.K[t] @ sys.Z, atol=1e-12)


def test_single_observation_smoother(rng):
    sys = random_system(rng, 2, 1)
    run = kalman_filter_score_form(sys, [[0.7]])
    sm = kalman_smoother_score_form(sys, run)
    assert_allclose(sm.r[0], run.score[0], atol=1e-14)
    assert_allclose(sm.alpha_hat[0], run.a_pred[0] + run.P_pred[0] @ run.score[0], atol=1e-14)


def test_forms_agree_on_random_systems(rng):
    for _ in range(20):
        m, p = rng.integers(1, 4, size=2)
        sys = random_system(rng, m, p)
        y = simulate_linear(rng, sys, 100)
        a, b = kalman_filter(sys, y), kalman_filter_score_form(sys, y)
        sa, sb = kalman_smoother(sys, a), kalman_smoother_score_form(sys, b)
        for f in ("a_pred", "P_pred", "a_upd", "P_upd", "loglik_terms"):
            assert_rel_close(getattr(b, f), getattr(a, f), 1e-10)
        for f in ("r", "N", "alpha_hat", "P_hat"):
            assert_rel_close(getattr(sb, f), getattr(sa, f), 1e-10)


def test_stationary_state_univariate_and_lyapunov(rng):
    st = stationary_state([[0.9]], [0.1], [[0.19]])
    assert_allclose(st.a, [1.0])
    assert_allclose(st.P, [[1.0]])
    T = np.array([[0.5, 0.2], [0.0, 0.3]])
    Q = np.eye(2)
    st = stationary_state(T, np.zeros(2), Q)
    assert_allclose(st.P, T @ st.P @ T.T + Q, atol=1e-12)
    with pytest.raises(InvalidInputError):
        stationary_state([[1.0]], [0.0], [[1.0]])


def test_invalid_inputs():
    with pytest.raises(InvalidInputError):
        SystemMatrices(Z=[[1.0]], H=[[-1.0]], T=[[0.5]], Q=[[1.0]])
    with pytest.raises(InvalidInputError):
        SystemMatrices(Z=[[1.0, 1.0]], H=[[1.0]], T=[[0.5]], Q=[[1.0]])
    with pytest.raises(InvalidInputError):
        kalman_filter(local_level(), [1.0, np.nan], GaussianState([0.0], [[1.0]]))
    with pytest.raises(InvalidInputError):
        GaussianState([0.0], [[-1.0]])


def test_singular_innovation_reports_step():
    sys = SystemMatrices(Z=[[1.0], [1.0]], H=np.zeros((2, 2)), T=[[0.5]], Q=[[1.0]])
    with pytest.raises(SingularInnovationError) as info:
        kalman_filter(sys, np.zeros((3, 2)), GaussianState([0.0], [[1.0]]))
    assert info.value.step == 0


def test_smoother_length_mismatch(rng):
    sys = random_system(rng, 2, 1)
    run = kalman_filter(sys, simulate_linear(rng, sys, 10))
    with pytest.raises(InvalidInputError):
        kalman_smoother(random_system(rng, 3, 1), run)
