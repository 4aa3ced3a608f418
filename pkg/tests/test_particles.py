import numpy as np
import pytest
from numpy.testing import assert_allclose

from sdfilter.errors import InvalidInputError, ParticleDegeneracyError
from sdfilter.lgss import GaussianState, SystemMatrices, kalman_filter, kalman_smoother
from sdfilter.models import GaussianScale, LinearGaussianObservation, design, simulate_ssm
from sdfilter.particles import (
    ParticleCloud,
    draw_randoms,
    particle_filter,
    particle_smoother,
    systematic_resample,
)
from sdfilter.score_engine import TransitionSpec

SYS = SystemMatrices(Z=[[1.0]], H=[[0.5]], T=[[0.9]], Q=[[0.3]], c=[0.1])
TRANS = TransitionSpec(SYS.c, SYS.T, SYS.Q)
MODEL = LinearGaussianObservation(SYS.Z, SYS.H)


@pytest.fixture(scope="module")
def lg_data():
    rng = np.random.default_rng(17)
    n = 60
    a = np.empty(n)
    a[0] = 1.0 + rng.normal(0, np.sqrt(0.3 / 0.19))
    for t in range(n - 1):
        a[t + 1] = 0.1 + 0.9 * a[t] + rng.normal(0, np.sqrt(0.3))
    y = a + rng.normal(0, np.sqrt(0.5), n)
    kf = kalman_filter(SYS, y[:, None])
    return y[:, None], kf, kalman_smoother(SYS, kf)


def test_filter_matches_kalman(lg_data):
    y, kf, _ = lg_data
    runs = [particle_filter(MODEL, TRANS, y, 10_000, seed=s, store=False) for s in range(8)]
    means = np.array([r.filt_mean[:, 0] for r in runs])
    se = means.std(axis=0, ddof=1) / np.sqrt(len(runs))
    z = (means.mean(axis=0) - kf.a_upd[:, 0]) / se
    assert np.mean(np.abs(z) > 3) <= 0.02
    # each single run is also within 3 standard errors of its own precision
    single = np.abs(means - kf.a_upd[:, 0]) / (se * np.sqrt(len(runs)))
    assert np.mean(single > 3) <= 0.02
    ll = np.array([r.loglik for r in runs])
    assert abs(ll.mean() - kf.loglik) < 3 * ll.std(ddof=1) / np.sqrt(len(ll)) + 1e-3


def test_filter_error_shrinks_like_root_n(lg_data):
    y, kf, _ = lg_data
    err = []
    for N in (100, 1000, 10_000):
        e = [np.sqrt(np.mean((particle_filter(MODEL, TRANS, y, N, seed=s, store=False)
                              .filt_mean[:, 0] - kf.a_upd[:, 0]) ** 2)) for s in range(6)]
        err.append(np.mean(e))
    slope = np.polyfit(np.log([100, 1000, 10_000]), np.log(err), 1)[0]
    assert -0.7 < slope < -0.3


def test_smoother_matches_kalman(lg_data):
    y, kf, ks = lg_data
    filt = particle_filter(MODEL, TRANS, y, 5000, seed=1)
    sm = particle_smoother(filt, TRANS, 1000, seed=2)
    se = np.sqrt(ks.P_hat[:, 0, 0] / 1000 + filt.filt_var[:, 0, 0] / 5000)
    z = (sm.mean[:, 0] - ks.alpha_hat[:, 0]) / se
    assert np.mean(np.abs(z) > 3) <= 0.05
    assert_allclose(sm.var[:, 0, 0], ks.P_hat[:, 0, 0], rtol=0.2)


def test_smoother_last_step_equals_filter(lg_data):
    y, _, _ = lg_data
    filt = particle_filter(MODEL, TRANS, y, 2000, seed=3)
    sm = particle_smoother(filt, TRANS, 2000, seed=4)
    se = np.sqrt(filt.filt_var[-1, 0, 0] / 2000)
    assert abs(sm.mean[-1, 0] - filt.filt_mean[-1, 0]) < 4 * se


def test_smoother_variance_scales_inverse_m():
    model, trans = design("gaussian_scale")
    y = simulate_ssm(model, trans, 40, seed=5).observations
    filt = particle_filter(model, trans, y, 500, seed=6)
    means = {M: np.array([particle_smoother(filt, trans, M, seed=s).mean[10, 0]
                          for s in range(300)]) for M in (1, 500)}
    ratio = means[1].var() / means[500].var()
    assert 250 < ratio < 1000


def test_no_noise_is_deterministic_propagation():
    trans = TransitionSpec.univariate(0.05, 0.9, 0.0)
    init = GaussianState([0.4], [[0.0]])
    y = np.array([0.1, -0.3, 0.8, 0.2])
    run = particle_filter(GaussianScale(), trans, y, 200, seed=0, init=init)
    path = [0.4]
    for _ in range(3):
        path.append(0.05 + 0.9 * path[-1])
    assert_allclose(run.filt_mean[:, 0], path, rtol=1e-13)
    assert np.all(run.particles == run.particles[:, :1, :])
    assert_allclose(run.filt_var[:, 0, 0], 0.0, atol=1e-25)


def test_loglik_dispersion_small():
    model, trans = design("gaussian_scale")
    y = simulate_ssm(model, trans, 1000, seed=9).observations
    ll = np.array([particle_filter(model, trans, y, 1000, seed=s, store=False).loglik
                   for s in range(20)])
    assert ll.var(ddof=1) < 0.01 * abs(ll.mean())


def test_kernel_and_python_paths_agree():
    model, trans = design("student_t_scale")
    y = simulate_ssm(model, trans, 200, seed=1).observations
    rand = draw_randoms(200, 300, 1, seed=2)
    a = particle_filter(model, trans, y, 300, randoms=rand, use_kernel=True)
    b = particle_filter(model, trans, y, 300, randoms=rand, use_kernel=False)
    assert_allclose(a.filt_mean, b.filt_mean, rtol=1e-12, atol=1e-14)
    assert_allclose(a.loglik, b.loglik, rtol=1e-12)
    assert np.array_equal(a.resampled, b.resampled)


def test_common_random_numbers_give_smooth_likelihood():
    model, trans = design("gaussian_scale")
    y = simulate_ssm(model, trans, 300, seed=1).observations
    rand = draw_randoms(300, 400, 1, seed=3)
    ll = [particle_filter(model, TransitionSpec.univariate(0.0, phi, 0.01), y, 400,
                          randoms=rand, store=False).loglik for phi in (0.97, 0.97)]
    assert ll[0] == ll[1]


def test_cloud_invariants():
    model, trans = design("poisson_duration")
    y = simulate_ssm(model, trans, 100, seed=2).observations
    run = particle_filter(model, trans, y, 500, seed=3)
    for t in (0, 50, 99):
        cloud = run.cloud(t)
        assert isinstance(cloud, ParticleCloud)
        assert abs(cloud.weights.sum() - 1) < 1e-12
        assert 1 <= cloud.ess <= 500
    assert np.all((run.ess >= 1) & (run.ess <= 500))
    assert run.resampled.any()


def test_systematic_resampling():
    w = np.array([0.1, 0.2, 0.3, 0.4])
    idx = systematic_resample(w, 0.5)
    # positions (0.5 + k) / 4 = 0.125, 0.375, 0.625, 0.875
    assert idx.tolist() == [1, 2, 3, 3]
    counts = np.bincount(systematic_resample(np.full(10, 0.1), 0.3), minlength=10)
    assert np.all(counts == 1)


def test_degeneracy_reports_step():
    y = np.array([0.1, 0.2, 1e200, 0.3])
    with pytest.raises(ParticleDegeneracyError) as info:
        particle_filter(GaussianScale(), TransitionSpec.univariate(0.0, 0.9, 0.1), y, 100, seed=0)
    assert info.value.step == 2


def test_input_guards():
    model, trans = design("gaussian_scale")
    with pytest.raises(InvalidInputError):
        particle_filter(model, trans, np.zeros(10), 99)
    run = particle_filter(model, trans, np.zeros(10), 100, seed=0, store=False)
    with pytest.raises(InvalidInputError):
        particle_smoother(run, trans, 10)
    run = particle_filter(model, TransitionSpec.univariate(0.0, 0.5, 0.0), np.zeros(10), 100,
                          seed=0)
    with pytest.raises(InvalidInputError):
        particle_smoother(run, TransitionSpec.univariate(0.0, 0.5, 0.0), 10)


def test_seeded_runs_reproducible():
    model, trans = design("gaussian_scale")
    y = simulate_ssm(model, trans, 200, seed=1).observations
    a = particle_smoother(particle_filter(model, trans, y, 300, seed=5), trans, 50, seed=6)
    b = particle_smoother(particle_filter(model, trans, y, 300, seed=5), trans, 50, seed=6)
    assert np.array_equal(a.trajectories, b.trajectories)
