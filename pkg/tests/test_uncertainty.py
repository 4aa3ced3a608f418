import csv
import io
from types import SimpleNamespace

import numpy as np
import pytest
from numpy.testing import assert_allclose

from sdfilter.errors import (
    InternalInvariantError,
    InvalidInputError,
    PriorDomainError,
)
from sdfilter.estimation import FitConfig, FitResult, fit
from sdfilter.lgss import SystemMatrices, kalman_filter
from sdfilter.models import design, simulate_ssm
from sdfilter.score_engine import sd_filter, sd_smoother
from sdfilter.uncertainty import (
    CSV_COLUMNS,
    BandSpec,
    bands_combined,
    bands_filtering_only,
    bands_from_ensemble,
    bands_parameter_only,
    coverage_rate,
    parameter_ensemble,
)


def fake_run(mean, var):
    mean = np.asarray(mean, dtype=float).reshape(-1, 1)
    var = np.asarray(var, dtype=float).reshape(-1, 1, 1)
    return SimpleNamespace(a_pred=mean, P_pred=var, a_upd=mean, P_upd=var)


@pytest.fixture(scope="module")
def sample():
    model, trans = design("gaussian_scale")
    return simulate_ssm(model, trans, 1000, seed=41)


@pytest.fixture(scope="module")
def fitted(sample):
    return fit("gaussian_scale", sample.observations[:500], FitConfig(n_starts=2))


def with_cov(res, cov):
    return FitResult(res.family, res.theta, res.loglik, np.asarray(cov, dtype=float),
                     res.diagnostics, res.normalization, res.fixed, res.model_options, res.d)


def test_standard_normal_bounds():
    b = bands_filtering_only(fake_run([0.0], [1.0]), BandSpec(level=0.95))
    assert_allclose(b.lower, [-1.959964], atol=1e-6)
    assert_allclose(b.upper, [1.959964], atol=1e-6)


def test_zero_variance_zero_width():
    b = bands_filtering_only(fake_run([0.3, 0.5], [0.0, 2.0]), BandSpec())
    assert b.lower[0] == b.upper[0] == 0.3
    assert b.width[1] > 0


def test_negative_variance_is_invariant_violation():
    with pytest.raises(InternalInvariantError):
        bands_filtering_only(fake_run([0.0, 0.0], [1.0, -0.5]), BandSpec())


@pytest.mark.parametrize("level", [0.90, 0.95])
def test_kalman_coverage_is_exact(level):
    rng = np.random.default_rng(5)
    n = 100_000
    phi, q, h = 0.9, 0.5, 1.0
    a = np.empty(n)
    a[0] = rng.normal(0, np.sqrt(q / (1 - phi ** 2)))
    eta = rng.normal(0, np.sqrt(q), n)
    for t in range(n - 1):
        a[t + 1] = phi * a[t] + eta[t]
    y = a + rng.normal(0, np.sqrt(h), n)
    sys = SystemMatrices(Z=[[1.0]], H=[[h]], T=[[phi]], Q=[[q]], c=[0.0])
    run = kalman_filter(sys, y[:, None])
    cov = coverage_rate(bands_filtering_only(run, BandSpec(level=level)), a)
    assert abs(cov - level) < 0.01


def test_targets(sample):
    model, trans = design("gaussian_scale")
    run = sd_filter(model, trans, sample.observations)
    sm = sd_smoother(model, trans, run)
    up = bands_filtering_only(run, BandSpec(target="update"))
    assert_allclose(up.var_total, run.P_upd[:, 0, 0])
    s = bands_filtering_only(sm, BandSpec(target="smoothed"))
    assert_allclose(s.mean, sm.alpha_hat[:, 0])
    with pytest.raises(InvalidInputError):
        bands_filtering_only(run, BandSpec(target="smoothed"))


def test_zero_covariance_parameter_bands(sample, fitted):
    res = with_cov(fitted, np.zeros_like(fitted.cov))
    y = sample.observations[500:]
    b = bands_parameter_only(y, res, BandSpec(regime="parameter", draws=100))
    assert_allclose(b.width, 0.0, atol=1e-14)


@pytest.mark.parametrize("target", ["predictive", "update", "smoothed"])
def test_zero_covariance_combined_equals_filtering(sample, fitted, target):
    res = with_cov(fitted, np.zeros_like(fitted.cov))
    y = sample.observations[500:]
    comb = bands_combined(y, res, BandSpec(regime="combined", target=target, draws=100))
    model, trans, norm = res.build()
    run = sd_filter(model, trans, y, norm)
    if target == "smoothed":
        run = sd_smoother(model, trans, run)
    filt = bands_filtering_only(run, BandSpec(target=target))
    assert np.array_equal(comb.lower, filt.lower)
    assert np.array_equal(comb.upper, filt.upper)
    assert np.all(comb.var_parameter == 0)


def test_decomposition_invariants(sample, fitted):
    y = sample.observations[500:]
    ens = parameter_ensemble(y, fitted, 200, seed=3)
    comb = bands_from_ensemble(ens, 0.95, "combined")
    par = bands_from_ensemble(ens, 0.95, "parameter")
    assert np.all(comb.lower < comb.upper)
    assert np.all(comb.var_filtering >= 0) and np.all(comb.var_parameter >= 0)
    assert_allclose(comb.var_filtering + comb.var_parameter, comb.var_total, rtol=0, atol=1e-10)
    z = BandSpec().z
    # variance additivity against each component of the same draws
    assert np.all(comb.width >= 2 * z * np.sqrt(comb.var_filtering) - 1e-12)
    assert np.all(comb.width >= 2 * z * np.sqrt(comb.var_parameter) - 1e-12)
    assert np.all(par.lower <= par.upper)
    assert_allclose(par.var_parameter, comb.var_parameter)


def test_quantile_bands_stable_in_draws(sample, fitted):
    y = sample.observations[500:]
    b1 = bands_parameter_only(y, fitted, BandSpec(regime="parameter", draws=100, seed=1))
    b2 = bands_parameter_only(y, fitted, BandSpec(regime="parameter", draws=1000, seed=2))
    width = b2.width.mean()
    assert np.mean(np.abs(b1.lower - b2.lower)) < 0.1 * width
    assert np.mean(np.abs(b1.upper - b2.upper)) < 0.1 * width


def test_bands_deterministic(sample, fitted):
    y = sample.observations[500:]
    spec = BandSpec(regime="combined", draws=120, seed=9)
    a, b = bands_combined(y, fitted, spec), bands_combined(y, fitted, spec)
    assert a.to_csv() == b.to_csv()


def test_coverage_monotone_in_level(sample, fitted):
    y, truth = sample.observations[500:], sample.states[500:, 0]
    ens = parameter_ensemble(y, fitted, 150, seed=4)
    for regime in ("combined", "parameter"):
        cov = [coverage_rate(bands_from_ensemble(ens, lv, regime), truth)
               for lv in (0.5, 0.8, 0.9, 0.95, 0.99)]
        assert all(a <= b for a, b in zip(cov, cov[1:]))


def test_prior_domain_error(sample, fitted):
    cov = np.zeros_like(fitted.cov)
    cov[1, 1] = 1.0   # phi draws mostly leave (-1, 1)
    with pytest.raises(PriorDomainError):
        parameter_ensemble(sample.observations[500:], with_cov(fitted, cov), 100, seed=0)


def test_non_psd_covariance_rejected(sample, fitted):
    with pytest.raises(InvalidInputError):
        parameter_ensemble(sample.observations[500:], with_cov(fitted, -np.eye(3)), 100)


def test_coverage_rate_examples():
    b = bands_filtering_only(fake_run(np.zeros(4), np.ones(4)), BandSpec())
    assert coverage_rate(b, np.zeros(4)) == 1.0
    assert coverage_rate(b, np.full(4, 10.0)) == 0.0
    with pytest.raises(InvalidInputError):
        coverage_rate(b, np.zeros(3))


def test_spec_validation():
    with pytest.raises(InvalidInputError):
        BandSpec(level=1.0)
    with pytest.raises(InvalidInputError):
        BandSpec(regime="combined", draws=50)
    with pytest.raises(InvalidInputError):
        BandSpec(target="future")


def test_multistate_needs_loading():
    run = SimpleNamespace(a_pred=np.zeros((3, 2)), P_pred=np.tile(np.eye(2), (3, 1, 1)))
    with pytest.raises(InvalidInputError):
        bands_filtering_only(run, BandSpec())
    b = bands_filtering_only(run, BandSpec(), loading=[1.0, 1.0])
    assert_allclose(b.var_total, 2.0)


def test_csv_layout(tmp_path):
    b = bands_filtering_only(fake_run([0.1, 0.2], [1.0, 0.5]), BandSpec())
    path = tmp_path / "b.csv"
    text = b.to_csv(path)
    assert path.read_text(encoding="utf-8") == text
    rows = list(csv.reader(io.StringIO(text)))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert float(rows[1][2]) == b.lower[0]
