import numpy as np
import pytest

from sdfilter.lgss import GaussianState, SystemMatrices


def random_psd(rng, k, floor=0.1):
    A = rng.standard_normal((k, k))
    return A @ A.T / k + floor * np.eye(k)


def random_system(rng, m, p):
    """Random stable system with spectral radius below 0.95."""
    T = rng.standard_normal((m, m))
    T *= rng.uniform(0.2, 0.95) / max(np.abs(np.linalg.eigvals(T)).max(), 1e-12)
    return SystemMatrices(Z=rng.standard_normal((p, m)), H=random_psd(rng, p),
                          T=T, Q=random_psd(rng, m), c=rng.normal(0, 0.3, m))


def simulate_linear(rng, sys, n):
    m, p = sys.m, sys.p
    a = np.zeros(m)
    ys = np.empty((n, p))
    Lq = np.linalg.cholesky(sys.Q)
    Lh = np.linalg.cholesky(sys.H)
    for t in range(n):
        ys[t] = sys.Z @ a + Lh @ rng.standard_normal(p)
        a = sys.c + sys.T @ a + Lq @ rng.standard_normal(m)
    return ys


def random_init(rng, m):
    return GaussianState(rng.standard_normal(m), random_psd(rng, m))


def assert_rel_close(actual, desired, rtol, scale=None):
    """Relative error measured against the largest magnitude of the reference."""
    actual = np.asarray(actual, dtype=float)
    desired = np.asarray(desired, dtype=float)
    scale = max(np.abs(desired).max(), 1e-300) if scale is None else scale
    err = np.abs(actual - desired).max() / scale
    assert err <= rtol, f"relative error {err:.3g} > {rtol:g}"


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
