import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gradflow.core import Ensemble, GaussianState, SPDError
from gradflow.density_grid import GridDensity, grid_kl, uniform_grid
from gradflow.metrics import (
    error_triple,
    gaussian_kl,
    gaussian_kl_1d_closed,
    relative_error,
    slope_fit,
    stabilized_window,
)
from gradflow.targets import cos_draws, gaussian_reference_stats

OM, OFF = cos_draws(2, 20, 0)
REF = gaussian_reference_stats(GaussianState([0.0, 0.0], np.diag([1.0, 100.0])), OM, OFF)


def test_error_triple_exact_state():
    assert tuple(error_triple(GaussianState(REF.mean, REF.cov), REF)) == (0.0, 0.0, 0.0)


def test_error_triple_mean_offset():
    e = error_triple(GaussianState([3.0, 4.0], REF.cov), REF)
    assert e.mean_err == 5.0 and e.cov_err == 0.0 and e.cos_err > 0
    assert e.cos_per_draw.shape == (20,)


def test_error_triple_relative_frobenius():
    e = error_triple(GaussianState(REF.mean, 2 * REF.cov), REF)
    assert e.cov_err == pytest.approx(1.0, rel=1e-15)


def test_error_triple_ensemble_vs_sampling_noise():
    # ensemble drawn from the reference itself: cos error of order 1/J
    J = 10**4
    X = np.random.default_rng(0).multivariate_normal(REF.mean, REF.cov, size=J)
    e = error_triple(Ensemble(X), REF)
    var_bound = 1.0 / J  # variance of a mean of J values bounded by 1
    assert e.cos_err < 5 * var_bound
    assert e.mean_err < 4 * math.sqrt(np.trace(REF.cov) / J)


def test_error_triple_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension"):
        error_triple(GaussianState([0.0], [[1.0]]), REF)


def test_gaussian_kl_examples():
    g = GaussianState([1.0, 2.0], [[2.0, 0.3], [0.3, 1.0]])
    assert gaussian_kl(g, g) == 0.0
    a = GaussianState([0.0], [[1.0]])
    b = GaussianState([0.0], [[math.e]])
    assert gaussian_kl(a, b) == pytest.approx(1 / (2 * math.e), rel=1e-15)
    assert gaussian_kl(a, b) == pytest.approx(0.18393972058572116080, rel=1e-15)


def test_gaussian_kl_vs_grid():
    nodes = uniform_grid(-30, 40, 8001)
    p = GridDensity.gaussian(nodes, 2.0, 3.0)
    q = GridDensity.gaussian(nodes, -1.0, 0.5)
    kl = gaussian_kl(GaussianState([2.0], [[3.0]]), GaussianState([-1.0], [[0.5]]))
    assert grid_kl(p, q) == pytest.approx(kl, abs=1e-6)
    assert kl == pytest.approx(gaussian_kl_1d_closed(2.0, 3.0, -1.0, 0.5), rel=1e-14)


def test_gaussian_kl_spd():
    with pytest.raises(SPDError):
        gaussian_kl(GaussianState([0.0], [[-1.0]]), GaussianState([0.0], [[1.0]]))


def test_slope_fit_exponential():
    t = np.linspace(0, 5, 50)
    assert slope_fit(t, np.exp(-2 * t)) == pytest.approx(-2.0, abs=1e-10)


def test_slope_fit_loglog():
    t = np.logspace(0, 4, 30)
    assert slope_fit(t, t**-0.5, loglog=True) == pytest.approx(-0.5, abs=1e-12)


def test_slope_fit_window_and_errors():
    t = np.arange(10.0)
    v = np.exp(-t)
    assert slope_fit(t, v, window=(3, 8)) == pytest.approx(-1.0)
    with pytest.raises(ValueError, match="at least 5"):
        slope_fit(t, v, window=(0, 3))
    with pytest.raises(ValueError, match="positive"):
        slope_fit(t, v - 0.5)


@given(st.integers(0, 2**32 - 1), st.floats(-3.0, -0.1))
def test_slope_fit_noisy_synthetic(seed, k):
    rng = np.random.default_rng(seed)
    t = np.linspace(0, 10, 200)
    noise = 0.05
    v = np.exp(k * t + noise * rng.standard_normal(t.size))
    # slope SE for least squares: noise / sqrt(sum (t - mean t)^2)
    se = noise / math.sqrt(np.sum((t - t.mean()) ** 2))
    assert abs(slope_fit(t, v) - k) < 5 * se


def test_stabilized_window_skips_transient():
    t = np.linspace(0, 10, 201)
    v = np.exp(-t) + 5 * np.exp(-10 * t)
    lo, hi = stabilized_window(t, v)
    assert 0.4 < lo < 3.0 and hi == 10.0
    assert slope_fit(t, v, (lo, hi)) == pytest.approx(-1.0, abs=0.02)


def test_relative_error():
    assert relative_error([1.0, 1.0], [1.0, 0.0]) == 1.0
