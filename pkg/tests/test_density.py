import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from itebands import kernels as kn
from itebands.density import (EvalGrid, default_grid, kde, kde_bias_corrected, kde_second_derivative,
                              kernel_sum)
from itebands.simulate import DgpConfig, draw_sample, true_density


def test_single_observation():
    out = kde([2.0], None, [2.0, 2.5], 0.5)
    assert out.values[0] == pytest.approx(kn.k(0.0) / 0.5)


def test_compact_support():
    out = kde([0.0, 0.1, 5.0], None, [2.5], 1.0)
    assert out.values[0] == 0.0


def test_mask_selects_rows():
    d = np.array([0.0, 1.0, 2.0, 3.0])
    m = np.array([True, False, True, False])
    assert np.array_equal(kde(d, m, [1.0, 2.0], 0.7).values, kde(d[m], None, [1.0, 2.0], 0.7).values)
    with pytest.raises(ValueError):
        kde(d, np.zeros(4, bool), [1.0], 0.7)


@given(st.integers(0, 10_000), st.floats(0.1, 2.0), st.floats(0.2, 3.0))
def test_bias_corrected_identity(seed, h, hb):
    rng = np.random.default_rng(seed)
    d = rng.normal(size=200)
    grid = np.linspace(-2, 2, 17)
    bw = kn.BandwidthSet(h, hb, 1.0)
    two_step = kde(d, None, grid, h).values - kn.mu_k2() * h**2 * kde_second_derivative(d, None, grid, hb).values
    assert np.allclose(kde_bias_corrected(d, None, grid, bw).values, two_step, atol=1e-12)


def test_large_hb_matches_plain_kde():
    d = np.random.default_rng(1).normal(size=300)
    g = np.linspace(-2, 2, 21)
    assert np.allclose(kde_bias_corrected(d, None, g, kn.BandwidthSet(0.4, 4e5, 1.0)).values,
                       kde(d, None, g, 0.4).values, atol=1e-10)


# sd of the second-derivative estimate is sqrt(f int K''^2 / (n h^5)) with int K''^2 = 35
def _sd2(f, n, h):
    return np.sqrt(f * 35.0 / (n * h**5))


def test_second_derivative_flat_density():
    d = np.random.default_rng(2).random(100_000)
    est = kde_second_derivative(d, None, [0.5], 0.5).values[0]
    assert abs(est) <= 3 * _sd2(1.0, d.size, 0.5)


def test_second_derivative_linear_density():
    d = np.sqrt(np.random.default_rng(3).random(100_000))  # density 2x on [0, 1]
    est = kde_second_derivative(d, None, [0.5], 0.5).values[0]
    assert abs(est) <= 3 * _sd2(1.0, d.size, 0.5)


def test_kernel_sum_chunking_matches_dense():
    rng = np.random.default_rng(4)
    d, p = rng.normal(size=3000), np.linspace(-3, 3, 700)
    dense = kn.k((d[:, None] - p[None, :]) / 0.3).sum(axis=0)
    assert np.allclose(kernel_sum(d, p, 0.3, kn.k), dense, rtol=1e-12, atol=1e-10)


def test_infeasible_estimate_near_truth():
    smp = draw_sample(DgpConfig(n=50_000, seed=4))
    h = kn.silverman_bandwidths(smp.delta.size, smp.delta.std(ddof=1), 1.0).h
    est = kde(smp.delta, None, [2.0], h, infeasible=True)
    assert est.estimator_tag == "infeasible"
    assert abs(est.values[0] - 0.1907) <= 0.02


def test_default_grid():
    assert np.allclose(default_grid(interval=(0, 1), n_points=3).points, [0, 0.5, 1])
    g = default_grid(interval=(0.5, 3.5))
    assert g.points[0] == 0.5 and g.points[-1] == 3.5 and len(g) == 101
    with pytest.raises(ValueError):
        default_grid(interval=(0, 1), n_points=1)
    d = np.arange(101.0)
    q = default_grid(d, n_points=5)
    assert q.interval == pytest.approx((5.0, 95.0))
    with pytest.raises(ValueError):
        EvalGrid(np.array([0.0, 2.0, 1.0]), (0.0, 2.0))


def test_curve_exports(tmp_path):
    bw = kn.BandwidthSet(0.5, 1.0, 1.0)
    c = kde_bias_corrected(np.linspace(0, 3, 50), None, default_grid(interval=(0.5, 2.5), n_points=5), bw)
    c.to_csv(tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0].startswith("#") and lines[1] == "v,value" and len(lines) == 7
    c.to_json(tmp_path / "c.json")
    assert json.loads((tmp_path / "c.json").read_text())["bandwidths"]["h"] == 0.5


def test_true_density_is_recovered_on_average():
    smp = draw_sample(DgpConfig(n=20_000, seed=6))
    bw = kn.silverman_bandwidths(smp.delta.size, smp.delta.std(ddof=1), 1.0)
    g = np.linspace(1.0, 3.5, 26)  # below 1 the bias window reaches the jump of f at 0
    est = kde_bias_corrected(smp.delta, None, g, bw).values
    assert np.max(np.abs(est - true_density(g))) < 0.03
