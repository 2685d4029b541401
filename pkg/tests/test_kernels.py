import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate

from itebands import kernels as kn


def quad(f, lo=-1.0, hi=1.0):
    return integrate.quad(lambda u: float(f(u)), lo, hi, epsabs=1e-13, epsrel=1e-13, limit=200)[0]


def test_triweight_values():
    assert kn.k(0.0) == pytest.approx(35 / 32, abs=1e-15)
    for u in (-1.0, 1.0, 1.5, -3.0):
        assert kn.k(u) == 0.0
        assert kn.k_prime(u) == 0.0


def test_kernel_integrates_to_one_and_is_centred():
    assert quad(kn.k) == pytest.approx(1.0, abs=1e-10)
    assert quad(lambda u: u * kn.k(u)) == pytest.approx(0.0, abs=1e-12)


def test_constants_match_quadrature():
    assert kn.mu_k2() == pytest.approx(quad(lambda u: u * u * kn.k(u)) / 2, abs=1e-8)
    assert kn.int_k_squared() == pytest.approx(quad(lambda u: kn.k(u) ** 2), abs=1e-8)
    assert kn.mu_k2() == pytest.approx(1 / 18, abs=1e-15)
    assert kn.int_k_squared() == pytest.approx(350 / 429, abs=1e-15)


@pytest.mark.parametrize("f, df", [(kn.k, kn.k_prime), (kn.k_prime, kn.k_second), (kn.k_second, kn.k_third)])
def test_derivatives_by_finite_differences(f, df):
    u = np.linspace(-0.97, 0.97, 41)
    e = 1e-6
    assert np.allclose((f(u + e) - f(u - e)) / (2 * e), df(u), atol=1e-5)


@given(st.floats(-2, 2))
def test_symmetry(u):
    assert kn.k(u) == pytest.approx(kn.k(-u), abs=1e-15)
    assert kn.k_prime(u) == pytest.approx(-kn.k_prime(-u), abs=1e-14)
    assert kn.k_second(u) == pytest.approx(kn.k_second(-u), abs=1e-13)


def test_bias_corrected_kernel_moments():
    bw = kn.BandwidthSet(0.4, 0.9, 0.7)
    lim = kn.m_support(bw)
    assert quad(lambda u: kn.m(u, bw), -lim, lim) == pytest.approx(1.0, abs=1e-9)
    same = kn.BandwidthSet(0.5, 0.5, 0.5)
    assert quad(lambda u: u * u * kn.m(u, same)) == pytest.approx(0.0, abs=1e-10)


def test_m_tends_to_k_for_large_hb():
    bw = kn.BandwidthSet(0.3, 3e5, 1.0)
    u = np.linspace(-1.2, 1.2, 25)
    assert np.allclose(kn.m(u, bw), kn.k(u), atol=1e-12)


def test_m_prime_matches_finite_difference():
    bw = kn.BandwidthSet(0.4, 0.9, 0.7)
    u = np.linspace(-2.0, 2.0, 81)
    e = 1e-6
    assert np.allclose((kn.m(u + e, bw) - kn.m(u - e, bw)) / (2 * e), kn.m_prime(u, bw), atol=1e-5)


def test_silverman_bandwidths():
    bw = kn.silverman_bandwidths(2000, 1.0, 1.0)
    assert bw.h == pytest.approx(0.688818, abs=1e-6)
    assert bw.h_b == pytest.approx(1.160333, abs=1e-6)
    assert bw.h_g == pytest.approx(0.688818, abs=1e-6)
    b2 = kn.silverman_bandwidths(2000, 2.0, 1.0)
    assert (b2.h, b2.h_b, b2.h_g) == pytest.approx((2 * bw.h, 2 * bw.h_b, bw.h_g))
    b4 = kn.silverman_bandwidths(4000, 1.0, 1.0)
    assert b4.h / bw.h == pytest.approx(2 ** -0.2)


@pytest.mark.parametrize("args", [(1, 1.0, 1.0), (10, 0.0, 1.0), (10, 1.0, -1.0)])
def test_silverman_rejects_bad_input(args):
    with pytest.raises(ValueError):
        kn.silverman_bandwidths(*args)


def test_bandwidth_validation():
    with pytest.raises(ValueError):
        kn.BandwidthSet(0.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        kn.KernelSpec("gaussian")
