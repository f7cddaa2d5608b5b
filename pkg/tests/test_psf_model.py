import math

import numpy as np
import pytest

from semdeconv.psf_model import (
    AiryParams,
    GaussianParams,
    airy_radial,
    bessel_j1,
    discretize_1d,
    discretize_2d,
    fit_airy,
    fit_gaussian,
    gaussian_radial,
)


# --- independent oracles -----------------------------------------------------

def j1_series_oracle(x: float, terms: int = 40) -> float:
    """Truncated power series; terms decay factorially, valid for |x| <~ 20."""
    total = 0.0
    for m in range(terms):
        total += (-1) ** m / (math.factorial(m) * math.factorial(m + 1)) * (x / 2) ** (2 * m + 1)
    return total


def j1_quadrature_oracle(x: float, nodes: int = 400) -> float:
    """Integral representation (1/pi) int_0^pi cos(theta - x sin theta) dtheta."""
    t, w = np.polynomial.legendre.leggauss(nodes)
    theta = 0.5 * math.pi * (t + 1.0)
    return float(np.sum(w * np.cos(theta - x * np.sin(theta))) * 0.5)


def bisect_first_root(lo=3.0, hi=4.5) -> float:
    f = j1_series_oracle
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if f(lo) * f(mid) <= 0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


J1_FIRST_ROOT = bisect_first_root()  # frozen by the bisection oracle at import


def test_bessel_zero_at_origin():
    assert bessel_j1(0.0) == 0.0


def test_bessel_at_one_vs_series_oracle():
    assert bessel_j1(1.0) == pytest.approx(0.4400505857, abs=1e-9)
    assert bessel_j1(1.0) == pytest.approx(j1_series_oracle(1.0), abs=1e-12)


def test_bessel_first_root_location():
    assert J1_FIRST_ROOT == pytest.approx(3.8317059702, abs=1e-8)
    assert bessel_j1(J1_FIRST_ROOT) == pytest.approx(0.0, abs=1e-8)


def test_bessel_series_range_accuracy():
    for x in np.linspace(0.01, 12.0, 97):
        assert bessel_j1(float(x)) == pytest.approx(j1_series_oracle(float(x)), abs=1e-12)


def test_bessel_large_argument_accuracy():
    for x in np.linspace(12.0, 50.0, 77):
        assert bessel_j1(float(x)) == pytest.approx(j1_quadrature_oracle(float(x)), abs=1e-10)


def test_bessel_odd_symmetry():
    rng = np.random.default_rng(4)
    for x in rng.uniform(-50, 50, 1000):
        assert bessel_j1(-x) == pytest.approx(-bessel_j1(x), abs=1e-12)


def test_bessel_rejects_nonfinite():
    with pytest.raises(ValueError):
        bessel_j1(float("nan"))


# --- radial profiles ----------------------------------------------------------

AIRY = AiryParams(lambda_wave=0.1, na=0.02, tau=1.0)


def test_airy_center_is_limit_one():
    assert airy_radial(0.0, AIRY) == 1.0


def test_airy_first_zero_radius():
    # radius where the Bessel argument hits the first root
    r0 = J1_FIRST_ROOT / (AIRY.radial_scale * AIRY.tau)
    assert airy_radial(r0, AIRY) == pytest.approx(0.0, abs=1e-8)


def test_airy_stretch_substitution_identity():
    p1 = AiryParams(0.1, 0.02, 1.0)
    p2 = AiryParams(0.1, 0.02, 2.0)
    for r in (0.3, 1.7, 4.2, 9.9):
        assert airy_radial(r, p2) == pytest.approx(airy_radial(2 * r, p1), rel=1e-12, abs=1e-300)


def test_radial_profiles_nonnegative():
    g = GaussianParams(2.5)
    for r in np.linspace(0, 100, 501):
        assert airy_radial(float(r), AIRY) >= 0.0
        assert gaussian_radial(float(r), g) >= 0.0


def test_gaussian_radial_closed_form():
    g = GaussianParams(3.0)
    assert gaussian_radial(0.0, g) == 1.0
    assert gaussian_radial(3.0, g) == pytest.approx(math.exp(-0.5), rel=1e-12)
    assert gaussian_radial(1000.0, g) == pytest.approx(0.0, abs=1e-300)
    vals = [gaussian_radial(float(r), g) for r in np.linspace(0, 20, 81)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


# --- discretization ------------------------------------------------------------

def test_discretize_gaussian_delta_limit():
    k = discretize_1d(GaussianParams(1e-4), 5)
    assert k.taps[5] == pytest.approx(1.0, abs=1e-12)
    assert abs(k.taps).sum() - k.taps[5] < 1e-12


def test_discretize_unit_sum_and_symmetry():
    for model in (GaussianParams(2.0), AiryParams(0.1, 0.02, 1.3)):
        k1 = discretize_1d(model, 9)
        assert k1.taps.sum() == pytest.approx(1.0, abs=1e-9)
        np.testing.assert_allclose(k1.taps, k1.taps[::-1], rtol=0, atol=0)
        k2 = discretize_2d(model, 6)
        assert k2.taps.sum() == pytest.approx(1.0, abs=1e-9)
        t = k2.taps
        np.testing.assert_allclose(t, t.T, rtol=0, atol=1e-12)
        np.testing.assert_allclose(t, t[::-1, :], rtol=0, atol=1e-12)
        np.testing.assert_allclose(t, t[:, ::-1], rtol=0, atol=1e-12)
        assert t[6, 6] == t.max()


def test_discretize_tap_ratios_match_radial_oracle():
    # first zero at 3.5 px
    p = AiryParams(lambda_wave=2 * math.pi * 0.01 * 3.5 / J1_FIRST_ROOT, na=0.01, tau=1.0)
    D = 8
    k = discretize_1d(p, D)
    for j in range(3):
        expected = airy_radial(float(j), p) / airy_radial(float(j + 1), p)
        assert k.taps[D + j] / k.taps[D + j + 1] == pytest.approx(expected, rel=1e-12)


# --- fitting -------------------------------------------------------------------

def test_fit_gaussian_roundtrip():
    h = discretize_1d(GaussianParams(2.0), 25)
    fit = fit_gaussian(h)
    assert fit.params.sigma_psf == pytest.approx(2.0, abs=1e-4)
    assert fit.residual <= 1e-10
    assert fit.iterations > 0


def test_fit_airy_roundtrip():
    h = discretize_1d(AiryParams(0.1, 0.02, 1.5), 25)
    fit = fit_airy(h, lambda_wave=0.1, na=0.02)
    assert fit.params.tau == pytest.approx(1.5, abs=1e-3)
    assert fit.residual <= 1e-10


def grid_search_sigma_oracle(h, lo=0.1, hi=10.0, step=1e-3):
    best = (np.inf, None)
    for sigma in np.arange(lo, hi + step, step):
        model = discretize_1d(GaussianParams(float(sigma)), h.half_width)
        sse = float(np.sum((model.taps - h.taps) ** 2))
        if sse < best[0]:
            best = (sse, float(sigma))
    return best


def test_gaussian_approximates_airy_residual_vs_grid_oracle():
    # gaussian fit of airy-model data: small but strictly positive residual;
    # the bound is frozen from the brute-force grid oracle (about 1.25e-3
    # of |h|^2 for this family)
    p = AiryParams(lambda_wave=2 * math.pi * 0.01 * 3.5 / J1_FIRST_ROOT, na=0.01, tau=1.0)
    h = discretize_1d(p, 25)
    oracle_sse, oracle_sigma = grid_search_sigma_oracle(h)
    fit = fit_gaussian(h)
    assert fit.residual > 0
    assert fit.residual <= oracle_sse * (1 + 1e-6)
    assert fit.params.sigma_psf == pytest.approx(oracle_sigma, abs=2e-3)
    assert fit.residual <= 2e-3 * float(np.sum(h.taps**2))


def test_fit_residual_tiny_for_matched_family_at_growing_half_width():
    prev = np.inf
    for D in (5, 10, 25, 50):
        fit = fit_gaussian(discretize_1d(GaussianParams(2.0), D))
        assert fit.residual <= prev + 1e-15
        assert fit.residual <= 1e-16
        prev = fit.residual


def test_fit_rejects_too_short_kernel():
    from semdeconv.core import Kernel1D

    with pytest.raises(ValueError, match="length"):
        fit_gaussian(Kernel1D.from_taps([1.0]))


def test_fit_bracket_exhausted_signal():
    # a kernel far wider than the search bracket: flat 101-tap plateau
    from semdeconv.core import Kernel1D

    h = Kernel1D.from_taps(np.ones(101))
    with pytest.raises(ValueError, match="bracket"):
        fit_gaussian(h)


def test_params_validation():
    with pytest.raises(ValueError):
        GaussianParams(0.0)
    with pytest.raises(ValueError):
        AiryParams(0.0, 0.1, 1.0)
    with pytest.raises(ValueError):
        AiryParams(0.1, 0.1, -1.0)
