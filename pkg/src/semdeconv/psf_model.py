"""Parametric point-spread-function models.

Two radial families: the diffraction intensity pattern of a circular
aperture (an Airy disk, with a radial stretch factor accounting for
non-ideal imaging conditions) and an isotropic Gaussian approximation of
it. Both discretize to unit-sum kernels and can be least-squares fitted to
a measured 1D kernel. All functions here are pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import Kernel1D, Kernel2D

__all__ = [
    "AiryParams",
    "GaussianParams",
    "FitResult",
    "bessel_j1",
    "airy_radial",
    "gaussian_radial",
    "discretize_1d",
    "discretize_2d",
    "fit_airy",
    "fit_gaussian",
]


@dataclass(frozen=True)
class AiryParams:
    """Airy disk parameters.

    lambda_wave: electron wavelength, same length unit as pixel radii.
    na: numerical aperture (dimensionless).
    tau: radial stretch factor; larger tau compresses the pattern.
    """

    lambda_wave: float
    na: float
    tau: float = 1.0

    def __post_init__(self):
        if not (self.lambda_wave > 0 and self.na > 0 and self.tau > 0):
            raise ValueError("lambda_wave, na and tau must all be positive")

    @property
    def radial_scale(self) -> float:
        """Argument scale: the Bessel argument is radial_scale * tau * r."""
        return 2.0 * math.pi * self.na / self.lambda_wave

    def first_zero_radius(self) -> float:
        """Radius of the first dark ring in pixels."""
        return _J1_FIRST_ROOT / (self.radial_scale * self.tau)


@dataclass(frozen=True)
class GaussianParams:
    """Isotropic Gaussian PSF with standard deviation in pixels."""

    sigma_psf: float

    def __post_init__(self):
        if not self.sigma_psf > 0:
            raise ValueError("sigma_psf must be positive")


@dataclass(frozen=True)
class FitResult:
    params: "AiryParams | GaussianParams"
    residual: float
    iterations: int

    def __post_init__(self):
        if self.residual < 0:
            raise ValueError("residual must be nonnegative")


_J1_FIRST_ROOT = 3.8317059702075123  # first positive root of J1
_SERIES_CUTOFF = 12.0


def bessel_j1(x: float) -> float:
    """Bessel function of the first kind, order one.

    Power series for |x| <= 12 (terms decay factorially; truncated when the
    next term is negligible at double precision) and the large-argument
    trigonometric asymptotic expansion beyond. Absolute accuracy is better
    than 1e-10 for |x| <= 50. Odd symmetry is exact by construction.
    """
    x = float(x)
    if not math.isfinite(x):
        raise ValueError("bessel_j1 requires finite x")
    ax = abs(x)
    if ax <= _SERIES_CUTOFF:
        val = _j1_series(ax)
    else:
        val = _j1_asymptotic(ax)
    return -val if x < 0 else val


def _j1_series(x: float) -> float:
    # sum_m (-1)^m / (m! (m+1)!) (x/2)^(2m+1), accumulated recursively
    half = 0.5 * x
    term = half
    total = term
    m = 0
    while True:
        m += 1
        term *= -(half * half) / (m * (m + 1))
        total += term
        if abs(term) < 1e-17 * (1.0 + abs(total)) or m > 80:
            return total


def _j1_asymptotic(x: float) -> float:
    # Hankel expansion: sqrt(2/(pi x)) (P cos(chi) - Q sin(chi)), chi = x - 3pi/4,
    # with signed terms t_k = prod_{j<=k} (4 - (2j-1)^2) / (k! (8x)^k).
    mu = 4.0
    tk = 1.0
    p = 1.0
    q = 0.0
    sign = 1.0
    k = 0
    while True:
        k += 1
        tk *= (mu - (2 * k - 1) ** 2) / (k * 8.0 * x)
        if k % 2 == 1:
            q += sign * tk
        else:
            p += -sign * tk  # alternation lags Q by one term pair
            sign = -sign
        if abs(tk) < 1e-17 or k >= 24:
            break
    chi = x - 0.75 * math.pi
    return math.sqrt(2.0 / (math.pi * x)) * (p * math.cos(chi) - q * math.sin(chi))


def airy_radial(r: float, p: AiryParams) -> float:
    """Un-normalized Airy intensity (2 J1(u)/u)^2 at radius r, u = scale*tau*r.

    The removable singularity at r = 0 evaluates to the analytic limit 1.
    Normalization is deferred to discretization.
    """
    if r < 0:
        raise ValueError("radius must be nonnegative")
    u = p.radial_scale * p.tau * r
    if u == 0.0:
        return 1.0
    v = 2.0 * bessel_j1(u) / u
    return v * v


def gaussian_radial(r: float, p: GaussianParams) -> float:
    """Un-normalized Gaussian profile exp(-r^2 / (2 sigma^2))."""
    if r < 0:
        raise ValueError("radius must be nonnegative")
    return math.exp(-(r * r) / (2.0 * p.sigma_psf * p.sigma_psf))


def _radial_fn(model):
    if isinstance(model, AiryParams):
        return lambda r: airy_radial(r, model)
    if isinstance(model, GaussianParams):
        return lambda r: gaussian_radial(r, model)
    raise TypeError(f"unsupported PSF model {type(model).__name__}")


def discretize_1d(model, half_width: int) -> Kernel1D:
    """Sample the radial profile on [-D, D] and normalize to unit sum."""
    if half_width < 1:
        raise ValueError("half_width must be >= 1")
    fn = _radial_fn(model)
    taps = np.empty(2 * half_width + 1)
    for k in range(half_width + 1):
        v = fn(float(k))
        taps[half_width + k] = v
        taps[half_width - k] = v
    s = taps.sum()
    if not np.isfinite(s) or s <= 0.0:
        raise ValueError("model support is far narrower than one pixel (all-zero taps)")
    return Kernel1D(taps / s)


def discretize_2d(model, half_width: int) -> Kernel2D:
    """Sample the radial profile on the (2D+1)^2 grid r = sqrt(i^2+j^2).

    Taps at equal radius are bitwise identical, so the dihedral symmetry of
    the grid is exact.
    """
    if half_width < 1:
        raise ValueError("half_width must be >= 1")
    fn = _radial_fn(model)
    n = half_width
    taps = np.empty((2 * n + 1, 2 * n + 1))
    for i in range(n + 1):
        for j in range(i, n + 1):
            v = fn(math.sqrt(float(i * i + j * j)))
            for a in (n + i, n - i):
                for b in (n + j, n - j):
                    taps[a, b] = v
                    taps[b, a] = v
    s = taps.sum()
    if not np.isfinite(s) or s <= 0.0:
        raise ValueError("model support is far narrower than one pixel (all-zero taps)")
    return Kernel2D(taps / s)


_PARAM_LO = 0.05
_PARAM_HI = 20.0
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def _minimize_param(objective, lo: float, hi: float, rel_tol: float = 1e-7):
    """Global bracket by coarse scan, then golden section + parabolic refine.

    Returns (best_param, best_value, evaluations). The scan makes the search
    robust to secondary minima of oscillatory models.
    """
    evals = 0

    def f(p):
        nonlocal evals
        evals += 1
        return objective(p)

    grid = np.linspace(lo, hi, 256)
    vals = [f(p) for p in grid]
    i = int(np.argmin(vals))
    a = grid[max(i - 1, 0)]
    b = grid[min(i + 1, len(grid) - 1)]

    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    while (b - a) > rel_tol * max(abs(a), abs(b), 1.0):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = f(d)
    mid = 0.5 * (a + b)
    fmid = f(mid)

    # one parabolic step through (a, mid, b) when it is well conditioned
    fa, fb = f(a), f(b)
    denom = (a - mid) * (fb - fmid) - (b - mid) * (fa - fmid)
    if denom != 0.0:
        num = (a - mid) ** 2 * (fb - fmid) - (b - mid) ** 2 * (fa - fmid)
        cand = mid + 0.5 * num / denom
        if a < cand < b:
            fcand = f(cand)
            if fcand < fmid:
                return cand, fcand, evals
    return mid, fmid, evals


def _fit(h: Kernel1D, make_model, lo=_PARAM_LO, hi=_PARAM_HI) -> tuple[float, float, int]:
    taps = h.taps
    if not np.all(np.isfinite(taps)):
        raise ValueError("measured kernel has non-finite taps")
    if taps.size < 3:
        raise ValueError("measured kernel must have length >= 3")
    D = h.half_width

    def objective(p):
        model = discretize_1d(make_model(p), D)
        d = model.taps - taps
        return float(np.dot(d, d))

    best, val, evals = _minimize_param(objective, lo, hi)
    margin = 1e-3 * (hi - lo)
    if best <= lo + margin or best >= hi - margin:
        raise ValueError(
            f"fit bracket [{lo}, {hi}] exhausted (best {best:.4g}); "
            "measured kernel is inconsistent with the model family in range"
        )
    return best, val, evals


def fit_gaussian(h: Kernel1D) -> FitResult:
    """Least-squares sigma for a Gaussian kernel matching h."""
    sigma, residual, evals = _fit(h, lambda s: GaussianParams(s))
    return FitResult(GaussianParams(sigma), residual, evals)


def fit_airy(h: Kernel1D, lambda_wave: float, na: float) -> FitResult:
    """Least-squares stretch factor for an Airy kernel matching h.

    The wavelength and numerical aperture are experiment constants and stay
    fixed; only the stretch is searched.
    """
    tau, residual, evals = _fit(h, lambda t: AiryParams(lambda_wave, na, t))
    return FitResult(AiryParams(lambda_wave, na, tau), residual, evals)


# parameter-file support (keys: model, tau, sigma_psf, lambda_wave, na, half_width)

def params_from_keyvalues(kv: dict[str, str]):
    """Build a PSF model from parsed key-value pairs."""
    model = kv.get("model", "").strip().lower()
    if model == "airy":
        return AiryParams(
            lambda_wave=float(kv["lambda_wave"]),
            na=float(kv["na"]),
            tau=float(kv.get("tau", "1.0")),
        )
    if model == "gaussian":
        return GaussianParams(sigma_psf=float(kv["sigma_psf"]))
    raise ValueError(f"unknown PSF model {model!r} (expected 'airy' or 'gaussian')")


def params_to_keyvalues(model) -> dict:
    if isinstance(model, AiryParams):
        return {
            "model": "airy",
            "tau": model.tau,
            "lambda_wave": model.lambda_wave,
            "na": model.na,
        }
    if isinstance(model, GaussianParams):
        return {"model": "gaussian", "sigma_psf": model.sigma_psf}
    raise TypeError(f"unsupported PSF model {type(model).__name__}")


def default_half_width(model) -> int:
    """Discretization half-width covering the bulk of the model's mass.

    Four standard deviations for the Gaussian; two dark-ring radii for the
    Airy pattern (wider supports contribute little mass but inflate the
    kernel and the edge-calibration tail noise).
    """
    if isinstance(model, GaussianParams):
        return max(1, math.ceil(4.0 * model.sigma_psf))
    if isinstance(model, AiryParams):
        return max(1, math.ceil(2.0 * model.first_zero_radius()))
    raise TypeError(f"unsupported PSF model {type(model).__name__}")
