"""Edge-based PSF calibration from repeated acquisitions.

Workflow: register the frames (integer-pixel least squares), average them,
binarize the averaged image (Gaussian smoothing + histogram threshold),
sample 1D intensity profiles orthogonally across the latent edges, average
the accepted profiles into a clean edge-spread signal, solve the step
convolution model exactly for the 1D kernel, and fit the parametric PSF
models to it. Directions are pooled before solving; the PSF is assumed
rotationally invariant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .core import BinaryImage2D, Image2D, Kernel1D, NEGATIVE_TAP_FRACTION, StageError
from .metrics import otsu_threshold
from .psf_model import FitResult, fit_airy, fit_gaussian

__all__ = [
    "ProfileConfig",
    "EdgeProfileSet",
    "PsfEstimate",
    "FourierDiagnostic",
    "register_stack",
    "average_stack",
    "estimate_latent",
    "extract_profiles",
    "average_profiles",
    "solve_psf",
    "estimate_psf_pipeline",
    "fourier_psf_diagnostic",
]

DEFAULT_DIRECTIONS = (0.0, math.pi / 2)


@dataclass(frozen=True)
class ProfileConfig:
    """Edge-profile extraction controls.

    half_width: samples reach this many pixels to each side of the edge.
    edge_direction: direction along the edge, radians; snapped to the
        nearest cardinal orientation (both polarities are extracted).
    variance_threshold: absolute end-segment variance bound for rejecting
        textured profiles; None selects the adaptive rule (four times the
        median end-segment variance).
    min_profiles: minimum accepted profiles for a usable estimate.
    """

    half_width: int = 50
    edge_direction: float = math.pi / 2
    variance_threshold: Optional[float] = None
    min_profiles: int = 1

    def __post_init__(self):
        if self.half_width < 2:
            raise ValueError("half_width must be >= 2")
        if self.variance_threshold is not None and self.variance_threshold < 0:
            raise ValueError("variance_threshold must be nonnegative")
        if self.min_profiles < 0:
            raise ValueError("min_profiles must be nonnegative")


@dataclass(frozen=True)
class EdgeProfileSet:
    """Accepted edge-orthogonal samples plus the two latent intensities.

    Every profile has length 2*half_width + 1, runs from the mu1 side to
    the mu2 side, and is centered on the first foreground pixel of its
    edge transition.
    """

    profiles: np.ndarray
    mu1: float
    mu2: float
    accepted_count: int
    rejected_count: int

    def __post_init__(self):
        p = np.asarray(self.profiles, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] % 2 == 0:
            raise ValueError("profiles must be (count, odd length)")
        if p.shape[0] != self.accepted_count:
            raise ValueError("accepted_count disagrees with the profile array")
        object.__setattr__(self, "profiles", p)

    @property
    def half_width(self) -> int:
        return (self.profiles.shape[1] - 1) // 2


@dataclass(frozen=True)
class PsfEstimate:
    h_raw: Kernel1D
    airy_fit: FitResult
    gaussian_fit: FitResult
    diagnostics: dict


def register_stack(images: Sequence[Image2D], max_shift: int = 10) -> list[Image2D]:
    """Translate every frame onto the first by integer circular shifts.

    The shift minimizing the sum of squared differences within
    [-max_shift, max_shift]^2 is selected; all shifts are evaluated through
    the correlation identity and near-optimal candidates re-checked
    directly, with lexicographic tie-breaking, so the result equals an
    exhaustive exact search. The first image is returned unchanged.
    """
    if len(images) == 0:
        raise ValueError("need at least one image")
    ref = images[0]
    for img in images[1:]:
        if img.shape != ref.shape:
            raise ValueError(f"dimension mismatch: {img.shape} vs {ref.shape}")
    if max_shift < 0:
        raise ValueError("max_shift must be nonnegative")
    out = [ref]
    ref_data = ref.data
    fref = np.fft.rfft2(ref_data)
    ref_ss = float(np.sum(ref_data * ref_data))
    for img in images[1:]:
        data = img.data
        # SSD(s) = sum(ref^2) + sum(img^2) - 2 * cross(s) for circular shift s
        cross = np.fft.irfft2(fref * np.conj(np.fft.rfft2(data)), s=ref_data.shape)
        img_ss = float(np.sum(data * data))
        shifts = np.arange(-max_shift, max_shift + 1)
        window = cross[np.ix_(shifts % ref.height, shifts % ref.width)]
        ssd = ref_ss + img_ss - 2.0 * window
        tol = 1e-7 * (ref_ss + img_ss + 1.0)
        near = np.argwhere(ssd <= ssd.min() + tol)
        best = None
        for iy, ix in sorted(map(tuple, near)):
            dy, dx = int(shifts[iy]), int(shifts[ix])
            shifted = np.roll(data, (dy, dx), axis=(0, 1))
            exact = float(np.sum((ref_data - shifted) ** 2))
            if best is None or exact < best[0] - 0.0:
                best = (exact, dy, dx, shifted)
        out.append(Image2D(best[3]))
    return out


def average_stack(aligned: Sequence[Image2D]) -> Image2D:
    """Pixel-wise mean of an aligned stack."""
    if len(aligned) == 0:
        raise ValueError("empty image list")
    shape = aligned[0].shape
    total = np.zeros(shape)
    for img in aligned:
        if img.shape != shape:
            raise ValueError(f"dimension mismatch: {img.shape} vs {shape}")
        total += img.data
    return Image2D(total / len(aligned))


def estimate_latent(y_m: Image2D, smooth_sigma: float = 3.0,
                    bins: int = 256) -> tuple[BinaryImage2D, float, float]:
    """Binary latent estimate of a two-level calibration image.

    The averaged image is Gaussian-smoothed (periodic boundary, matching
    the circulant model) and thresholded at the between-class-variance
    optimum. mu1/mu2 are the unsmoothed means over the background and
    foreground of the mask.
    """
    if smooth_sigma < 0:
        raise ValueError("smooth_sigma must be nonnegative")
    smoothed = ndimage.gaussian_filter(y_m.data, smooth_sigma, mode="wrap") if smooth_sigma > 0 else y_m.data
    threshold = otsu_threshold(Image2D(smoothed), bins=bins)
    mask = smoothed > threshold
    if mask.all() or not mask.any():
        raise ValueError("thresholding produced a single class; calibration sample lacks two levels")
    mu1 = float(y_m.data[~mask].mean())
    mu2 = float(y_m.data[mask].mean())
    return BinaryImage2D(mask), mu1, mu2


def _orientation(edge_direction: float) -> str:
    """'vertical' edges have a horizontal normal; snapped to the nearest
    cardinal orientation."""
    s, c = math.sin(edge_direction), math.cos(edge_direction)
    return "vertical" if abs(s) >= abs(c) else "horizontal"


def _gather_profiles(y: np.ndarray, latent: np.ndarray, orientation: str, d: int) -> np.ndarray:
    """All in-bounds edge profiles of one orientation, mu1 side first,
    centered on the foreground pixel of each transition."""
    h, w = y.shape
    span = np.arange(-d, d + 1)
    chunks = []
    if orientation == "vertical":
        limit = w - 1
        for rows, cols, sign in _transitions_axis(latent, axis=1):
            keep = (cols - d >= 0) & (cols + d <= limit)
            rows, cols = rows[keep], cols[keep]
            if rows.size:
                chunks.append(y[rows[:, None], cols[:, None] + sign * span[None, :]])
    else:
        limit = h - 1
        for rows, cols, sign in _transitions_axis(latent, axis=0):
            keep = (rows - d >= 0) & (rows + d <= limit)
            rows, cols = rows[keep], cols[keep]
            if rows.size:
                chunks.append(y[rows[:, None] + sign * span[None, :], cols[:, None]])
    if not chunks:
        return np.empty((0, 2 * d + 1))
    return np.vstack(chunks)


def _transitions_axis(mask: np.ndarray, axis: int):
    """Foreground pixels whose predecessor/successor along `axis` is
    background, with the profile direction sign making mu1 come first."""
    if axis == 1:
        rising = mask[:, 1:] & ~mask[:, :-1]
        falling = mask[:, :-1] & ~mask[:, 1:]
        r1, c1 = np.nonzero(rising)
        r2, c2 = np.nonzero(falling)
        return [(r1, c1 + 1, 1), (r2, c2, -1)]
    rising = mask[1:, :] & ~mask[:-1, :]
    falling = mask[:-1, :] & ~mask[1:, :]
    r1, c1 = np.nonzero(rising)
    r2, c2 = np.nonzero(falling)
    return [(r1 + 1, c1, 1), (r2, c2, -1)]


def extract_profiles(y_m: Image2D, latent: BinaryImage2D, cfg: ProfileConfig,
                     mu1: Optional[float] = None, mu2: Optional[float] = None) -> EdgeProfileSet:
    """Sample edge-orthogonal profiles and reject textured ones.

    A profile is rejected when either end segment (the outer half_width/2
    samples) has variance above the threshold; with the adaptive rule the
    threshold is four times the median end-segment variance, which scales
    with the data and rejects only outliers.
    """
    if y_m.shape != latent.shape:
        raise ValueError("image and latent mask dimensions differ")
    if mu1 is None or mu2 is None:
        fg = latent.mask
        if fg.all() or not fg.any():
            raise ValueError("latent mask has a single class")
        mu1 = float(y_m.data[~fg].mean())
        mu2 = float(y_m.data[fg].mean())
    d = cfg.half_width
    profiles = _gather_profiles(y_m.data, latent.mask, _orientation(cfg.edge_direction), d)
    if profiles.shape[0] == 0:
        raise ValueError("no boundary pixels with in-bounds profile support for this direction")
    tail = max(1, d // 2)
    end_var = np.maximum(profiles[:, :tail].var(axis=1), profiles[:, -tail:].var(axis=1))
    threshold = cfg.variance_threshold
    if threshold is None:
        threshold = 4.0 * float(np.median(end_var))
    keep = end_var <= threshold
    accepted = profiles[keep]
    if accepted.shape[0] < cfg.min_profiles:
        raise ValueError(
            f"only {accepted.shape[0]} profiles accepted "
            f"(minimum {cfg.min_profiles}); calibration data too poor"
        )
    return EdgeProfileSet(
        profiles=accepted,
        mu1=mu1,
        mu2=mu2,
        accepted_count=int(accepted.shape[0]),
        rejected_count=int(profiles.shape[0] - accepted.shape[0]),
    )


def average_profiles(profile_set: EdgeProfileSet) -> np.ndarray:
    """Element-wise mean of the accepted profiles."""
    if profile_set.accepted_count < 1:
        raise ValueError("no accepted profiles to average")
    return profile_set.profiles.mean(axis=0)


def solve_psf(y_prime: np.ndarray, mu1: float, mu2: float, half_width: int) -> Kernel1D:
    """Exact 1D kernel from an averaged edge-spread signal.

    Convolving a unit-sum kernel with an ideal step from mu1 to mu2 makes
    each sample a partial sum of taps scaled by (mu2 - mu1); the unique
    solution is the forward difference of the signal (seeded by the mu1
    far-field level) divided by (mu2 - mu1). Small negative lobes from
    noise are clamped and the result renormalized.
    """
    y_prime = np.asarray(y_prime, dtype=np.float64)
    if y_prime.ndim != 1 or y_prime.size != 2 * half_width + 1:
        raise ValueError(f"profile length {y_prime.size} does not match half_width {half_width}")
    if not np.all(np.isfinite(y_prime)):
        raise ValueError("profile contains non-finite values")
    if mu1 == mu2:
        raise ValueError("mu1 equals mu2: the edge system is singular")
    if np.ptp(y_prime) == 0.0:
        raise ValueError("constant profile: zero difference signal (mu1 = mu2 inferred)")
    scale = mu2 - mu1
    taps = np.empty_like(y_prime)
    taps[0] = (y_prime[0] - mu1) / scale
    taps[1:] = np.diff(y_prime) / scale
    negative_mass = float(-taps[taps < 0].sum())
    total_mass = float(np.abs(taps).sum())
    if total_mass == 0.0 or negative_mass > 0.10 * total_mass:
        raise ValueError(
            f"negative tap mass {negative_mass:.3g} exceeds 10% of total {total_mass:.3g}; "
            "profiles are inconsistent with a step-edge model"
        )
    clamp = NEGATIVE_TAP_FRACTION * float(taps.max())
    taps = np.maximum(taps, -clamp)
    return Kernel1D.from_taps(taps, normalize=True)


def _stage(name):
    class _Ctx:
        def __enter__(self):
            return None

        def __exit__(self, exc_type, exc, tb):
            if exc is not None and not isinstance(exc, StageError):
                raise StageError(name, str(exc)) from exc
            return False

    return _Ctx()


def estimate_psf_pipeline(images: Sequence[Image2D], cfg: ProfileConfig, smooth_sigma: float,
                          lambda_wave: float, na: float,
                          directions: Sequence[float] = DEFAULT_DIRECTIONS,
                          max_shift: int = 10) -> PsfEstimate:
    """Full calibration: register, average, binarize, pool directional edge
    profiles, solve for the 1D kernel, and fit both PSF models.

    Directions with no usable edges are skipped; the pooled profile count
    must still reach cfg.min_profiles. Errors carry their stage name.
    """
    with _stage("register"):
        aligned = register_stack(images, max_shift=max_shift)
    with _stage("average"):
        y_m = average_stack(aligned)
    with _stage("latent"):
        latent, mu1, mu2 = estimate_latent(y_m, smooth_sigma)

    with _stage("profiles"):
        sets = []
        for phi in directions:
            try:
                sets.append(extract_profiles(
                    y_m, latent, replace(cfg, edge_direction=phi, min_profiles=0), mu1, mu2))
            except ValueError as err:
                if "no boundary pixels" not in str(err):
                    raise
        if not sets:
            raise ValueError("no direction produced any edge profile")
        pooled = EdgeProfileSet(
            profiles=np.vstack([s.profiles for s in sets]),
            mu1=mu1,
            mu2=mu2,
            accepted_count=int(sum(s.accepted_count for s in sets)),
            rejected_count=int(sum(s.rejected_count for s in sets)),
        )
        if pooled.accepted_count < cfg.min_profiles:
            raise ValueError(
                f"only {pooled.accepted_count} profiles accepted "
                f"(minimum {cfg.min_profiles})"
            )
        y_prime = average_profiles(pooled)

    with _stage("solve"):
        h_raw = solve_psf(y_prime, mu1, mu2, cfg.half_width)

    with _stage("fit"):
        airy = fit_airy(h_raw, lambda_wave, na)
        gaussian = fit_gaussian(h_raw)

    diagnostics = {
        "frames": len(images),
        "accepted_profiles": pooled.accepted_count,
        "rejected_profiles": pooled.rejected_count,
        "mu1": mu1,
        "mu2": mu2,
        "tau_hat": airy.params.tau,
        "sigma_hat": gaussian.params.sigma_psf,
        "airy_residual": airy.residual,
        "gaussian_residual": gaussian.residual,
        "airy_fit_evals": airy.iterations,
        "gaussian_fit_evals": gaussian.iterations,
    }
    return PsfEstimate(h_raw=h_raw, airy_fit=airy, gaussian_fit=gaussian, diagnostics=diagnostics)


@dataclass(frozen=True)
class FourierDiagnostic:
    """Per-frequency |F(y)/F(x)| with ill-conditioned bins flagged.

    Useful for validating that a calibration sample keeps its spectrum well
    above zero everywhere; flagged bins carry magnitude 0.
    """

    ratio_magnitude: np.ndarray
    flagged: np.ndarray
    floor: float

    @property
    def flagged_count(self) -> int:
        return int(self.flagged.sum())


def fourier_psf_diagnostic(y: Image2D, x: Image2D, floor: float) -> FourierDiagnostic:
    """Spectral division diagnostic of an acquired/latent image pair."""
    if y.shape != x.shape:
        raise ValueError("images must share dimensions")
    if floor < 0:
        raise ValueError("floor must be nonnegative")
    fy = np.fft.fft2(y.data)
    fx = np.fft.fft2(x.data)
    mag_x = np.abs(fx)
    flagged = mag_x < floor
    ratio = np.zeros(y.shape)
    ok = ~flagged
    ratio[ok] = np.abs(fy[ok]) / mag_x[ok]
    return FourierDiagnostic(ratio_magnitude=ratio, flagged=flagged, floor=float(floor))
