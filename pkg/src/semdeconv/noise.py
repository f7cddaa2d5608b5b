"""Forward noise model: signal-dependent, row-correlated, mixed statistics.

An acquired image is modeled as blurred signal plus D(x) C n, where n is a
unit-variance mixed Poisson-Gaussian field, C correlates noise along scan
lines (rows) and D(x) holds the per-pixel standard deviation
sqrt(sigma2 + alpha * x). The same correlation kernel also drives the
whitened patch distances used by the noise-aware restoration weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Image2D, Rng, parse_floats

__all__ = ["NoiseParams", "noise_stddev", "synthesize_noise", "whitening_distance"]

# spectral floor added to the DC-normalized correlation magnitude before
# inversion; corr kernels may have spectral nulls
WHITEN_EPS = 1e-3


@dataclass(frozen=True)
class NoiseParams:
    """sigma2: Gaussian variance; alpha: signal-dependency; corr: row kernel.

    corr is stored as given (any length >= 1, even lengths allowed, center
    tap at index (len-1)//2); it is normalized to unit l2 energy when
    applied, so D(x) remains the sole variance authority. The mixed field n
    blends a standard normal with a standardized Poisson of mean
    poisson_mean in a poisson_fraction variance share.
    """

    sigma2: float
    alpha: float
    corr: np.ndarray = field(default_factory=lambda: np.ones(1))
    poisson_fraction: float = 0.5
    poisson_mean: float = 16.0

    def __post_init__(self):
        if self.sigma2 < 0 or self.alpha < 0:
            raise ValueError("sigma2 and alpha must be nonnegative")
        if not 0.0 <= self.poisson_fraction <= 1.0:
            raise ValueError("poisson_fraction must lie in [0, 1]")
        if self.poisson_mean <= 0:
            raise ValueError("poisson_mean must be positive")
        c = np.atleast_1d(np.asarray(self.corr, dtype=np.float64)).copy()
        if c.ndim != 1 or c.size < 1 or not np.all(np.isfinite(c)):
            raise ValueError("corr must be a finite 1D tap vector")
        c.setflags(write=False)
        object.__setattr__(self, "corr", c)

    @classmethod
    def from_keyvalues(cls, kv: dict[str, str]) -> "NoiseParams":
        return cls(
            sigma2=float(kv["sigma2"]),
            alpha=float(kv["alpha"]),
            corr=parse_floats(kv["corr_taps"]) if "corr_taps" in kv else np.ones(1),
            poisson_fraction=float(kv.get("poisson_fraction", "0.5")),
            poisson_mean=float(kv.get("poisson_mean", "16.0")),
        )

    def to_keyvalues(self) -> dict:
        return {
            "sigma2": self.sigma2,
            "alpha": self.alpha,
            "corr_taps": self.corr,
            "poisson_fraction": self.poisson_fraction,
            "poisson_mean": self.poisson_mean,
        }


def _corr_l2(p: NoiseParams) -> np.ndarray:
    energy = float(np.dot(p.corr, p.corr))
    if energy <= 0.0:
        raise ValueError("degenerate correlation kernel (all-zero)")
    return p.corr / np.sqrt(energy)


def noise_stddev(x: Image2D, p: NoiseParams) -> Image2D:
    """Per-pixel noise standard deviation sqrt(sigma2 + alpha * x)."""
    var = p.sigma2 + p.alpha * x.data
    if np.any(var < 0):
        raise ValueError("sigma2 + alpha*x is negative at some pixel; invalid parameters for this image")
    return Image2D(np.sqrt(var))


def _mixed_unit_noise(shape, p: NoiseParams, gen: np.random.Generator) -> np.ndarray:
    # gaussian share drawn first, then the standardized poisson share
    g = gen.standard_normal(shape)
    pois = (gen.poisson(p.poisson_mean, shape) - p.poisson_mean) / np.sqrt(p.poisson_mean)
    return np.sqrt(1.0 - p.poisson_fraction) * g + np.sqrt(p.poisson_fraction) * pois


def _correlate_rows(n: np.ndarray, taps: np.ndarray) -> np.ndarray:
    center = (taps.size - 1) // 2
    out = np.zeros_like(n)
    for k, ck in enumerate(taps):
        if ck != 0.0:
            out += ck * np.roll(n, -(k - center), axis=1)
    return out


def synthesize_noise(clean_blurred: Image2D, p: NoiseParams, rng: Rng) -> Image2D:
    """Add correlated mixed noise to an already-blurred image.

    Deterministic per seed. Negative outputs are kept; clamping is a file
    write concern only.
    """
    gen = rng.generator()
    n = _mixed_unit_noise(clean_blurred.shape, p, gen)
    n = _correlate_rows(n, _corr_l2(p))
    std = noise_stddev(clean_blurred, p)
    return Image2D(clean_blurred.data + std.data * n)


def whitening_gains(n_freq: int, p: NoiseParams, eps: float = WHITEN_EPS) -> np.ndarray:
    """Per-frequency inverse-correlation gains on an n_freq-point DFT grid.

    The correlation spectrum is normalized by its DC magnitude and floored
    at eps before inversion; the (1 + eps) numerator makes a delta kernel an
    exact identity. Gains are real and even, so the equivalent filter is a
    real circulant.
    """
    c = p.corr
    if float(np.dot(c, c)) <= 0.0:
        raise ValueError("degenerate correlation kernel (all-zero)")
    emb = np.zeros(n_freq)
    center = (c.size - 1) // 2
    for k, ck in enumerate(c):
        emb[(k - center) % n_freq] += ck
    spec = np.abs(np.fft.fft(emb))
    if spec[0] < 1e-12 * spec.max():
        raise ValueError("correlation kernel has (near-)zero DC response; whitening undefined")
    m = spec / spec[0]
    return (1.0 + eps) / (m + eps)


def whitening_distance(patch_a, patch_b, p: NoiseParams, local_mean: float) -> float:
    """Squared distance between two equal-length vectors after decorrelation.

    The difference is filtered with the regularized inverse of the
    correlation kernel and scaled by 1 / (sigma2 + alpha * local_mean).
    Symmetric in its patch arguments; zero iff the patches are identical.
    """
    a = np.asarray(patch_a, dtype=np.float64)
    b = np.asarray(patch_b, dtype=np.float64)
    if a.ndim != 1 or a.shape != b.shape or a.size < 1:
        raise ValueError("patches must be equal-length 1D vectors")
    gains = whitening_gains(a.size, p)
    spec = np.fft.fft(a - b) * gains
    dist = float(np.sum(np.abs(spec) ** 2)) / a.size  # Parseval
    scale = p.sigma2 + p.alpha * local_mean
    if scale <= 0.0:
        raise ValueError("sigma2 + alpha*local_mean must be positive for whitening")
    return dist / scale


def whitening_matrix(n: int, p: NoiseParams) -> np.ndarray:
    """Real circulant matrix applying the whitening filter to length-n vectors.

    Row-equivalent to the FFT path in whitening_distance; used to whiten
    patch rows in bulk.
    """
    g = np.real(np.fft.ifft(whitening_gains(n, p)))
    idx = (np.arange(n)[:, None] - np.arange(n)[None, :]) % n
    return g[idx]
