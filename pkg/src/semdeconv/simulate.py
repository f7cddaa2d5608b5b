"""Ground-truth forward model for quantitative verification.

Renders crisp two-intensity calibration scenes (cross or half-plane),
blurs them with a known PSF, adds the full noise model, and produces
multi-frame stacks with optional integer-pixel jitter. Every stage is
reproducible from a single seed, which makes the whole pipeline testable
against known truth.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import BinaryImage2D, Image2D, Rng, parse_floats
from .noise import NoiseParams, synthesize_noise
from .psf_model import AiryParams, GaussianParams, default_half_width, discretize_2d
from .restore import convolve_circular

__all__ = ["TextureDefect", "SceneSpec", "AcquisitionSpec", "render_scene", "scene_mask", "acquire"]


@dataclass(frozen=True)
class TextureDefect:
    """Additive sinusoidal grating in a rectangle, for rejection testing.

    Stripes run vertically (the phase varies along x), so profiles crossing
    the region pick up end-segment variance. amplitude 0 is a no-op.
    """

    top: int
    left: int
    height: int
    width: int
    amplitude: float
    period: float = 4.0

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("defect rectangle must be non-empty")
        if self.period <= 0:
            raise ValueError("defect period must be positive")


@dataclass(frozen=True)
class SceneSpec:
    """Two-intensity latent scene description.

    The cross pattern is a centered plus sign: two arm_width-wide bars of
    length min(width, height) - 2*margin. The margin keeps every edge at
    least `margin` pixels away from the frame so calibration profiles fit.
    """

    width: int
    height: int
    pattern: str = "cross"
    arm_width: int = 80
    mu1: float = 50.0
    mu2: float = 200.0
    margin: int = 64
    texture_defect: Optional[TextureDefect] = None
    custom_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("scene dimensions must be positive")
        if self.mu1 == self.mu2:
            raise ValueError("mu1 and mu2 must differ")
        if self.pattern not in ("cross", "half-plane", "custom"):
            raise ValueError(f"unknown pattern {self.pattern!r}")
        if self.pattern == "cross":
            if self.arm_width < 1:
                raise ValueError("arm_width must be >= 1")
            if self.margin < 0:
                raise ValueError("margin must be nonnegative")
            if self.bar_length() <= self.arm_width:
                raise ValueError("cross pattern exceeds the frame for this margin")
        if self.pattern == "custom" and self.custom_mask is None:
            raise ValueError("custom pattern needs custom_mask")

    def bar_length(self) -> int:
        return min(self.width, self.height) - 2 * self.margin

    @classmethod
    def from_keyvalues(cls, kv: dict[str, str]) -> "SceneSpec":
        defect = None
        if "defect_rect" in kv:
            top, left, height, width = (int(v) for v in parse_floats(kv["defect_rect"]))
            defect = TextureDefect(
                top, left, height, width,
                amplitude=float(kv.get("defect_amplitude", "0.0")),
                period=float(kv.get("defect_period", "4.0")),
            )
        return cls(
            width=int(kv["width"]),
            height=int(kv["height"]),
            pattern=kv.get("pattern", "cross"),
            arm_width=int(kv.get("arm_width", "80")),
            mu1=float(kv.get("mu1", "50")),
            mu2=float(kv.get("mu2", "200")),
            margin=int(kv.get("margin", "64")),
            texture_defect=defect,
        )

    def to_keyvalues(self) -> dict:
        out = {
            "width": self.width,
            "height": self.height,
            "pattern": self.pattern,
            "arm_width": self.arm_width,
            "mu1": self.mu1,
            "mu2": self.mu2,
            "margin": self.margin,
        }
        if self.texture_defect is not None:
            d = self.texture_defect
            out["defect_rect"] = [d.top, d.left, d.height, d.width]
            out["defect_amplitude"] = d.amplitude
            out["defect_period"] = d.period
        return out


def scene_mask(spec: SceneSpec) -> BinaryImage2D:
    """Foreground (mu2) mask of the latent scene."""
    h, w = spec.height, spec.width
    if spec.pattern == "half-plane":
        mask = np.zeros((h, w), dtype=bool)
        mask[:, w // 2:] = True
        return BinaryImage2D(mask)
    if spec.pattern == "custom":
        m = np.asarray(spec.custom_mask, dtype=bool)
        if m.shape != (h, w):
            raise ValueError("custom_mask shape must match the frame")
        return BinaryImage2D(m)
    # centered plus sign from two half-open integer ranges
    length = spec.bar_length()
    aw = spec.arm_width
    cy, cx = h // 2, w // 2
    ys, xs = np.ogrid[:h, :w]
    y_arm = (ys >= cy - aw // 2) & (ys < cy - aw // 2 + aw)
    x_arm = (xs >= cx - aw // 2) & (xs < cx - aw // 2 + aw)
    y_bar = (ys >= cy - length // 2) & (ys < cy - length // 2 + length)
    x_bar = (xs >= cx - length // 2) & (xs < cx - length // 2 + length)
    mask = (x_arm & y_bar) | (y_arm & x_bar)
    return BinaryImage2D(mask)


def cross_area(spec: SceneSpec) -> int:
    """Analytic foreground pixel count of the cross pattern."""
    if spec.pattern != "cross":
        raise ValueError("cross_area applies to the cross pattern")
    length = spec.bar_length()
    return 2 * spec.arm_width * length - spec.arm_width * spec.arm_width


def render_scene(spec: SceneSpec) -> Image2D:
    """Exact two-valued latent image, plus the optional texture defect."""
    mask = scene_mask(spec).mask
    img = np.where(mask, spec.mu2, spec.mu1).astype(np.float64)
    d = spec.texture_defect
    if d is not None:
        if d.top < 0 or d.left < 0 or d.top + d.height > spec.height or d.left + d.width > spec.width:
            raise ValueError("texture defect rectangle exceeds the frame")
        xs = np.arange(d.left, d.left + d.width, dtype=np.float64)
        stripe = d.amplitude * np.sin(2.0 * np.pi * (xs - d.left) / d.period)
        img[d.top:d.top + d.height, d.left:d.left + d.width] += stripe[None, :]
    return Image2D(img)


@dataclass(frozen=True)
class AcquisitionSpec:
    """Per-frame imaging model: PSF, noise, frame count, jitter, seed.

    psf_half_width None picks the model default (four standard deviations
    for a Gaussian, two dark-ring radii for an Airy pattern).
    """

    psf: "AiryParams | GaussianParams"
    noise: NoiseParams
    frames: int = 1
    max_jitter: int = 0
    seed: int = 0
    psf_half_width: Optional[int] = None

    def __post_init__(self):
        if self.frames < 1:
            raise ValueError("frames must be >= 1")
        if self.max_jitter < 0:
            raise ValueError("max_jitter must be nonnegative")

    def kernel_half_width(self) -> int:
        if self.psf_half_width is not None:
            return self.psf_half_width
        return default_half_width(self.psf)


def circular_shift(img: Image2D, dy: int, dx: int) -> Image2D:
    """Periodic translation by whole pixels."""
    return Image2D(np.roll(img.data, (dy, dx), axis=(0, 1)))


def acquire(x: Image2D, spec: AcquisitionSpec) -> list[Image2D]:
    """Simulate a stack of acquisitions of the latent scene x.

    Each frame is the blurred scene, jittered by an integer circular shift,
    with signal-dependent correlated noise added in the shifted geometry.

    Seed derivation (the determinism contract): SeedSequence(seed) is
    spawned into frames + 1 children; child 0 drives the jitter draws
    (frames pairs, uniform integers in [-max_jitter, max_jitter]) and child
    i + 1 drives frame i's noise field. Frames are therefore independent of
    generation order and thread count.
    """
    half_width = spec.kernel_half_width()
    if 2 * half_width + 1 > min(x.height, x.width):
        raise ValueError("PSF kernel does not fit inside the frame")
    kernel = discretize_2d(spec.psf, half_width)
    blurred = convolve_circular(x, kernel)

    children = Rng(spec.seed).spawn(spec.frames + 1)
    jitter_gen = children[0].generator()
    jitters = jitter_gen.integers(-spec.max_jitter, spec.max_jitter + 1, size=(spec.frames, 2))

    frames = []
    for i in range(spec.frames):
        dy, dx = (int(v) for v in jitters[i])
        shifted = circular_shift(blurred, dy, dx)
        frames.append(synthesize_noise(shifted, spec.noise, children[i + 1]))
    return frames


def acquisition_from_keyvalues(kv: dict[str, str], psf) -> AcquisitionSpec:
    """Assemble an AcquisitionSpec from its key-value file plus a PSF model."""
    return AcquisitionSpec(
        psf=psf,
        noise=NoiseParams.from_keyvalues(kv),
        frames=int(kv.get("frames", "1")),
        max_jitter=int(kv.get("max_jitter", "0")),
        seed=int(kv.get("seed", "0")),
        psf_half_width=int(kv["psf_half_width"]) if "psf_half_width" in kv else None,
    )
