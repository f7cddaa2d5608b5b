"""Shared domain types, image/kernel file I/O, and seeded randomness.

All images are stored as double-precision row-major arrays regardless of the
on-disk bit depth; quantization and clamping happen only when writing files.
Every type here is immutable after construction and safe to share between
concurrent readers.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field

import numpy as np


class StageError(RuntimeError):
    """Failure inside a named pipeline stage."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}': {message}")
        self.stage = stage


def _frozen_array(a, dtype):
    out = np.array(a, dtype=dtype, order="C", copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Image2D:
    """2D grayscale raster of real-valued intensities (row-major)."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data)
        if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
            raise ValueError(f"image must be 2D and non-empty, got shape {a.shape}")
        a = _frozen_array(a, np.float64)
        if not np.all(np.isfinite(a)):
            raise ValueError("image contains non-finite intensities")
        object.__setattr__(self, "data", a)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self):
        return self.data.shape

    @classmethod
    def from_array(cls, a) -> "Image2D":
        return cls(np.asarray(a, dtype=np.float64))


@dataclass(frozen=True)
class BinaryImage2D:
    """Boolean mask paired with an Image2D of the same dimensions."""

    mask: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mask)
        if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
            raise ValueError(f"mask must be 2D and non-empty, got shape {m.shape}")
        object.__setattr__(self, "mask", _frozen_array(m, bool))

    @property
    def height(self) -> int:
        return self.mask.shape[0]

    @property
    def width(self) -> int:
        return self.mask.shape[1]

    @property
    def shape(self):
        return self.mask.shape


# Small negative taps survive noisy kernel estimation; anything below
# -NEGATIVE_TAP_FRACTION * max_tap is rejected by validation.
NEGATIVE_TAP_FRACTION = 1e-4
_UNIT_SUM_TOL = 1e-9


def _check_taps(taps: np.ndarray, what: str):
    if not np.all(np.isfinite(taps)):
        raise ValueError(f"{what} contains non-finite taps")
    mx = float(taps.max(initial=0.0))
    if mx <= 0.0:
        raise ValueError(f"{what} has no positive tap")
    if float(taps.min()) < -NEGATIVE_TAP_FRACTION * mx - 1e-12:
        raise ValueError(f"{what} has a negative tap beyond tolerance")
    s = float(taps.sum())
    if abs(s - 1.0) > _UNIT_SUM_TOL:
        raise ValueError(f"{what} taps sum to {s!r}, expected 1 within {_UNIT_SUM_TOL}")


@dataclass(frozen=True)
class Kernel1D:
    """Odd-length 1D filter taps, unit sum, center at index half_width."""

    taps: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.taps, dtype=np.float64)
        if t.ndim != 1 or t.size % 2 == 0:
            raise ValueError(f"1D kernel needs odd length, got shape {t.shape}")
        t = _frozen_array(t, np.float64)
        _check_taps(t, "1D kernel")
        object.__setattr__(self, "taps", t)

    @property
    def half_width(self) -> int:
        return (self.taps.size - 1) // 2

    @classmethod
    def from_taps(cls, taps, normalize: bool = True) -> "Kernel1D":
        t = np.asarray(taps, dtype=np.float64)
        if normalize:
            s = t.sum()
            if not np.isfinite(s) or s <= 0:
                raise ValueError("kernel taps do not sum to a positive value")
            t = t / s
        return cls(t)

    @classmethod
    def delta(cls, half_width: int) -> "Kernel1D":
        t = np.zeros(2 * half_width + 1)
        t[half_width] = 1.0
        return cls(t)


@dataclass(frozen=True)
class Kernel2D:
    """Square odd-sized 2D filter taps, unit sum, center at (D, D)."""

    taps: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.taps, dtype=np.float64)
        if t.ndim != 2 or t.shape[0] != t.shape[1] or t.shape[0] % 2 == 0:
            raise ValueError(f"2D kernel needs odd square shape, got {t.shape}")
        t = _frozen_array(t, np.float64)
        _check_taps(t, "2D kernel")
        object.__setattr__(self, "taps", t)

    @property
    def half_width(self) -> int:
        return (self.taps.shape[0] - 1) // 2

    @classmethod
    def from_taps(cls, taps, normalize: bool = True) -> "Kernel2D":
        t = np.asarray(taps, dtype=np.float64)
        if normalize:
            s = t.sum()
            if not np.isfinite(s) or s <= 0:
                raise ValueError("kernel taps do not sum to a positive value")
            t = t / s
        return cls(t)

    @classmethod
    def delta(cls, half_width: int) -> "Kernel2D":
        t = np.zeros((2 * half_width + 1, 2 * half_width + 1))
        t[half_width, half_width] = 1.0
        return cls(t)


@dataclass(frozen=True)
class Rng:
    """Deterministic random source. Identical seed, identical stream.

    Parallel pipelines must not share one Rng; they call spawn(n), which
    derives independent children through numpy's SeedSequence spawning, so
    results do not depend on scheduling or thread count.
    """

    seed: int
    _seq: np.random.SeedSequence = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self._seq is None:
            object.__setattr__(self, "_seq", np.random.SeedSequence(self.seed))

    def generator(self) -> np.random.Generator:
        """Fresh generator at the start of this Rng's stream."""
        return np.random.Generator(np.random.PCG64(self._seq))

    def spawn(self, n: int) -> list["Rng"]:
        return [Rng(self.seed, seq) for seq in self._seq.spawn(n)]


# ---------------------------------------------------------------------------
# image files: binary PGM (P5, 8/16-bit), grayscale PNG, raw 16-bit + header
# ---------------------------------------------------------------------------

def _read_pgm(path: str) -> Image2D:
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    # header tokens: magic, width, height, maxval; comments start with '#'
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    pos += 1  # single whitespace after maxval
    width, height, maxval = (int(t) for t in tokens)
    if maxval <= 0 or maxval >= 65536:
        raise ValueError(f"{path}: unsupported PGM maxval {maxval}")
    count = width * height
    if maxval < 256:
        raw = np.frombuffer(blob, dtype=np.uint8, count=count, offset=pos)
    else:
        raw = np.frombuffer(blob, dtype=">u2", count=count, offset=pos)
    if raw.size != count:
        raise ValueError(f"{path}: truncated pixel data")
    return Image2D(raw.reshape(height, width).astype(np.float64))


def _write_pgm(img: Image2D, path: str, bit_depth: int):
    maxval = 255 if bit_depth == 8 else 65535
    q = np.rint(np.clip(img.data, 0, maxval))
    header = f"P5\n{img.width} {img.height}\n{maxval}\n".encode("ascii")
    payload = q.astype(np.uint8 if bit_depth == 8 else ">u2").tobytes()
    with open(path, "wb") as f:
        f.write(header + payload)


def _read_png(path: str) -> Image2D:
    from PIL import Image as PILImage

    with PILImage.open(path) as im:
        if im.mode in ("L", "I;16", "I;16B", "I"):
            a = np.asarray(im, dtype=np.float64)
        else:
            raise ValueError(
                f"{path}: mode {im.mode} is not grayscale; calibration data must be grayscale"
            )
    return Image2D(a)


def _write_png(img: Image2D, path: str, bit_depth: int):
    from PIL import Image as PILImage

    maxval = 255 if bit_depth == 8 else 65535
    q = np.rint(np.clip(img.data, 0, maxval))
    if bit_depth == 8:
        PILImage.fromarray(q.astype(np.uint8), mode="L").save(path)
    else:
        PILImage.fromarray(q.astype(np.uint16)).save(path)


def _raw_header_path(path: str) -> str:
    return path + ".hdr"


def _read_raw(path: str) -> Image2D:
    hdr = read_keyvalues(_raw_header_path(path))
    width, height = int(hdr["width"]), int(hdr["height"])
    raw = np.fromfile(path, dtype="<u2")
    if raw.size != width * height:
        raise ValueError(f"{path}: expected {width * height} pixels, found {raw.size}")
    return Image2D(raw.reshape(height, width).astype(np.float64))


def _write_raw(img: Image2D, path: str):
    q = np.rint(np.clip(img.data, 0, 65535)).astype("<u2")
    q.tofile(path)
    write_keyvalues(_raw_header_path(path), {"width": img.width, "height": img.height})


def load_image(path: str) -> Image2D:
    """Read a grayscale image file (PGM, PNG, or raw 16-bit with sidecar).

    8-bit data maps to [0, 255] and 16-bit to [0, 65535]; relative scale is
    preserved exactly. Color inputs are rejected.
    """
    if not os.path.isfile(path):
        raise FileNotFoundError(f"file not found: {path}")
    ext = os.path.splitext(path)[1].lower()
    if ext in (".pgm", ".pnm"):
        return _read_pgm(path)
    if ext == ".png":
        return _read_png(path)
    if ext == ".raw":
        return _read_raw(path)
    raise ValueError(f"{path}: unsupported image format '{ext}'")


def save_image(img: Image2D, path: str, bit_depth: int = 16):
    """Write an image file; intensities are clamped (never wrapped) and rounded.

    Loading the result reproduces the quantized intensities exactly.
    """
    if not path:
        raise ValueError("empty output path")
    if bit_depth not in (8, 16):
        raise ValueError(f"unsupported bit depth {bit_depth}")
    ext = os.path.splitext(path)[1].lower()
    if ext in (".pgm", ".pnm"):
        _write_pgm(img, path, bit_depth)
    elif ext == ".png":
        _write_png(img, path, bit_depth)
    elif ext == ".raw":
        if bit_depth != 16:
            raise ValueError("raw format is 16-bit only")
        _write_raw(img, path)
    else:
        raise ValueError(f"{path}: unsupported image format '{ext}'")


# ---------------------------------------------------------------------------
# kernel tap tables and key-value parameter files
# ---------------------------------------------------------------------------

def save_kernel(kernel, path: str):
    """Write Kernel1D/Kernel2D taps as whitespace-separated text, row per line."""
    taps = np.atleast_2d(kernel.taps)
    with open(path, "w", encoding="utf-8") as f:
        for row in taps:
            f.write(" ".join(format(v, ".17g") for v in row) + "\n")


def load_kernel1d(path: str) -> Kernel1D:
    taps = np.loadtxt(path, dtype=np.float64, ndmin=1)
    if taps.ndim != 1:
        raise ValueError(f"{path}: expected a single row of taps")
    return Kernel1D.from_taps(taps, normalize=True)


def load_kernel2d(path: str) -> Kernel2D:
    taps = np.loadtxt(path, dtype=np.float64, ndmin=2)
    return Kernel2D.from_taps(taps, normalize=True)


_KEYVAL_RE = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_.]*)\s*=\s*(.*?)\s*$")


def read_keyvalues(path: str) -> dict[str, str]:
    """Parse a UTF-8 'key = value' file; '#' starts a comment line."""
    if not os.path.isfile(path):
        raise FileNotFoundError(f"file not found: {path}")
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            m = _KEYVAL_RE.match(line)
            if not m:
                raise ValueError(f"{path}:{lineno}: not a 'key = value' line: {stripped!r}")
            out[m.group(1)] = m.group(2)
    return out


def write_keyvalues(path: str, values: dict):
    with open(path, "w", encoding="utf-8") as f:
        for k, v in values.items():
            if isinstance(v, float):
                v = format(v, ".17g")
            elif isinstance(v, (list, tuple, np.ndarray)):
                v = " ".join(format(float(x), ".17g") for x in v)
            f.write(f"{k} = {v}\n")


def parse_floats(text: str) -> np.ndarray:
    """Whitespace-separated reals from a key-value field."""
    vals = [float(t) for t in text.split()]
    if not vals:
        raise ValueError("expected at least one numeric value")
    return np.asarray(vals, dtype=np.float64)
