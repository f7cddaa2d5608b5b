"""Histogram thresholding and segmentation quality metrics.

The boundary metric follows a directed, averaged convention: for every
ground-truth boundary pixel, the Euclidean distance to the nearest
predicted boundary pixel, averaged. This is not the classical sup-inf
Hausdorff distance, hence the explicit name; reports alias it as HD.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import BinaryImage2D, Image2D

__all__ = ["MetricReport", "otsu_threshold", "recall", "boundary_distance_avg", "boundary_pixels"]


@dataclass(frozen=True)
class MetricReport:
    recall: float
    hausdorff_avg: float
    per_slice: tuple = ()

    def __post_init__(self):
        if not 0.0 <= self.recall <= 1.0:
            raise ValueError("recall must lie in [0, 1]")
        if self.hausdorff_avg < 0:
            raise ValueError("hausdorff_avg must be nonnegative")


def otsu_threshold(img: Image2D, bins: int = 256) -> float:
    """Threshold maximizing between-class variance over a bin grid.

    Bins span [min, max] of the data; candidate thresholds are interior bin
    edges and ties break toward the lowest threshold. Returns the threshold
    value; pixels strictly above it form the foreground class.
    """
    data = img.data
    lo = float(data.min())
    hi = float(data.max())
    if lo == hi:
        raise ValueError("single-valued image: threshold undefined")
    if bins < 2:
        raise ValueError("need at least 2 bins")
    hist, edges = np.histogram(data, bins=bins, range=(lo, hi))
    p = hist / hist.sum()
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(p)
    m0 = np.cumsum(p * centers)
    m_total = m0[-1]

    scores = np.full(bins - 1, -1.0)
    for k in range(bins - 1):
        w = w0[k]
        if w <= 0.0 or w >= 1.0:
            continue
        # between-class variance: w0 w1 (mu0 - mu1)^2, stable form
        scores[k] = (m_total * w - m0[k]) ** 2 / (w * (1.0 - w))
    best = float(scores.max())
    if best < 0.0:
        raise ValueError("degenerate histogram: no valid threshold")
    # flat maxima are mathematically exact ties; scores within round-off of
    # the maximum count as tied so the lowest-threshold rule is stable
    tied = np.nonzero(scores >= best - 1e-12 * abs(best))[0]
    return float(edges[int(tied[0]) + 1])


def recall(pred: BinaryImage2D, gt: BinaryImage2D) -> float:
    """True positives over ground-truth positives."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    positives = int(gt.mask.sum())
    if positives == 0:
        raise ValueError("ground truth has no positive pixel")
    tp = int((pred.mask & gt.mask).sum())
    return tp / positives


def boundary_pixels(mask: BinaryImage2D) -> np.ndarray:
    """Boolean map of positive pixels with at least one negative 4-neighbor.

    Pixels beyond the image frame count as negative, so positives touching
    the frame are boundary.
    """
    m = mask.mask
    padded = np.pad(m, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return m & ~interior


def boundary_distance_avg(pred: BinaryImage2D, gt: BinaryImage2D) -> float:
    """Mean distance from each ground-truth boundary pixel to the nearest
    predicted boundary pixel (directed; not symmetric in its arguments)."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    pb = boundary_pixels(pred)
    gb = boundary_pixels(gt)
    if not pb.any():
        raise ValueError("prediction has no boundary pixel")
    if not gb.any():
        raise ValueError("ground truth has no boundary pixel")
    # exact Euclidean distance to the nearest predicted boundary pixel
    dist = ndimage.distance_transform_edt(~pb)
    return float(dist[gb].mean())
