"""Exact bilinear region-of-interest pooling on feature maps.

Coordinate convention, used consistently by sampling, pasting and mask
target extraction: a map with H cells spans the continuous interval
[0, H] and cell i has its center at i + 0.5.  Samples outside the map
clamp to the border cell (constant extension).  ROIs are axis-aligned
boxes in normalized [0, 1] coordinates; nothing is ever rounded to a
grid, which is the whole point over quantized pooling.

The head side pulls two aligned crops per ROI: a coarse one for the
shared trunk and a fine one that skips into the upsampled decoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, apply_op

FEAT_SIDE = 14
FEAT_SIDE_FINE = 56

__all__ = ["RoiBox", "roi_align", "roi_align_pair", "bilinear_sample", "FEAT_SIDE", "FEAT_SIDE_FINE"]


@dataclass(frozen=True)
class RoiBox:
    """Normalized box corners, validated: 0 <= y1 < y2 <= 1, same for x."""

    y1: float
    x1: float
    y2: float
    x2: float

    def __post_init__(self):
        for name, v in (("y1", self.y1), ("x1", self.x1), ("y2", self.y2), ("x2", self.x2)):
            if not np.isfinite(v):
                raise ValueError(f"RoiBox.{name} is not finite: {v}")
        if not (0.0 <= self.y1 < self.y2 <= 1.0 and 0.0 <= self.x1 < self.x2 <= 1.0):
            raise ValueError(
                f"invalid RoiBox corners ({self.y1}, {self.x1}, {self.y2}, {self.x2}); "
                "need 0 <= y1 < y2 <= 1 and 0 <= x1 < x2 <= 1"
            )

    def as_array(self) -> np.ndarray:
        return np.array([self.y1, self.x1, self.y2, self.x2])

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    def area(self) -> float:
        return self.height * self.width


def _axis_samples(lo: float, hi: float, cells: int, ratio: int) -> np.ndarray:
    # continuous sample positions: per output cell, `ratio` evenly spaced
    # sub-samples centered within the cell
    span = hi - lo
    idx = np.arange(cells * ratio, dtype=np.float64)
    cell = idx // ratio
    sub = idx % ratio
    return lo + span * (cell + (sub + 0.5) / ratio) / cells


def _neighbors(points: np.ndarray, extent: int):
    # cell centers sit at i + 0.5; clamp indices, keep unclamped fractions
    t = points - 0.5
    i0 = np.floor(t).astype(np.int64)
    frac = t - i0
    lo = np.clip(i0, 0, extent - 1)
    hi = np.clip(i0 + 1, 0, extent - 1)
    return lo, hi, frac


def bilinear_sample(grid: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample a (..., H, W) array at continuous points, border-clamped.

    ``ys`` and ``xs`` are 1-D; the result has shape (..., len(ys), len(xs)).
    Plain numpy, no graph; the differentiable path lives in roi_align.
    """
    h, w = grid.shape[-2], grid.shape[-1]
    y0, y1, fy = _neighbors(ys, h)
    x0, x1, fx = _neighbors(xs, w)
    wy0, wy1 = (1.0 - fy)[:, None], fy[:, None]
    wx0, wx1 = (1.0 - fx)[None, :], fx[None, :]
    return (
        grid[..., y0[:, None], x0[None, :]] * (wy0 * wx0)
        + grid[..., y0[:, None], x1[None, :]] * (wy0 * wx1)
        + grid[..., y1[:, None], x0[None, :]] * (wy1 * wx0)
        + grid[..., y1[:, None], x1[None, :]] * (wy1 * wx1)
    )


def roi_align(features: Tensor, roi: RoiBox, output_size: int,
              sampling_ratio: int = 2) -> Tensor:
    """Average-pooled bilinear crop of a (C,H,W) map over a normalized ROI.

    Each of output_size^2 cells averages sampling_ratio^2 exact bilinear
    samples.  With the ROI covering the whole map, output_size == H == W
    and sampling_ratio == 1, the output reproduces the input exactly.
    Gradients flow to the four neighbors of every sample with their
    bilinear weights; the ROI itself is data, not a differentiable input.
    """
    if features.ndim != 3:
        raise ValueError(f"features must be (C,H,W), got {features.shape}")
    if output_size < 1:
        raise ValueError(f"output_size must be >= 1, got {output_size}")
    if sampling_ratio < 1:
        raise ValueError(f"sampling_ratio must be >= 1, got {sampling_ratio}")
    c, h, w = features.shape
    y1, x1, y2, x2 = roi.y1 * h, roi.x1 * w, roi.y2 * h, roi.x2 * w
    if not (y2 > y1 and x2 > x1):
        raise ValueError(f"degenerate ROI after de-normalization: ({y1}, {x1}, {y2}, {x2})")

    s, r = output_size, sampling_ratio
    ys = _axis_samples(y1, y2, s, r)
    xs = _axis_samples(x1, x2, s, r)
    y_lo, y_hi, fy = _neighbors(ys, h)
    x_lo, x_hi, fx = _neighbors(xs, w)

    corner_idx = []
    corner_w = []
    for yi, wy in ((y_lo, 1.0 - fy), (y_hi, fy)):
        for xi, wx in ((x_lo, 1.0 - fx), (x_hi, fx)):
            corner_idx.append(yi[:, None] * w + xi[None, :])
            corner_w.append(wy[:, None] * wx[None, :])

    flat = features.data.reshape(c, h * w)
    samples = np.zeros((c, s * r, s * r))
    for idx, wt in zip(corner_idx, corner_w):
        samples += flat[:, idx] * wt
    out = samples.reshape(c, s, r, s, r).mean(axis=(2, 4))

    def bwd(g):
        gs = np.repeat(np.repeat(g, r, axis=1), r, axis=2) / float(r * r)
        gf = np.zeros((c, h * w))
        ch = np.arange(c)[:, None, None]
        for idx, wt in zip(corner_idx, corner_w):
            np.add.at(gf, (ch, idx[None, :, :]), gs * wt)
        return (gf.reshape(c, h, w),)

    return apply_op("roi_align", (features,), out, bwd)


def roi_align_pair(features: Tensor, roi: RoiBox,
                   sampling_ratio: int = 2) -> tuple[Tensor, Tensor]:
    """The coarse and fine crops of the same ROI: (C,14,14) and (C,56,56).

    Both come from the same features, box and convention, so the fine crop
    is a consistent 4x refinement of the coarse one.
    """
    coarse = roi_align(features, roi, FEAT_SIDE, sampling_ratio)
    fine = roi_align(features, roi, FEAT_SIDE_FINE, sampling_ratio)
    return coarse, fine
