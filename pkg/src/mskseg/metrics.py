"""Overlap, boundary-distance, detection, and volumetry metrics.

Conventions, fixed here and relied on by the report writers:

* dice of two empty masks is 1, so empty-slice evaluation does not poison
  per-volume averages
* precision with no positive predictions is None, a distinct outcome
  rather than a number
* Hausdorff point sets are boundary voxel centers under the 6-neighbor
  complement test (4-neighbor in 2-D); distances are symmetric
* average Hausdorff is the max of the two directed mean distances
* the paired coefficient of variation is the RMS within-subject CoV
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.spatial import cKDTree

from .volio import CovTable, Volume


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def domain_size(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion_counts(pred, gt) -> ConfusionCounts:
    """Voxelwise counts of a binary prediction against a binary reference."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    tp = int(np.logical_and(pred, gt).sum())
    fp = int(np.logical_and(pred, ~gt).sum())
    fn = int(np.logical_and(~pred, gt).sum())
    return ConfusionCounts(tp, fp, fn, pred.size - tp - fp - fn)


def precision(counts: ConfusionCounts) -> float | None:
    """TP/(TP+FP); None when nothing was predicted positive."""
    if counts.tp + counts.fp == 0:
        return None
    return counts.tp / (counts.tp + counts.fp)


def dice(pred, gt) -> float:
    c = confusion_counts(pred, gt)
    denom = 2 * c.tp + c.fp + c.fn
    if denom == 0:
        return 1.0
    return 2 * c.tp / denom


# ---- boundary point sets -----------------------------------------------------------


@dataclass(frozen=True)
class PointSet:
    """Points in physical mm coordinates, one column per mask axis.

    ``spacing`` is the voxel pitch per axis in the same order as the
    columns, kept so distances can be reported in voxel units again.
    """

    points: np.ndarray
    spacing: tuple

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2:
            raise ValueError(f"points must be (n, d), got shape {pts.shape}")
        if len(self.spacing) != pts.shape[1]:
            raise ValueError(
                f"spacing has {len(self.spacing)} axes for {pts.shape[1]}-D points"
            )
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    def __len__(self):
        return self.points.shape[0]

    @classmethod
    def from_mask(cls, mask, spacing=None) -> "PointSet":
        """Boundary voxel centers of a binary mask, at (index + 0.5) * spacing.

        A voxel is boundary when any face neighbor (out-of-bounds counts as
        outside) is not in the mask.
        """
        mask = np.asarray(mask, dtype=bool)
        spacing = (1.0,) * mask.ndim if spacing is None else tuple(spacing)
        boundary = np.zeros_like(mask)
        for axis in range(mask.ndim):
            for step in (1, -1):
                neighbor = np.zeros_like(mask)
                src = [slice(None)] * mask.ndim
                dst = [slice(None)] * mask.ndim
                src[axis] = slice(1, None) if step == 1 else slice(None, -1)
                dst[axis] = slice(None, -1) if step == 1 else slice(1, None)
                neighbor[tuple(dst)] = mask[tuple(src)]
                boundary |= mask & ~neighbor
        idx = np.argwhere(boundary)
        return cls((idx + 0.5) * np.asarray(spacing), spacing)


def _directed_distances(a: PointSet, b: PointSet, units: str) -> np.ndarray:
    pa, pb = a.points, b.points
    if units == "voxel":
        pa = pa / np.asarray(a.spacing)
        pb = pb / np.asarray(b.spacing)
    elif units != "mm":
        raise ValueError(f"units must be 'mm' or 'voxel', got {units!r}")
    d, _ = cKDTree(pb).query(pa)
    return d


def _check_pair(a: PointSet, b: PointSet):
    if len(a) == 0 or len(b) == 0:
        raise ValueError("distance metrics need nonempty point sets")
    if a.points.shape[1] != b.points.shape[1]:
        raise ValueError(
            f"point dimensionality differs: {a.points.shape[1]} vs {b.points.shape[1]}"
        )


def hausdorff(a: PointSet, b: PointSet, units: str = "mm") -> float:
    """Max over both directions of the nearest-point distance."""
    _check_pair(a, b)
    return float(max(_directed_distances(a, b, units).max(),
                     _directed_distances(b, a, units).max()))


def average_hausdorff(a: PointSet, b: PointSet, units: str = "mm") -> float:
    """Max of the two directed mean nearest-point distances."""
    _check_pair(a, b)
    return float(max(_directed_distances(a, b, units).mean(),
                     _directed_distances(b, a, units).mean()))


# ---- detection quality -------------------------------------------------------------


def _mask_of(obj) -> np.ndarray:
    return np.asarray(getattr(obj, "mask", obj), dtype=bool)


def average_precision(detections, gt_instances, mask_iou_threshold: float = 0.5) -> float | None:
    """Area under the interpolated precision-recall curve at one mask IoU.

    detections need .score and .image_mask, sorted by score descending;
    ground truth items are masks or anything with a .mask.  Matching is
    greedy in score order, each reference matched at most once.  Returns
    None when there is no ground truth to recall.
    """
    gt_masks = [_mask_of(g) for g in gt_instances]
    if not gt_masks:
        return None
    scores = [float(d.score) for d in detections]
    if any(scores[i] < scores[i + 1] for i in range(len(scores) - 1)):
        raise ValueError("detections must be sorted by score descending")
    taken = [False] * len(gt_masks)
    tp_flags = []
    for det in detections:
        mask = np.asarray(det.image_mask, dtype=bool)
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(gt_masks):
            if taken[j]:
                continue
            union = np.logical_or(mask, gt).sum()
            if union == 0:
                continue
            iou = np.logical_and(mask, gt).sum() / union
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= mask_iou_threshold:
            taken[best_j] = True
            tp_flags.append(True)
        else:
            tp_flags.append(False)
    if not any(tp_flags):
        return 0.0
    tp_cum = np.cumsum(tp_flags)
    ranks = np.arange(1, len(tp_flags) + 1)
    prec = tp_cum / ranks
    rec = tp_cum / len(gt_masks)
    # interpolated envelope: precision at recall r is the best precision at
    # any recall >= r; integrate over recall increments
    env = np.maximum.accumulate(prec[::-1])[::-1]
    ap = 0.0
    prev_rec = 0.0
    for p, r, flag in zip(env, rec, tp_flags):
        if flag:
            ap += (r - prev_rec) * p
            prev_rec = r
    return float(ap)


# ---- volumetry ---------------------------------------------------------------------


def fluid_volume(volume: Volume, label_id: int) -> float:
    """Milliliters of one label: voxel count times voxel volume over 1000."""
    if volume.kind != "labels":
        raise ValueError("fluid_volume needs a labels volume")
    if label_id not in volume.label_table:
        warnings.warn(
            f"label id {label_id} is not declared in the volume; returning 0 mL",
            stacklevel=2,
        )
        return 0.0
    count = int((volume.voxels == label_id).sum())
    sx, sy, sz = volume.spacing_mm
    return count * sx * sy * sz / 1000.0


def cov_and_differences(pairs) -> tuple[float, float, float]:
    """(CoV, mean |a-b|, sd of |a-b|) for paired measurements.

    Per subject, sd_i = |a_i - b_i| / sqrt(2) and mean_i = (a_i + b_i) / 2;
    CoV is sqrt(mean of (sd_i/mean_i)^2).  Pairs with zero mean are
    excluded with a warning.  The difference sd uses ddof=1 and is 0.0
    when only one pair remains.
    """
    arr = np.asarray(pairs, dtype=np.float64).reshape(-1, 2)
    if arr.shape[0] == 0:
        raise ValueError("need at least one measurement pair")
    means = arr.mean(axis=1)
    keep = means != 0.0
    if not keep.all():
        warnings.warn(
            f"excluded {int((~keep).sum())} zero-mean pair(s) from the CoV",
            stacklevel=2,
        )
    arr, means = arr[keep], means[keep]
    if arr.shape[0] == 0:
        raise ValueError("all pairs have zero mean; CoV undefined")
    diffs = np.abs(arr[:, 0] - arr[:, 1])
    sds = diffs / np.sqrt(2.0)
    cov = float(np.sqrt(np.mean((sds / means) ** 2)))
    sd = float(diffs.std(ddof=1)) if diffs.size > 1 else 0.0
    return cov, float(diffs.mean()), sd


def cov_table(labels, measurements) -> CovTable:
    """Pairwise CoV matrix over measurement columns aligned by subject.

    measurements is (n_subjects, n_methods); entry (i, j) is the paired
    CoV of columns i and j, zero on the diagonal by construction.
    """
    arr = np.asarray(measurements, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != len(labels):
        raise ValueError(
            f"measurements must be (subjects, {len(labels)}), got {arr.shape}"
        )
    k = len(labels)
    values = np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            cov, _, _ = cov_and_differences(np.stack([arr[:, i], arr[:, j]], axis=1))
            values[i, j] = values[j, i] = cov
    return CovTable(tuple(labels), values)


# ---- intensity thresholding ---------------------------------------------------------


def otsu_from_histogram(counts, edges) -> float:
    """Threshold maximizing between-class variance over histogram bins.

    Evaluates every split k (classes = bins <= k vs > k), maximizes
    w0*w1*(mu0-mu1)^2 at bin centers, breaks ties toward the lower
    threshold, and returns the edge above the chosen split.  Scores are
    compared in exact rational arithmetic (counts and binary-float edges
    are both exactly representable), so near-ties cannot flip the argmax.
    """
    counts = np.asarray(counts, dtype=np.float64)
    edges = np.asarray(edges, dtype=np.float64)
    if counts.ndim != 1 or edges.shape != (counts.size + 1,):
        raise ValueError("need 1-D counts with len(edges) == len(counts) + 1")
    if (counts < 0).any():
        raise ValueError("histogram counts must be non-negative")
    if counts.sum() <= 0:
        raise ValueError("histogram is empty")
    if (counts > 0).sum() < 2:
        raise ValueError("constant region: no separable classes")
    cb = [Fraction(c) for c in counts.tolist()]
    ce = [Fraction(e) for e in edges.tolist()]
    centers = [(ce[i] + ce[i + 1]) / 2 for i in range(counts.size)]
    total = sum(cb)
    moment = sum(c * x for c, x in zip(cb, centers))
    w0 = t0 = Fraction(0)
    best_k, best_score = -1, None
    for k in range(counts.size - 1):
        w0 += cb[k]
        t0 += cb[k] * centers[k]
        w1 = total - w0
        if w0 == 0 or w1 == 0:
            continue
        # total^2 * w0*w1*(mu0-mu1)^2, a positive constant multiple of the
        # between-class variance, so the argmax is unchanged
        gap = t0 * total - w0 * moment
        score = gap * gap / (w0 * w1)
        if best_score is None or score > best_score:
            best_k, best_score = k, score
    return float(edges[best_k + 1])


def otsu_threshold(values, bins: int = 256) -> float:
    """Otsu split of raw intensities through a uniform histogram."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("no intensity values")
    lo, hi = float(values.min()), float(values.max())
    if lo == hi:
        raise ValueError("constant region: no separable classes")
    counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
    return otsu_from_histogram(counts, edges)
