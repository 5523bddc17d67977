"""Surface extraction and cartilage thickness mapping over labeled volumes.

Surfaces are sets of voxel face points: each point sits half a voxel from
its owner voxel's center, toward a 6-neighbor carrying a different label.
Face-to-face distances therefore span the full physical extent of a
structure instead of stopping at voxel centers, which is what makes a
2 mm shell measure 2 mm.  Points are (x, y, z) columns in millimetres;
owner indices are (z, y, x) into the source array.  Voxels outside the
array count as background, so a structure clipped by the volume edge
still closes its outer surface.

The flattened thickness map is a polar grid with one column per degree:
angles run counterclockwise from the in-plane +x direction in the plane
perpendicular to the fitted cylinder axis, and each row is one z slice
(an inner point contributes to the row of its owner voxel).  Empty bins
hold NaN so absence is distinguishable from zero thickness.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .volio import Volume, g17, read_thickness_csv, write_pgm, write_thickness_csv

ANGLE_BINS = 360


# ---- surfaces ---------------------------------------------------------------------


@dataclass(frozen=True)
class SurfaceSet:
    """Face points of one label's boundary, traceable back to their voxels.

    ``mask`` is the source occupancy array; it rides along so signed
    distance checks can ask whether another surface's owner voxel lies
    inside this tissue.
    """

    points: np.ndarray
    owners: np.ndarray
    spacing: tuple[float, float, float]
    mask: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        own = np.asarray(self.owners, dtype=np.int64).reshape(-1, 3)
        if pts.shape[0] != own.shape[0]:
            raise ValueError("points and owners disagree in length")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "owners", own)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "mask", np.asarray(self.mask, dtype=bool))

    def __len__(self) -> int:
        return self.points.shape[0]


_DIRECTIONS = ((0, -1), (0, 1), (1, -1), (1, 1), (2, -1), (2, 1))


def _neighbor_labels(labels: np.ndarray, axis: int, step: int, fill: int) -> np.ndarray:
    """Label of the voxel one step along an array axis, fill outside."""
    out = np.full(labels.shape, fill, dtype=labels.dtype)
    dst = [slice(None)] * 3
    src = [slice(None)] * 3
    if step > 0:
        dst[axis], src[axis] = slice(0, -1), slice(1, None)
    else:
        dst[axis], src[axis] = slice(1, None), slice(0, -1)
    out[tuple(dst)] = labels[tuple(src)]
    return out


def _faces(sel: np.ndarray, axis: int, step: int, spacing) -> tuple[np.ndarray, np.ndarray]:
    own = np.argwhere(sel)
    spacing_xyz = np.asarray(spacing, dtype=np.float64)
    centers = (own[:, ::-1] + 0.5) * spacing_xyz
    offset = np.zeros(3)
    # array axis 0/1/2 is z/y/x, i.e. xyz component 2 - axis
    offset[2 - axis] = 0.5 * step * spacing_xyz[2 - axis]
    return centers + offset, own


def _bundle(parts, spacing, mask) -> SurfaceSet:
    points = np.concatenate([p for p, _ in parts], axis=0)
    owners = np.concatenate([o for _, o in parts], axis=0)
    return SurfaceSet(points, owners, spacing, mask)


def boundary_surface(mask: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> SurfaceSet:
    """Every face of a binary mask toward outside (or past the array edge)."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 3:
        raise ValueError(f"mask must be 3-d, got {mask.ndim}-d")
    if not mask.any():
        raise ValueError("mask is empty")
    occupancy = mask.astype(np.int64)
    parts = []
    for axis, step in _DIRECTIONS:
        nb = _neighbor_labels(occupancy, axis, step, 0)
        parts.append(_faces(mask & (nb == 0), axis, step, spacing))
    return _bundle(parts, spacing, mask)


def extract_surfaces(volume: Volume, tissue_label: int, adjacent_label: int):
    """Split a tissue's boundary into the face it shares with one named
    neighbor (inner) and the face toward everything else (outer).

    For cartilage against bone the inner set is the bone-cartilage
    interface and the outer set the articular surface.  The two sets are
    disjoint by construction: each face sees exactly one neighbor label.
    """
    labels = np.asarray(volume.voxels).astype(np.int64)
    tissue = labels == tissue_label
    if not tissue.any():
        raise ValueError(f"tissue label {tissue_label} absent from volume")
    spacing = tuple(volume.spacing_mm)
    inner_parts, outer_parts = [], []
    for axis, step in _DIRECTIONS:
        nb = _neighbor_labels(labels, axis, step, -1)
        inner_parts.append(_faces(tissue & (nb == adjacent_label), axis, step, spacing))
        outer_parts.append(
            _faces(tissue & (nb != adjacent_label) & (nb != tissue_label), axis, step, spacing)
        )
    return _bundle(inner_parts, spacing, tissue), _bundle(outer_parts, spacing, tissue)


# ---- surface distances ------------------------------------------------------------


@dataclass(frozen=True)
class SurfaceDistance:
    mean: float
    sd: float
    count: int


def surface_distance_stats(gt_surface: SurfaceSet, pred_surface: SurfaceSet,
                           signed: bool = False) -> SurfaceDistance:
    """Nearest-distance statistics from every ground-truth face point to
    the predicted surface.

    Signed mode flips a distance negative when the matched predicted
    point belongs to a voxel inside the ground-truth tissue, separating
    under-segmentation (negative) from over-segmentation (positive).
    sd is the population value, so a surface against itself reports
    exactly 0 +- 0.
    """
    if len(gt_surface) == 0 or len(pred_surface) == 0:
        raise ValueError("surface distance needs two nonempty surfaces")
    d, nearest = cKDTree(pred_surface.points).query(gt_surface.points)
    if signed:
        if gt_surface.mask.shape != pred_surface.mask.shape:
            raise ValueError("signed distances need surfaces from the same voxel grid")
        own = pred_surface.owners[nearest]
        inside = gt_surface.mask[own[:, 0], own[:, 1], own[:, 2]]
        d = np.where(inside, -d, d)
    return SurfaceDistance(float(d.mean()), float(d.std()), int(d.size))


# ---- cylinder fit -----------------------------------------------------------------


@dataclass(frozen=True)
class CylinderModel:
    """Axis line, radius and in-plane residual of a fitted cylinder."""

    axis: np.ndarray
    point: np.ndarray
    radius: float
    residual_rms: float

    def __post_init__(self):
        axis = np.asarray(self.axis, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(axis) - 1.0) > 1e-9:
            raise ValueError("axis direction must be unit length")
        point = np.asarray(self.point, dtype=np.float64).reshape(3)
        if self.radius < 0 or self.residual_rms < 0:
            raise ValueError("radius and residual must be non-negative")
        object.__setattr__(self, "axis", axis)
        object.__setattr__(self, "point", point)


def _plane_basis(axis: np.ndarray):
    """Right-handed in-plane frame; e1 is the +x direction projected into
    the plane (falling back to +y when the axis is nearly x itself)."""
    ref = np.array([1.0, 0.0, 0.0])
    if abs(float(axis @ ref)) > 0.9:
        ref = np.array([0.0, 1.0, 0.0])
    e1 = ref - (ref @ axis) * axis
    e1 = e1 / np.linalg.norm(e1)
    return e1, np.cross(axis, e1)


def _fit_circle(u: np.ndarray, v: np.ndarray):
    """Algebraic least-squares circle; exact on noise-free data."""
    a = np.column_stack([2.0 * u, 2.0 * v, np.ones_like(u)])
    sol, _, rank, _ = np.linalg.lstsq(a, u * u + v * v, rcond=None)
    if rank < 3:
        raise ValueError("points are collinear: no circle fit")
    cu, cv, c = (float(x) for x in sol)
    return cu, cv, math.sqrt(max(c + cu * cu + cv * cv, 0.0))


def _free_axis(pts: np.ndarray, width: float):
    """Alternate between slicing along the current axis guess and fitting
    per-slice circles; the circle centers trace the axis line."""
    axis = np.array([0.0, 0.0, 1.0])
    prev_center = None
    for _ in range(100):
        e1, e2 = _plane_basis(axis)
        t = pts @ axis
        bins = np.round((t - t.min()) / width).astype(np.int64)
        centers = []
        for b in np.unique(bins):
            sel = bins == b
            if sel.sum() >= 6:
                cu, cv, _ = _fit_circle(pts[sel] @ e1, pts[sel] @ e2)
                centers.append(cu * e1 + cv * e2 + float(t[sel].mean()) * axis)
        if len(centers) < 2:
            raise ValueError("free-axis fit needs at least two populated slices")
        centers = np.asarray(centers)
        mean = centers.mean(axis=0)
        _, _, vt = np.linalg.svd(centers - mean)
        direction = vt[0] if vt[0] @ axis >= 0 else -vt[0]
        axis = direction / np.linalg.norm(direction)
        if prev_center is not None and np.linalg.norm(mean - prev_center) < 1e-6:
            break
        prev_center = mean
    return axis, mean


def fit_cylinder_axis(points, axis_constraint: str = "slice_normal") -> CylinderModel:
    """Fit a cylinder axis to a cloud of (x, y, z) mm points.

    slice_normal (default) pins the axis perpendicular to the slice plane
    and reduces the fit to one least-squares circle on the projected
    points.  free alternates slicewise circle fits with a line fit
    through the circle centers until the center stops moving (1e-6 mm)
    or 100 iterations pass.
    """
    pts = np.asarray(getattr(points, "points", points), dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] < 6:
        raise ValueError(f"cylinder fit needs at least 6 points, got {pts.shape[0]}")
    if axis_constraint == "slice_normal":
        axis = np.array([0.0, 0.0, 1.0])
        cu, cv, radius = _fit_circle(pts[:, 0], pts[:, 1])
        point = np.array([cu, cv, float(pts[:, 2].mean())])
    elif axis_constraint == "free":
        span = float(pts[:, 2].max() - pts[:, 2].min())
        axis, point = _free_axis(pts, max(span / 16.0, 1e-6))
        e1, e2 = _plane_basis(axis)
        rel = pts - point
        cu, cv, radius = _fit_circle(rel @ e1, rel @ e2)
        point = point + cu * e1 + cv * e2
    else:
        raise ValueError(f"axis_constraint must be slice_normal or free, got {axis_constraint!r}")
    rho = np.linalg.norm(np.cross(pts - point, axis), axis=1)
    residual = float(np.sqrt(np.mean((rho - radius) ** 2)))
    return CylinderModel(axis, point, radius, residual)


# ---- thickness --------------------------------------------------------------------


def thickness_samples(inner: SurfaceSet, outer: SurfaceSet) -> np.ndarray:
    """Per-inner-point thickness: distance to the nearest outer point."""
    if len(inner) == 0 or len(outer) == 0:
        raise ValueError("thickness needs two nonempty surfaces")
    d, _ = cKDTree(outer.points).query(inner.points)
    return d


@dataclass(frozen=True)
class ThicknessMap:
    """Polar thickness grid: values[angle_deg, slice] in mm, NaN = empty."""

    values: np.ndarray
    slice_spacing_mm: float
    provenance: str
    max_thickness_mm: float = 10.0
    excluded: int = 0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] != ANGLE_BINS:
            raise ValueError(f"thickness grid wants {ANGLE_BINS} angle rows, got {values.shape}")
        filled = values[~np.isnan(values)]
        if filled.size and (filled.min() < 0 or filled.max() > self.max_thickness_mm):
            raise ValueError("thickness values must lie in [0, max_thickness_mm]")
        if self.provenance not in ("gt", "prediction"):
            raise ValueError(f"provenance must be gt or prediction, got {self.provenance!r}")
        if self.slice_spacing_mm <= 0:
            raise ValueError("slice_spacing_mm must be positive")
        if self.excluded < 0:
            raise ValueError("excluded count cannot be negative")
        object.__setattr__(self, "values", values)

    @property
    def n_slices(self) -> int:
        return self.values.shape[1]

    @property
    def covered(self) -> np.ndarray:
        return ~np.isnan(self.values)


def flatten_radial(inner: SurfaceSet, samples: np.ndarray, cylinder: CylinderModel,
                   n_slices: int, max_thickness_mm: float = 10.0,
                   provenance: str = "gt") -> ThicknessMap:
    """Project per-point thickness onto the angle x slice grid.

    The angle is the point's position around the cylinder axis, floored
    to whole degrees; the slice is the owner voxel's z index.  Bins
    average their samples.  Samples above max_thickness_mm are far-field
    mismatches, not anatomy: they are dropped and counted in `excluded`.
    """
    samples = np.asarray(samples, dtype=np.float64).reshape(-1)
    if samples.size != len(inner):
        raise ValueError("need exactly one thickness sample per inner point")
    if n_slices < 1:
        raise ValueError(f"n_slices must be >= 1, got {n_slices}")
    rows = inner.owners[:, 0]
    if rows.size and rows.max() >= n_slices:
        raise ValueError("owner slice index outside the requested grid")
    e1, e2 = _plane_basis(cylinder.axis)
    rel = inner.points - cylinder.point
    angles = np.degrees(np.arctan2(rel @ e2, rel @ e1)) % 360.0
    cols = np.floor(angles).astype(np.int64) % ANGLE_BINS

    keep = samples <= max_thickness_mm
    sums = np.zeros((ANGLE_BINS, n_slices))
    counts = np.zeros((ANGLE_BINS, n_slices))
    np.add.at(sums, (cols[keep], rows[keep]), samples[keep])
    np.add.at(counts, (cols[keep], rows[keep]), 1.0)
    values = np.full((ANGLE_BINS, n_slices), np.nan)
    hit = counts > 0
    values[hit] = sums[hit] / counts[hit]
    return ThicknessMap(values, float(inner.spacing[2]), provenance,
                        max_thickness_mm, int(np.count_nonzero(~keep)))


@dataclass(frozen=True)
class ThicknessDiff:
    """Per-bin a - b over jointly covered bins, NaN elsewhere."""

    values: np.ndarray
    mean: float
    sd: float
    covered: int


def thickness_diff(map_a: ThicknessMap, map_b: ThicknessMap) -> ThicknessDiff:
    """Bin-wise difference of two thickness maps on their shared coverage."""
    if map_a.values.shape != map_b.values.shape:
        raise ValueError(
            f"thickness maps differ in shape: {map_a.values.shape} vs {map_b.values.shape}"
        )
    both = map_a.covered & map_b.covered
    values = np.full(map_a.values.shape, np.nan)
    values[both] = map_a.values[both] - map_b.values[both]
    if both.any():
        mean, sd = float(values[both].mean()), float(values[both].std())
    else:
        mean, sd = math.nan, math.nan
    return ThicknessDiff(values, mean, sd, int(both.sum()))


# ---- thickness map files ----------------------------------------------------------


def write_thickness_map(tm: ThicknessMap, path) -> None:
    """Write the polar grid as a thickness CSV plus a PGM render next to it.

    The CSV is the shared delimited format (metadata line, one row per
    slice, 360 degree columns, empty cell for an uncovered bin); the map's
    clamp and exclusion count ride along as extra metadata tokens.  The PGM
    gets the same stem with a .pgm suffix.
    """
    path = Path(path)
    write_thickness_csv(
        tm.values, tm.slice_spacing_mm, path, kind="thickness", source=tm.provenance,
        extra={"max_thickness_mm": g17(tm.max_thickness_mm), "excluded": str(tm.excluded)},
    )
    write_pgm(tm.values.T, path.with_suffix(".pgm"))


def read_thickness_map(path) -> ThicknessMap:
    values, meta = read_thickness_csv(path)
    if values.shape[1] == 0:
        raise ValueError(f"{path}: no slice rows")
    return ThicknessMap(values, meta["slice_spacing_mm"], meta["source"],
                        float(meta.get("max_thickness_mm", 10.0)),
                        int(meta.get("excluded", 0)))
