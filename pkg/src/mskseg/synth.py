"""Synthetic knee-like scenes with pixel-exact instance masks.

Each scene holds one elliptical bone, one cartilage-like crescent (an annulus
sector concentric with the bone, so its radial thickness is known analytically
as outer minus inner radius), and up to three disjoint effusion-like blobs.
Intensities are class-separable Gaussians. Geometry uses pixel centers at
index + 0.5, the same continuous convention as the ROI sampler.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import Tensor
from .volio import Annotation, Volume, read_annotations, read_volume, write_annotations, write_volume

CLASS_NAMES = {
    0: "background",
    1: "femur_like",
    2: "tibia_like",
    3: "cartilage_like",
    4: "effusion_like",
}
N_CLASSES = len(CLASS_NAMES)
CARTILAGE_ID = 3
EFFUSION_ID = 4


@dataclass(frozen=True)
class SceneConfig:
    image_size: int = 128
    bone_class: int = 1
    bone_axis_min: float = 12.0
    bone_axis_max: float = 20.0
    crescent_inner: float = 20.0
    crescent_outer: float = 24.0
    sector_half_deg_min: float = 50.0
    sector_half_deg_max: float = 80.0
    blob_radius_min: float = 3.0
    blob_radius_max: float = 6.0
    max_blobs: int = 3
    noise_sigma: float = 0.03
    mean_background: float = 0.15
    mean_bone: float = 0.85
    mean_cartilage: float = 0.55
    mean_effusion: float = 0.35

    def __post_init__(self):
        if self.image_size < 32:
            raise ValueError(f"image_size must be at least 32, got {self.image_size}")
        if self.bone_class not in (1, 2):
            raise ValueError(f"bone_class must be 1 or 2, got {self.bone_class}")
        if not 0 < self.bone_axis_min <= self.bone_axis_max:
            raise ValueError("bone semi-axes must satisfy 0 < min <= max")
        if not 0 < self.crescent_inner < self.crescent_outer:
            raise ValueError("crescent radii must satisfy 0 < inner < outer")
        thickness = self.crescent_outer - self.crescent_inner
        if thickness > self.bone_axis_min:
            raise ValueError(
                f"crescent {thickness:g} px thick exceeds the smallest bone semi-axis "
                f"{self.bone_axis_min:g}"
            )
        if self.crescent_inner < self.bone_axis_max:
            raise ValueError(
                f"crescent inner radius {self.crescent_inner:g} would cut into a bone of "
                f"semi-axis up to {self.bone_axis_max:g}"
            )
        if 2 * (self.crescent_outer + 2.0) > self.image_size:
            raise ValueError(
                f"image_size {self.image_size} cannot contain a crescent of outer radius "
                f"{self.crescent_outer:g}"
            )
        if not 0 <= self.max_blobs <= 3:
            raise ValueError(f"max_blobs must be in 0..3, got {self.max_blobs}")
        if not 0 < self.blob_radius_min <= self.blob_radius_max:
            raise ValueError("blob radii must satisfy 0 < min <= max")
        if 2 * (self.blob_radius_max + 1.0) > self.image_size:
            raise ValueError("blobs do not fit in the image")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")


@dataclass(frozen=True)
class Instance:
    """One ground-truth object: class id, full-image boolean mask, tight
    normalized (y1, x1, y2, x2) box containing every mask pixel."""

    class_id: int
    mask: np.ndarray
    box: tuple[float, float, float, float]


@dataclass
class SynthScene:
    image: Tensor
    instances: list[Instance]
    params: dict = field(default_factory=dict)
    seed: tuple[int, int] | None = None

    def label_map(self) -> np.ndarray:
        side = self.image.shape[1]
        out = np.zeros((side, side), dtype=np.uint16)
        for inst in self.instances:
            out[inst.mask] = inst.class_id
        return out


def _tight_box(mask: np.ndarray, side: int) -> tuple[float, float, float, float]:
    ys, xs = np.nonzero(mask)
    return (
        float(ys.min()) / side,
        float(xs.min()) / side,
        float(ys.max() + 1) / side,
        float(xs.max() + 1) / side,
    )


def _make_scene(cfg: SceneConfig, rng: np.random.Generator, seed_pair) -> SynthScene:
    side = cfg.image_size
    ys, xs = np.meshgrid(np.arange(side) + 0.5, np.arange(side) + 0.5, indexing="ij")

    margin = cfg.crescent_outer + 2.0
    cy = float(rng.uniform(margin, side - margin))
    cx = float(rng.uniform(margin, side - margin))
    ay = float(rng.uniform(cfg.bone_axis_min, cfg.bone_axis_max))
    ax = float(rng.uniform(cfg.bone_axis_min, cfg.bone_axis_max))
    theta = float(rng.uniform(0.0, math.pi))
    dy, dx = ys - cy, xs - cx
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    bone = (u / ax) ** 2 + (v / ay) ** 2 <= 1.0
    if not bone.any():
        raise RuntimeError("bone mask came out empty; config is out of range")

    radius = np.hypot(dy, dx)
    phi0 = float(rng.uniform(0.0, 2.0 * math.pi))
    half = math.radians(float(rng.uniform(cfg.sector_half_deg_min, cfg.sector_half_deg_max)))
    wrapped = np.angle(np.exp(1j * (np.arctan2(dy, dx) - phi0)))
    crescent = (
        (radius >= cfg.crescent_inner) & (radius <= cfg.crescent_outer) & (np.abs(wrapped) <= half)
    )
    if not crescent.any():
        raise RuntimeError("crescent mask came out empty; config is out of range")

    occupied = bone | crescent
    blobs: list[tuple[float, float, float]] = []
    blob_masks: list[np.ndarray] = []
    n_blobs = int(rng.integers(0, cfg.max_blobs + 1))
    for _ in range(n_blobs):
        for _attempt in range(40):
            rho = float(rng.uniform(cfg.blob_radius_min, cfg.blob_radius_max))
            by = float(rng.uniform(rho + 1.0, side - rho - 1.0))
            bx = float(rng.uniform(rho + 1.0, side - rho - 1.0))
            mask = np.hypot(ys - by, xs - bx) <= rho
            if mask.any() and not (mask & occupied).any():
                occupied = occupied | mask
                blobs.append((by, bx, rho))
                blob_masks.append(mask)
                break

    means = np.full((side, side), cfg.mean_background)
    means[bone] = cfg.mean_bone
    means[crescent] = cfg.mean_cartilage
    for mask in blob_masks:
        means[mask] = cfg.mean_effusion
    image = means + rng.normal(0.0, cfg.noise_sigma, size=(side, side))

    instances = [
        Instance(cfg.bone_class, bone, _tight_box(bone, side)),
        Instance(CARTILAGE_ID, crescent, _tight_box(crescent, side)),
    ]
    for mask in blob_masks:
        instances.append(Instance(EFFUSION_ID, mask, _tight_box(mask, side)))

    params = {
        "center": (cy, cx),
        "axes": (ay, ax),
        "angle": theta,
        "crescent": (cfg.crescent_inner, cfg.crescent_outer, phi0, half),
        "blobs": blobs,
    }
    return SynthScene(Tensor(image[None, :, :]), instances, params, seed_pair)


def synth_generate(n: int, seed: int, scene_config: SceneConfig | None = None) -> list[SynthScene]:
    """Deterministic scene list; scene i draws from default_rng([seed, i])."""
    if n < 1:
        raise ValueError(f"need at least one scene, got n={n}")
    cfg = scene_config if scene_config is not None else SceneConfig()
    return [
        _make_scene(cfg, np.random.default_rng([seed, i]), (seed, i)) for i in range(n)
    ]


# ---- dataset directory layout ----------------------------------------------------


def write_dataset(scenes, out_dir, spacing_mm=(1.0, 1.0, 1.0)) -> None:
    """One intensity volume, one label volume, per-instance mask volumes, and
    one annotation file per scene."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, scene in enumerate(scenes):
        side = scene.image.shape[1]
        image = Volume(
            (side, side, 1), spacing_mm, "intensity", scene.image.data.astype(np.float32)
        )
        write_volume(image, out_dir / f"scene_{i:03d}_image.vol")
        labels = Volume(
            (side, side, 1), spacing_mm, "labels", scene.label_map()[None], dict(CLASS_NAMES)
        )
        write_volume(labels, out_dir / f"scene_{i:03d}_labels.vol")
        anns = []
        for j, inst in enumerate(scene.instances):
            name = f"scene_{i:03d}_inst_{j:02d}.vol"
            mask_vol = Volume(
                (side, side, 1),
                spacing_mm,
                "labels",
                (inst.mask[None].astype(np.uint16) * inst.class_id),
                {0: CLASS_NAMES[0], inst.class_id: CLASS_NAMES[inst.class_id]},
            )
            write_volume(mask_vol, out_dir / name)
            anns.append(Annotation(inst.class_id, inst.box, name))
        write_annotations(anns, out_dir / f"scene_{i:03d}.ann")


def load_dataset(data_dir) -> list[SynthScene]:
    data_dir = Path(data_dir)
    image_paths = sorted(data_dir.glob("scene_*_image.vol"))
    if not image_paths:
        raise FileNotFoundError(f"no scene_*_image.vol files under {data_dir}")
    scenes = []
    for image_path in image_paths:
        stem = image_path.name[: -len("_image.vol")]
        vol = read_volume(image_path)
        if vol.kind != "intensity" or vol.dims[2] != 1:
            raise ValueError(f"{image_path}: expected a single-slice intensity volume")
        image = Tensor(vol.voxels[0].astype(np.float64)[None, :, :])
        instances = []
        for ann in read_annotations(data_dir / f"{stem}.ann"):
            mask_vol = read_volume(data_dir / ann.mask_file)
            mask = mask_vol.voxels[0] == ann.class_id
            if not mask.any():
                raise ValueError(f"{ann.mask_file}: instance mask is empty")
            instances.append(Instance(ann.class_id, mask, ann.box))
        scenes.append(SynthScene(image, instances))
    return scenes
