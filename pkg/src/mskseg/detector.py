"""Toy-scale instance segmentation network.

A three-level pyramid backbone (strides 2, 4, 8) feeds a shared region
proposal head, a box/class head on 14x14 aligned features, and one of two
mask heads: the baseline emits K x 28 x 28 logits from the 14x14 features;
the improved variant decodes further to 56 x 56 and fuses a second 56x56
feature crop of the same ROI through concatenation before predicting.

Boxes are normalized (y1, x1, y2, x2). Box deltas are (dy, dx, log dh,
log dw) against the anchor center and size. Checkpoints are a self-describing
binary container and round-trip bit-exactly.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .autograd import Tensor, concat, conv2d, conv2d_transpose, linear, upsample_nearest2
from .roialign import FEAT_SIDE, RoiBox, bilinear_sample, roi_align, roi_align_pair
from .volio import Volume, g17, read_volume, write_volume

CHECKPOINT_MAGIC = b"IMRK1"
DETECTIONS_MAGIC = "IMRKDET1"
STRIDES = (2, 4, 8)

# ROI-to-level routing by sqrt(normalized area); larger ROIs read coarser maps
LEVEL_CUTS = (0.16, 0.32)

MASK_SIDE_BASELINE = 28
MASK_SIDE_IMPROVED = 56


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 128
    n_classes: int = 5
    channels: int = 32
    mask_channels: int = 64
    fc_units: int = 128
    head: str = "improved"
    anchor_scales: tuple = ((0.05, 0.08, 0.12), (0.12, 0.2, 0.3), (0.3, 0.45, 0.65))
    anchor_ratios: tuple = (0.5, 1.0, 2.0)
    rpn_nms_iou: float = 0.7
    rpn_pre_nms: int = 1024
    rpn_post_nms: int = 64
    nms_iou: float = 0.5
    score_threshold: float = 0.5
    max_detections: int = 20

    def __post_init__(self):
        object.__setattr__(
            self,
            "anchor_scales",
            tuple(tuple(float(s) for s in level) for level in self.anchor_scales),
        )
        object.__setattr__(self, "anchor_ratios", tuple(float(r) for r in self.anchor_ratios))
        if self.image_size < 32 or self.image_size % 8 != 0:
            raise ValueError(f"image_size must be a multiple of 8 and at least 32, got {self.image_size}")
        if self.n_classes < 2:
            raise ValueError(f"need background plus at least one class, got n_classes={self.n_classes}")
        if min(self.channels, self.mask_channels, self.fc_units) < 1:
            raise ValueError("channel and unit counts must be positive")
        if self.head not in ("baseline", "improved"):
            raise ValueError(f"head must be baseline or improved, got {self.head!r}")
        if len(self.anchor_scales) != len(STRIDES):
            raise ValueError(f"anchor_scales must list {len(STRIDES)} levels")
        counts = {len(level) for level in self.anchor_scales}
        if counts == {0} or len(counts) != 1:
            raise ValueError("every level needs the same nonzero number of anchor scales")
        if any(not 0 < s <= 1 for level in self.anchor_scales for s in level):
            raise ValueError("anchor scales must lie in (0, 1]")
        if not self.anchor_ratios or any(r <= 0 for r in self.anchor_ratios):
            raise ValueError("anchor ratios must be positive")
        for name in ("rpn_nms_iou", "nms_iou"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")
        if not 0 <= self.score_threshold <= 1:
            raise ValueError("score_threshold must lie in [0, 1]")
        if min(self.rpn_pre_nms, self.rpn_post_nms, self.max_detections) < 1:
            raise ValueError("proposal and detection caps must be positive")

    @property
    def anchors_per_cell(self) -> int:
        return len(self.anchor_scales[0]) * len(self.anchor_ratios)

    @property
    def feature_sides(self) -> tuple[int, ...]:
        return tuple(self.image_size // s for s in STRIDES)

    @property
    def mask_side(self) -> int:
        return MASK_SIDE_IMPROVED if self.head == "improved" else MASK_SIDE_BASELINE


# ---- parameters ------------------------------------------------------------------


def _param_specs(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    c, m, k = cfg.channels, cfg.mask_channels, cfg.n_classes
    a = cfg.anchors_per_cell
    specs = [("backbone.stem.w", (c, 1, 3, 3)), ("backbone.stem.b", (c,))]
    for s in (1, 2, 3):
        if s > 1:
            specs += [(f"backbone.stage{s}.down.w", (c, c, 3, 3)), (f"backbone.stage{s}.down.b", (c,))]
        specs += [
            (f"backbone.stage{s}.conv1.w", (c, c, 3, 3)), (f"backbone.stage{s}.conv1.b", (c,)),
            (f"backbone.stage{s}.conv2.w", (c, c, 3, 3)), (f"backbone.stage{s}.conv2.b", (c,)),
        ]
    for lvl in (2, 3, 4):
        specs += [(f"fpn.lateral{lvl}.w", (c, c, 1, 1)), (f"fpn.lateral{lvl}.b", (c,))]
    specs += [
        ("rpn.conv.w", (c, c, 3, 3)), ("rpn.conv.b", (c,)),
        ("rpn.obj.w", (a, c, 1, 1)), ("rpn.obj.b", (a,)),
        ("rpn.box.w", (4 * a, c, 1, 1)), ("rpn.box.b", (4 * a,)),
    ]
    flat = c * FEAT_SIDE * FEAT_SIDE
    specs += [
        ("head.fc1.w", (flat, cfg.fc_units)), ("head.fc1.b", (cfg.fc_units,)),
        ("head.cls.w", (cfg.fc_units, k)), ("head.cls.b", (k,)),
        ("head.box.w", (cfg.fc_units, 4 * k)), ("head.box.b", (4 * k,)),
    ]
    for prefix in ("maskb", "maski"):
        specs += [(f"{prefix}.conv1.w", (m, c, 3, 3)), (f"{prefix}.conv1.b", (m,))]
        for i in (2, 3, 4):
            specs += [(f"{prefix}.conv{i}.w", (m, m, 3, 3)), (f"{prefix}.conv{i}.b", (m,))]
    specs += [
        ("maskb.deconv.w", (m, m, 2, 2)), ("maskb.deconv.b", (m,)),
        ("maskb.out.w", (k, m, 1, 1)), ("maskb.out.b", (k,)),
        ("maski.deconv1.w", (m, m, 2, 2)), ("maski.deconv1.b", (m,)),
        ("maski.deconv2.w", (m, m, 2, 2)), ("maski.deconv2.b", (m,)),
        ("maski.fuse1.w", (m, m + c, 3, 3)), ("maski.fuse1.b", (m,)),
        ("maski.fuse2.w", (m, m, 3, 3)), ("maski.fuse2.b", (m,)),
        ("maski.out.w", (k, m, 1, 1)), ("maski.out.b", (k,)),
    ]
    return specs


# Readout layers start near zero instead of at He scale: box refinement then
# begins as the identity and classification as uniform, so early detections are
# sane and the regression heads fit instead of unlearning large random offsets.
_READOUT_STD = {"rpn.obj.w": 0.01, "rpn.box.w": 0.001, "head.cls.w": 0.01, "head.box.w": 0.001}


def init_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    """He-style weights drawn in a fixed spec order; biases zero except the
    RPN objectness bias, set to -2 so early proposals start sparse."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in _param_specs(cfg):
        if name.endswith(".b"):
            data = np.full(shape, -2.0) if name == "rpn.obj.b" else np.zeros(shape)
        else:
            if len(shape) == 4:
                fan_in = (shape[0] if ".deconv" in name else shape[1]) * shape[2] * shape[3]
            else:
                fan_in = shape[0]
            std = _READOUT_STD.get(name, math.sqrt(2.0 / fan_in))
            data = rng.normal(0.0, std, size=shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


# ---- anchors and box coding -------------------------------------------------------


def generate_anchors(cfg: ModelConfig) -> np.ndarray:
    """All anchors over all levels, ordered (level, anchor-kind, row, col),
    matching the raveled layout of the RPN output maps. Clipped to [0, 1]."""
    out = []
    for scales, side in zip(cfg.anchor_scales, cfg.feature_sides):
        centers = (np.arange(side) + 0.5) / side
        yy, xx = np.meshgrid(centers, centers, indexing="ij")
        kinds = [(s * math.sqrt(r), s / math.sqrt(r)) for s in scales for r in cfg.anchor_ratios]
        level = np.empty((len(kinds), side, side, 4))
        for i, (h, w) in enumerate(kinds):
            level[i, :, :, 0] = yy - h / 2
            level[i, :, :, 1] = xx - w / 2
            level[i, :, :, 2] = yy + h / 2
            level[i, :, :, 3] = xx + w / 2
        out.append(level.reshape(-1, 4))
    return np.clip(np.concatenate(out, axis=0), 0.0, 1.0)


def level_anchor_counts(cfg: ModelConfig) -> tuple[int, ...]:
    return tuple(side * side * cfg.anchors_per_cell for side in cfg.feature_sides)


def _centers(boxes: np.ndarray, what: str):
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    h = boxes[:, 2] - boxes[:, 0]
    w = boxes[:, 3] - boxes[:, 1]
    if (h <= 0).any() or (w <= 0).any():
        raise ValueError(f"non-positive {what} extent")
    return boxes[:, 0] + h / 2, boxes[:, 1] + w / 2, h, w


def encode_boxes(anchors: np.ndarray, gt_boxes: np.ndarray) -> np.ndarray:
    acy, acx, ah, aw = _centers(anchors, "anchor")
    gcy, gcx, gh, gw = _centers(gt_boxes, "box")
    return np.stack(
        [(gcy - acy) / ah, (gcx - acx) / aw, np.log(gh / ah), np.log(gw / aw)], axis=1
    )


def decode_boxes(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    acy, acx, ah, aw = _centers(anchors, "anchor")
    deltas = np.asarray(deltas, dtype=float).reshape(-1, 4)
    cy = acy + deltas[:, 0] * ah
    cx = acx + deltas[:, 1] * aw
    h = ah * np.exp(deltas[:, 2])
    w = aw * np.exp(deltas[:, 3])
    boxes = np.stack([cy - h / 2, cx - w / 2, cy + h / 2, cx + w / 2], axis=1)
    return np.clip(boxes, 0.0, 1.0)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    yy1 = np.maximum(a[:, None, 0], b[None, :, 0])
    xx1 = np.maximum(a[:, None, 1], b[None, :, 1])
    yy2 = np.minimum(a[:, None, 2], b[None, :, 2])
    xx2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(yy2 - yy1, 0, None) * np.clip(xx2 - xx1, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy descending-score suppression; ties keep the lower index.
    Survivors have pairwise IoU <= iou_threshold."""
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    scores = np.asarray(scores, dtype=float).reshape(-1)
    if boxes.shape[0] != scores.shape[0]:
        raise ValueError(f"{boxes.shape[0]} boxes vs {scores.shape[0]} scores")
    if not 0 < iou_threshold < 1:
        raise ValueError(f"iou_threshold must lie in (0, 1), got {iou_threshold}")
    alive = np.ones(boxes.shape[0], dtype=bool)
    keep = []
    for idx in np.argsort(-scores, kind="stable"):
        if not alive[idx]:
            continue
        keep.append(int(idx))
        alive &= iou_matrix(boxes[idx], boxes)[0] <= iou_threshold
        alive[idx] = False
    return np.array(keep, dtype=int)


def roi_level(roi: RoiBox) -> int:
    scale = math.sqrt(roi.area())
    for lvl, cut in enumerate(LEVEL_CUTS):
        if scale < cut:
            return lvl
    return len(LEVEL_CUTS)


# ---- the network ------------------------------------------------------------------


@dataclass
class Detection:
    class_id: int
    score: float
    box: RoiBox
    mask_logits: np.ndarray
    image_mask: np.ndarray | None = None


class Detector:
    """Holds the parameter dictionary and exposes the forward pieces."""

    def __init__(self, config: ModelConfig, seed: int = 0, params: dict[str, Tensor] | None = None):
        self.config = config
        specs = _param_specs(config)
        if params is None:
            params = init_params(config, seed)
        else:
            want = dict(specs)
            if set(params) != set(want):
                raise ValueError("parameter names do not match this config")
            for name, shape in want.items():
                if params[name].shape != shape:
                    raise ValueError(
                        f"parameter {name} has shape {params[name].shape}, config wants {shape}"
                    )
        self.params = params
        self.anchors = generate_anchors(config)

    def p(self, name: str) -> Tensor:
        return self.params[name]

    def trainable_params(self) -> dict[str, Tensor]:
        """Parameters reachable under the configured head; the other mask
        head's tensors are excluded so asserting live gradients is meaningful."""
        unused = "maski." if self.config.head == "baseline" else "maskb."
        return {n: t for n, t in self.params.items() if not n.startswith(unused)}

    # -- backbone --

    def _res_block(self, x: Tensor, prefix: str) -> Tensor:
        h = conv2d(x, self.p(f"{prefix}.conv1.w"), self.p(f"{prefix}.conv1.b"), padding=1).relu()
        h = conv2d(h, self.p(f"{prefix}.conv2.w"), self.p(f"{prefix}.conv2.b"), padding=1)
        return (x + h).relu()

    def backbone_forward(self, image: Tensor) -> list[Tensor]:
        s = self.config.image_size
        if image.shape != (1, s, s):
            raise ValueError(f"expected a (1, {s}, {s}) image, got {image.shape}")
        x = conv2d(image, self.p("backbone.stem.w"), self.p("backbone.stem.b"),
                   stride=2, padding=1).relu()
        c1 = self._res_block(x, "backbone.stage1")
        x = conv2d(c1, self.p("backbone.stage2.down.w"), self.p("backbone.stage2.down.b"),
                   stride=2, padding=1).relu()
        c2 = self._res_block(x, "backbone.stage2")
        x = conv2d(c2, self.p("backbone.stage3.down.w"), self.p("backbone.stage3.down.b"),
                   stride=2, padding=1).relu()
        c3 = self._res_block(x, "backbone.stage3")
        p4 = conv2d(c3, self.p("fpn.lateral4.w"), self.p("fpn.lateral4.b"))
        p3 = conv2d(c2, self.p("fpn.lateral3.w"), self.p("fpn.lateral3.b")) + upsample_nearest2(p4)
        p2 = conv2d(c1, self.p("fpn.lateral2.w"), self.p("fpn.lateral2.b")) + upsample_nearest2(p3)
        return [p2, p3, p4]

    # -- region proposal head --

    def rpn_forward(self, features: list[Tensor]) -> tuple[Tensor, Tensor]:
        """Per-anchor objectness logits (N,) and box deltas (N, 4), ordered to
        match generate_anchors. The head weights are shared across levels."""
        a = self.config.anchors_per_cell
        if len(features) != len(STRIDES):
            raise ValueError(f"expected {len(STRIDES)} pyramid levels, got {len(features)}")
        objs, deltas = [], []
        for f, side in zip(features, self.config.feature_sides):
            if f.shape != (self.config.channels, side, side):
                raise ValueError(f"feature level shaped {f.shape}, anchors want side {side}")
            t = conv2d(f, self.p("rpn.conv.w"), self.p("rpn.conv.b"), padding=1).relu()
            o = conv2d(t, self.p("rpn.obj.w"), self.p("rpn.obj.b"))
            d = conv2d(t, self.p("rpn.box.w"), self.p("rpn.box.b"))
            h, w = o.shape[1], o.shape[2]
            objs.append(o.reshape(a * h * w))
            deltas.append(d.reshape(a, 4, h, w).transpose(0, 2, 3, 1).reshape(a * h * w, 4))
        return concat(objs, axis=0), concat(deltas, axis=0)

    # -- box/class head --

    def class_head(self, roi_feat: Tensor) -> tuple[Tensor, Tensor]:
        c = self.config.channels
        if roi_feat.shape != (c, FEAT_SIDE, FEAT_SIDE):
            raise ValueError(f"class head wants ({c}, {FEAT_SIDE}, {FEAT_SIDE}), got {roi_feat.shape}")
        x = roi_feat.reshape(c * FEAT_SIDE * FEAT_SIDE)
        h = linear(x, self.p("head.fc1.w"), self.p("head.fc1.b")).relu()
        cls = linear(h, self.p("head.cls.w"), self.p("head.cls.b"))
        box = linear(h, self.p("head.box.w"), self.p("head.box.b")).reshape(self.config.n_classes, 4)
        return cls, box

    # -- mask heads --

    def _mask_trunk(self, roi_feat: Tensor, prefix: str) -> Tensor:
        x = roi_feat
        for i in (1, 2, 3, 4):
            x = conv2d(x, self.p(f"{prefix}.conv{i}.w"), self.p(f"{prefix}.conv{i}.b"), padding=1).relu()
        return x

    def mask_head_baseline(self, roi_feat: Tensor) -> Tensor:
        c = self.config.channels
        if roi_feat.shape != (c, FEAT_SIDE, FEAT_SIDE):
            raise ValueError(f"baseline mask head wants ({c}, {FEAT_SIDE}, {FEAT_SIDE}), got {roi_feat.shape}")
        x = self._mask_trunk(roi_feat, "maskb")
        x = conv2d_transpose(x, self.p("maskb.deconv.w"), self.p("maskb.deconv.b"), stride=2).relu()
        return conv2d(x, self.p("maskb.out.w"), self.p("maskb.out.b"))

    def mask_head_improved(self, roi_feat14: Tensor, roi_feat56: Tensor) -> Tensor:
        c = self.config.channels
        if roi_feat14.shape != (c, FEAT_SIDE, FEAT_SIDE):
            raise ValueError(f"improved mask head wants ({c}, {FEAT_SIDE}, {FEAT_SIDE}), got {roi_feat14.shape}")
        fine = (c, MASK_SIDE_IMPROVED, MASK_SIDE_IMPROVED)
        if roi_feat56.shape != fine:
            raise ValueError(f"skip input must be {fine}, got {roi_feat56.shape}")
        x = self._mask_trunk(roi_feat14, "maski")
        x = conv2d_transpose(x, self.p("maski.deconv1.w"), self.p("maski.deconv1.b"), stride=2).relu()
        x = conv2d_transpose(x, self.p("maski.deconv2.w"), self.p("maski.deconv2.b"), stride=2).relu()
        x = concat([x, roi_feat56], axis=0)
        x = conv2d(x, self.p("maski.fuse1.w"), self.p("maski.fuse1.b"), padding=1).relu()
        x = conv2d(x, self.p("maski.fuse2.w"), self.p("maski.fuse2.b"), padding=1).relu()
        return conv2d(x, self.p("maski.out.w"), self.p("maski.out.b"))

    def mask_forward(self, features: list[Tensor], roi: RoiBox) -> Tensor:
        level = features[roi_level(roi)]
        if self.config.head == "improved":
            r14, r56 = roi_align_pair(level, roi)
            return self.mask_head_improved(r14, r56)
        return self.mask_head_baseline(roi_align(level, roi, FEAT_SIDE))

    # -- proposals and inference --

    def propose(self, obj_logits: np.ndarray, deltas: np.ndarray) -> np.ndarray:
        cfg = self.config
        scores = expit(np.asarray(obj_logits, dtype=float))
        order = np.argsort(-scores, kind="stable")[: cfg.rpn_pre_nms]
        boxes = decode_boxes(self.anchors[order], np.asarray(deltas, dtype=float)[order])
        min_side = 2.0 / cfg.image_size
        valid = ((boxes[:, 2] - boxes[:, 0]) >= min_side) & ((boxes[:, 3] - boxes[:, 1]) >= min_side)
        boxes, kept_scores = boxes[valid], scores[order][valid]
        if boxes.shape[0] == 0:
            return boxes
        keep = nms(boxes, kept_scores, cfg.rpn_nms_iou)[: cfg.rpn_post_nms]
        return boxes[keep]

    def infer(self, image: Tensor, score_threshold: float | None = None,
              nms_threshold: float | None = None) -> list[Detection]:
        """Detections sorted by score descending, masks pasted at image
        resolution, per-class suppression applied. A detection is kept when
        its score strictly exceeds the threshold."""
        cfg = self.config
        thr = cfg.score_threshold if score_threshold is None else float(score_threshold)
        nthr = cfg.nms_iou if nms_threshold is None else float(nms_threshold)
        features = self.backbone_forward(image)
        obj, deltas = self.rpn_forward(features)
        proposals = self.propose(obj.data, deltas.data)

        min_side = 2.0 / cfg.image_size
        candidates = []
        for box in proposals:
            roi = RoiBox(*box)
            roi14 = roi_align(features[roi_level(roi)], roi, FEAT_SIDE)
            cls_logits, box_deltas = self.class_head(roi14)
            z = cls_logits.data - cls_logits.data.max()
            probs = np.exp(z) / np.exp(z).sum()
            cid = int(np.argmax(probs[1:])) + 1
            refined = decode_boxes(roi.as_array(), box_deltas.data[cid])[0]
            if refined[2] - refined[0] < min_side or refined[3] - refined[1] < min_side:
                continue
            candidates.append((cid, float(probs[cid]), refined))

        picked = []
        for cid in range(1, cfg.n_classes):
            group = [c for c in candidates if c[0] == cid and c[1] > thr]
            if not group:
                continue
            boxes = np.array([c[2] for c in group])
            scores = np.array([c[1] for c in group])
            for idx in nms(boxes, scores, nthr):
                picked.append(group[idx])
        picked.sort(key=lambda c: -c[1])
        picked = picked[: cfg.max_detections]

        detections = []
        for cid, score, box in picked:
            roi = RoiBox(*box)
            logits = self.mask_forward(features, roi).data[cid]
            detections.append(
                Detection(cid, score, roi, logits, paste_mask(logits, roi, cfg.image_size))
            )
        return detections


def paste_mask(mask_logits, box, image_size: int) -> np.ndarray:
    """Binary image-resolution mask: sigmoid the logits, bilinearly resize the
    probability grid into the box footprint, threshold at 0.5 (>= keeps).
    Pixels whose centers fall outside the box stay 0."""
    logits = mask_logits.data if isinstance(mask_logits, Tensor) else np.asarray(mask_logits, dtype=float)
    if logits.ndim != 2 or logits.shape[0] != logits.shape[1] or logits.shape[0] not in (
        MASK_SIDE_BASELINE, MASK_SIDE_IMPROVED,
    ):
        raise ValueError(f"mask logits must be square of side 28 or 56, got {logits.shape}")
    y1, x1 = box.y1 * image_size, box.x1 * image_size
    y2, x2 = box.y2 * image_size, box.x2 * image_size
    if not (y2 > y1 and x2 > x1):
        raise ValueError(f"degenerate box ({box.y1}, {box.x1}, {box.y2}, {box.x2})")
    out = np.zeros((image_size, image_size), dtype=bool)
    rows = np.arange(max(0, math.ceil(y1 - 0.5)), min(image_size, math.ceil(y2 - 0.5)))
    cols = np.arange(max(0, math.ceil(x1 - 0.5)), min(image_size, math.ceil(x2 - 0.5)))
    if rows.size == 0 or cols.size == 0:
        return out
    side = logits.shape[0]
    ty = (rows + 0.5 - y1) / (y2 - y1) * side
    tx = (cols + 0.5 - x1) / (x2 - x1) * side
    probs = expit(logits)
    out[np.ix_(rows, cols)] = bilinear_sample(probs, ty, tx) >= 0.5
    return out


# ---- checkpoints ------------------------------------------------------------------


def save_checkpoint(path, config: ModelConfig, params: dict[str, Tensor]) -> None:
    blob = bytearray(CHECKPOINT_MAGIC)
    cfg_json = json.dumps(asdict(config), sort_keys=True).encode("utf-8")
    blob += struct.pack("<I", len(cfg_json)) + cfg_json
    blob += struct.pack("<I", len(params))
    for name in sorted(params):
        t = params[name]
        raw = name.encode("utf-8")
        blob += struct.pack("<I", len(raw)) + raw
        blob += struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape)
        blob += t.data.astype("<f8").tobytes()
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, Tensor]]:
    buf = Path(path).read_bytes()
    if buf[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: unknown checkpoint magic")
    pos = len(CHECKPOINT_MAGIC)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise ValueError(f"{path}: checkpoint truncated at byte {pos}")
        pos += n
        return buf[pos - n : pos]

    (cfg_len,) = struct.unpack("<I", take(4))
    config = ModelConfig(**json.loads(take(cfg_len).decode("utf-8")))
    (n_params,) = struct.unpack("<I", take(4))
    params: dict[str, Tensor] = {}
    for _ in range(n_params):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape)
        params[name] = Tensor(data.astype(np.float64), requires_grad=True)
    if pos != len(buf):
        raise ValueError(f"{path}: {len(buf) - pos} trailing bytes after last parameter")
    return config, params


def load_detector(path) -> Detector:
    config, params = load_checkpoint(path)
    return Detector(config, params=params)


# ---- detections on disk -----------------------------------------------------------


def write_detections(detections: list[Detection], image_size: int, stem: str, out_dir,
                     spacing_mm=(1.0, 1.0, 1.0)) -> None:
    """One text file `<stem>_det.txt` plus one mask volume per detection.

    Line format after the magic header: class_id, score, box corners, mask
    file name.  Masks store class_id at covered pixels so they read back as
    label volumes.
    """
    out_dir = Path(out_dir)
    lines = [f"# {DETECTIONS_MAGIC} image_size={image_size} count={len(detections)}"]
    for j, det in enumerate(detections):
        if det.image_mask is None:
            raise ValueError(f"detection {j} has no pasted mask")
        name = f"{stem}_det_{j:02d}.vol"
        vol = Volume((image_size, image_size, 1), spacing_mm, "labels",
                     det.image_mask[None].astype(np.uint16) * det.class_id,
                     {0: "background", det.class_id: f"class_{det.class_id}"})
        write_volume(vol, out_dir / name)
        b = det.box
        lines.append(" ".join([str(det.class_id), g17(det.score), g17(b.y1), g17(b.x1),
                               g17(b.y2), g17(b.x2), name]))
    (out_dir / f"{stem}_det.txt").write_text("\n".join(lines) + "\n")


def read_detections(path) -> list[Detection]:
    """Masks are resolved relative to the detections file's directory."""
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith(f"# {DETECTIONS_MAGIC} "):
        raise ValueError(f"{path}: unknown detections magic, expected {DETECTIONS_MAGIC!r}")
    meta = dict(tok.split("=", 1) for tok in lines[0].split()[2:])
    count = int(meta["count"])
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != count:
        raise ValueError(f"{path}: header promises {count} detections, found {len(body)}")
    detections = []
    for ln in body:
        fields = ln.split()
        if len(fields) != 7:
            raise ValueError(f"{path}: malformed detection line {ln!r}")
        cid, score = int(fields[0]), float(fields[1])
        box = RoiBox(*(float(v) for v in fields[2:6]))
        vol = read_volume(path.parent / fields[6])
        if vol.kind != "labels" or vol.dims[2] != 1:
            raise ValueError(f"{fields[6]}: expected a single-slice label volume")
        detections.append(Detection(cid, score, box, None, vol.voxels[0] == cid))
    return detections
