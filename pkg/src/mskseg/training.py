"""Target assignment, the multi-task loss, the optimization loop, and
checkpoint-driven inference.

The loss folds five terms into one scalar.  The reported breakdown keeps
the region-proposal terms separately for diagnostics, but the curve CSV
folds them into the classification and box columns so the three reported
columns always sum to the total bit for bit.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .autograd import (
    Tensor,
    binary_cross_entropy,
    concat,
    cross_entropy,
    index_rows,
    smooth_l1,
)
from .detector import (
    Detector,
    ModelConfig,
    encode_boxes,
    iou_matrix,
    load_detector,
    roi_level,
    save_checkpoint,
)
from .roialign import FEAT_SIDE, RoiBox, bilinear_sample, roi_align

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings; the optimizer itself is fixed to the
    adaptive-moment method."""

    epochs: int = 30
    learning_rate: float = 1e-3
    seed: int = 0
    batch_size: int = 2
    positive_iou: float = 0.7
    negative_iou: float = 0.3
    anchor_sample_size: int = 64
    roi_jitter_copies: int = 3
    roi_negatives: int = 4
    optimizer: str = "adam"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.negative_iou < self.positive_iou <= 1.0:
            raise ValueError(
                f"need 0 <= negative_iou < positive_iou <= 1, "
                f"got {self.negative_iou} / {self.positive_iou}"
            )
        if self.optimizer != "adam":
            raise ValueError("only the adaptive-moment optimizer is implemented")
        if self.anchor_sample_size < 2:
            raise ValueError("anchor_sample_size must allow one of each label")


# ---- anchor target assignment -------------------------------------------------


def assign_targets(anchors: np.ndarray, gt_boxes: np.ndarray,
                   positive_iou: float = 0.7, negative_iou: float = 0.3):
    """Label every anchor positive/negative/ignore and record its matched box.

    Anchors at IoU >= positive_iou are positive, <= negative_iou negative,
    in between ignored.  Every ground-truth box additionally claims its
    best-overlapping anchor even below the positive threshold; when two
    boxes tie for the same anchor the lower index wins.  With no boxes at
    all every anchor is negative.

    Returns (labels, matched): int8 labels and the matched box index per
    anchor (-1 where not positive).
    """
    anchors = np.asarray(anchors, dtype=float).reshape(-1, 4)
    n = anchors.shape[0]
    labels = np.full(n, NEGATIVE, dtype=np.int8)
    matched = np.full(n, -1, dtype=np.int64)
    gt_boxes = np.asarray(gt_boxes, dtype=float).reshape(-1, 4)
    if gt_boxes.shape[0] == 0:
        return labels, matched

    iou = iou_matrix(anchors, gt_boxes)
    best = iou.max(axis=1)
    arg = iou.argmax(axis=1)

    labels[best > negative_iou] = IGNORE
    labels[best >= positive_iou] = POSITIVE
    matched[labels == POSITIVE] = arg[labels == POSITIVE]

    claimed = np.zeros(n, dtype=bool)
    for g in range(gt_boxes.shape[0]):
        col = iou[:, g]
        top = col.max()
        if top <= 0.0:
            continue
        for idx in np.flatnonzero(col == top):
            if not claimed[idx]:
                labels[idx] = POSITIVE
                matched[idx] = g
                claimed[idx] = True
    return labels, matched


def sample_anchor_batch(labels: np.ndarray, rng: np.random.Generator,
                        sample_size: int = 64):
    """Pick a 1:1 positive:negative anchor subset of sample_size.

    Scenes rarely have 32 anchors above the positive threshold, so scarce
    positives are repeated until they fill their half of the budget;
    otherwise the mean-reduced objectness loss would drown them in
    background rows.  An all-negative scene uses the whole budget for
    negatives.
    """
    pos = np.flatnonzero(labels == POSITIVE)
    neg = np.flatnonzero(labels == NEGATIVE)
    half = sample_size // 2
    if pos.size >= half:
        pos_pick = rng.choice(pos, size=half, replace=False)
    elif pos.size:
        extra = rng.choice(pos, size=half - pos.size, replace=True)
        pos_pick = np.concatenate([pos, extra])
    else:
        pos_pick = pos[:0]
    n_neg = min(neg.size, sample_size - pos_pick.size)
    neg_pick = rng.choice(neg, size=n_neg, replace=False) if n_neg else neg[:0]
    return np.sort(pos_pick), np.sort(neg_pick)


# ---- per-scene supervision ------------------------------------------------------


@dataclass(frozen=True)
class RoiTarget:
    box: RoiBox
    class_id: int
    bbox_delta: np.ndarray | None
    mask: np.ndarray | None


@dataclass(frozen=True)
class SceneTargets:
    anchor_idx: np.ndarray
    anchor_obj: np.ndarray
    anchor_pos_idx: np.ndarray
    anchor_deltas: np.ndarray
    rois: list[RoiTarget]

    @property
    def positive_rois(self) -> list[RoiTarget]:
        return [r for r in self.rois if r.class_id > 0]


def resize_mask(mask: np.ndarray, box: RoiBox, side: int, image_size: int) -> np.ndarray:
    """Crop a full-image binary mask to a box and resample to side x side.

    Bilinear at output cell centers with the same half-pixel convention the
    paste path uses, thresholded at 0.5, returned as 0/1 floats.
    """
    y1, x1 = box.y1 * image_size, box.x1 * image_size
    y2, x2 = box.y2 * image_size, box.x2 * image_size
    ys = y1 + (np.arange(side) + 0.5) / side * (y2 - y1)
    xs = x1 + (np.arange(side) + 0.5) / side * (x2 - x1)
    vals = bilinear_sample(np.asarray(mask, dtype=np.float64), ys, xs)
    return (vals >= 0.5).astype(np.float64)


def _jitter_box(box: RoiBox, rng: np.random.Generator) -> RoiBox:
    h, w = box.y2 - box.y1, box.x2 - box.x1
    for _ in range(10):
        dy, dx = rng.normal(scale=0.1 * h), rng.normal(scale=0.1 * w)
        sh, sw = np.exp(rng.normal(scale=0.12)), np.exp(rng.normal(scale=0.12))
        cy, cx = (box.y1 + box.y2) / 2 + dy, (box.x1 + box.x2) / 2 + dx
        y1, y2 = cy - sh * h / 2, cy + sh * h / 2
        x1, x2 = cx - sw * w / 2, cx + sw * w / 2
        y1, x1 = max(0.0, y1), max(0.0, x1)
        y2, x2 = min(1.0, y2), min(1.0, x2)
        if y2 - y1 > 0.01 and x2 - x1 > 0.01:
            return RoiBox(y1, x1, y2, x2)
    return box


def build_targets(scene, config: ModelConfig, train: TrainConfig, anchors: np.ndarray,
                  rng: np.random.Generator, scores: np.ndarray | None = None,
                  proposals: np.ndarray | None = None) -> SceneTargets:
    """Sample anchors and head ROIs for one scene.

    Head supervision runs on the annotated boxes plus jittered copies
    (positives) and low-overlap boxes (background).  When the previous
    epoch's objectness scores and proposals are supplied, half the
    anchor negatives come from the highest-scoring background anchors
    and the head additionally trains on overlapping proposals (as
    positives) and the top-scoring stray proposals (as background):
    the model is steered by exactly the mistakes it would make at
    inference time.
    """
    gt_boxes = np.array([i.box for i in scene.instances]).reshape(-1, 4)
    labels, matched = assign_targets(anchors, gt_boxes, train.positive_iou, train.negative_iou)
    pos_idx, neg_idx = sample_anchor_batch(labels, rng, train.anchor_sample_size)
    if scores is not None and neg_idx.size:
        negatives = np.flatnonzero(labels == NEGATIVE)
        take = neg_idx.size // 2
        hardest = negatives[np.argsort(-scores[negatives], kind="stable")[:take]]
        sampled = rng.choice(negatives, size=neg_idx.size - take, replace=False)
        neg_idx = np.sort(np.concatenate([hardest, sampled]))
    anchor_idx = np.concatenate([pos_idx, neg_idx])
    anchor_obj = np.concatenate([np.ones(pos_idx.size), np.zeros(neg_idx.size)])
    anchor_deltas = (
        encode_boxes(anchors[pos_idx], gt_boxes[matched[pos_idx]])
        if pos_idx.size
        else np.zeros((0, 4))
    )

    side = config.mask_side
    rois: list[RoiTarget] = []
    for inst in scene.instances:
        tight = RoiBox(*inst.box)
        boxes = [tight] + [_jitter_box(tight, rng) for _ in range(train.roi_jitter_copies)]
        gt = np.array([inst.box])
        for b in boxes:
            delta = encode_boxes(b.as_array(), gt)[0]
            rois.append(RoiTarget(b, inst.class_id, delta,
                                  resize_mask(inst.mask, b, side, config.image_size)))

    negatives_needed = train.roi_negatives
    if proposals is not None and proposals.shape[0]:
        min_side = 2.0 / config.image_size
        wide = np.minimum(proposals[:, 2] - proposals[:, 0],
                          proposals[:, 3] - proposals[:, 1]) >= min_side
        proposals = proposals[wide]
    if proposals is not None and proposals.shape[0]:
        overlap = iou_matrix(proposals, gt_boxes)
        best, which = overlap.max(axis=1), overlap.argmax(axis=1)
        for j in np.flatnonzero(best >= 0.5)[: 2 * len(scene.instances)]:
            inst = scene.instances[which[j]]
            b = RoiBox(*proposals[j])
            delta = encode_boxes(b.as_array(), np.array([inst.box]))[0]
            rois.append(RoiTarget(b, inst.class_id, delta,
                                  resize_mask(inst.mask, b, side, config.image_size)))
        # propose() emits in descending score order, so the leading strays
        # are the exact false positives inference would keep
        stray = np.flatnonzero(best < train.negative_iou)[:negatives_needed]
        for j in stray:
            rois.append(RoiTarget(RoiBox(*proposals[j]), 0, None, None))
        negatives_needed -= stray.size
    for _ in range(negatives_needed):
        for _ in range(20):
            y1, x1 = rng.uniform(0, 0.7, size=2)
            h, w = rng.uniform(0.1, 0.3, size=2)
            cand = np.array([[y1, x1, min(1.0, y1 + h), min(1.0, x1 + w)]])
            if iou_matrix(cand, gt_boxes).max() < train.negative_iou:
                rois.append(RoiTarget(RoiBox(*cand[0]), 0, None, None))
                break
    return SceneTargets(anchor_idx, anchor_obj, pos_idx, anchor_deltas, rois)


# ---- loss -----------------------------------------------------------------------


@dataclass(frozen=True)
class LossBreakdown:
    """The five loss terms and their folded scalar total.

    total always equals (l_cls + l_rpn_obj) + (l_bbox + l_rpn_box) + l_mask
    in that exact floating-point association, checked at construction to
    1e-12; the fold is what the curve CSV reports as its three columns.
    """

    total: Tensor
    l_cls: float
    l_bbox: float
    l_mask: float
    l_rpn_obj: float
    l_rpn_box: float

    def __post_init__(self):
        want = (self.l_cls + self.l_rpn_obj) + (self.l_bbox + self.l_rpn_box)
        want = want + self.l_mask
        if abs(self.total.item() - want) > 1e-12:
            raise ValueError(
                f"total {self.total.item()} drifts from component sum {want}"
            )

    @classmethod
    def from_terms(cls, l_cls: Tensor, l_bbox: Tensor, l_mask: Tensor,
                   l_rpn_obj: Tensor, l_rpn_box: Tensor) -> "LossBreakdown":
        total = (l_cls + l_rpn_obj) + (l_bbox + l_rpn_box) + l_mask
        return cls(total, l_cls.item(), l_bbox.item(), l_mask.item(),
                   l_rpn_obj.item(), l_rpn_box.item())

    @property
    def folded(self) -> tuple[float, float, float]:
        """(classification, box, mask) columns whose sum is total exactly."""
        return (self.l_cls + self.l_rpn_obj, self.l_bbox + self.l_rpn_box, self.l_mask)


@dataclass
class ScenePredictions:
    obj_logits: Tensor
    rpn_deltas: Tensor
    cls_logits: Tensor
    roi_deltas: Tensor | None
    mask_logits: list[Tensor]
    # full detached RPN maps, kept so the train loop can mine hard examples
    obj_full: np.ndarray | None = None
    deltas_full: np.ndarray | None = None


def forward_scene(det: Detector, image: Tensor, targets: SceneTargets) -> ScenePredictions:
    """One differentiable pass over everything the targets sample."""
    features = det.backbone_forward(image)
    obj, deltas = det.rpn_forward(features)
    obj_s = index_rows(obj, targets.anchor_idx)
    deltas_s = index_rows(deltas, targets.anchor_pos_idx)

    cls_rows, box_rows, masks = [], [], []
    for roi in targets.rois:
        feat = features[roi_level(roi.box)]
        cls_logits, box_deltas = det.class_head(roi_align(feat, roi.box, FEAT_SIDE))
        cls_rows.append(cls_logits.reshape(1, det.config.n_classes))
        if roi.class_id > 0:
            box_rows.append(index_rows(box_deltas, [roi.class_id]))
            masks.append(det.mask_forward(features, roi.box)[roi.class_id])
    cls_all = concat(cls_rows, axis=0)
    box_all = concat(box_rows, axis=0) if box_rows else None
    return ScenePredictions(obj_s, deltas_s, cls_all, box_all, masks,
                            obj.data, deltas.data)


def compute_loss(predictions: ScenePredictions, targets: SceneTargets) -> LossBreakdown:
    """Assemble the folded multi-task loss from one scene's forward pass.

    Classification is cross-entropy over all sampled ROIs, box regression
    smooth-L1 over the positives' true-class rows, mask the mean per-pixel
    binary cross-entropy on the true-class channel.  With no positive ROIs
    the box and mask terms are defined as zero.
    """
    zero = Tensor(np.zeros(()))
    l_rpn_obj = binary_cross_entropy(predictions.obj_logits, targets.anchor_obj)
    l_rpn_box = (
        smooth_l1(predictions.rpn_deltas, targets.anchor_deltas)
        if targets.anchor_pos_idx.size
        else zero
    )
    roi_classes = [r.class_id for r in targets.rois]
    l_cls = cross_entropy(predictions.cls_logits, roi_classes)
    positives = targets.positive_rois
    if positives:
        l_bbox = smooth_l1(predictions.roi_deltas,
                           np.stack([r.bbox_delta for r in positives]))
        per_roi = [binary_cross_entropy(m, r.mask)
                   for m, r in zip(predictions.mask_logits, positives)]
        acc = per_roi[0]
        for term in per_roi[1:]:
            acc = acc + term
        l_mask = acc * (1.0 / len(per_roi))
    else:
        l_bbox = zero
        l_mask = zero
    return LossBreakdown.from_terms(l_cls, l_bbox, l_mask, l_rpn_obj, l_rpn_box)


# ---- optimizer ------------------------------------------------------------------


class Adam:
    """Adaptive-moment estimation over a named parameter dictionary.

    step() rebinds each entry to a fresh leaf Tensor, leaving previous
    graph references untouched.  Missing gradients count as zero so the
    moment timelines stay aligned across steps.
    """

    def __init__(self, learning_rate: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = float(learning_rate)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray],
             names) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for name in names:
            g = grads.get(name)
            if g is None:
                g = np.zeros(params[name].shape)
            m = self.m.get(name, 0.0) * self.beta1 + (1 - self.beta1) * g
            v = self.v.get(name, 0.0) * self.beta2 + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            update = self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            params[name] = Tensor(params[name].data - update, requires_grad=True)


# ---- the loop -------------------------------------------------------------------


@dataclass(frozen=True)
class EpochLoss:
    epoch: int
    total: float
    l_cls: float
    l_bbox: float
    l_mask: float


@dataclass
class TrainResult:
    detector: Detector
    curve: list[EpochLoss] = field(default_factory=list)

    def save(self, path) -> None:
        save_checkpoint(path, self.detector.config, self.detector.params)


def train(dataset, config: TrainConfig, model_config: ModelConfig) -> TrainResult:
    """Fit a detector on the dataset; deterministic in (seed, config, data).

    Scenes are visited in order, gradients accumulate over batch_size
    scenes per optimizer step, and the recorded curve holds per-epoch mean
    losses in folded three-column form.  A non-finite loss aborts.
    """
    if not dataset:
        raise ValueError("training needs at least one scene")
    det = Detector(model_config, seed=config.seed)
    names = sorted(det.trainable_params())
    opt = Adam(config.learning_rate)
    rng = np.random.default_rng([config.seed, 0x5EED])
    curve: list[EpochLoss] = []
    mined: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    for epoch in range(config.epochs):
        sums = np.zeros(3)
        total_sum = 0.0
        acc: dict[str, np.ndarray] = {}
        pending = 0
        for si, scene in enumerate(dataset):
            scores, proposals = mined.get(si, (None, None))
            targets = build_targets(scene, model_config, config, det.anchors, rng,
                                    scores=scores, proposals=proposals)
            preds = forward_scene(det, scene.image, targets)
            mined[si] = (preds.obj_full, det.propose(preds.obj_full, preds.deltas_full))
            loss = compute_loss(preds, targets)
            if not np.isfinite(loss.total.item()):
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch}, scene {si}: training diverged"
                )
            loss.total.backward()
            for name in names:
                g = det.params[name].grad
                if g is not None:
                    acc[name] = g if name not in acc else acc[name] + g
                    det.params[name].grad = None
            pending += 1
            sums += np.array(loss.folded)
            total_sum += loss.total.item()
            if pending == config.batch_size:
                opt.step(det.params, acc, names)
                acc, pending = {}, 0
        if pending:
            opt.step(det.params, acc, names)
        n = len(dataset)
        curve.append(EpochLoss(epoch, total_sum / n, sums[0] / n, sums[1] / n, sums[2] / n))
    return TrainResult(det, curve)


def write_loss_curve(curve: list[EpochLoss], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "total", "l_cls", "l_bbox", "l_mask"])
        for row in curve:
            w.writerow([row.epoch, "%.17g" % row.total, "%.17g" % row.l_cls,
                        "%.17g" % row.l_bbox, "%.17g" % row.l_mask])


def read_loss_curve(path) -> list[EpochLoss]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["epoch", "total", "l_cls", "l_bbox", "l_mask"]:
            raise ValueError(f"unexpected loss curve header: {header}")
        return [EpochLoss(int(r[0]), *(float(x) for x in r[1:])) for r in reader]


# ---- inference against scenes ----------------------------------------------------


def infer(image: Tensor, checkpoint, score_threshold: float | None = None,
          nms_threshold: float | None = None):
    """Run detection with a checkpoint file; the image must match its config."""
    det = checkpoint if isinstance(checkpoint, Detector) else load_detector(checkpoint)
    return det.infer(image, score_threshold, nms_threshold)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def instance_recall(detections, instances, iou_threshold: float = 0.5) -> float:
    """Fraction of annotated instances matched by a same-class detection
    whose pasted mask overlaps above the threshold."""
    if not instances:
        raise ValueError("no annotated instances to match")
    hit = 0
    for inst in instances:
        for d in detections:
            if d.class_id == inst.class_id and d.image_mask is not None:
                if mask_iou(d.image_mask, inst.mask) > iou_threshold:
                    hit += 1
                    break
    return hit / len(instances)
