"""Inspect why trained-model inference misses: proposal quality, class
scores, refinement geometry."""

import sys

sys.path.insert(0, "src")

import numpy as np
from scipy.special import expit

from mskseg.detector import ModelConfig, decode_boxes, iou_matrix, roi_level
from mskseg.roialign import FEAT_SIDE, RoiBox, roi_align
from mskseg.synth import synth_generate
from mskseg.training import TrainConfig, train

scenes = synth_generate(2, seed=7)
mc = ModelConfig(head="improved")
result = train(scenes, TrainConfig(epochs=15, seed=7), mc)
det = result.detector
print("curve first/last:", result.curve[0], result.curve[-1], flush=True)

scene = scenes[0]
gt_boxes = np.array([i.box for i in scene.instances])
print("gt:", [(i.class_id, np.round(i.box, 3)) for i in scene.instances])

features = det.backbone_forward(scene.image)
obj, deltas = det.rpn_forward(features)
scores = expit(obj.data)
print(f"objectness: max {scores.max():.4f} mean {scores.mean():.4f} n>0.5 {(scores > 0.5).sum()}")

top = np.argsort(-scores)[:10]
decoded = decode_boxes(det.anchors[top], deltas.data[top])
print("top-10 proposal IoU with gts:\n", np.round(iou_matrix(decoded, gt_boxes), 3))

proposals = det.propose(obj.data, deltas.data)
print(f"{len(proposals)} proposals after NMS; best IoU per gt:",
      np.round(iou_matrix(proposals, gt_boxes).max(axis=0), 3) if len(proposals) else "none")

for box in proposals[:8]:
    roi = RoiBox(*box)
    roi14 = roi_align(features[roi_level(roi)], roi, FEAT_SIDE)
    cls_logits, box_deltas = det.class_head(roi14)
    z = cls_logits.data - cls_logits.data.max()
    probs = np.exp(z) / np.exp(z).sum()
    cid = int(np.argmax(probs[1:])) + 1
    refined = decode_boxes(roi.as_array(), box_deltas.data[cid])[0]
    ious = iou_matrix(refined, gt_boxes)[0]
    print(f"prop {np.round(box,3)} probs {np.round(probs,3)} cid {cid} "
          f"refined {np.round(refined,3)} iou(gt) {np.round(ious,3)}")

dets = det.infer(scene.image, score_threshold=0.3)
print(f"infer at 0.3: {len(dets)} detections:",
      [(d.class_id, round(d.score, 3)) for d in dets])
