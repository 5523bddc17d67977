"""Check learned objectness at the anchors that were supervised positive."""

import sys

sys.path.insert(0, "src")

import numpy as np
from scipy.special import expit

from mskseg.detector import ModelConfig, iou_matrix
from mskseg.synth import synth_generate
from mskseg.training import TrainConfig, assign_targets, train

scenes = synth_generate(2, seed=7)
mc = ModelConfig(head="improved")
tc = TrainConfig(epochs=15, seed=7)
result = train(scenes, tc, mc)
det = result.detector

for s_i, scene in enumerate(scenes):
    gt_boxes = np.array([i.box for i in scene.instances])
    labels, matched = assign_targets(det.anchors, gt_boxes, tc.positive_iou, tc.negative_iou)
    pos = np.flatnonzero(labels == 1)
    features = det.backbone_forward(scene.image)
    obj, _ = det.rpn_forward(features)
    scores = expit(obj.data)
    rank = np.empty(len(scores), dtype=int)
    rank[np.argsort(-scores)] = np.arange(len(scores))
    print(f"scene {s_i}: {len(pos)} positive anchors")
    for p in pos:
        iou = iou_matrix(det.anchors[p], gt_boxes)[0, matched[p]]
        print(f"  anchor {p} gt {matched[p]} iou {iou:.3f} "
              f"score {scores[p]:.4f} rank {rank[p]}")
    print(f"  anchors with IoU>=0.5 to any gt: "
          f"{(iou_matrix(det.anchors, gt_boxes).max(axis=1) >= 0.5).sum()}")
