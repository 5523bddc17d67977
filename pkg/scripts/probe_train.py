"""Timing and quality probe for the desk-scale training regression.

Runs the 8-scene / 30-epoch / seed-7 recipe for both heads, reports wall
time, the loss curve endpoints, and per-scene bone Dice."""

import sys
import time

sys.path.insert(0, "src")

import numpy as np

from mskseg.detector import ModelConfig
from mskseg.synth import synth_generate
from mskseg.training import TrainConfig, train


def bone_dice(det, scene):
    dets = det.infer(scene.image, score_threshold=0.5)
    gt = next(i for i in scene.instances if i.class_id in (1, 2))
    best = 0.0
    for d in dets:
        if d.class_id == gt.class_id and d.image_mask is not None:
            inter = np.logical_and(d.image_mask, gt.mask).sum()
            dice = 2 * inter / (d.image_mask.sum() + gt.mask.sum())
            best = max(best, dice)
    return best


def main():
    scenes = synth_generate(8, seed=7)
    for head in ("improved", "baseline"):
        mc = ModelConfig(head=head)
        tc = TrainConfig(epochs=30, seed=7)
        t0 = time.time()
        result = train(scenes, tc, mc)
        t_train = time.time() - t0
        first, last = result.curve[0], result.curve[-1]
        print(f"[{head}] train {t_train:.1f}s  total {first.total:.4f} -> {last.total:.4f}", flush=True)
        t0 = time.time()
        dices = [bone_dice(result.detector, s) for s in scenes]
        print(f"[{head}] infer {time.time()-t0:.1f}s  bone dice per scene: "
              + " ".join(f"{d:.3f}" for d in dices) + f"  mean {np.mean(dices):.3f}", flush=True)


if __name__ == "__main__":
    main()
