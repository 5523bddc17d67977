"""Anchor assignment against an exhaustive oracle, loss additivity and
gradients, optimizer behavior, and small end-to-end training runs."""

import numpy as np
import pytest

from mskseg.autograd import Tensor
from mskseg.detector import Detector, ModelConfig, encode_boxes, save_checkpoint
from mskseg.roialign import RoiBox
from mskseg.synth import SceneConfig, synth_generate
from mskseg.training import (
    IGNORE,
    NEGATIVE,
    POSITIVE,
    Adam,
    EpochLoss,
    LossBreakdown,
    ScenePredictions,
    TrainConfig,
    assign_targets,
    build_targets,
    compute_loss,
    forward_scene,
    infer,
    instance_recall,
    mask_iou,
    read_loss_curve,
    resize_mask,
    sample_anchor_batch,
    train,
    write_loss_curve,
)

TINY = ModelConfig(
    image_size=32,
    n_classes=5,
    channels=4,
    mask_channels=4,
    fc_units=8,
    anchor_scales=((0.15,), (0.3,), (0.6,)),
    anchor_ratios=(1.0,),
)
SMALL_SCENE = SceneConfig(
    image_size=32, bone_axis_min=6, bone_axis_max=8,
    crescent_inner=9, crescent_outer=11, blob_radius_min=2, blob_radius_max=3,
)


def tiny_dataset(n=2, seed=5):
    return synth_generate(n, seed=seed, scene_config=SMALL_SCENE)


# ---- assign_targets --------------------------------------------------------------


def test_identical_anchor_is_positive():
    anchors = np.array([[0.1, 0.1, 0.4, 0.4], [0.6, 0.6, 0.9, 0.9]])
    gt = np.array([[0.1, 0.1, 0.4, 0.4]])
    labels, matched = assign_targets(anchors, gt)
    assert labels[0] == POSITIVE and matched[0] == 0
    assert labels[1] == NEGATIVE and matched[1] == -1


def test_between_thresholds_is_ignored():
    # IoU 0.5 exactly: half-height anchor over the same footprint
    anchors = np.array([[0.1, 0.1, 0.25, 0.4]])
    gt = np.array([[0.1, 0.1, 0.4, 0.4]])
    labels, matched = assign_targets(anchors, gt)
    # 0.5 overlap would be positive only via the best-anchor claim
    assert labels[0] == POSITIVE  # it IS the best anchor for this gt
    anchors2 = np.vstack([gt, anchors])  # now the gt box itself wins
    labels2, matched2 = assign_targets(anchors2, gt)
    assert labels2[0] == POSITIVE and matched2[0] == 0
    assert labels2[1] == IGNORE


def test_zero_gt_all_negative():
    labels, matched = assign_targets(np.array([[0.1, 0.1, 0.5, 0.5]]), np.zeros((0, 4)))
    assert labels[0] == NEGATIVE and matched[0] == -1


def test_best_anchor_claim_tie_goes_to_lower_gt_index():
    anchors = np.array([[0.2, 0.2, 0.5, 0.5]])
    gt = np.array([[0.2, 0.2, 0.5, 0.5], [0.2, 0.2, 0.5, 0.5]])
    labels, matched = assign_targets(anchors, gt)
    assert labels[0] == POSITIVE and matched[0] == 0


def assign_oracle(anchors, gt, pos_thr, neg_thr):
    n, g = len(anchors), len(gt)
    iou = np.zeros((n, g))
    for i in range(n):
        for j in range(g):
            yy1 = max(anchors[i][0], gt[j][0])
            xx1 = max(anchors[i][1], gt[j][1])
            yy2 = min(anchors[i][2], gt[j][2])
            xx2 = min(anchors[i][3], gt[j][3])
            inter = max(0, yy2 - yy1) * max(0, xx2 - xx1)
            ua = (
                (anchors[i][2] - anchors[i][0]) * (anchors[i][3] - anchors[i][1])
                + (gt[j][2] - gt[j][0]) * (gt[j][3] - gt[j][1])
                - inter
            )
            iou[i, j] = inter / ua
    labels = np.full(n, NEGATIVE)
    matched = np.full(n, -1)
    for i in range(n):
        if iou[i].max() >= pos_thr:
            labels[i] = POSITIVE
            matched[i] = int(iou[i].argmax())
        elif iou[i].max() > neg_thr:
            labels[i] = IGNORE
    claimed = set()
    for j in range(g):
        top = iou[:, j].max()
        if top <= 0:
            continue
        for i in range(n):
            if iou[i, j] == top and i not in claimed:
                labels[i] = POSITIVE
                matched[i] = j
                claimed.add(i)
    return labels, matched


def test_assignment_matches_exhaustive_oracle():
    rng = np.random.default_rng(41)
    for _ in range(10):
        y1 = rng.uniform(0, 0.6, 20)
        x1 = rng.uniform(0, 0.6, 20)
        anchors = np.stack([y1, x1, y1 + rng.uniform(0.08, 0.4, 20), x1 + rng.uniform(0.08, 0.4, 20)], 1)
        g1 = rng.uniform(0, 0.6, (3, 2))
        gt = np.concatenate([g1, g1 + rng.uniform(0.08, 0.4, (3, 2))], axis=1)
        labels, matched = assign_targets(anchors, gt)
        olabels, omatched = assign_oracle(anchors, gt, 0.7, 0.3)
        np.testing.assert_array_equal(labels, olabels)
        np.testing.assert_array_equal(matched, omatched)


def test_assignment_permutation_consistent():
    rng = np.random.default_rng(42)
    y1 = rng.uniform(0, 0.6, 30)
    x1 = rng.uniform(0, 0.6, 30)
    anchors = np.stack([y1, x1, y1 + rng.uniform(0.1, 0.4, 30), x1 + rng.uniform(0.1, 0.4, 30)], 1)
    g1 = rng.uniform(0, 0.6, (3, 2))
    gt = np.concatenate([g1, g1 + rng.uniform(0.1, 0.4, (3, 2))], axis=1)
    labels, matched = assign_targets(anchors, gt)
    perm = [2, 0, 1]
    labels_p, matched_p = assign_targets(anchors, gt[perm])
    np.testing.assert_array_equal(labels, labels_p)
    # matched indices map back through the permutation
    back = np.where(matched_p >= 0, np.asarray(perm)[matched_p], -1)
    np.testing.assert_array_equal(matched, back)


def test_anchor_sampling_is_balanced_and_capped():
    labels = np.concatenate([np.full(100, POSITIVE), np.full(500, NEGATIVE)])
    rng = np.random.default_rng(43)
    pos, neg = sample_anchor_batch(labels, rng, 64)
    assert pos.size == 32 and neg.size == 32
    assert (labels[pos] == POSITIVE).all() and (labels[neg] == NEGATIVE).all()
    pos, neg = sample_anchor_batch(np.full(10, NEGATIVE), rng, 64)
    assert pos.size == 0 and neg.size == 10
    # scarce positives are repeated to hold the 1:1 balance
    labels = np.concatenate([np.full(3, POSITIVE), np.full(500, NEGATIVE)])
    pos, neg = sample_anchor_batch(labels, rng, 64)
    assert pos.size == 32 and neg.size == 32
    assert set(np.unique(pos)) == {0, 1, 2}


# ---- loss ------------------------------------------------------------------------


def test_component_sum_is_total():
    lb = LossBreakdown.from_terms(
        Tensor(np.asarray(1.0)), Tensor(np.asarray(2.0)), Tensor(np.asarray(3.0)),
        Tensor(np.asarray(0.0)), Tensor(np.asarray(0.0)),
    )
    assert lb.total.item() == 6.0
    assert lb.folded == (1.0, 2.0, 3.0)


def test_breakdown_rejects_inconsistent_total():
    with pytest.raises(ValueError, match="drifts"):
        LossBreakdown(Tensor(np.asarray(5.0)), 1.0, 2.0, 3.0, 0.0, 0.0)


def test_additivity_on_real_scenes():
    det = Detector(TINY, seed=50)
    rng = np.random.default_rng(51)
    tc = TrainConfig(epochs=1)
    for scene in tiny_dataset(3, seed=52):
        targets = build_targets(scene, TINY, tc, det.anchors, rng)
        lb = compute_loss(forward_scene(det, scene.image, targets), targets)
        five = lb.l_cls + lb.l_bbox + lb.l_mask + lb.l_rpn_obj + lb.l_rpn_box
        assert abs(lb.total.item() - five) <= 1e-12
        assert lb.total.item() == (lb.folded[0] + lb.folded[1]) + lb.folded[2]


def test_perfect_saturated_predictions_near_zero_loss():
    from mskseg.training import RoiTarget, SceneTargets

    mask = (np.random.default_rng(53).uniform(size=(28, 28)) > 0.5).astype(float)
    delta = np.array([0.01, -0.02, 0.03, 0.0])
    targets = SceneTargets(
        anchor_idx=np.array([0, 1]),
        anchor_obj=np.array([1.0, 0.0]),
        anchor_pos_idx=np.array([0]),
        anchor_deltas=delta[None, :],
        rois=[RoiTarget(RoiBox(0.1, 0.1, 0.6, 0.6), 2, delta, mask)],
    )
    preds = ScenePredictions(
        obj_logits=Tensor(np.array([40.0, -40.0])),
        rpn_deltas=Tensor(delta[None, :]),
        cls_logits=Tensor(np.array([[-40.0, -40.0, 40.0, -40.0, -40.0]])),
        roi_deltas=Tensor(delta[None, :]),
        mask_logits=[Tensor(np.where(mask > 0, 40.0, -40.0))],
    )
    assert compute_loss(preds, targets).total.item() < 1e-3


def test_no_positive_rois_defines_zero_box_and_mask_terms():
    from mskseg.training import RoiTarget, SceneTargets

    targets = SceneTargets(
        anchor_idx=np.array([0]),
        anchor_obj=np.array([0.0]),
        anchor_pos_idx=np.zeros(0, dtype=int),
        anchor_deltas=np.zeros((0, 4)),
        rois=[RoiTarget(RoiBox(0.1, 0.1, 0.4, 0.4), 0, None, None)],
    )
    preds = ScenePredictions(
        obj_logits=Tensor(np.array([0.2])),
        rpn_deltas=Tensor(np.zeros((0, 4))),
        cls_logits=Tensor(np.array([[0.1, 0.0, 0.0, 0.0, 0.0]])),
        roi_deltas=None,
        mask_logits=[],
    )
    lb = compute_loss(preds, targets)
    assert lb.l_bbox == 0.0 and lb.l_mask == 0.0
    assert lb.total.item() == lb.l_cls + lb.l_rpn_obj


def test_loss_gradient_matches_finite_differences_on_probe():
    det = Detector(TINY, seed=54)
    scene = tiny_dataset(1, seed=55)[0]
    tc = TrainConfig(epochs=1)
    targets = build_targets(scene, TINY, tc, det.anchors, np.random.default_rng(56))

    probes = [("rpn.conv.w", (0, 1, 1, 1)), ("maski.fuse1.w", (1, 2, 1, 1))]

    def total_at(name, idx, value):
        saved = det.params[name]
        data = saved.data.copy()
        data[idx] = value
        det.params[name] = Tensor(data, requires_grad=True)
        out = compute_loss(forward_scene(det, scene.image, targets), targets).total.item()
        det.params[name] = saved
        return out

    lb = compute_loss(forward_scene(det, scene.image, targets), targets)
    lb.total.backward()
    h = 1e-5
    for name, idx in probes:
        analytic = det.params[name].grad[idx]
        base = det.params[name].data[idx]
        numeric = (total_at(name, idx, base + h) - total_at(name, idx, base - h)) / (2 * h)
        assert abs(analytic - numeric) / max(1.0, abs(numeric)) < 1e-4


def test_every_trainable_parameter_receives_gradient():
    det = Detector(TINY, seed=57)
    scene = tiny_dataset(1, seed=58)[0]
    tc = TrainConfig(epochs=1)
    targets = build_targets(scene, TINY, tc, det.anchors, np.random.default_rng(59))
    lb = compute_loss(forward_scene(det, scene.image, targets), targets)
    lb.total.backward()
    for name, t in det.trainable_params().items():
        assert t.grad is not None, name
        assert np.abs(t.grad).max() > 0.0, name


# ---- mask target resizing ---------------------------------------------------------


def test_resize_mask_whole_image_identity_scale():
    mask = np.zeros((8, 8))
    mask[2:6, 2:6] = 1.0
    out = resize_mask(mask, RoiBox(0.0, 0.0, 1.0, 1.0), 8, 8)
    np.testing.assert_array_equal(out, mask)


def test_resize_mask_crop_alignment():
    mask = np.zeros((16, 16))
    mask[4:12, 4:12] = 1.0
    # a box exactly covering the filled block at 2x upsampling: every output
    # cell center bilinears to at least 0.5625, so the target is all ones
    out = resize_mask(mask, RoiBox(4 / 16, 4 / 16, 12 / 16, 12 / 16), 16, 16)
    np.testing.assert_array_equal(out, np.ones((16, 16)))
    # a box hanging half outside the block goes half-and-half
    out = resize_mask(mask, RoiBox(4 / 16, 0.0, 12 / 16, 8 / 16), 16, 16)
    assert not out[:, :8].any() and out[:, 8:].all()


# ---- optimizer --------------------------------------------------------------------


def test_adam_zero_learning_rate_keeps_values():
    params = {"w": Tensor(np.array([1.0, 2.0]), requires_grad=True)}
    opt = Adam(0.0)
    opt.step(params, {"w": np.array([5.0, -3.0])}, ["w"])
    np.testing.assert_array_equal(params["w"].data, [1.0, 2.0])


def test_adam_first_step_size_is_learning_rate():
    params = {"w": Tensor(np.zeros(3), requires_grad=True)}
    opt = Adam(0.01)
    opt.step(params, {"w": np.array([1.0, -2.0, 0.5])}, ["w"])
    np.testing.assert_allclose(params["w"].data, [-0.01, 0.01, -0.01], rtol=1e-6)


# ---- training loop ----------------------------------------------------------------


def test_train_config_validation():
    with pytest.raises(ValueError, match="epochs"):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError, match="learning_rate"):
        TrainConfig(learning_rate=-1e-3)
    with pytest.raises(ValueError, match="negative_iou"):
        TrainConfig(positive_iou=0.3, negative_iou=0.5)
    with pytest.raises(ValueError, match="adaptive-moment"):
        TrainConfig(optimizer="sgd")


def test_train_zero_learning_rate_leaves_parameters():
    data = tiny_dataset(2, seed=60)
    result = train(data, TrainConfig(epochs=2, learning_rate=0.0, seed=3), TINY)
    fresh = Detector(TINY, seed=3)
    for name in fresh.params:
        np.testing.assert_array_equal(result.detector.p(name).data, fresh.p(name).data)


def test_train_same_seed_bit_identical_checkpoints(tmp_path):
    data = tiny_dataset(2, seed=61)
    a = train(data, TrainConfig(epochs=2, seed=9), TINY)
    b = train(data, TrainConfig(epochs=2, seed=9), TINY)
    pa, pb = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    a.save(pa)
    b.save(pb)
    assert pa.read_bytes() == pb.read_bytes()
    assert a.curve == b.curve


def test_train_loss_decreases_in_memorization_regime():
    data = tiny_dataset(2, seed=62)
    result = train(data, TrainConfig(epochs=8, seed=11), TINY)
    assert result.curve[-1].total < result.curve[0].total


def test_train_divergence_aborts():
    data = tiny_dataset(1, seed=63)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(RuntimeError, match="non-finite"):
            train(data, TrainConfig(epochs=6, learning_rate=1e200, seed=1), TINY)


def test_train_rejects_empty_dataset():
    with pytest.raises(ValueError, match="at least one scene"):
        train([], TrainConfig(epochs=1), TINY)


def test_loss_curve_csv_round_trip(tmp_path):
    curve = [EpochLoss(0, 2.5, 1.0, 0.5, 1.0), EpochLoss(1, 1.25, 0.5, 0.25, 0.5)]
    path = tmp_path / "curve.csv"
    write_loss_curve(curve, path)
    text = path.read_text()
    assert text.splitlines()[0] == "epoch,total,l_cls,l_bbox,l_mask"
    assert read_loss_curve(path) == curve


# ---- inference helpers -------------------------------------------------------------


def test_infer_via_checkpoint_matches_detector(tmp_path):
    data = tiny_dataset(1, seed=64)
    result = train(data, TrainConfig(epochs=2, seed=13), TINY)
    path = tmp_path / "m.ckpt"
    result.save(path)
    direct = result.detector.infer(data[0].image, score_threshold=0.05)
    via = infer(data[0].image, path, score_threshold=0.05)
    assert len(direct) == len(via)
    for d, v in zip(direct, via):
        assert d.class_id == v.class_id and d.score == v.score


def test_mask_iou_values():
    a = np.zeros((4, 4), dtype=bool)
    b = np.zeros((4, 4), dtype=bool)
    a[:2] = True
    b[1:3] = True
    assert mask_iou(a, b) == pytest.approx(4 / 12)
    assert mask_iou(np.zeros((2, 2)), np.zeros((2, 2))) == 0.0
    with pytest.raises(ValueError, match="shapes"):
        mask_iou(np.zeros((2, 2)), np.zeros((3, 3)))


def test_instance_recall_requires_instances():
    with pytest.raises(ValueError, match="no annotated"):
        instance_recall([], [])
