"""Command-line pipeline: synthesize scenes, train either head, run
inference, evaluate predictions, and measure cartilage and effusion.

Every command writes exactly one ``manifest.json`` next to its outputs
holding the command name, the resolved configuration, the seed, the input
and output paths, and the tool version; re-running with the recorded
values reproduces the outputs bit for bit. Wall-clock duration goes to
standard error only, so manifests from identical runs stay identical.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
Options may also come from a ``--config`` file of ``key=value`` lines;
explicit flags win. Environment variables are never consulted.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .autograd import Tensor
from .detector import (ModelConfig, load_detector, read_detections, save_checkpoint,
                       write_detections)
from .figures import (save_cov_matrix, save_loss_curve, save_metric_bars,
                      save_thickness_heatmap)
from .geometry import (extract_surfaces, fit_cylinder_axis, flatten_radial,
                       thickness_samples, write_thickness_map)
from .metrics import (ConfusionCounts, PointSet, average_hausdorff, average_precision,
                      confusion_counts, cov_table, hausdorff, otsu_threshold, precision)
from .synth import SceneConfig, load_dataset, synth_generate, write_dataset
from .training import TrainConfig, train, write_loss_curve
from .volio import ClassMetrics, MetricsReport, Volume, read_volume, write_report, write_volume


class UsageError(Exception):
    """Bad flags or config values; exits 2."""


class NumericError(Exception):
    """Computation failed on valid inputs (divergence, degenerate fit); exits 4."""


# ---- config file and manifest -------------------------------------------------------


def _read_config_file(path) -> dict[str, str]:
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise UsageError(f"cannot read config file {path}: {e.strerror}") from e
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _coerce(raw: str, like, key: str):
    kind = type(like)
    try:
        if kind is bool:
            if raw not in ("true", "false"):
                raise ValueError
            return raw == "true"
        return kind(raw)
    except ValueError:
        raise UsageError(f"config key {key} wants a {kind.__name__}, got {raw!r}") from None


def _resolve(args, defaults: dict):
    """Defaults, then config-file values, then explicit flags."""
    cfg = dict(defaults)
    if getattr(args, "config", None):
        for key, raw in _read_config_file(args.config).items():
            if key not in defaults:
                raise UsageError(f"unknown config key {key!r} (valid: {', '.join(sorted(defaults))})")
            cfg[key] = _coerce(raw, defaults[key], key)
    for key in defaults:
        flag_value = getattr(args, key.replace("-", "_"), None)
        if flag_value is not None:
            cfg[key] = flag_value
    return cfg


def _write_manifest(out_dir: Path, command: str, cfg: dict, seed, inputs: dict,
                    outputs: dict) -> None:
    manifest = {
        "command": command,
        "config": cfg,
        "seed": seed,
        "inputs": inputs,
        "outputs": outputs,
        "version": __version__,
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n"
    )


def _ensure_out(path_str: str) -> Path:
    out = Path(path_str)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _scene_stems(data_dir: Path) -> list[str]:
    stems = [p.name[: -len("_image.vol")] for p in sorted(data_dir.glob("scene_*_image.vol"))]
    if not stems:
        raise FileNotFoundError(f"no scene_*_image.vol files under {data_dir}")
    return stems


# ---- synth --------------------------------------------------------------------------

_SYNTH_DEFAULTS = {
    "n": 8, "seed": 0, "image-size": 128, "max-blobs": 3,
    "noise-sigma": 0.03, "bone-class": 1,
}


def cmd_synth(args) -> int:
    cfg = _resolve(args, _SYNTH_DEFAULTS)
    if cfg["n"] < 1:
        raise UsageError(f"--n must be at least 1, got {cfg['n']}")
    scene_cfg = SceneConfig(image_size=cfg["image-size"], max_blobs=cfg["max-blobs"],
                            noise_sigma=cfg["noise-sigma"], bone_class=cfg["bone-class"])
    scenes = synth_generate(cfg["n"], cfg["seed"], scene_cfg)
    out = _ensure_out(args.out)
    write_dataset(scenes, out)
    _write_manifest(out, "synth", cfg, cfg["seed"], {}, {"dataset": args.out, "scenes": cfg["n"]})
    return 0


# ---- train --------------------------------------------------------------------------

_TRAIN_DEFAULTS = {"head": "improved", "epochs": 30, "lr": 1e-3, "seed": 0}


def cmd_train(args) -> int:
    cfg = _resolve(args, _TRAIN_DEFAULTS)
    scenes = load_dataset(args.data)
    side = scenes[0].image.shape[1]
    model_cfg = ModelConfig(image_size=side, head=cfg["head"])
    train_cfg = TrainConfig(epochs=cfg["epochs"], learning_rate=cfg["lr"], seed=cfg["seed"])
    try:
        result = train(scenes, train_cfg, model_cfg)
    except RuntimeError as e:
        raise NumericError(str(e)) from e
    out = _ensure_out(args.out)
    save_checkpoint(out / "model.ckpt", model_cfg, result.detector.params)
    write_loss_curve(result.curve, out / "loss.csv")
    save_loss_curve(result.curve, out / "loss_curve.png")
    _write_manifest(out, "train", cfg, cfg["seed"], {"data": args.data},
                    {"checkpoint": "model.ckpt", "loss_curve": "loss.csv",
                     "figure": "loss_curve.png"})
    return 0


# ---- infer --------------------------------------------------------------------------

_INFER_DEFAULTS = {"score-threshold": 0.5, "nms": 0.5}


def cmd_infer(args) -> int:
    cfg = _resolve(args, _INFER_DEFAULTS)
    det = load_detector(args.checkpoint)
    data_dir = Path(args.in_dir)
    stems = _scene_stems(data_dir)
    scenes = load_dataset(data_dir)
    out = _ensure_out(args.out)
    total = 0
    for stem, scene in zip(stems, scenes):
        detections = det.infer(scene.image, score_threshold=cfg["score-threshold"],
                               nms_threshold=cfg["nms"])
        write_detections(detections, det.config.image_size, stem, out)
        total += len(detections)
    _write_manifest(out, "infer", cfg, None,
                    {"checkpoint": args.checkpoint, "data": args.in_dir},
                    {"detections": args.out, "scenes": len(stems), "instances": total})
    return 0


# ---- eval ---------------------------------------------------------------------------

_EVAL_DEFAULTS = {"units": "mm", "jobs": 1, "format": "csv"}


class _ScoredMask:
    """Duck-typed detection for average_precision."""

    def __init__(self, score, mask):
        self.score, self.image_mask = score, mask


def _eval_scene(task):
    """Per-scene per-class partials; module-level so worker processes can
    unpickle it. task = (units, spacing_yx, voxel_ml, side, class ids,
    {cid: [instance masks]}, [(cid, score, det mask)])."""
    units, spacing_yx, voxel_ml, side, class_ids, gt_instances, dets = task
    spacing = None if units == "voxel" else spacing_yx
    out = {}
    for cid in class_ids:
        insts = gt_instances.get(cid, [])
        gt = np.zeros((side, side), dtype=bool)
        for mask in insts:
            gt |= mask
        pred = np.zeros_like(gt)
        scored = [(score, mask) for dcid, score, mask in dets if dcid == cid]
        for _, mask in scored:
            pred |= mask
        counts = confusion_counts(pred, gt)
        # both sides empty counts as exact agreement; one side empty has no
        # defined surface distance and is left out of the per-scene average
        hd = ahd = None
        if pred.any() and gt.any():
            a = PointSet.from_mask(pred, spacing)
            b = PointSet.from_mask(gt, spacing)
            hd = hausdorff(b, a, units)
            ahd = average_hausdorff(b, a, units)
        elif not pred.any() and not gt.any():
            hd = ahd = 0.0
        ranked = sorted(scored, key=lambda s: -s[0])
        ap = average_precision([_ScoredMask(s, m) for s, m in ranked], insts)
        out[cid] = (counts.tp, counts.fp, counts.fn, counts.tn, hd, ahd, ap,
                    gt.sum() * voxel_ml, pred.sum() * voxel_ml)
    return out


def cmd_eval(args) -> int:
    cfg = _resolve(args, _EVAL_DEFAULTS)
    if cfg["units"] not in ("voxel", "mm"):
        raise UsageError(f"--units must be voxel or mm, got {cfg['units']!r}")
    if cfg["jobs"] < 1:
        raise UsageError(f"--jobs must be at least 1, got {cfg['jobs']}")
    gt_dir, pred_dir = Path(args.gt), Path(args.pred)
    stems = _scene_stems(gt_dir)
    scenes = load_dataset(gt_dir)

    label_table = read_volume(gt_dir / f"{stems[0]}_labels.vol").label_table
    class_ids = tuple(sorted(cid for cid in label_table if cid != 0))
    spacing = read_volume(gt_dir / f"{stems[0]}_image.vol").spacing_mm
    voxel_ml = spacing[0] * spacing[1] * spacing[2] / 1000.0

    tasks = []
    for stem, scene in zip(stems, scenes):
        det_path = pred_dir / f"{stem}_det.txt"
        if not det_path.exists():
            raise FileNotFoundError(f"missing detections file {det_path}")
        dets = [(d.class_id, d.score, d.image_mask) for d in read_detections(det_path)]
        gt_instances = {}
        for inst in scene.instances:
            gt_instances.setdefault(inst.class_id, []).append(inst.mask)
        side = scene.image.shape[1]
        tasks.append((cfg["units"], (spacing[1], spacing[0]), voxel_ml, side,
                      class_ids, gt_instances, dets))

    if cfg["jobs"] > 1:
        with ProcessPoolExecutor(max_workers=cfg["jobs"]) as pool:
            partials = list(pool.map(_eval_scene, tasks))
    else:
        partials = [_eval_scene(t) for t in tasks]

    rows, volumes, diffs = [], {}, {}
    for cid in class_ids:
        tp = fp = fn = tn = 0
        hds, ahds, aps, gt_ml, pred_ml = [], [], [], 0.0, 0.0
        for part in partials:
            p = part[cid]
            tp, fp, fn, tn = tp + p[0], fp + p[1], fn + p[2], tn + p[3]
            if p[4] is not None:
                hds.append(p[4])
                ahds.append(p[5])
            if p[6] is not None:
                aps.append(p[6])
            gt_ml += p[7]
            pred_ml += p[8]
        counts = ConfusionCounts(tp, fp, fn, tn)
        denom = 2 * tp + fp + fn
        name = label_table[cid]
        rows.append(ClassMetrics(
            name,
            2 * tp / denom if denom else 1.0,
            precision(counts),
            float(np.mean(hds)) if hds else float("nan"),
            float(np.mean(ahds)) if ahds else float("nan"),
            float(np.mean(aps)) if aps else float("nan"),
        ))
        volumes[f"gt_{name}"] = gt_ml
        volumes[f"pred_{name}"] = pred_ml
        diffs[name] = pred_ml - gt_ml

    report = MetricsReport(classes=rows, unit=cfg["units"], volumes_ml=volumes,
                           volume_diffs_ml=diffs)
    out = _ensure_out(args.out)
    ext = "csv" if cfg["format"] == "csv" else "jsonl"
    write_report(report, out / f"metrics.{ext}", cfg["format"])
    save_metric_bars(report, out / "metrics.png")
    _write_manifest(out, "eval", cfg, None, {"pred": args.pred, "gt": args.gt},
                    {"report": f"metrics.{ext}", "figure": "metrics.png",
                     "scenes": len(stems)})
    return 0


# ---- thickness ----------------------------------------------------------------------

_THICKNESS_DEFAULTS = {
    "tissue": 3, "bone": 1, "axis": "slice_normal",
    "provenance": "gt", "max-thickness-mm": 10.0,
}


def cmd_thickness(args) -> int:
    cfg = _resolve(args, _THICKNESS_DEFAULTS)
    vol = read_volume(args.labels)
    if vol.kind != "labels":
        raise ValueError(f"{args.labels}: thickness needs a labels volume, got {vol.kind}")
    inner, outer = extract_surfaces(vol, cfg["tissue"], cfg["bone"])
    try:
        cylinder = fit_cylinder_axis(inner, axis_constraint=cfg["axis"])
        samples = thickness_samples(inner, outer)
        tm = flatten_radial(inner, samples, cylinder, n_slices=vol.dims[2],
                            max_thickness_mm=cfg["max-thickness-mm"],
                            provenance=cfg["provenance"])
    except ValueError as e:
        raise NumericError(str(e)) from e
    out = _ensure_out(args.out)
    write_thickness_map(tm, out / "thickness.csv")
    save_thickness_heatmap(tm.values, tm.slice_spacing_mm, out / "thickness.png")
    _write_manifest(out, "thickness", cfg, None, {"labels": args.labels},
                    {"map": "thickness.csv", "render": "thickness.pgm",
                     "figure": "thickness.png", "covered_bins": int(tm.covered.sum()),
                     "excluded_samples": tm.excluded})
    return 0


# ---- label-otsu ---------------------------------------------------------------------


def _parse_roi_box(text: str) -> tuple[slice, slice, slice]:
    """Half-open voxel ranges 'z1:z2,y1:y2,x1:x2'."""
    parts = text.split(",")
    if len(parts) != 3:
        raise UsageError(f"--roi-box wants z1:z2,y1:y2,x1:x2, got {text!r}")
    slices = []
    for part in parts:
        bounds = part.split(":")
        if len(bounds) != 2:
            raise UsageError(f"--roi-box range {part!r} is not lo:hi")
        try:
            lo, hi = int(bounds[0]), int(bounds[1])
        except ValueError:
            raise UsageError(f"--roi-box range {part!r} is not integral") from None
        if not 0 <= lo < hi:
            raise UsageError(f"--roi-box range {part!r} must satisfy 0 <= lo < hi")
        slices.append(slice(lo, hi))
    return tuple(slices)


def cmd_label_otsu(args) -> int:
    cfg = _resolve(args, {})
    vol = read_volume(args.intensity)
    if vol.kind != "intensity":
        raise ValueError(f"{args.intensity}: expected an intensity volume, got {vol.kind}")
    zs, ys, xs = _parse_roi_box(args.roi_box)
    nz, ny, nx = vol.voxels.shape
    if zs.stop > nz or ys.stop > ny or xs.stop > nx:
        raise ValueError(
            f"--roi-box {args.roi_box} exceeds volume extent (z={nz}, y={ny}, x={nx})"
        )
    region = vol.voxels[zs, ys, xs].astype(np.float64)
    threshold = otsu_threshold(region.ravel())
    labels = np.zeros(vol.voxels.shape, dtype=np.uint16)
    labels[zs, ys, xs] = (region > threshold).astype(np.uint16)
    fluid = Volume(vol.dims, vol.spacing_mm, "labels", labels,
                   {0: "background", 1: "fluid"})
    out = _ensure_out(args.out)
    write_volume(fluid, out / "fluid_labels.vol")
    voxel_ml = vol.spacing_mm[0] * vol.spacing_mm[1] * vol.spacing_mm[2] / 1000.0
    volume_ml = float(labels.sum()) * voxel_ml
    print(f"threshold={threshold:.17g} volume_ml={volume_ml:.17g}")
    _write_manifest(out, "label-otsu", {**cfg, "roi-box": args.roi_box}, None,
                    {"intensity": args.intensity},
                    {"labels": "fluid_labels.vol", "threshold": threshold,
                     "volume_ml": volume_ml})
    return 0


# ---- report-cov ---------------------------------------------------------------------

_COV_DEFAULTS = {"format": "csv"}


def _read_measurements(path) -> list[float]:
    values = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            values.append(float(line))
        except ValueError:
            raise ValueError(f"{path}:{lineno}: not a number: {line!r}") from None
    if not values:
        raise ValueError(f"{path}: no measurements")
    return values


def cmd_report_cov(args) -> int:
    cfg = _resolve(args, _COV_DEFAULTS)
    sources = [("a", args.volumes_a), ("b", args.volumes_b)]
    for item in args.volumes_extra or []:
        if "=" not in item:
            raise UsageError(f"--volumes-extra wants NAME=FILE, got {item!r}")
        name, path = item.split("=", 1)
        if name in [s[0] for s in sources]:
            raise UsageError(f"duplicate measurement source name {name!r}")
        sources.append((name, path))
    columns = [_read_measurements(path) for _, path in sources]
    lengths = {len(c) for c in columns}
    if len(lengths) != 1:
        raise ValueError(
            "measurement files must pair line by line; got lengths "
            + ", ".join(str(len(c)) for c in columns)
        )
    labels = [name for name, _ in sources]
    cov = cov_table(labels, np.stack(columns, axis=1))
    volumes = {name: float(np.mean(col)) for (name, _), col in zip(sources, columns)}
    diffs = {}
    for i in range(len(sources)):
        for j in range(i + 1, len(sources)):
            key = f"{labels[i]}-{labels[j]}"
            diffs[key] = float(np.mean(np.abs(np.asarray(columns[i]) - np.asarray(columns[j]))))
    report = MetricsReport(classes=[], unit="mm", volumes_ml=volumes,
                           volume_diffs_ml=diffs, cov=cov)
    out = _ensure_out(args.out)
    ext = "csv" if cfg["format"] == "csv" else "jsonl"
    write_report(report, out / f"cov_report.{ext}", cfg["format"])
    save_cov_matrix(cov, out / "cov_matrix.png")
    _write_manifest(out, "report-cov", cfg, None,
                    {name: path for name, path in sources},
                    {"report": f"cov_report.{ext}", "figure": "cov_matrix.png",
                     "subjects": len(columns[0])})
    return 0


# ---- parser and entry point ----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mskseg",
        description="Synthetic musculoskeletal instance segmentation pipeline.",
    )
    parser.add_argument("--version", action="version", version=f"mskseg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key=value file; explicit flags override it")
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "generate a synthetic scene dataset")
    p.add_argument("--n", type=int, help="number of scenes (default 8)")
    p.add_argument("--seed", type=int, help="generation seed (default 0)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--image-size", type=int, help="square scene side in pixels (default 128)")
    p.add_argument("--max-blobs", type=int, help="fluid blobs per scene, 0..3 (default 3)")
    p.add_argument("--noise-sigma", type=float, help="intensity noise sd (default 0.03)")
    p.add_argument("--bone-class", type=int, choices=(1, 2),
                   help="class id of the bone instance (default 1)")

    p = add("train", cmd_train, "train a detector on a dataset directory")
    p.add_argument("--data", required=True, help="dataset directory from synth")
    p.add_argument("--head", choices=("baseline", "improved"),
                   help="mask head variant (default improved)")
    p.add_argument("--epochs", type=int, help="training epochs (default 30)")
    p.add_argument("--lr", type=float, help="Adam learning rate (default 0.001)")
    p.add_argument("--seed", type=int, help="init and sampling seed (default 0)")
    p.add_argument("--out", required=True, help="output directory for checkpoint and curve")

    p = add("infer", cmd_infer, "run a trained detector over a dataset directory")
    p.add_argument("--checkpoint", required=True, help="checkpoint file from train")
    p.add_argument("--in", dest="in_dir", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory for detections")
    p.add_argument("--score-threshold", type=float,
                   help="keep detections scoring strictly above this (default 0.5)")
    p.add_argument("--nms", type=float, help="per-class suppression IoU (default 0.5)")

    p = add("eval", cmd_eval, "score detections against ground truth")
    p.add_argument("--pred", required=True, help="detections directory from infer")
    p.add_argument("--gt", required=True, help="ground-truth dataset directory")
    p.add_argument("--units", choices=("voxel", "mm"),
                   help="distance units for Hausdorff metrics (default mm)")
    p.add_argument("--jobs", type=int,
                   help="parallel per-scene workers; output order is fixed (default 1)")
    p.add_argument("--out", required=True, help="output directory for the report")

    p = add("thickness", cmd_thickness, "radial thickness map from a label volume")
    p.add_argument("--labels", required=True, help="label volume file")
    p.add_argument("--tissue", type=int, help="cartilage-like label id (default 3)")
    p.add_argument("--bone", type=int, help="adjacent bone label id (default 1)")
    p.add_argument("--out", required=True, help="output directory for map, render, figure")

    p = add("label-otsu", cmd_label_otsu,
            "label fluid voxels above the Otsu threshold of a region")
    p.add_argument("--intensity", required=True, help="intensity volume file")
    p.add_argument("--roi-box", required=True,
                   help="half-open voxel ranges z1:z2,y1:y2,x1:x2")
    p.add_argument("--out", required=True, help="output directory for the label volume")

    p = add("report-cov", cmd_report_cov,
            "agreement table between paired measurement lists")
    p.add_argument("--volumes-a", required=True, help="first measurement file, one value per line")
    p.add_argument("--volumes-b", required=True, help="second measurement file")
    p.add_argument("--volumes-extra", action="append", metavar="NAME=FILE",
                   help="additional measurement source (repeatable)")
    p.add_argument("--out", required=True, help="output directory for the report")

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    started = time.monotonic()
    try:
        code = args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (FileNotFoundError, IsADirectoryError, NotADirectoryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except ValueError as e:
        print("error: " + " ".join(str(e).split()), file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    print(f"{args.command}: {time.monotonic() - started:.1f}s", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
