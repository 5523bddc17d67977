"""Self-describing volume files, annotation lists, and delimited reports.

All formats are fixed little-endian with x-fastest voxel order, stated in the
header itself, so every byte on disk is auditable without this code. Numeric
text uses 17 significant digits so re-parsing reproduces the exact double.

A volume on disk is two files: a textual header at the given path and a raw
payload sibling named ``<header-name>.raw``. Labels volumes are 16-bit
unsigned; intensity volumes are 32-bit floats.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

VOLUME_MAGIC = "IMRKVOL1"
THICKNESS_MAGIC = "IMRKTHK1"

# loading refuses to allocate beyond this voxel budget
MAX_VOXELS = 512 ** 3

_DTYPES = {"uint16": ("<u2", np.uint16), "float32": ("<f4", np.float32)}
_KIND_DTYPE = {"labels": "uint16", "intensity": "float32"}
_HEADER_KEYS = ("dims", "spacing_mm", "kind", "dtype", "byteorder", "order", "payload")


def g17(x) -> str:
    """Format a float with 17 significant digits; float() re-parses it exactly."""
    return "%.17g" % float(x)


def _token(name: str, what: str) -> str:
    if not name or any(c.isspace() for c in name) or "," in name:
        raise ValueError(f"{what} must be a single comma-free token, got {name!r}")
    return name


# ---- volumes -------------------------------------------------------------------


@dataclass(eq=False)
class Volume:
    """A 3-D voxel grid with physical spacing.

    dims is (nx, ny, nz); voxels is indexed (z, y, x) so the raveled memory
    runs x-fastest. labels volumes carry uint16 ids, every one declared in
    label_table; intensity volumes carry float32 and no table.
    """

    dims: tuple[int, int, int]
    spacing_mm: tuple[float, float, float]
    kind: str
    voxels: np.ndarray
    label_table: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 3 or any(d < 1 for d in self.dims):
            raise ValueError(f"dims must be three positive extents, got {self.dims}")
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if len(self.spacing_mm) != 3 or any(
            not math.isfinite(s) or s <= 0 for s in self.spacing_mm
        ):
            raise ValueError(f"spacing_mm must be three positive values, got {self.spacing_mm}")
        if self.kind not in _KIND_DTYPE:
            raise ValueError(f"kind must be labels or intensity, got {self.kind!r}")
        nx, ny, nz = self.dims
        arr = np.asarray(self.voxels)
        if arr.shape != (nz, ny, nx):
            raise ValueError(f"voxels must be shaped (nz, ny, nx)={(nz, ny, nx)}, got {arr.shape}")
        if self.kind == "labels":
            if not np.issubdtype(arr.dtype, np.integer):
                raise ValueError("labels volume requires integer voxels")
            if int(arr.min()) < 0 or int(arr.max()) > np.iinfo(np.uint16).max:
                raise ValueError("label ids must fit in uint16")
            arr = np.ascontiguousarray(arr, dtype=np.uint16)
            table = {int(k): _token(str(v), "label name") for k, v in self.label_table.items()}
            if any(k < 0 for k in table):
                raise ValueError("label ids must be nonnegative")
            undeclared = sorted(set(int(i) for i in np.unique(arr)) - set(table))
            if undeclared:
                raise ValueError(f"voxels use label ids missing from the table: {undeclared}")
            self.label_table = table
        else:
            arr = np.ascontiguousarray(arr, dtype=np.float32)
            if self.label_table:
                raise ValueError("intensity volumes carry no label table")
        self.voxels = arr

    @property
    def voxel_count(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.spacing_mm == other.spacing_mm
            and self.kind == other.kind
            and self.label_table == other.label_table
            and self.voxels.dtype == other.voxels.dtype
            and np.array_equal(self.voxels, other.voxels)
        )


def write_volume(v: Volume, path) -> None:
    path = Path(path)
    payload_name = path.name + ".raw"
    lines = [
        VOLUME_MAGIC,
        "dims %d %d %d" % v.dims,
        "spacing_mm %s %s %s" % tuple(g17(s) for s in v.spacing_mm),
        "kind " + v.kind,
        "dtype " + _KIND_DTYPE[v.kind],
        "byteorder little",
        "order x-fastest",
        "payload " + payload_name,
    ]
    for lid in sorted(v.label_table):
        lines.append("label %d %s" % (lid, v.label_table[lid]))
    path.write_text("\n".join(lines) + "\n")
    wire = _DTYPES[_KIND_DTYPE[v.kind]][0]
    (path.parent / payload_name).write_bytes(v.voxels.astype(wire).tobytes())


def _read_header(path: Path) -> dict:
    lines = path.read_text().splitlines()
    if not lines or lines[0] != VOLUME_MAGIC:
        raise ValueError(f"{path}: unknown volume magic, expected {VOLUME_MAGIC!r}")
    fields: dict[str, str] = {}
    labels: dict[int, str] = {}
    for ln in lines[1:]:
        if not ln.strip():
            continue
        key, _, rest = ln.partition(" ")
        if key == "label":
            tok = rest.split()
            if len(tok) != 2:
                raise ValueError(f"{path}: malformed label line {ln!r}")
            lid = int(tok[0])
            if lid in labels:
                raise ValueError(f"{path}: duplicate label id {lid}")
            labels[lid] = tok[1]
        elif key in fields:
            raise ValueError(f"{path}: duplicate header field {key!r}")
        else:
            fields[key] = rest.strip()
    missing = [k for k in _HEADER_KEYS if k not in fields]
    if missing:
        raise ValueError(f"{path}: header missing fields {missing}")
    dims = tuple(int(t) for t in fields["dims"].split())
    spacing = tuple(float(t) for t in fields["spacing_mm"].split())
    if len(dims) != 3 or len(spacing) != 3:
        raise ValueError(f"{path}: dims and spacing_mm need three entries each")
    if fields["byteorder"] != "little":
        raise ValueError(f"{path}: unsupported byte order {fields['byteorder']!r}")
    if fields["order"] != "x-fastest":
        raise ValueError(f"{path}: unsupported voxel order {fields['order']!r}")
    if fields["dtype"] not in _DTYPES:
        raise ValueError(f"{path}: unknown dtype {fields['dtype']!r}")
    if fields["kind"] not in _KIND_DTYPE:
        raise ValueError(f"{path}: unknown kind {fields['kind']!r}")
    if _KIND_DTYPE[fields["kind"]] != fields["dtype"]:
        raise ValueError(f"{path}: kind {fields['kind']} does not store dtype {fields['dtype']}")
    return {
        "dims": dims,
        "spacing_mm": spacing,
        "kind": fields["kind"],
        "dtype": fields["dtype"],
        "payload": fields["payload"],
        "labels": labels,
    }


def read_volume(path, max_voxels: int = MAX_VOXELS) -> Volume:
    path = Path(path)
    hdr = _read_header(path)
    nx, ny, nz = hdr["dims"]
    if nx < 1 or ny < 1 or nz < 1:
        raise ValueError(f"{path}: dims must be positive, got {hdr['dims']}")
    count = nx * ny * nz
    if count > max_voxels:
        raise ValueError(f"{path}: {count} voxels exceeds the configured limit of {max_voxels}")
    payload = path.parent / hdr["payload"]
    if not payload.exists():
        raise FileNotFoundError(f"{path}: payload {hdr['payload']} not found")
    wire, npdtype = _DTYPES[hdr["dtype"]]
    want = count * np.dtype(wire).itemsize
    have = payload.stat().st_size
    if have != want:
        raise ValueError(f"{payload}: payload size mismatch, expected {want} bytes, found {have}")
    raw = np.frombuffer(payload.read_bytes(), dtype=wire).astype(npdtype).reshape(nz, ny, nx)
    return Volume(hdr["dims"], hdr["spacing_mm"], hdr["kind"], raw, hdr["labels"])


# ---- annotations ---------------------------------------------------------------


@dataclass(frozen=True)
class Annotation:
    """One ground-truth instance: class id, normalized box, mask file name."""

    class_id: int
    box: tuple[float, float, float, float]
    mask_file: str

    def __post_init__(self):
        if self.class_id < 0:
            raise ValueError("class_id must be nonnegative")
        box = tuple(float(c) for c in self.box)
        object.__setattr__(self, "box", box)
        y1, x1, y2, x2 = box
        if not all(math.isfinite(c) for c in box) or not (
            0.0 <= y1 < y2 <= 1.0 and 0.0 <= x1 < x2 <= 1.0
        ):
            raise ValueError(f"annotation box out of range: {box}")
        _token(self.mask_file, "mask_file")


def write_annotations(instances, path) -> None:
    lines = []
    for a in instances:
        y1, x1, y2, x2 = a.box
        lines.append(
            "%d %s %s %s %s %s" % (a.class_id, g17(y1), g17(x1), g17(y2), g17(x2), a.mask_file)
        )
    Path(path).write_text("".join(ln + "\n" for ln in lines))


def read_annotations(path, check_masks: bool = True) -> list[Annotation]:
    """Parse instance lines; with check_masks, every referenced mask header
    must exist next to the annotation file and declare the instance's class id."""
    path = Path(path)
    out = []
    for ln in path.read_text().splitlines():
        if not ln.strip():
            continue
        tok = ln.split()
        if len(tok) != 6:
            raise ValueError(f"{path}: malformed annotation line {ln!r}")
        ann = Annotation(int(tok[0]), tuple(float(t) for t in tok[1:5]), tok[5])
        if check_masks:
            mask_path = path.parent / ann.mask_file
            if not mask_path.exists():
                raise FileNotFoundError(f"{path}: annotation references missing mask {ann.mask_file}")
            hdr = _read_header(mask_path)
            if hdr["kind"] != "labels":
                raise ValueError(f"{path}: mask {ann.mask_file} is not a labels volume")
            if ann.class_id not in hdr["labels"]:
                raise ValueError(
                    f"{path}: class id {ann.class_id} not declared in {ann.mask_file} label table"
                )
        out.append(ann)
    return out


# ---- metric reports ------------------------------------------------------------


@dataclass(frozen=True)
class ClassMetrics:
    """Per-class segmentation quality row. precision is None when undefined."""

    name: str
    dice: float
    precision: float | None
    hausdorff: float
    avg_hausdorff: float
    ap: float


@dataclass(frozen=True)
class CovTable:
    """Square coefficient-of-variation matrix over labeled measurement sources."""

    labels: tuple[str, ...]
    values: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        n = len(self.labels)
        for name in self.labels:
            _token(name, "cov label")
        if len(self.values) != n or any(len(r) != n for r in self.values):
            raise ValueError("cov matrix must be square and match its labels")
        for i in range(n):
            if self.values[i][i] != 0.0:
                raise ValueError("cov matrix diagonal must be exactly zero")
            for j in range(n):
                if self.values[i][j] != self.values[j][i]:
                    raise ValueError("cov matrix must be symmetric")


@dataclass
class MetricsReport:
    """Evaluation bundle: per-class rows, effusion volumes, and a CoV matrix."""

    classes: list[ClassMetrics] = field(default_factory=list)
    unit: str = "voxel"
    volumes_ml: dict[str, float] = field(default_factory=dict)
    volume_diffs_ml: dict[str, float] = field(default_factory=dict)
    cov: CovTable | None = None


def _report_csv(report: MetricsReport) -> str:
    if report.unit not in ("voxel", "mm"):
        raise ValueError(f"unit must be voxel or mm, got {report.unit!r}")
    blocks = []
    rows = ["class,dice,precision,hausdorff,avg_hausdorff,ap,unit"]
    for c in report.classes:
        prec = "" if c.precision is None else g17(c.precision)
        rows.append(
            ",".join(
                [
                    _token(c.name, "class name"),
                    g17(c.dice),
                    prec,
                    g17(c.hausdorff),
                    g17(c.avg_hausdorff),
                    g17(c.ap),
                    report.unit,
                ]
            )
        )
    blocks.append("\n".join(rows))
    if report.volumes_ml or report.volume_diffs_ml:
        rows = ["measure,label,value_ml"]
        for k, v in report.volumes_ml.items():
            rows.append("volume,%s,%s" % (_token(k, "volume label"), g17(v)))
        for k, v in report.volume_diffs_ml.items():
            rows.append("volume_diff,%s,%s" % (_token(k, "volume label"), g17(v)))
        blocks.append("\n".join(rows))
    if report.cov is not None:
        rows = ["cov," + ",".join(report.cov.labels)]
        for lab, row in zip(report.cov.labels, report.cov.values):
            rows.append(lab + "," + ",".join(g17(v) for v in row))
        blocks.append("\n".join(rows))
    return "\n\n".join(blocks) + "\n"


def _report_jsonl(report: MetricsReport) -> str:
    recs = []
    for c in report.classes:
        recs.append(
            {
                "record": "class",
                "class": c.name,
                "dice": c.dice,
                "precision": c.precision,
                "hausdorff": c.hausdorff,
                "avg_hausdorff": c.avg_hausdorff,
                "ap": c.ap,
                "unit": report.unit,
            }
        )
    for k, v in report.volumes_ml.items():
        recs.append({"record": "volume", "label": k, "ml": v})
    for k, v in report.volume_diffs_ml.items():
        recs.append({"record": "volume_diff", "label": k, "ml": v})
    if report.cov is not None:
        recs.append(
            {
                "record": "cov",
                "labels": list(report.cov.labels),
                "matrix": [list(r) for r in report.cov.values],
            }
        )
    return "".join(json.dumps(r, separators=(",", ":")) + "\n" for r in recs)


def write_report(report: MetricsReport, path, format: str = "csv") -> None:
    """Emit the report with a deterministic field order. A re-parse with
    read_report yields an equal report (unit travels on class rows in CSV)."""
    if format == "csv":
        text = _report_csv(report)
    elif format == "json-lines":
        text = _report_jsonl(report)
    else:
        raise ValueError(f"unknown report format {format!r}")
    Path(path).write_text(text)


def _parse_report_csv(text: str) -> MetricsReport:
    report = MetricsReport()
    for block in text.split("\n\n"):
        lines = [ln for ln in block.splitlines() if ln.strip()]
        if not lines:
            continue
        head = lines[0].split(",")[0]
        if head == "class":
            for ln in lines[1:]:
                cells = ln.split(",")
                if len(cells) != 7:
                    raise ValueError(f"malformed class row {ln!r}")
                name, dice, prec, hd, ahd, ap, unit = cells
                report.classes.append(
                    ClassMetrics(
                        name,
                        float(dice),
                        None if prec == "" else float(prec),
                        float(hd),
                        float(ahd),
                        float(ap),
                    )
                )
                report.unit = unit
        elif head == "measure":
            for ln in lines[1:]:
                meas, label, val = ln.split(",")
                if meas == "volume":
                    report.volumes_ml[label] = float(val)
                elif meas == "volume_diff":
                    report.volume_diffs_ml[label] = float(val)
                else:
                    raise ValueError(f"unknown measure {meas!r}")
        elif head == "cov":
            labels = tuple(lines[0].split(",")[1:])
            vals = []
            for lab, ln in zip(labels, lines[1:], strict=True):
                cells = ln.split(",")
                if cells[0] != lab:
                    raise ValueError(f"cov row order mismatch at {cells[0]!r}")
                vals.append(tuple(float(v) for v in cells[1:]))
            report.cov = CovTable(labels, tuple(vals))
        else:
            raise ValueError(f"unknown report block {head!r}")
    return report


def _parse_report_jsonl(text: str) -> MetricsReport:
    report = MetricsReport()
    for ln in text.splitlines():
        if not ln.strip():
            continue
        rec = json.loads(ln)
        kind = rec.get("record")
        if kind == "class":
            report.classes.append(
                ClassMetrics(
                    rec["class"],
                    rec["dice"],
                    rec["precision"],
                    rec["hausdorff"],
                    rec["avg_hausdorff"],
                    rec["ap"],
                )
            )
            report.unit = rec["unit"]
        elif kind == "volume":
            report.volumes_ml[rec["label"]] = rec["ml"]
        elif kind == "volume_diff":
            report.volume_diffs_ml[rec["label"]] = rec["ml"]
        elif kind == "cov":
            report.cov = CovTable(
                tuple(rec["labels"]), tuple(tuple(r) for r in rec["matrix"])
            )
        else:
            raise ValueError(f"unknown report record {kind!r}")
    return report


def read_report(path, format: str = "csv") -> MetricsReport:
    text = Path(path).read_text()
    if format == "csv":
        return _parse_report_csv(text)
    if format == "json-lines":
        return _parse_report_jsonl(text)
    raise ValueError(f"unknown report format {format!r}")


# ---- thickness grids and grayscale renders --------------------------------------


def write_thickness_csv(values, slice_spacing_mm: float, path, kind: str = "thickness",
                        source: str = "unspecified", extra: dict | None = None) -> None:
    """One row per slice, exactly 360 degree columns, empty cell for no sample.

    `extra` appends more key=value tokens to the metadata line; the reader
    hands them back verbatim as strings.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim != 2 or values.shape[0] != 360:
        raise ValueError(f"thickness grid must be (360, n_slices), got {values.shape}")
    if kind not in ("thickness", "difference"):
        raise ValueError(f"kind must be thickness or difference, got {kind!r}")
    _token(source, "source")
    head = "# %s kind=%s slice_spacing_mm=%s angle_bins=360 source=%s" % (
        THICKNESS_MAGIC, kind, g17(slice_spacing_mm), source,
    )
    for key in sorted(extra or {}):
        head += " %s=%s" % (_token(key, "metadata key"),
                            _token(str(extra[key]), "metadata value"))
    rows = [head]
    for s in range(values.shape[1]):
        rows.append(",".join("" if not np.isfinite(v) else g17(v) for v in values[:, s]))
    Path(path).write_text("\n".join(rows) + "\n")


def read_thickness_csv(path):
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# " + THICKNESS_MAGIC):
        raise ValueError(f"{path}: unknown thickness magic, expected {THICKNESS_MAGIC!r}")
    meta = dict(tok.split("=", 1) for tok in lines[0].split()[2:])
    meta["slice_spacing_mm"] = float(meta["slice_spacing_mm"])
    meta["angle_bins"] = int(meta["angle_bins"])
    rows = []
    for ln in lines[1:]:
        cells = ln.split(",")
        if len(cells) != 360:
            raise ValueError(f"{path}: expected 360 columns, got {len(cells)}")
        rows.append([math.nan if c == "" else float(c) for c in cells])
    values = np.array(rows, dtype=float).T if rows else np.empty((360, 0))
    return values, meta


def write_pgm(values, path) -> None:
    """8-bit P5 grayscale render. Finite cells map linearly onto 1..255 over
    the stated min/max; non-finite cells render as 0."""
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 2 or arr.size == 0:
        raise ValueError(f"render expects a nonempty 2-D grid, got shape {arr.shape}")
    finite = np.isfinite(arr)
    lo = float(arr[finite].min()) if finite.any() else 0.0
    hi = float(arr[finite].max()) if finite.any() else 0.0
    img = np.zeros(arr.shape, dtype=np.uint8)
    if finite.any():
        if hi > lo:
            img[finite] = np.rint(1 + 254 * (arr[finite] - lo) / (hi - lo)).astype(np.uint8)
        else:
            img[finite] = 255
    header = "P5\n# min=%s max=%s map=linear-1-255 empty=0\n%d %d\n255\n" % (
        g17(lo), g17(hi), arr.shape[1], arr.shape[0],
    )
    Path(path).write_bytes(header.encode("ascii") + img.tobytes())
