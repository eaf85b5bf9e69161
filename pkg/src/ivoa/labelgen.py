"""Training-label generation: perception vs. depth monitor at every lattice point.

For each ground query point the stereo backend (O_S) and the depth monitor
(O_M) each say whether the disc around it is obstacle free; the pair of
answers is the label, and the 100x100 left-image patch centred on the point's
projection is the training input.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .geometry import StereoRig, robot_to_left_pixel
from .io import atomic_path, atomic_write_json, atomic_write_text
from .monitor import DepthMonitor, GridSpec, OutOfView
from .perception import PerceptionBackend
from .worldsim import Frame, write_pgm

PATCH_SIZE = 100


class OutcomeClass(str, Enum):
    TP = "TP"
    FP = "FP"
    FN = "FN"
    TN = "TN"


# fixed class order used for tensors, tie-breaking and reports
CLASSES = (OutcomeClass.TP, OutcomeClass.FP, OutcomeClass.FN, OutcomeClass.TN)
CLASS_INDEX = {c: i for i, c in enumerate(CLASSES)}


def classify_outcome(o_m: bool, o_s: bool) -> OutcomeClass:
    """Label from (monitor free, perception free).

    An obstacle is the "positive" event: TN means both see free space, FP
    means perception reports an obstacle the monitor does not see.
    """
    if o_m and o_s:
        return OutcomeClass.TN
    if o_m:
        return OutcomeClass.FP
    if o_s:
        return OutcomeClass.FN
    return OutcomeClass.TP


def patch_window(width: int, height: int, u: int, v: int, size: int = PATCH_SIZE) -> tuple[int, int]:
    """Top-left corner (x0, y0) of the size x size window centred on (u, v), shifted inside the image."""
    if width < size or height < size:
        raise ValueError(f"image {width}x{height} is smaller than the {size}x{size} patch")
    if not (0 <= u < width and 0 <= v < height):
        raise ValueError(f"pixel ({u}, {v}) lies outside the {width}x{height} image")
    x0 = min(max(u - size // 2, 0), width - size)
    y0 = min(max(v - size // 2, 0), height - size)
    return x0, y0


def extract_patch(image: np.ndarray, u: int, v: int, size: int = PATCH_SIZE) -> np.ndarray:
    h, w = image.shape[:2]
    x0, y0 = patch_window(w, h, int(u), int(v), size)
    return image[y0:y0 + size, x0:x0 + size].copy()


@dataclass(frozen=True)
class LabeledPatch:
    frame_id: int
    k: int
    u: int
    v: int
    point: tuple[float, float, float]
    o_m: bool
    o_s: bool
    label: OutcomeClass
    backend: str
    patch: np.ndarray

    def __post_init__(self) -> None:
        if classify_outcome(self.o_m, self.o_s) is not self.label:
            raise ValueError("label inconsistent with (o_m, o_s)")


@dataclass(frozen=True)
class Skip:
    frame_id: int
    k: int
    reason: str


@dataclass
class FrameLabels:
    patches: list[LabeledPatch]
    skips: list[Skip]

    def counts(self) -> dict[str, int]:
        out = {c.value: 0 for c in CLASSES}
        for p in self.patches:
            out[p.label.value] += 1
        return out


def generate_labels(frame: Frame, rig: StereoRig, gridspec: GridSpec, backend: PerceptionBackend,
                    scene=None) -> FrameLabels:
    """Label every lattice point of one frame in row-major order.

    A point is skipped when it does not project into the left image, when the
    monitor cannot see it, or when the backend's sample windows leave the
    images. `scene` is accepted for auditing and is not consulted.
    """
    del scene
    params = backend.params
    monitor = DepthMonitor(frame.depth, rig, params.band, params.n_samples, params.window)
    evaluator = backend.prepare(frame.left, frame.right, rig)
    patches: list[LabeledPatch] = []
    skips: list[Skip] = []
    for k, p in enumerate(gridspec.points()):
        pix = robot_to_left_pixel(p, rig)
        if pix is None:
            skips.append(Skip(frame.frame_id, k, "not in left image"))
            continue
        try:
            o_m = monitor.is_free(p, gridspec.radius)
        except OutOfView as exc:
            skips.append(Skip(frame.frame_id, k, f"monitor: {exc}"))
            continue
        try:
            o_s = evaluator.is_free(p, gridspec.radius)
        except OutOfView as exc:
            skips.append(Skip(frame.frame_id, k, f"perception: {exc}"))
            continue
        u, v = int(round(pix[0])), int(round(pix[1]))
        u = min(u, rig.intrinsics.width - 1)
        v = min(v, rig.intrinsics.height - 1)
        patches.append(LabeledPatch(frame.frame_id, k, u, v, tuple(float(c) for c in p), bool(o_m), bool(o_s),
                                    classify_outcome(o_m, o_s), backend.kind.value,
                                    extract_patch(frame.left, u, v)))
    return FrameLabels(patches, skips)


LABEL_COLUMNS = ("frame_id", "k", "u", "v", "x", "y", "o_m", "o_s", "label", "backend")


def patch_name(frame_id: int, k: int) -> str:
    return f"{frame_id}_{k}.pgm"


def labels_csv(patches) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LABEL_COLUMNS)
    for p in patches:
        w.writerow([p.frame_id, p.k, p.u, p.v, f"{p.point[0]:.3f}", f"{p.point[1]:.3f}",
                    int(p.o_m), int(p.o_s), p.label.value, p.backend])
    return buf.getvalue()


def write_dataset(out_dir, patches, manifest: dict) -> Path:
    """Write patches/<frame>_<k>.pgm, labels.csv and dataset.json under out_dir."""
    out = Path(out_dir)
    (out / "patches").mkdir(parents=True, exist_ok=True)
    for p in patches:
        with atomic_path(out / "patches" / patch_name(p.frame_id, p.k)) as tmp:
            write_pgm(tmp, p.patch)
    atomic_write_text(out / "labels.csv", labels_csv(patches))
    atomic_write_json(out / "dataset.json", manifest)
    return out


@dataclass(frozen=True)
class LabelRow:
    frame_id: int
    k: int
    u: int
    v: int
    x: float
    y: float
    o_m: bool
    o_s: bool
    label: OutcomeClass
    backend: str


def read_labels(path) -> list[LabelRow]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing labels file {path}")
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != LABEL_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        for r in reader:
            rows.append(LabelRow(int(r["frame_id"]), int(r["k"]), int(r["u"]), int(r["v"]),
                                 float(r["x"]), float(r["y"]), r["o_m"] == "1", r["o_s"] == "1",
                                 OutcomeClass(r["label"]), r["backend"]))
    return rows
