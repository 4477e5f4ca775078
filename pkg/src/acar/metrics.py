"""Detection metrics (frame-level AP / mAP at IoU 0.5) and attention export.

AP uses all-point interpolation over the precision envelope (VOC-2012
style) with inclusive IoU matching and greedy assignment: detections in
descending score order claim the highest-IoU unmatched ground truth of
their frame. Attention maps export as binary 8-bit PGM plus a CSV of raw
floats.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .roi import BoundingBox


@dataclass
class Detection:
    box: BoundingBox
    class_id: int
    score: float
    frame: object = 0

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError("detection score must be in [0, 1]")


@dataclass
class GroundTruth:
    box: BoundingBox
    class_id: int
    frame: object = 0


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes."""
    ix = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    iy = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = ix * iy
    union = a.area() + b.area() - inter
    return inter / union if union > 0 else 0.0


def _match_detections(dets: list[Detection], gts: list[GroundTruth],
                      iou_thresh: float) -> np.ndarray:
    """True-positive flags for detections sorted by descending score
    (ties keep insertion order)."""
    by_frame: dict = {}
    for j, gt in enumerate(gts):
        by_frame.setdefault(gt.frame, []).append(j)
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    taken = [False] * len(gts)
    tp = np.zeros(len(dets))
    for rank, di in enumerate(order):
        det = dets[di]
        best_j, best_iou = -1, 0.0
        for j in by_frame.get(det.frame, ()):
            if taken[j]:
                continue
            v = iou(det.box, gts[j].box)
            if v > best_iou:
                best_j, best_iou = j, v
        if best_j >= 0 and best_iou >= iou_thresh:
            taken[best_j] = True
            tp[rank] = 1.0
    return tp


def average_precision(dets: list[Detection], gts: list[GroundTruth],
                      iou_thresh: float = 0.5) -> float:
    """All-point-interpolated AP for one class."""
    if not gts:
        raise ValueError("average_precision needs at least one ground truth")
    if not dets:
        return 0.0
    tp = _match_detections(dets, gts, iou_thresh)
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(1.0 - tp)
    rec = tp_cum / len(gts)
    prec = tp_cum / np.maximum(tp_cum + fp_cum, 1e-12)

    mrec = np.concatenate(([0.0], rec, [1.0]))
    mpre = np.concatenate(([0.0], prec, [0.0]))
    mpre = np.flip(np.maximum.accumulate(np.flip(mpre)))
    steps = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def frame_map(per_class_ap: dict[int, float]) -> float:
    """Arithmetic mean over classes (callers include only classes with
    ground truth)."""
    if not per_class_ap:
        return 0.0
    return float(np.mean(list(per_class_ap.values())))


def evaluate_detections(dets: list[Detection], gts: list[GroundTruth],
                        iou_thresh: float = 0.5) -> tuple[dict[int, float], float]:
    """Per-class AP over all classes that have ground truth, plus the mean."""
    classes = sorted({gt.class_id for gt in gts})
    aps = {}
    for cls in classes:
        aps[cls] = average_precision([d for d in dets if d.class_id == cls],
                                     [g for g in gts if g.class_id == cls],
                                     iou_thresh)
    return aps, frame_map(aps)


# -- attention export --------------------------------------------------------


def write_pgm(path, values: np.ndarray) -> None:
    """8-bit binary PGM, values normalized by the slice max (all-zero slice
    stays all zero)."""
    if values.ndim != 2:
        raise ValueError("PGM export expects a 2-D array")
    peak = values.max()
    scaled = np.zeros_like(values) if peak <= 0 else values / peak
    pix = np.rint(255.0 * scaled).astype(np.uint8)
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5" or parts[2] != b"255":
        raise ValueError("not an 8-bit binary PGM")
    w, h = (int(x) for x in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=h * w).reshape(h, w)


def write_attention_csv(path, values: np.ndarray) -> None:
    """Raw float dump, one "x,y,value" row per location, 9 significant
    digits."""
    h, w = values.shape
    with open(path, "w", encoding="ascii") as fh:
        fh.write("x,y,value\n")
        for y in range(h):
            for x in range(w):
                fh.write(f"{x},{y},{values[y, x]:.9g}\n")


def read_attention_csv(path) -> np.ndarray:
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "x,y,value":
        raise ValueError("missing x,y,value header")
    entries = []
    for line in lines[1:]:
        x_s, y_s, v_s = line.split(",")
        entries.append((int(x_s), int(y_s), float(v_s)))
    h = max(y for _, y, _ in entries) + 1
    w = max(x for x, _, _ in entries) + 1
    out = np.zeros((h, w))
    for x, y, v in entries:
        out[y, x] = v
    return out


def export_attention(weights: np.ndarray, out_dir, prefix: str = "att") -> list[str]:
    """Dump one PGM + CSV pair per (query actor, key entry) slice of a
    [Nq, Nkv, H, W] attention tensor; returns the written paths."""
    if weights.ndim != 4:
        raise ValueError("expected [Nq, Nkv, H, W] attention weights")
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    nq, nk = weights.shape[:2]
    for i in range(nq):
        for j in range(nk):
            stem = os.path.join(out_dir, f"{prefix}_i{i}_j{j}")
            write_pgm(stem + ".pgm", weights[i, j])
            write_attention_csv(stem + ".csv", weights[i, j])
            paths.extend([stem + ".pgm", stem + ".csv"])
    return paths
