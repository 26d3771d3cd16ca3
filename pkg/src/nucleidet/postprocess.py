"""Turn probability maps into point detections: combine, peak-pick, suppress.

No watershed and no instance reconstruction; detection needs peak finding and
non-maximum suppression only. All tie-breaking is deterministic: score
descending, then (y, x) ascending.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy import ndimage

from .types import ClassSpec, Detection, PredictionMaps


@dataclass(frozen=True)
class PostprocessConfig:
    """Detection extraction parameters for one class stream.

    ``centroid_weight`` is w1 in ``w1 * centroid + (1 - w1) * seg``; the seg
    term is skipped when no segmentation map is available.
    """

    centroid_weight: float = 1.0
    peak_threshold: float = 0.5
    min_distance: float = 11.0
    box_size: float = 11.0
    overlap_threshold: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.centroid_weight <= 1.0:
            raise ValueError("centroid_weight must be in [0, 1]")
        if not 0.0 <= self.peak_threshold <= 1.0:
            raise ValueError("peak_threshold must be in [0, 1]")
        if not 0.0 <= self.overlap_threshold <= 1.0:
            raise ValueError("overlap_threshold must be in [0, 1]")
        if self.min_distance <= 0 or self.box_size <= 0:
            raise ValueError("min_distance and box_size must be positive")


# Published detection settings for common nuclei datasets.
PRESETS = {
    "monkey": PostprocessConfig(0.6, 0.5, 11, 11, 0.5),
    "puma": PostprocessConfig(0.6, 0.5, 11, 11, 0.5),
    "pannuke": PostprocessConfig(1.0, 0.5, 9, 9, 0.5),
    "conic": PostprocessConfig(1.0, 0.5, 3, 3, 0.5),
    "midog": PostprocessConfig(1.0, 0.99, 21, 21, 0.5),
}


def combine_maps(centroid_prob: np.ndarray, seg_prob: Optional[np.ndarray],
                 centroid_weight: float) -> np.ndarray:
    """Weighted blend of centroid and segmentation probabilities.

    Without a segmentation map the centroid map passes through unchanged.
    """
    centroid_prob = np.asarray(centroid_prob, dtype=np.float64)
    if seg_prob is None:
        return centroid_prob
    seg_prob = np.asarray(seg_prob, dtype=np.float64)
    if seg_prob.shape != centroid_prob.shape:
        raise ValueError(f"map shapes differ: {centroid_prob.shape} vs {seg_prob.shape}")
    if not 0.0 <= centroid_weight <= 1.0:
        raise ValueError("centroid_weight must be in [0, 1]")
    return centroid_weight * centroid_prob + (1.0 - centroid_weight) * seg_prob


def _round_half_away(v: float) -> int:
    return int(np.floor(v + 0.5)) if v >= 0 else -int(np.floor(-v + 0.5))


def peak_local_max(prob: np.ndarray, threshold: float,
                   min_distance: float) -> list[tuple[int, int, float]]:
    """Local maxima of a probability map with greedy distance suppression.

    A connected plateau of equal maxima yields its centroid pixel (snapped to
    the plateau if the rounded centroid falls off it). Candidates below
    ``threshold`` are dropped; survivors are accepted greedily by descending
    score (ties (y, x) ascending), rejecting any peak within Euclidean
    distance <= ``min_distance`` of an accepted one. Returns (x, y, score)
    in acceptance order.
    """
    prob = np.asarray(prob, dtype=np.float64)
    if prob.ndim != 2:
        raise ValueError("probability map must be 2-D")
    mx = ndimage.maximum_filter(prob, size=3, mode="constant", cval=-np.inf)
    cand = (prob == mx) & (prob >= threshold)
    if not cand.any():
        return []
    labels, n_lab = ndimage.label(cand, structure=np.ones((3, 3), dtype=bool))
    raw: list[tuple[int, int, float]] = []
    for comp in ndimage.find_objects(labels):
        sub = labels[comp]
        ys, xs = np.nonzero(sub)
        ys = ys + comp[0].start
        xs = xs + comp[1].start
        # adjacent local maxima are equal-valued, so any member scores the plateau
        score = float(prob[ys[0], xs[0]])
        comp_label = labels[ys[0], xs[0]]
        cy, cx = _round_half_away(ys.mean()), _round_half_away(xs.mean())
        h, w = prob.shape
        if not (0 <= cy < h and 0 <= cx < w and labels[cy, cx] == comp_label):
            # non-convex plateau: snap to its member nearest the centroid
            d2 = (ys - ys.mean()) ** 2 + (xs - xs.mean()) ** 2
            order = np.lexsort((xs, ys, d2))
            cy, cx = int(ys[order[0]]), int(xs[order[0]])
        raw.append((int(cx), int(cy), score))

    raw.sort(key=lambda t: (-t[2], t[1], t[0]))
    kept: list[tuple[int, int, float]] = []
    limit = float(min_distance) ** 2
    for x, y, s in raw:
        if all((x - kx) ** 2 + (y - ky) ** 2 > limit for kx, ky, _ in kept):
            kept.append((x, y, s))
    return kept


def box_iou(ax: float, ay: float, bx: float, by: float, box_size: float) -> float:
    """IoU of two axis-aligned ``box_size`` squares centred on the points."""
    ix = max(0.0, box_size - abs(ax - bx))
    iy = max(0.0, box_size - abs(ay - by))
    inter = ix * iy
    union = 2.0 * box_size * box_size - inter
    return inter / union


def nms(points: Sequence[tuple[float, float, float]], box_size: float,
        overlap_threshold: float) -> list[tuple[float, float, float]]:
    """Greedy non-maximum suppression over (x, y, score) points.

    Keeps the highest-scoring point and suppresses any whose centred box
    overlaps a kept box with IoU > ``overlap_threshold``. Deterministic:
    ties broken by (y, x) ascending. Idempotent by construction.
    """
    ordered = sorted(points, key=lambda t: (-t[2], t[1], t[0]))
    kept: list[tuple[float, float, float]] = []
    for x, y, s in ordered:
        if all(box_iou(x, y, kx, ky, box_size) <= overlap_threshold for kx, ky, _ in kept):
            kept.append((x, y, s))
    return kept


def detect_in_maps(centroid_prob: np.ndarray, seg_prob: Optional[np.ndarray],
                   config: PostprocessConfig, class_index: int) -> list[Detection]:
    """Full extraction for one class stream: combine -> peaks -> NMS."""
    combined = combine_maps(centroid_prob, seg_prob, config.centroid_weight)
    peaks = peak_local_max(combined, config.peak_threshold, config.min_distance)
    survivors = nms(peaks, config.box_size, config.overlap_threshold)
    return [Detection(x=float(x), y=float(y), class_index=class_index,
                      confidence=min(1.0, float(s))) for x, y, s in survivors]


def extract_detections(maps: PredictionMaps,
                       config: Union[PostprocessConfig, Sequence[PostprocessConfig]],
                       ) -> list[Detection]:
    """Detections for every class, processed independently.

    Classes do not suppress each other, so one nucleus may legitimately appear
    under several classes (soft multi-class). ``config`` is shared or given
    per class.
    """
    n = maps.n_classes
    configs = list(config) if isinstance(config, (list, tuple)) else [config] * n
    if len(configs) != n:
        raise ValueError(f"{len(configs)} configs for {n} classes")
    out: list[Detection] = []
    for k in range(n):
        seg = maps.seg[k] if maps.seg is not None else None
        out.extend(detect_in_maps(maps.centroid[k], seg, configs[k], k))
    return out


# --- detection serialisation ---------------------------------------------------

_DET_HEADER = ["x", "y", "class_name", "confidence"]


def write_detections_csv(path: str | Path, detections: Sequence[Detection],
                         spec: ClassSpec) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(_DET_HEADER)
        for d in detections:
            writer.writerow([f"{d.x:g}", f"{d.y:g}",
                             spec.classes[d.class_index], f"{d.confidence:.6g}"])


def read_detections_csv(path: str | Path, spec: ClassSpec) -> list[Detection]:
    out: list[Detection] = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        next(reader)
        for row in reader:
            if not row:
                continue
            out.append(Detection(x=float(row[0]), y=float(row[1]),
                                 class_index=spec.index_of(row[2]),
                                 confidence=float(row[3])))
    return out


def write_grouped_detections_csv(path: str | Path,
                                 groups: dict[str, Sequence[Detection]],
                                 spec: ClassSpec) -> None:
    """Multi-image variant with a leading image_id column."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["image_id"] + _DET_HEADER)
        for image_id in sorted(groups):
            for d in groups[image_id]:
                writer.writerow([image_id, f"{d.x:g}", f"{d.y:g}",
                                 spec.classes[d.class_index], f"{d.confidence:.6g}"])


def read_grouped_detections_csv(path: str | Path, spec: ClassSpec) -> dict[str, list[Detection]]:
    """Read detections grouped by image; plain single-image files map to ''. """
    groups: dict[str, list[Detection]] = {}
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        grouped = header[0] == "image_id"
        for row in reader:
            if not row:
                continue
            key = row[0] if grouped else ""
            vals = row[1:] if grouped else row
            conf = float(vals[3]) if len(vals) > 3 and vals[3] != "" else 1.0
            groups.setdefault(key, []).append(Detection(
                x=float(vals[0]), y=float(vals[1]),
                class_index=spec.index_of(vals[2]), confidence=conf))
    return groups


def write_detections_json(path: str | Path, detections: Sequence[Detection],
                          spec: ClassSpec) -> None:
    payload = [{"x": d.x, "y": d.y, "class_name": spec.classes[d.class_index],
                "confidence": d.confidence} for d in detections]
    with open(path, "w") as f:
        json.dump(payload, f, indent=2)
