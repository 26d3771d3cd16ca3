"""Detection evaluation protocols.

Four protocols over point detections: margin-matched FROC (sensitivity at
fixed false-positive rates per mm^2), combined detection+classification F1
with true-negative credit, globally pooled per-class F1, and per-image
averaged per-class F1. All of them share one greedy centroid matcher.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .types import ClassSpec, Detection

DEFAULT_FP_RATES = (10.0, 20.0, 50.0, 100.0, 200.0)


@dataclass(frozen=True)
class MatchResult:
    """Outcome of matching one prediction set against one ground-truth set.

    ``pairs`` holds (pred_index, gt_index, distance) for every true positive,
    with indices into the original input order.
    """

    tp: int
    fp: int
    fn: int
    pairs: tuple[tuple[int, int, float], ...] = ()

    def __post_init__(self):
        if self.tp != len(self.pairs) and self.pairs:
            raise ValueError("tp must equal the number of matched pairs")

    def __add__(self, other: "MatchResult") -> "MatchResult":
        return MatchResult(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


def _as_points(items) -> tuple[np.ndarray, np.ndarray]:
    """Normalise detections/arrays to ((n, 2) xy, (n,) confidence)."""
    if len(items) == 0:
        return np.zeros((0, 2)), np.zeros(0)
    if isinstance(items[0], Detection):
        xy = np.array([[d.x, d.y] for d in items], dtype=np.float64)
        conf = np.array([d.confidence for d in items], dtype=np.float64)
        return xy, conf
    arr = np.asarray(items, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] not in (2, 3):
        raise ValueError("points must be (n, 2) xy or (n, 3) xy+confidence")
    conf = arr[:, 2] if arr.shape[1] == 3 else np.ones(arr.shape[0])
    return arr[:, :2], conf


def match_points(preds, gts, radius: float) -> MatchResult:
    """Greedy one-to-one matching of predictions to ground truth.

    Predictions are processed by descending confidence (ties (y, x) ascending);
    each claims its nearest unmatched ground-truth point within ``radius``
    (inclusive). Unclaimed predictions are FP, unclaimed ground truth FN.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    pxy, conf = _as_points(preds)
    gxy, _ = _as_points(gts)
    order = sorted(range(len(pxy)), key=lambda i: (-conf[i], pxy[i, 1], pxy[i, 0]))
    taken = np.zeros(len(gxy), dtype=bool)
    pairs: list[tuple[int, int, float]] = []
    for i in order:
        if not len(gxy):
            break
        d = np.hypot(gxy[:, 0] - pxy[i, 0], gxy[:, 1] - pxy[i, 1])
        cands = [(d[j], gxy[j, 1], gxy[j, 0], j) for j in range(len(gxy))
                 if not taken[j] and d[j] <= radius]
        if cands:
            _, _, _, j = min(cands)
            taken[j] = True
            pairs.append((i, j, float(d[j])))
    pairs.sort()
    tp = len(pairs)
    return MatchResult(tp=tp, fp=len(pxy) - tp, fn=len(gxy) - tp, pairs=tuple(pairs))


def f1_from_counts(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """(F1, precision, recall) with the 0/0 -> 0 convention."""
    if min(tp, fp, fn) < 0:
        raise ValueError("counts must be nonnegative")
    f1 = 2.0 * tp / (2.0 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0
    precision = tp / (tp + fp) if (tp + fp) else 0.0
    recall = tp / (tp + fn) if (tp + fn) else 0.0
    return f1, precision, recall


def f1_global(results: Sequence[MatchResult]) -> float:
    """Pool counts across images, then score."""
    tp = sum(r.tp for r in results)
    fp = sum(r.fp for r in results)
    fn = sum(r.fn for r in results)
    return f1_from_counts(tp, fp, fn)[0]


def f1_per_image_avg(results: Sequence[MatchResult]) -> float:
    """Mean of per-image F1 scores.

    Images with neither ground truth nor predictions for the class are skipped
    rather than scored, so empty images neither reward nor punish.
    """
    scores = [f1_from_counts(r.tp, r.fp, r.fn)[0] for r in results
              if (r.tp + r.fp + r.fn) > 0]
    return float(np.mean(scores)) if scores else 0.0


# --- combined detection + classification scoring --------------------------------


def classification_confusion(pair_classes: Sequence[tuple[int, int]],
                             class_index: int) -> tuple[int, int, int, int]:
    """(TP, TN, FP, FN) for one class over matched (pred_class, gt_class) pairs."""
    tp = tn = fp = fn = 0
    for pc, gc in pair_classes:
        if pc == class_index and gc == class_index:
            tp += 1
        elif pc != class_index and gc != class_index:
            tn += 1
        elif pc == class_index:
            fp += 1
        else:
            fn += 1
    return tp, tn, fp, fn


def pannuke_f1(detection: MatchResult,
               confusions: Sequence[tuple[int, int, int, int]],
               ) -> dict[str, Union[float, list[dict[str, float]]]]:
    """Combined detection/classification scores.

    ``confusions`` holds per-class (TP_c, TN_c, FP_c, FN_c) computed over
    detection-matched pairs only. Detection errors leak into every class
    denominator, so classification scores are penalised by missed or spurious
    detections as well.
    """
    tp_d, fp_d, fn_d = detection.tp, detection.fp, detection.fn
    f1_d, p_d, r_d = f1_from_counts(tp_d, fp_d, fn_d)
    per_class = []
    for tp_c, tn_c, fp_c, fn_c in confusions:
        hit = tp_c + tn_c
        den_f1 = 2 * hit + 2 * fp_c + 2 * fn_c + fp_d + fn_d
        den_p = hit + 2 * fp_c + fp_d
        den_r = hit + 2 * fn_c + fn_d
        per_class.append({
            "f1": 2.0 * hit / den_f1 if den_f1 else 0.0,
            "precision": hit / den_p if den_p else 0.0,
            "recall": hit / den_r if den_r else 0.0,
        })
    return {"detection": {"f1": f1_d, "precision": p_d, "recall": r_d},
            "classification": per_class}


def pannuke_evaluate(preds_by_image: Sequence[Sequence[Detection]],
                     gts_by_image: Sequence[Sequence[Detection]],
                     n_classes: int, radius: float = 12.0) -> dict:
    """Run the combined protocol over a whole image set.

    Detection matching ignores class; classification confusions are then
    accumulated over the matched pairs.
    """
    det_total = MatchResult(0, 0, 0)
    pair_classes: list[tuple[int, int]] = []
    for preds, gts in zip(preds_by_image, gts_by_image):
        r = match_points(list(preds), list(gts), radius)
        det_total = det_total + r
        for pi, gi, _ in r.pairs:
            pair_classes.append((preds[pi].class_index, gts[gi].class_index))
    confusions = [classification_confusion(pair_classes, c) for c in range(n_classes)]
    return pannuke_f1(det_total, confusions)


# --- FROC ------------------------------------------------------------------------


@dataclass(frozen=True)
class FrocCurve:
    """(FP per mm^2, sensitivity) pairs over a descending confidence sweep."""

    points: tuple[tuple[float, float], ...]
    area_mm2: float

    def __post_init__(self):
        object.__setattr__(self, "points", tuple((float(a), float(b)) for a, b in self.points))
        last = -np.inf
        for fp_rate, sens in self.points:
            if not 0.0 <= sens <= 1.0:
                raise ValueError(f"sensitivity {sens} outside [0, 1]")
            if sens < last:
                raise ValueError("sensitivity must be nondecreasing along the sweep")
            last = sens


def froc(preds, gts, margin_um: float, mpp: float, area_mm2: float,
         fp_rates: Sequence[float] = DEFAULT_FP_RATES) -> tuple[FrocCurve, float]:
    """FROC curve and score for one detection stream.

    The distance margin is given in microns and converted to pixels with
    ``mpp``. Thresholds sweep the unique prediction confidences (descending);
    at each, predictions at or above the threshold are matched. The score is
    the mean, over ``fp_rates``, of the best sensitivity achievable with an FP
    rate at or below each target (0 when no operating point qualifies).
    """
    if area_mm2 <= 0:
        raise ValueError("annotated area must be positive")
    gxy, _ = _as_points(gts)
    if len(gxy) == 0:
        raise ValueError("FROC needs at least one ground-truth point")
    pxy, conf = _as_points(preds)
    radius_px = margin_um / mpp

    points: list[tuple[float, float]] = []
    for t in sorted(set(conf.tolist()), reverse=True):
        keep = conf >= t
        r = match_points(np.column_stack([pxy[keep], conf[keep]]), gxy, radius_px)
        points.append((r.fp / area_mm2, r.tp / len(gxy)))
    curve = FrocCurve(points=tuple(points), area_mm2=area_mm2)
    return curve, froc_score(curve, fp_rates)


def froc_score(curve: FrocCurve, fp_rates: Sequence[float] = DEFAULT_FP_RATES) -> float:
    """Mean best sensitivity at or below each target FP rate."""
    if not fp_rates:
        raise ValueError("fp_rates must be non-empty")
    sens = []
    for rate in fp_rates:
        ok = [s for f, s in curve.points if f <= rate]
        sens.append(max(ok) if ok else 0.0)
    return float(np.mean(sens))


# --- per-class composition helpers ------------------------------------------------


def match_by_class(preds: Sequence[Detection], gts: Sequence[Detection],
                   spec: ClassSpec,
                   radius: Optional[float] = None) -> dict[int, MatchResult]:
    """Match each class stream independently (no cross-class exclusion)."""
    out: dict[int, MatchResult] = {}
    for k in range(spec.n_classes):
        pk = [d for d in preds if d.class_index == k]
        gk = [d for d in gts if d.class_index == k]
        out[k] = match_points(pk, gk, radius if radius is not None else spec.matching_radii[k])
    return out
