"""Synthetic data generation and independent brute-force oracles.

The oracles deliberately avoid every main-path helper: straight summation in
64-bit for the losses, exhaustive enumeration for matching, pixel-by-pixel
scans for geometry. They exist to check the fast implementations, so clarity
wins over speed (documented caps: <= 8 points for assignment, <= 64 x 64 maps).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .types import AnnotationSet, ImagePatch


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for synthetic nuclei patches with exact ground truth.

    Nuclei are non-overlapping coloured disks; classes are separable by hue
    (and optionally by size when per-class radius ranges are given). Densities
    must be feasible: placement is rejection-sampled with bounded retries.
    """

    size: int = 64
    n_classes: int = 3
    count_range: tuple[int, int] = (2, 4)
    radius_range: tuple[float, float] = (2.5, 4.0)
    hues: Optional[tuple[float, ...]] = None
    hue_jitter: float = 0.02
    per_class_radius: Optional[tuple[tuple[float, float], ...]] = None
    min_gap: float = 3.0
    mpp: float = 0.5
    noise: float = 0.015

    def __post_init__(self):
        if self.size < 32:
            raise ValueError("patch size must be >= 32")
        if self.n_classes < 1:
            raise ValueError("need at least one class")
        if self.hues is not None and len(self.hues) != self.n_classes:
            raise ValueError("one hue per class required")
        if self.per_class_radius is not None and len(self.per_class_radius) != self.n_classes:
            raise ValueError("one radius range per class required")

    def class_hue(self, k: int) -> float:
        if self.hues is not None:
            return self.hues[k]
        return k / self.n_classes


def _hue_to_rgb(h: float, s: float, v: float) -> tuple[float, float, float]:
    i = int(h * 6.0) % 6
    f = h * 6.0 - math.floor(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


def synth_patch(spec: SynthSpec, seed: int) -> tuple[ImagePatch, AnnotationSet]:
    """One synthetic patch with centroids, instance mask and class labels.

    Deterministic per seed. Raises RuntimeError when the requested density
    cannot be placed within the retry budget.
    """
    rng = np.random.default_rng(seed)
    size = spec.size
    plan: list[tuple[int, float]] = []  # (class, radius)
    for k in range(spec.n_classes):
        lo, hi = (spec.per_class_radius[k] if spec.per_class_radius is not None
                  else spec.radius_range)
        n_k = int(rng.integers(spec.count_range[0], spec.count_range[1] + 1))
        plan.extend((k, float(rng.uniform(lo, hi))) for _ in range(n_k))

    centers: list[tuple[int, int]] = []
    radii: list[float] = []
    classes: list[int] = []
    for k, r in plan:
        placed = False
        for _ in range(300):
            margin = int(math.ceil(r)) + 1
            if size - margin <= margin:
                break
            x = int(rng.integers(margin, size - margin))
            y = int(rng.integers(margin, size - margin))
            if all(math.hypot(x - cx, y - cy) >= r + cr + spec.min_gap
                   for (cx, cy), cr in zip(centers, radii)):
                centers.append((x, y))
                radii.append(r)
                classes.append(k)
                placed = True
                break
        if not placed:
            raise RuntimeError(
                f"could not place a radius-{r:.1f} nucleus after 300 tries; "
                "reduce counts or radii for this patch size")

    img = rng.normal(0.88, 0.02, size=(size, size, 3))
    mask = np.zeros((size, size), dtype=np.int64)
    yy, xx = np.mgrid[0:size, 0:size]
    for label, ((cx, cy), r, k) in enumerate(zip(centers, radii, classes), start=1):
        hue = (spec.class_hue(k) + rng.uniform(-spec.hue_jitter, spec.hue_jitter)) % 1.0
        rgb = _hue_to_rgb(hue, 0.65, float(rng.uniform(0.5, 0.6)))
        inside = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
        mask[inside] = label
        img[inside] = rgb
    img += rng.normal(0.0, spec.noise, size=img.shape)
    pixels = (np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)

    patch = ImagePatch(pixels=pixels, mpp=spec.mpp, id=f"synth-{seed}")
    annotations = AnnotationSet(
        xy=np.array(centers, dtype=np.float64).reshape(-1, 2),
        class_indices=np.array(classes, dtype=np.int64),
        instance_mask=mask,
        instance_classes=np.array(classes, dtype=np.int64),
    )
    return patch, annotations


def synth_dataset(spec: SynthSpec, n: int, seed: int = 0) -> list[tuple[ImagePatch, AnnotationSet]]:
    """n patches with per-patch seeds derived from ``seed``."""
    return [synth_patch(spec, seed * 100003 + i) for i in range(n)]


# --- oracles ------------------------------------------------------------------


def oracle_match(preds: Sequence[tuple[float, float]],
                 gts: Sequence[tuple[float, float]], radius: float) -> int:
    """Maximum achievable TP count by exhaustive assignment (<= 8 points)."""
    if len(preds) > 8 or len(gts) > 8:
        raise ValueError("exhaustive matcher is capped at 8 points per side")

    def best(i: int, used: frozenset) -> int:
        if i == len(preds):
            return 0
        top = best(i + 1, used)  # leave pred i unmatched
        px, py = preds[i]
        for j, (gx, gy) in enumerate(gts):
            if j not in used and math.hypot(px - gx, py - gy) <= radius:
                top = max(top, 1 + best(i + 1, used | {j}))
        return top

    return best(0, frozenset())


def oracle_scalar_losses(p: np.ndarray, g: np.ndarray, eps: float = 1.0,
                         alpha: float = 0.25, gamma: float = 2.0,
                         delta: float = 1e-7) -> dict[str, float]:
    """Reference loss values by plain 64-bit summation over pixels.

    ``weighted_bce`` is the alpha-weighted cross-entropy that the focal loss
    must reduce to at gamma = 0.
    """
    ps = [float(v) for v in np.asarray(p, dtype=np.float64).ravel()]
    gs = [float(v) for v in np.asarray(g, dtype=np.float64).ravel()]
    n = len(ps)
    bce_sum = focal_sum = wbce_sum = 0.0
    inter = sum_p = sum_g = sum_p2 = sum_g2 = 0.0
    for pv, gv in zip(ps, gs):
        pc = min(max(pv, delta), 1.0 - delta)
        bce_sum += gv * math.log(pc) + (1.0 - gv) * math.log(1.0 - pc)
        focal_sum += (alpha * gv * (1.0 - pc) ** gamma * math.log(pc)
                      + (1.0 - alpha) * (1.0 - gv) * pc ** gamma * math.log(1.0 - pc))
        wbce_sum += alpha * gv * math.log(pc) + (1.0 - alpha) * (1.0 - gv) * math.log(1.0 - pc)
        inter += pv * gv
        sum_p += pv
        sum_g += gv
        sum_p2 += pv * pv
        sum_g2 += gv * gv
    return {
        "bce": -bce_sum / n,
        "focal": -focal_sum / n,
        "weighted_bce": -wbce_sum / n,
        "dice": 1.0 - (2.0 * inter + eps) / (sum_p + sum_g + eps),
        "jaccard": 1.0 - (inter + eps) / (sum_p2 + sum_g2 - inter + eps),
    }


def oracle_boundary(label_map: np.ndarray) -> np.ndarray:
    """Morphological boundary: pixels whose clipped 3x3 neighbourhood contains
    a different label (two-sided, background included)."""
    lab = np.asarray(label_map)
    h, w = lab.shape
    out = np.zeros((h, w), dtype=np.uint8)
    for y in range(h):
        for x in range(w):
            v = lab[y, x]
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    ny, nx = y + dy, x + dx
                    if 0 <= ny < h and 0 <= nx < w and lab[ny, nx] != v:
                        out[y, x] = 1
    return out


def oracle_disk_mask(cx: float, cy: float, diameter: float, h: int, w: int) -> np.ndarray:
    """Pixel-by-pixel disk rasterisation: centre distance <= diameter / 2."""
    out = np.zeros((h, w), dtype=np.uint8)
    r = diameter / 2.0
    for y in range(h):
        for x in range(w):
            if (x - cx) ** 2 + (y - cy) ** 2 <= r * r:
                out[y, x] = 1
    return out


def oracle_suppress(points: Sequence[tuple[float, float, float]],
                    min_distance: float) -> list[tuple[float, float, float]]:
    """All-pairs greedy distance suppression: score desc, ties (y, x) asc,
    reject at distance <= min_distance from any survivor."""
    ordered = sorted(points, key=lambda t: (-t[2], t[1], t[0]))
    kept: list[tuple[float, float, float]] = []
    for x, y, s in ordered:
        ok = True
        for kx, ky, _ in kept:
            if math.hypot(x - kx, y - ky) <= min_distance:
                ok = False
                break
        if ok:
            kept.append((x, y, s))
    return kept


def oracle_nms(points: Sequence[tuple[float, float, float]], box_size: float,
               overlap_threshold: float) -> list[tuple[float, float, float]]:
    """O(n^2) box-IoU suppression with the same greedy order."""
    ordered = sorted(points, key=lambda t: (-t[2], t[1], t[0]))
    kept: list[tuple[float, float, float]] = []
    for x, y, s in ordered:
        ok = True
        for kx, ky, _ in kept:
            ix = max(0.0, box_size - abs(x - kx))
            iy = max(0.0, box_size - abs(y - ky))
            inter = ix * iy
            if inter / (2.0 * box_size * box_size - inter) > overlap_threshold:
                ok = False
                break
        if ok:
            kept.append((x, y, s))
    return kept


def _oracle_greedy_match_tp(preds: list[tuple[float, float, float]],
                            gts: list[tuple[float, float]], radius: float) -> tuple[int, int]:
    """(TP, FP) under confidence-greedy nearest-neighbour matching, in loops."""
    order = sorted(range(len(preds)), key=lambda i: (-preds[i][2], preds[i][1], preds[i][0]))
    used = set()
    tp = 0
    for i in order:
        px, py, _ = preds[i]
        best = None
        for j, (gx, gy) in enumerate(gts):
            if j in used:
                continue
            d = math.hypot(px - gx, py - gy)
            if d <= radius and (best is None or (d, gy, gx) < best[:3]):
                best = (d, gy, gx, j)
        if best is not None:
            used.add(best[3])
            tp += 1
    return tp, len(preds) - tp


def oracle_froc_score(preds: Sequence[tuple[float, float, float]],
                      gts: Sequence[tuple[float, float]], radius_px: float,
                      area_mm2: float, fp_rates: Sequence[float]) -> float:
    """Exhaustive threshold enumeration: for each target rate take the best
    sensitivity among operating points with FP/mm^2 at or below it."""
    best_at_rate = [0.0] * len(fp_rates)
    for t in sorted({c for _, _, c in preds}, reverse=True):
        subset = [p for p in preds if p[2] >= t]
        tp, fp = _oracle_greedy_match_tp(subset, list(gts), radius_px)
        sens = tp / len(gts)
        rate = fp / area_mm2
        for i, target in enumerate(fp_rates):
            if rate <= target:
                best_at_rate[i] = max(best_at_rate[i], sens)
    return sum(best_at_rate) / len(fp_rates)
