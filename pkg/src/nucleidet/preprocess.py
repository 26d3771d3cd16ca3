"""Convert raw annotations into per-class training targets.

Three binary masks per class: dilated centroids (the detection target), the
nucleus footprint, and the nucleus contour derived from gradients of the
instance label map.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .types import AnnotationSet, ClassSpec, ImagePatch, TargetMaskSet

# Default dilation diameters by scan resolution band (microns per pixel).
# Chosen so the disk stays inside a ~10 um nucleus at that resolution.
_MPP_DIAMETERS = (
    ((0.4, 0.6), 5),
    ((0.2, 0.3), 11),
)


def kernel_diameter_for_mpp(mpp: float) -> int:
    """Default centroid dilation diameter for a resolution; overridable per dataset."""
    for (lo, hi), d in _MPP_DIAMETERS:
        if lo <= mpp <= hi:
            return d
    raise ValueError(f"no default dilation diameter for mpp={mpp}; pass one explicitly")


@dataclass(frozen=True)
class DilationKernel:
    """Circular disk used to expand point annotations into dense targets.

    Rasterisation convention: pixel (i, j) is inside iff the Euclidean distance
    between pixel centers is <= diameter / 2.
    """

    diameter: int

    def __post_init__(self):
        if self.diameter <= 0 or self.diameter % 2 == 0:
            raise ValueError(f"diameter must be an odd positive integer, got {self.diameter}")

    def footprint(self) -> np.ndarray:
        r = self.diameter / 2.0
        n = self.diameter
        c = n // 2
        yy, xx = np.mgrid[0:n, 0:n]
        return ((yy - c) ** 2 + (xx - c) ** 2) <= r * r


def _round_half_away(v: float) -> int:
    # deterministic across platforms, unlike banker's rounding
    return int(np.floor(v + 0.5)) if v >= 0 else -int(np.floor(-v + 0.5))


def centroid_from_instance(instance_mask: np.ndarray) -> list[tuple[int, int, int]]:
    """Centre of mass of each positive label, rounded to the nearest pixel.

    Returns (x, y, instance_id) tuples ordered by label; empty mask gives [].
    """
    mask = np.asarray(instance_mask)
    labels = np.unique(mask)
    labels = labels[labels > 0]
    out = []
    for lab in labels:
        ys, xs = np.nonzero(mask == lab)
        out.append((_round_half_away(xs.mean()), _round_half_away(ys.mean()), int(lab)))
    return out


def contour_from_instance(instance_mask: np.ndarray) -> np.ndarray:
    """Binary contour mask from gradients of the instance label map.

    Gradient filters in X and Y, squared and summed into an edge-intensity map,
    binarised at > 0. Computed on the integer label map (not per binary
    instance) so touching instances keep a separating contour.
    """
    lab = np.asarray(instance_mask, dtype=np.float64)
    gx = ndimage.sobel(lab, axis=1, mode="reflect")
    gy = ndimage.sobel(lab, axis=0, mode="reflect")
    edge = gx * gx + gy * gy
    return (edge > 0).astype(np.uint8)


def dilate_centroids(points: np.ndarray, kernel: DilationKernel, h: int, w: int) -> np.ndarray:
    """Union of disks of ``kernel.diameter`` centred on each (x, y) point.

    Disks are clipped at the image border; overlaps stay binary.
    """
    mask = np.zeros((h, w), dtype=np.uint8)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    r = kernel.diameter / 2.0
    for x, y in pts:
        y0 = max(0, int(np.ceil(y - r)))
        y1 = min(h - 1, int(np.floor(y + r)))
        x0 = max(0, int(np.ceil(x - r)))
        x1 = min(w - 1, int(np.floor(x + r)))
        if y1 < y0 or x1 < x0:
            continue
        yy, xx = np.mgrid[y0:y1 + 1, x0:x1 + 1]
        inside = (yy - y) ** 2 + (xx - x) ** 2 <= r * r
        mask[y0:y1 + 1, x0:x1 + 1] |= inside.astype(np.uint8)
    return mask


def build_target_set(a: AnnotationSet, spec: ClassSpec, patch: ImagePatch, *,
                     tasks: str = "full", include_overall: bool = False) -> TargetMaskSet:
    """Build the per-class training targets for one annotated patch.

    ``tasks="full"`` produces centroid + nucleus + contour masks and requires
    an instance mask; ``tasks="det"`` produces centroid masks only. With
    ``include_overall`` the class-union targets for the extra detection
    decoder are attached as well.
    """
    if tasks not in ("full", "det"):
        raise ValueError(f"unknown task mode {tasks!r}")
    h, w = patch.height, patch.width
    n = spec.n_classes

    centroid = np.zeros((n, h, w), dtype=np.uint8)
    for k in range(n):
        pts = a.xy[a.class_indices == k]
        centroid[k] = dilate_centroids(pts, DilationKernel(spec.dilation_diameters[k]), h, w)

    nucleus = contour = None
    overall = {}
    if tasks == "full":
        if a.instance_mask is None or a.instance_classes is None:
            raise ValueError(
                "segmentation/contour targets requested but the annotation has no "
                "instance mask; generate instance masks upstream or train detection-only")
        nucleus = np.zeros((n, h, w), dtype=np.uint8)
        contour = np.zeros((n, h, w), dtype=np.uint8)
        for k in range(n):
            class_labels = np.nonzero(a.instance_classes == k)[0] + 1
            class_map = np.where(np.isin(a.instance_mask, class_labels), a.instance_mask, 0)
            nucleus[k] = (class_map > 0).astype(np.uint8)
            contour[k] = contour_from_instance(class_map)
        if include_overall:
            overall["overall_nucleus"] = (a.instance_mask > 0).astype(np.uint8)
            overall["overall_contour"] = contour_from_instance(a.instance_mask)
    if include_overall:
        overall["overall_centroid"] = centroid.max(axis=0)

    return TargetMaskSet(centroid=centroid, nucleus=nucleus, contour=contour, **overall)


# --- lossless export ------------------------------------------------------------

def save_target_npz(path: str | Path, t: TargetMaskSet) -> None:
    arrays = {"centroid": t.centroid}
    for name in ("nucleus", "contour", "overall_centroid", "overall_nucleus", "overall_contour"):
        arr = getattr(t, name)
        if arr is not None:
            arrays[name] = arr
    np.savez_compressed(path, **arrays)


def load_target_npz(path: str | Path) -> TargetMaskSet:
    with np.load(path) as z:
        kw = {k: z[k] for k in z.files}
    return TargetMaskSet(**kw)


def write_target_manifest(path: str | Path, entries: dict[str, str]) -> None:
    """Write the patch-id -> mask-path manifest next to exported targets."""
    with open(path, "w") as f:
        json.dump({"targets": entries}, f, indent=2, sort_keys=True)


def read_target_manifest(path: str | Path) -> dict[str, str]:
    with open(path) as f:
        return json.load(f)["targets"]
