"""Class-imbalance-aware patch sampling.

Rare classes get a higher class weight via inverse log-frequency over the
whole dataset; each patch's sampling weight is the area-weighted sum of the
class weights of what it contains. Works from instance masks or, mask-free,
from nucleus counts times a nominal per-nucleus area.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .preprocess import DilationKernel
from .types import AnnotationSet, ClassSpec

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SamplerState:
    """Per-patch per-class pixel areas.

    ``areas`` is (P, C) with column 0 the background class and columns 1..C-1
    the foreground classes in ClassSpec order; ``patch_area`` is the pixel
    count of one patch.
    """

    areas: np.ndarray
    patch_area: float

    def __post_init__(self):
        areas = np.asarray(self.areas, dtype=np.float64)
        if areas.ndim != 2:
            raise ValueError("areas must be (n_patches, n_classes)")
        if (areas < 0).any():
            raise ValueError("areas must be nonnegative")
        areas.setflags(write=False)
        object.__setattr__(self, "areas", areas)

    @property
    def n_patches(self) -> int:
        return self.areas.shape[0]


def estimate_area_mask_free(n_nuclei: int, avg_nucleus_area: float) -> float:
    """Approximate class area in a patch as count x nominal nucleus area."""
    if n_nuclei < 0 or avg_nucleus_area < 0:
        raise ValueError("n_nuclei and avg_nucleus_area must be nonnegative")
    return float(n_nuclei) * float(avg_nucleus_area)


def default_avg_nucleus_area(dilation_diameter: int) -> float:
    """Nominal per-nucleus area: pixel count of the dilation disk."""
    return float(DilationKernel(dilation_diameter).footprint().sum())


def build_sampler_state(annotations: Sequence[AnnotationSet], spec: ClassSpec,
                        patch_area: float,
                        avg_nucleus_area: Optional[Sequence[float]] = None) -> SamplerState:
    """Assemble the area table from annotations.

    Foreground areas come from instance masks when present, otherwise from the
    mask-free count estimate. Background fills the remainder of the patch,
    floored at 0.
    """
    n = spec.n_classes
    if avg_nucleus_area is None:
        avg_nucleus_area = [default_avg_nucleus_area(d) for d in spec.dilation_diameters]
    areas = np.zeros((len(annotations), n + 1), dtype=np.float64)
    for p, a in enumerate(annotations):
        for k in range(n):
            if a.instance_mask is not None and a.instance_classes is not None:
                class_labels = np.nonzero(a.instance_classes == k)[0] + 1
                areas[p, k + 1] = float(np.isin(a.instance_mask, class_labels).sum())
            else:
                areas[p, k + 1] = estimate_area_mask_free(
                    int((a.class_indices == k).sum()), avg_nucleus_area[k])
        areas[p, 0] = max(0.0, patch_area - areas[p, 1:].sum())
    return SamplerState(areas=areas, patch_area=float(patch_area))


def class_weights(state: SamplerState) -> np.ndarray:
    """Inverse log-frequency weight per class over the whole dataset."""
    totals = state.areas.sum(axis=0)
    if (totals <= 0).any():
        bad = np.nonzero(totals <= 0)[0].tolist()
        raise ValueError(f"degenerate class: zero total area for class column(s) {bad}")
    return np.log(totals.sum() / totals)


def patch_weight(patch_areas: np.ndarray, w_c: np.ndarray, patch_area: float) -> float:
    """Sampling weight of one patch: class weights scaled by area proportion."""
    patch_areas = np.asarray(patch_areas, dtype=np.float64)
    return float(np.dot(patch_areas / patch_area, w_c))


def patch_weights(state: SamplerState, w_c: Optional[np.ndarray] = None) -> np.ndarray:
    if w_c is None:
        w_c = class_weights(state)
    return (state.areas / state.patch_area) @ w_c


def sample_indices(weights: np.ndarray, n: int, rng_seed: int) -> np.ndarray:
    """Draw n patch indices with replacement, P(p) proportional to weights[p].

    Deterministic for a fixed seed. All-zero weights fall back to uniform with
    a logged warning; negative weights are rejected.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if (weights < 0).any():
        raise ValueError("negative sampling weights are not allowed")
    total = weights.sum()
    if total == 0:
        logger.warning("all patch weights are zero; falling back to uniform sampling")
        p = np.full(weights.shape[0], 1.0 / weights.shape[0])
    else:
        p = weights / total
    rng = np.random.default_rng(rng_seed)
    return rng.choice(weights.shape[0], size=n, replace=True, p=p)


def export_weights_csv(path: str | Path, patch_ids: Sequence[str], weights: np.ndarray) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["patch_id", "weight"])
        for pid, w in zip(patch_ids, weights):
            writer.writerow([pid, f"{w:.17g}"])
