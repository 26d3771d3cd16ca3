"""Core domain types shared by every stage of the detection pipeline.

All containers are frozen dataclasses and their array payloads are marked
read-only, so instances can be shared freely across workers.

Annotation file format (bit-exact):
  - CSV, one record per nucleus: ``id,x,y,class_name[,confidence]`` with a
    header row. ``x``/``y`` are zero-indexed pixel coordinates (x = column,
    y = row), formatted with ``repr``-stable ``%g``. ``confidence`` is only
    present when every record carries one.
  - Instance masks travel separately as a compressed ``.npz`` with keys
    ``instance_mask`` (H, W) int32 and ``instance_classes`` (n,) int32.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


def _readonly(arr: np.ndarray) -> np.ndarray:
    out = np.asarray(arr)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ImagePatch:
    """H x W x 3 image with physical resolution metadata."""

    pixels: np.ndarray
    mpp: float
    id: str = ""

    def __post_init__(self):
        px = _readonly(self.pixels)
        object.__setattr__(self, "pixels", px)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"expected H x W x 3 pixels, got shape {px.shape}")
        if px.shape[0] < 32 or px.shape[1] < 32:
            raise ValueError(f"patch too small: {px.shape[0]} x {px.shape[1]} (min 32 x 32)")
        if not self.mpp > 0:
            raise ValueError(f"mpp must be positive, got {self.mpp}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class ClassSpec:
    """Ordered foreground class list with per-class geometry parameters.

    The list order is fixed for the lifetime of a model: decoder k and every
    per-class array index k refer to ``classes[k]``. Background carries no
    index here (it only exists inside the sampler).
    """

    classes: tuple[str, ...]
    dilation_diameters: tuple[int, ...]
    matching_radii: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "dilation_diameters", tuple(int(d) for d in self.dilation_diameters))
        object.__setattr__(self, "matching_radii", tuple(float(r) for r in self.matching_radii))
        if len(set(self.classes)) != len(self.classes):
            raise ValueError("class names must be unique")
        if not (len(self.classes) == len(self.dilation_diameters) == len(self.matching_radii)):
            raise ValueError("classes, dilation_diameters and matching_radii must have equal length")
        for d in self.dilation_diameters:
            if d <= 0 or d % 2 == 0:
                raise ValueError(f"dilation diameter must be an odd positive integer, got {d}")

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def index_of(self, name: str) -> int:
        return self.classes.index(name)


@dataclass(frozen=True)
class AnnotationSet:
    """Per-patch ground truth: class-labelled centroids and/or an instance mask.

    ``xy`` is (n, 2) float64 in (x, y) order, ``class_indices`` is (n,) int64.
    ``instance_mask`` is an (H, W) integer label map with 0 = background and
    ``instance_classes[i]`` the class of label ``i + 1``.
    """

    xy: np.ndarray
    class_indices: np.ndarray
    instance_mask: Optional[np.ndarray] = None
    instance_classes: Optional[np.ndarray] = None
    ids: Optional[tuple[str, ...]] = None
    confidences: Optional[np.ndarray] = None

    def __post_init__(self):
        xy = _readonly(np.asarray(self.xy, dtype=np.float64).reshape(-1, 2))
        cls = _readonly(np.asarray(self.class_indices, dtype=np.int64).reshape(-1))
        if xy.shape[0] != cls.shape[0]:
            raise ValueError("xy and class_indices length mismatch")
        object.__setattr__(self, "xy", xy)
        object.__setattr__(self, "class_indices", cls)
        if self.instance_mask is not None:
            object.__setattr__(self, "instance_mask", _readonly(np.asarray(self.instance_mask)))
        if self.instance_classes is not None:
            object.__setattr__(self, "instance_classes",
                               _readonly(np.asarray(self.instance_classes, dtype=np.int64)))
        if self.ids is not None:
            object.__setattr__(self, "ids", tuple(self.ids))
        if self.confidences is not None:
            object.__setattr__(self, "confidences",
                               _readonly(np.asarray(self.confidences, dtype=np.float64).reshape(-1)))

    def __len__(self) -> int:
        return self.xy.shape[0]

    @classmethod
    def empty(cls) -> "AnnotationSet":
        return cls(xy=np.zeros((0, 2)), class_indices=np.zeros(0, dtype=np.int64))


@dataclass(frozen=True)
class TargetMaskSet:
    """Per-class binary training targets: centroid, nucleus and contour masks.

    ``centroid`` is (C, H, W) uint8 in {0, 1}; ``nucleus``/``contour`` are the
    same shape or None for detection-only training. The ``overall_*`` triple is
    the class-union target for an optional extra detection decoder.
    """

    centroid: np.ndarray
    nucleus: Optional[np.ndarray] = None
    contour: Optional[np.ndarray] = None
    overall_centroid: Optional[np.ndarray] = None
    overall_nucleus: Optional[np.ndarray] = None
    overall_contour: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("centroid", "nucleus", "contour",
                     "overall_centroid", "overall_nucleus", "overall_contour"):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = _readonly(np.asarray(arr, dtype=np.uint8))
            if not np.isin(arr, (0, 1)).all():
                raise ValueError(f"{name} mask must be binary")
            object.__setattr__(self, name, arr)

    @property
    def n_classes(self) -> int:
        return self.centroid.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.centroid.shape[1], self.centroid.shape[2]


@dataclass(frozen=True)
class Detection:
    """A point detection: the unit of matching and metrics."""

    x: float
    y: float
    class_index: int
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must be in [0, 1], got {self.confidence}")


@dataclass(frozen=True)
class PredictionMaps:
    """Per-class probability maps produced by a forward pass.

    ``centroid`` is (C, H, W) in [0, 1]; ``seg``/``contour`` match or are None
    for the detection-only variant. ``overall_*`` hold the extra union-decoder
    outputs when that decoder is configured.
    """

    centroid: np.ndarray
    seg: Optional[np.ndarray] = None
    contour: Optional[np.ndarray] = None
    overall_centroid: Optional[np.ndarray] = None
    overall_seg: Optional[np.ndarray] = None
    overall_contour: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("centroid", "seg", "contour",
                     "overall_centroid", "overall_seg", "overall_contour"):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = _readonly(np.asarray(arr, dtype=np.float64))
            if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
                raise ValueError(f"{name} values must lie in [0, 1]")
            object.__setattr__(self, name, arr)

    @property
    def n_classes(self) -> int:
        return self.centroid.shape[0]


@dataclass(frozen=True)
class Violation:
    code: str
    message: str


def validate_annotation(a: AnnotationSet, patch: ImagePatch,
                        n_classes: Optional[int] = None) -> list[Violation]:
    """Check an annotation set against its patch; returns violations (empty = valid).

    Pure function: reports out-of-bounds centroids, unknown class indices,
    non-contiguous instance labels and mask/patch shape mismatches instead of
    raising.
    """
    out: list[Violation] = []
    h, w = patch.height, patch.width
    for i in range(len(a)):
        x, y = a.xy[i]
        if not (0 <= x < w and 0 <= y < h):
            out.append(Violation("out_of_bounds",
                                 f"centroid {i} at ({x:g}, {y:g}) outside [0,{w}) x [0,{h})"))
        c = int(a.class_indices[i])
        if c < 0 or (n_classes is not None and c >= n_classes):
            out.append(Violation("unknown_class", f"centroid {i} has class index {c}"))
    if a.instance_mask is not None:
        if a.instance_mask.shape != (h, w):
            out.append(Violation("mask_shape",
                                 f"instance mask shape {a.instance_mask.shape} != patch ({h}, {w})"))
        labels = np.unique(a.instance_mask)
        labels = labels[labels > 0]
        if labels.size and not np.array_equal(labels, np.arange(1, labels.size + 1)):
            out.append(Violation("non_contiguous_labels",
                                 f"instance labels {labels.tolist()} are not 1..n"))
        if (a.instance_mask < 0).any():
            out.append(Violation("negative_label", "instance mask contains negative labels"))
        if a.instance_classes is not None and a.instance_classes.shape[0] != labels.size:
            out.append(Violation("instance_class_count",
                                 f"{a.instance_classes.shape[0]} instance classes for {labels.size} labels"))
    return out


# --- annotation serialisation -------------------------------------------------

_HEADER = ["id", "x", "y", "class_name"]


def write_annotation_csv(path: str | Path, a: AnnotationSet, spec: ClassSpec) -> None:
    with_conf = a.confidences is not None
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(_HEADER + (["confidence"] if with_conf else []))
        for i in range(len(a)):
            rid = a.ids[i] if a.ids is not None else str(i)
            row = [rid, f"{a.xy[i, 0]:g}", f"{a.xy[i, 1]:g}",
                   spec.classes[int(a.class_indices[i])]]
            if with_conf:
                row.append(f"{a.confidences[i]:g}")
            writer.writerow(row)


def read_annotation_csv(path: str | Path, spec: ClassSpec) -> AnnotationSet:
    ids: list[str] = []
    xs: list[float] = []
    ys: list[float] = []
    cls: list[int] = []
    confs: list[float] = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        has_conf = len(header) == 5
        for row in reader:
            if not row:
                continue
            ids.append(row[0])
            xs.append(float(row[1]))
            ys.append(float(row[2]))
            cls.append(spec.index_of(row[3]))
            if has_conf:
                confs.append(float(row[4]))
    return AnnotationSet(
        xy=np.column_stack([xs, ys]) if xs else np.zeros((0, 2)),
        class_indices=np.asarray(cls, dtype=np.int64),
        ids=tuple(ids),
        confidences=np.asarray(confs) if confs else None,
    )


def write_instance_npz(path: str | Path, a: AnnotationSet) -> None:
    if a.instance_mask is None:
        raise ValueError("annotation carries no instance mask")
    np.savez_compressed(
        path,
        instance_mask=a.instance_mask.astype(np.int32),
        instance_classes=(a.instance_classes if a.instance_classes is not None
                          else np.zeros(0)).astype(np.int32),
    )


def read_instance_npz(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    with np.load(path) as z:
        return z["instance_mask"].astype(np.int64), z["instance_classes"].astype(np.int64)
