"""Training loop, test-time augmentation, and tiled inference over large images.

The training loop draws patches through the weighted sampler, optimises the
composite loss with AdamW under a cosine schedule, and writes resumable
checkpoints. Inference tiles arbitrarily large images, averages predictions
over flip/rotation transforms, and deduplicates detections across tile
overlaps with a final per-class NMS.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from scipy import ndimage

from .losses import LossConfig, UncertaintyParams, multi_task_loss
from .model import MultiDecoderNet, prepare_batch, save_checkpoint
from .postprocess import PostprocessConfig, extract_detections, nms
from .types import ClassSpec, Detection, ImagePatch, PredictionMaps, TargetMaskSet

logger = logging.getLogger(__name__)

SCHEDULES = ("cosine", "cosine_warm_restarts")
AUGMENTATIONS = ("rgb_shift", "hsv_shift", "blur", "sharpen", "compression",
                 "brightness_contrast", "shift_scale_rotate")
TTA_MODES = ("none", "x4", "x16")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    learning_rate: float = 4e-4
    weight_decay: float = 0.01
    schedule: str = "cosine"
    epochs: int = 10
    steps_per_epoch: Optional[int] = None
    augmentations: tuple[str, ...] = ()
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "augmentations", tuple(self.augmentations))
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}")
        unknown = set(self.augmentations) - set(AUGMENTATIONS)
        if unknown:
            raise ValueError(f"unknown augmentation(s): {sorted(unknown)}")


@dataclass(frozen=True)
class TileGrid:
    """Tile origins covering an image; the last row/column is clamped in-bounds."""

    tile: int
    stride: int
    origins: tuple[tuple[int, int], ...]


def tile_image(h: int, w: int, tile: int, stride: int) -> TileGrid:
    """Grid of tile origins at stride multiples with full coverage."""
    if stride <= 0:
        raise ValueError("stride must be positive")
    if stride > tile:
        raise ValueError("stride must not exceed the tile size")
    if tile > h or tile > w:
        raise ValueError(f"tile {tile} exceeds image extent ({h}, {w})")

    def axis(dim: int) -> list[int]:
        out = list(range(0, dim - tile + 1, stride))
        if out[-1] != dim - tile:
            out.append(dim - tile)
        return out

    origins = tuple((x0, y0) for y0 in axis(h) for x0 in axis(w))
    return TileGrid(tile=tile, stride=stride, origins=origins)


# --- test-time augmentation ------------------------------------------------------


def _tta_transforms(mode: str) -> list[tuple[int, bool, bool]]:
    """(rot90 quarter-turns, h-flip, v-flip) tuples; applied v, then h, then rot."""
    if mode == "none":
        return [(0, False, False)]
    if mode == "x4":
        return [(k, False, False) for k in range(4)]
    if mode == "x16":
        return [(k, h, v) for k in range(4) for h in (False, True) for v in (False, True)]
    raise ValueError(f"unknown TTA mode {mode!r}; expected one of {TTA_MODES}")


def _apply_tta(img: np.ndarray, k: int, h: bool, v: bool) -> np.ndarray:
    if v:
        img = img[::-1]
    if h:
        img = img[:, ::-1]
    return np.rot90(img, k, axes=(0, 1))


def _invert_tta(maps: np.ndarray, k: int, h: bool, v: bool) -> np.ndarray:
    maps = np.rot90(maps, -k, axes=(1, 2))
    if h:
        maps = maps[:, :, ::-1]
    if v:
        maps = maps[:, ::-1]
    return maps


def tta_forward(model: MultiDecoderNet, patch: ImagePatch | np.ndarray,
                mode: str = "none") -> PredictionMaps:
    """Average eval-mode predictions over a set of flip/rotation transforms.

    ``x4`` uses the four rotations, ``x16`` rotations times h/v flips; outputs
    of each transformed forward are mapped back before averaging in
    probability space. Rotation modes require a square patch.
    """
    pixels = patch.pixels if isinstance(patch, ImagePatch) else np.asarray(patch)
    transforms = _tta_transforms(mode)
    if len(transforms) > 1 and pixels.shape[0] != pixels.shape[1]:
        raise ValueError("rotation TTA requires a square patch")
    images = [np.ascontiguousarray(_apply_tta(pixels, *t)) for t in transforms]
    model.eval()
    with torch.no_grad():
        x = prepare_batch(images, model.config, dtype=next(model.parameters()).dtype)
        out = {key: val.cpu().numpy() for key, val in model(x).items()}
    avg = {key: np.mean([_invert_tta(val[i], *t) for i, t in enumerate(transforms)], axis=0)
           for key, val in out.items()}
    return PredictionMaps(
        centroid=avg["centroid"], seg=avg.get("seg"), contour=avg.get("contour"),
        overall_centroid=avg.get("overall_centroid"), overall_seg=avg.get("overall_seg"),
        overall_contour=avg.get("overall_contour"))


# --- tiled inference --------------------------------------------------------------


def infer_large(image: np.ndarray | ImagePatch, model: MultiDecoderNet,
                config: PostprocessConfig | Sequence[PostprocessConfig],
                tile: int = 256, stride: Optional[int] = None,
                tta: str = "none") -> list[Detection]:
    """Detections over an image of arbitrary size.

    Tiles overlap (stride < tile) so nuclei cut by one tile border are whole in
    a neighbour; duplicates from the overlaps are removed by a final per-class
    NMS in global coordinates.
    """
    pixels = image.pixels if isinstance(image, ImagePatch) else np.asarray(image)
    if stride is None:
        stride = max(32, tile - 64)
    if stride >= tile:
        raise ValueError("stride must be smaller than the tile for overlap stitching")
    if tile % 32:
        raise ValueError("tile must be divisible by 32")
    h, w = pixels.shape[:2]

    pad_h, pad_w = max(0, tile - h), max(0, tile - w)
    if pad_h or pad_w:
        pixels = np.pad(pixels, ((0, pad_h), (0, pad_w), (0, 0)), mode="edge")

    grid = tile_image(pixels.shape[0], pixels.shape[1], tile, stride)
    collected: list[Detection] = []
    for x0, y0 in grid.origins:
        crop = pixels[y0:y0 + tile, x0:x0 + tile]
        maps = tta_forward(model, crop, mode=tta)
        for d in extract_detections(maps, config):
            gx, gy = d.x + x0, d.y + y0
            if gx < w and gy < h:  # drop detections inside the padding
                collected.append(Detection(x=gx, y=gy, class_index=d.class_index,
                                           confidence=d.confidence))

    n = model.config.n_classes
    configs = list(config) if isinstance(config, (list, tuple)) else [config] * n
    final: list[Detection] = []
    for k in range(n):
        pts = [(d.x, d.y, d.confidence) for d in collected if d.class_index == k]
        kept = nms(pts, configs[k].box_size, configs[k].overlap_threshold)
        final.extend(Detection(x=x, y=y, class_index=k, confidence=s) for x, y, s in kept)
    return final


# --- augmentations ----------------------------------------------------------------


def _rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    mx = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    diff = mx - mn
    h = np.zeros_like(mx)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    nz = diff > 0
    idx = nz & (mx == r)
    h[idx] = ((g - b)[idx] / diff[idx]) % 6
    idx = nz & (mx == g) & (mx != r)
    h[idx] = (b - r)[idx] / diff[idx] + 2
    idx = nz & (mx == b) & (mx != r) & (mx != g)
    h[idx] = (r - g)[idx] / diff[idx] + 4
    h /= 6.0
    s = np.where(mx > 0, diff / np.maximum(mx, 1e-12), 0.0)
    return np.stack([h, s, mx], axis=-1)


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0] * 6.0, hsv[..., 1], hsv[..., 2]
    i = np.floor(h).astype(int) % 6
    f = h - np.floor(h)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    table = np.stack([
        np.stack([v, t, p], -1), np.stack([q, v, p], -1), np.stack([p, v, t], -1),
        np.stack([p, q, v], -1), np.stack([t, p, v], -1), np.stack([v, p, q], -1),
    ])
    return np.take_along_axis(table, i[None, ..., None], axis=0)[0]


def _augment_one(name: str, img: np.ndarray, masks: dict[str, np.ndarray],
                 rng: np.random.Generator) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    imgf = img.astype(np.float32)
    if name == "rgb_shift":
        imgf = imgf + rng.uniform(-20, 20, size=3).astype(np.float32)
    elif name == "brightness_contrast":
        imgf = imgf * rng.uniform(0.8, 1.2) + rng.uniform(-20, 20)
    elif name == "blur":
        sigma = rng.uniform(0.5, 1.2)
        imgf = ndimage.gaussian_filter(imgf, sigma=(sigma, sigma, 0))
    elif name == "sharpen":
        soft = ndimage.gaussian_filter(imgf, sigma=(1.0, 1.0, 0))
        imgf = imgf + rng.uniform(0.5, 1.5) * (imgf - soft)
    elif name == "hsv_shift":
        hsv = _rgb_to_hsv(np.clip(imgf, 0, 255) / 255.0)
        hsv[..., 0] = (hsv[..., 0] + rng.uniform(-0.05, 0.05)) % 1.0
        hsv[..., 1] = np.clip(hsv[..., 1] * rng.uniform(0.8, 1.2), 0, 1)
        hsv[..., 2] = np.clip(hsv[..., 2] * rng.uniform(0.8, 1.2), 0, 1)
        imgf = _hsv_to_rgb(hsv) * 255.0
    elif name == "compression":
        from PIL import Image

        quality = int(rng.integers(60, 96))
        buf = io.BytesIO()
        Image.fromarray(np.clip(imgf, 0, 255).astype(np.uint8)).save(
            buf, format="JPEG", quality=quality)
        buf.seek(0)
        imgf = np.asarray(Image.open(buf), dtype=np.float32)
    elif name == "shift_scale_rotate":
        angle = np.deg2rad(rng.uniform(-15, 15))
        scale = rng.uniform(0.9, 1.1)
        h, w = img.shape[:2]
        shift = rng.uniform(-0.05, 0.05, size=2) * (h, w)
        c, s = np.cos(angle) / scale, np.sin(angle) / scale
        mat = np.array([[c, -s], [s, c]])
        center = np.array([(h - 1) / 2, (w - 1) / 2])
        offset = center - mat @ (center + shift)
        for ch in range(3):
            imgf[..., ch] = ndimage.affine_transform(
                imgf[..., ch], mat, offset=offset, order=1, mode="nearest")
        new_masks = {}
        for key, m in masks.items():
            out = np.empty_like(m)
            flat = m.reshape((-1,) + m.shape[-2:])
            outf = out.reshape((-1,) + m.shape[-2:])
            for i in range(flat.shape[0]):
                outf[i] = ndimage.affine_transform(
                    flat[i], mat, offset=offset, order=0, mode="constant", cval=0)
            new_masks[key] = out
        masks = new_masks
    else:
        raise ValueError(f"unknown augmentation {name!r}")
    return np.clip(imgf, 0, 255).astype(img.dtype), masks


def apply_augmentations(img: np.ndarray, masks: dict[str, np.ndarray],
                        names: Sequence[str],
                        rng: np.random.Generator) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Apply each named augmentation with probability 0.5, in the given order."""
    for name in names:
        if rng.random() < 0.5:
            img, masks = _augment_one(name, img, masks, rng)
    return img, masks


# --- training ---------------------------------------------------------------------


@dataclass
class TrainResult:
    loss_log: list[dict]
    draw_counts: np.ndarray
    checkpoint_path: Optional[Path] = None


def _targets_to_arrays(t: TargetMaskSet, tasks: Sequence[str], overall: bool) -> dict[str, np.ndarray]:
    out = {"centroid": np.asarray(t.centroid)}
    if "seg" in tasks:
        if t.nucleus is None or t.contour is None:
            raise ValueError("model trains seg/contour tasks but targets lack those masks")
        out["seg"] = np.asarray(t.nucleus)
        out["contour"] = np.asarray(t.contour)
    if overall:
        if t.overall_centroid is None:
            raise ValueError("model has an overall decoder but targets lack union masks")
        out["overall_centroid"] = np.asarray(t.overall_centroid)[None]
        if "seg" in tasks:
            out["overall_seg"] = np.asarray(t.overall_nucleus)[None]
            out["overall_contour"] = np.asarray(t.overall_contour)[None]
    return out


def train(model: MultiDecoderNet, dataset: Sequence[tuple[ImagePatch, TargetMaskSet]],
          loss_config: LossConfig, train_config: TrainConfig,
          class_spec: ClassSpec,
          sampler_weights: Optional[np.ndarray] = None,
          checkpoint_path: Optional[str | Path] = None,
          log_path: Optional[str | Path] = None,
          resume_from: Optional[str | Path] = None) -> TrainResult:
    """Optimise the model on a patch dataset; deterministic for a fixed seed.

    ``sampler_weights`` (one nonnegative weight per patch) drives draw
    probabilities; None means uniform. A checkpoint stores everything needed
    to resume bit-exactly: weights, optimiser, scheduler, RNG streams and the
    step counter.
    """
    n_items = len(dataset)
    if n_items == 0:
        raise ValueError("dataset is empty")
    cfg = train_config
    steps_per_epoch = cfg.steps_per_epoch or max(1, n_items // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)

    if sampler_weights is not None:
        sampler_weights = np.asarray(sampler_weights, dtype=np.float64)
        if (sampler_weights < 0).any():
            raise ValueError("negative sampling weights")
        total = sampler_weights.sum()
        if total == 0:
            logger.warning("all sampler weights zero; using uniform draws")
            probs = np.full(n_items, 1.0 / n_items)
        else:
            probs = sampler_weights / total
    else:
        probs = np.full(n_items, 1.0 / n_items)

    uncertainty = None
    params = list(model.parameters())
    if loss_config.weighting == "uncertainty":
        n_losses = model.config.n_classes + (1 if model.config.overall_decoder else 0)
        uncertainty = UncertaintyParams(n_losses)
        params += list(uncertainty.parameters())
    optimizer = torch.optim.AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    if cfg.schedule == "cosine":
        scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=total_steps)
    else:
        scheduler = torch.optim.lr_scheduler.CosineAnnealingWarmRestarts(
            optimizer, T_0=max(1, steps_per_epoch))

    start_step = 0
    if resume_from is not None:
        payload = torch.load(resume_from, map_location="cpu", weights_only=False)
        model.load_state_dict(payload["state_dict"])
        optimizer.load_state_dict(payload["optimizer"])
        scheduler.load_state_dict(payload["scheduler"])
        if uncertainty is not None:
            uncertainty.load_state_dict(payload["uncertainty"])
        rng.bit_generator.state = payload["numpy_rng"]
        torch.set_rng_state(payload["torch_rng"])
        start_step = payload["step"]

    tasks = model.tasks
    overall = model.config.overall_decoder
    model.train()
    loss_log: list[dict] = []
    draw_counts = np.zeros(n_items, dtype=np.int64)

    for step in range(start_step, total_steps):
        idxs = rng.choice(n_items, size=cfg.batch_size, replace=True, p=probs)
        draw_counts += np.bincount(idxs, minlength=n_items)
        images, target_stacks = [], []
        for i in idxs:
            patch, targets = dataset[i]
            arrays = _targets_to_arrays(targets, tasks, overall)
            img = patch.pixels
            if cfg.augmentations:
                img, arrays = apply_augmentations(np.array(img), arrays,
                                                  cfg.augmentations, rng)
            images.append(img)
            target_stacks.append(arrays)

        x = prepare_batch(images, model.config)
        batch_targets = {
            key: torch.as_tensor(
                np.stack([t[key] for t in target_stacks]).astype(np.float32))
            for key in target_stacks[0]
        }
        outputs = model(x)
        total, components = multi_task_loss(outputs, batch_targets, loss_config, uncertainty)
        optimizer.zero_grad()
        total.backward()
        optimizer.step()
        scheduler.step()
        loss_log.append({"step": step, **components, "lr": scheduler.get_last_lr()[0]})

    result_path = None
    if checkpoint_path is not None:
        extra = {
            "optimizer": optimizer.state_dict(),
            "scheduler": scheduler.state_dict(),
            "step": total_steps,
            "numpy_rng": rng.bit_generator.state,
            "torch_rng": torch.get_rng_state(),
            "loss_config": asdict(loss_config),
            "train_config": asdict(cfg),
        }
        if uncertainty is not None:
            extra["uncertainty"] = uncertainty.state_dict()
        save_checkpoint(checkpoint_path, model, class_spec, extra)
        result_path = Path(checkpoint_path)
    if log_path is not None:
        write_loss_log_csv(log_path, loss_log)
    return TrainResult(loss_log=loss_log, draw_counts=draw_counts,
                       checkpoint_path=result_path)


def write_loss_log_csv(path: str | Path, loss_log: Sequence[dict]) -> None:
    if not loss_log:
        return
    keys = ["step"] + sorted(k for k in loss_log[0] if k != "step")
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=keys)
        writer.writeheader()
        for row in loss_log:
            writer.writerow(row)
