"""Composite multi-task objective.

Per class: centroid maps are scored with Jaccard + Dice + Focal, nucleus and
contour maps with BCE + Dice (contour at half weight). Class losses combine
either with fixed equal weights or with learnable uncertainty weights, plus a
global inter-class exclusion penalty on the product of centroid maps.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
from torch import nn

logger = logging.getLogger(__name__)

WEIGHTINGS = ("fixed_equal", "uncertainty")


@dataclass(frozen=True)
class LossConfig:
    weighting: str = "fixed_equal"
    epsilon: float = 1.0          # dice/jaccard smoothing
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    contour_weight: float = 0.5
    clamp_delta: float = 1e-7     # probability clamp before logs

    def __post_init__(self):
        if self.weighting not in WEIGHTINGS:
            raise ValueError(f"unknown weighting {self.weighting!r}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if not 0 < self.focal_alpha < 1:
            raise ValueError("focal_alpha must be in (0, 1)")
        if self.focal_gamma < 0:
            raise ValueError("focal_gamma must be >= 0")


class UncertaintyParams(nn.Module):
    """Learnable per-class log-variances for uncertainty-based loss weighting.

    Class k contributes exp(-s_k) * L_k + s_k to the total; s_k starts at 0,
    which reproduces fixed equal weighting.
    """

    def __init__(self, n_classes: int):
        super().__init__()
        self.s = nn.Parameter(torch.zeros(n_classes, dtype=torch.float64))


def _check(p: torch.Tensor, g: torch.Tensor) -> None:
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {tuple(p.shape)} != target shape {tuple(g.shape)}")


def bce(p: torch.Tensor, g: torch.Tensor, delta: float = 1e-7) -> torch.Tensor:
    """Mean binary cross-entropy; p is clamped to [delta, 1 - delta]."""
    _check(p, g)
    p = p.clamp(delta, 1.0 - delta)
    return -(g * torch.log(p) + (1.0 - g) * torch.log(1.0 - p)).mean()


def dice_loss(p: torch.Tensor, g: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    _check(p, g)
    inter = (p * g).sum()
    return 1.0 - (2.0 * inter + eps) / (p.sum() + g.sum() + eps)


def jaccard_loss(p: torch.Tensor, g: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    """Soft (squared-denominator) Jaccard loss."""
    _check(p, g)
    inter = (p * g).sum()
    denom = (p * p).sum() + (g * g).sum() - inter
    return 1.0 - (inter + eps) / (denom + eps)


def focal_loss(p: torch.Tensor, g: torch.Tensor, alpha: float = 0.25,
               gamma: float = 2.0, delta: float = 1e-7) -> torch.Tensor:
    _check(p, g)
    p = p.clamp(delta, 1.0 - delta)
    pos = alpha * g * (1.0 - p) ** gamma * torch.log(p)
    neg = (1.0 - alpha) * (1.0 - g) * p ** gamma * torch.log(1.0 - p)
    return -(pos + neg).mean()


def centroid_loss(p: torch.Tensor, g: torch.Tensor,
                  config: LossConfig = LossConfig()) -> torch.Tensor:
    return (jaccard_loss(p, g, config.epsilon)
            + dice_loss(p, g, config.epsilon)
            + focal_loss(p, g, config.focal_alpha, config.focal_gamma, config.clamp_delta))


def bce_dice_loss(p: torch.Tensor, g: torch.Tensor,
                  config: LossConfig = LossConfig()) -> torch.Tensor:
    return bce(p, g, config.clamp_delta) + dice_loss(p, g, config.epsilon)


def _class_loss_parts(p_centroid, g_centroid, p_seg, g_seg, p_contour, g_contour,
                      config: LossConfig) -> dict[str, torch.Tensor]:
    parts = {"centroid": centroid_loss(p_centroid, g_centroid, config)}
    if p_seg is not None or p_contour is not None:
        if g_seg is None or g_contour is None:
            raise ValueError("segmentation/contour predictions given but targets missing")
        parts["seg"] = bce_dice_loss(p_seg, g_seg, config)
        parts["contour"] = bce_dice_loss(p_contour, g_contour, config)
    return parts


def class_loss(p_centroid: torch.Tensor, g_centroid: torch.Tensor,
               p_seg: Optional[torch.Tensor] = None, g_seg: Optional[torch.Tensor] = None,
               p_contour: Optional[torch.Tensor] = None, g_contour: Optional[torch.Tensor] = None,
               config: LossConfig = LossConfig()) -> torch.Tensor:
    """Loss for one class decoder: centroid + seg + half-weighted contour.

    Detection-only mode (no seg/contour predictions) uses the centroid term
    alone and ignores any seg/contour targets.
    """
    parts = _class_loss_parts(p_centroid, g_centroid, p_seg, g_seg, p_contour, g_contour, config)
    total = parts["centroid"]
    if "seg" in parts:
        total = total + parts["seg"] + config.contour_weight * parts["contour"]
    return total


def interclass_exclusion(centroid_maps: Sequence[torch.Tensor]) -> torch.Tensor:
    """Mean over pixels of the product of class probabilities.

    Pushes towards winner-takes-all class assignment. Defined as 0 for fewer
    than two classes.
    """
    maps = list(centroid_maps)
    if len(maps) < 2:
        logger.warning("inter-class exclusion needs >= 2 classes; returning 0")
        ref = maps[0] if maps else torch.zeros(())
        return torch.zeros((), dtype=ref.dtype)
    prod = maps[0]
    for m in maps[1:]:
        _check(m, maps[0])
        prod = prod * m
    return prod.mean()


def _require_finite(value: torch.Tensor, name: str) -> None:
    if not torch.isfinite(value.detach()).all():
        raise RuntimeError(f"non-finite loss component: {name} = {value.item()!r}")


def total_loss(class_losses: Sequence[torch.Tensor], interclass: torch.Tensor,
               config: LossConfig = LossConfig(),
               uncertainty: Optional[UncertaintyParams] = None) -> torch.Tensor:
    """Combine class losses and the exclusion term under the chosen weighting."""
    for k, lk in enumerate(class_losses):
        _require_finite(lk, f"class_{k}")
    _require_finite(interclass, "interclass")
    if config.weighting == "uncertainty":
        if uncertainty is None:
            raise ValueError("uncertainty weighting requires UncertaintyParams")
        if uncertainty.s.shape[0] != len(class_losses):
            raise ValueError(f"{uncertainty.s.shape[0]} uncertainty params for "
                             f"{len(class_losses)} class losses")
        s = uncertainty.s
        total = sum(torch.exp(-s[k]) * lk + s[k] for k, lk in enumerate(class_losses))
    else:
        total = sum(class_losses)
    return total + interclass


def multi_task_loss(outputs: dict[str, torch.Tensor], targets: dict[str, torch.Tensor],
                    config: LossConfig = LossConfig(),
                    uncertainty: Optional[UncertaintyParams] = None,
                    ) -> tuple[torch.Tensor, dict[str, float]]:
    """Total training loss from batched model outputs and targets.

    ``outputs``/``targets`` hold (B, C, H, W) tensors keyed by task
    ('centroid', optionally 'seg'/'contour' and 'overall_*'). Returns the
    scalar loss and a per-component breakdown for logging.
    """
    n = outputs["centroid"].shape[1]
    has_aux = "seg" in outputs
    components: dict[str, float] = {}
    class_losses = []
    for k in range(n):
        parts = _class_loss_parts(
            outputs["centroid"][:, k], targets["centroid"][:, k],
            outputs["seg"][:, k] if has_aux else None,
            targets["seg"][:, k] if has_aux else None,
            outputs["contour"][:, k] if has_aux else None,
            targets["contour"][:, k] if has_aux else None,
            config)
        lk = parts["centroid"]
        if has_aux:
            lk = lk + parts["seg"] + config.contour_weight * parts["contour"]
        class_losses.append(lk)
        for task, v in parts.items():
            components[f"class{k}_{task}"] = float(v.detach())

    if "overall_centroid" in outputs:
        has_overall_aux = "overall_seg" in outputs
        parts = _class_loss_parts(
            outputs["overall_centroid"][:, 0], targets["overall_centroid"][:, 0],
            outputs["overall_seg"][:, 0] if has_overall_aux else None,
            targets["overall_seg"][:, 0] if has_overall_aux else None,
            outputs["overall_contour"][:, 0] if has_overall_aux else None,
            targets["overall_contour"][:, 0] if has_overall_aux else None,
            config)
        lk = parts["centroid"]
        if "seg" in parts:
            lk = lk + parts["seg"] + config.contour_weight * parts["contour"]
        class_losses.append(lk)
        for task, v in parts.items():
            components[f"overall_{task}"] = float(v.detach())

    inter = interclass_exclusion([outputs["centroid"][:, k] for k in range(n)]) \
        if n >= 2 else torch.zeros((), dtype=outputs["centroid"].dtype)
    components["interclass"] = float(inter.detach())
    total = total_loss(class_losses, inter, config, uncertainty)
    components["total"] = float(total.detach())
    return total, components
