"""Multi-decoder detection/classification network family.

A shared encoder produces a 5-level feature pyramid (strides 2..32); parallel
per-class decoders upsample it back to full resolution with pixel-shuffle and
spatial+channel squeeze-excitation attention, each ending in sigmoid heads for
centroid, nucleus and contour maps. Two reduced variants exist: a single
shared decoder for all classes/tasks, and a detection-only decoder that emits
centroid maps alone.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .types import ClassSpec, ImagePatch, PredictionMaps

VARIANTS = ("full", "single_head", "det_only")

WIDE_DECODER_WIDTHS = (512, 256, 128, 64, 32)
DEFAULT_DECODER_WIDTHS = (256, 128, 64, 32, 16)


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "full"
    n_classes: int = 1
    decoder_widths: tuple[int, ...] = DEFAULT_DECODER_WIDTHS
    encoder: str = "tiny"
    encoder_channels: Optional[tuple[int, ...]] = None
    overall_decoder: bool = False
    normalize_mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    normalize_std: tuple[float, float, float] = (0.25, 0.25, 0.25)

    def __post_init__(self):
        object.__setattr__(self, "decoder_widths", tuple(int(w) for w in self.decoder_widths))
        if self.encoder_channels is not None:
            object.__setattr__(self, "encoder_channels",
                               tuple(int(c) for c in self.encoder_channels))
        object.__setattr__(self, "normalize_mean", tuple(float(v) for v in self.normalize_mean))
        object.__setattr__(self, "normalize_std", tuple(float(v) for v in self.normalize_std))
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.n_classes < 1:
            raise ValueError("n_classes must be >= 1")
        if len(self.decoder_widths) != 5:
            raise ValueError("decoder_widths must have 5 entries (one per decoder block)")
        if any(a < b for a, b in zip(self.decoder_widths, self.decoder_widths[1:])):
            raise ValueError("decoder_widths must be nonincreasing")
        if self.overall_decoder and self.variant != "full":
            raise ValueError("the extra overall-detection decoder requires the full variant")


# --- building blocks --------------------------------------------------------


class SCSE(nn.Module):
    """Concurrent spatial and channel squeeze-and-excitation."""

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.cse = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Conv2d(channels, hidden, 1),
            nn.SiLU(inplace=True),
            nn.Conv2d(hidden, channels, 1),
            nn.Sigmoid(),
        )
        self.sse = nn.Sequential(nn.Conv2d(channels, 1, 1), nn.Sigmoid())

    def forward(self, x):
        return x * self.cse(x) + x * self.sse(x)


class DecoderBlock(nn.Module):
    """One 2x upsampling stage:
    conv -> SiLU -> SCSE -> pixel-shuffle(r=2) -> concat skip -> conv -> SiLU -> SCSE.
    """

    def __init__(self, in_ch: int, skip_ch: int, out_ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, 4 * out_ch, 3, padding=1)
        self.act1 = nn.SiLU(inplace=True)
        self.scse1 = SCSE(4 * out_ch)
        self.shuffle = nn.PixelShuffle(2)
        self.conv2 = nn.Conv2d(out_ch + skip_ch, out_ch, 3, padding=1)
        self.act2 = nn.SiLU(inplace=True)
        self.scse2 = SCSE(out_ch)
        self.skip_ch = skip_ch

    def forward(self, x, skip=None):
        x = self.scse1(self.act1(self.conv1(x)))
        x = self.shuffle(x)
        if skip is not None:
            if skip.shape[1] != self.skip_ch:
                raise ValueError(f"skip has {skip.shape[1]} channels, expected {self.skip_ch}")
            x = torch.cat([x, skip], dim=1)
        elif self.skip_ch != 0:
            raise ValueError("block was built with a skip connection but none was given")
        return self.scse2(self.act2(self.conv2(x)))


class Decoder(nn.Module):
    """Five decoder blocks from the deepest pyramid level back to full resolution.

    Skips come from the four shallower pyramid levels; the last block has none.
    """

    def __init__(self, encoder_channels: Sequence[int], widths: Sequence[int]):
        super().__init__()
        e1, e2, e3, e4, e5 = encoder_channels
        w = list(widths)
        skips = [e4, e3, e2, e1, 0]
        ins = [e5] + w[:4]
        self.blocks = nn.ModuleList(
            DecoderBlock(i, s, o) for i, s, o in zip(ins, skips, w))
        self.out_channels = w[-1]

    def forward(self, pyramid):
        f1, f2, f3, f4, f5 = pyramid
        x = f5
        for block, skip in zip(self.blocks, [f4, f3, f2, f1, None]):
            x = block(x, skip)
        return x


class TaskHeads(nn.Module):
    """Sigmoid 1x1 heads on top of one decoder."""

    def __init__(self, in_ch: int, tasks: Sequence[str], out_ch: int):
        super().__init__()
        self.heads = nn.ModuleDict({t: nn.Conv2d(in_ch, out_ch, 1) for t in tasks})

    def forward(self, x):
        return {t: torch.sigmoid(head(x)) for t, head in self.heads.items()}


# --- encoders ----------------------------------------------------------------


class TinyEncoder(nn.Module):
    """Small CNN backbone producing the 5-level pyramid; CPU-friendly stand-in
    for a large pretrained encoder."""

    DEFAULT_CHANNELS = (16, 32, 48, 64, 80)

    def __init__(self, channels: Optional[Sequence[int]] = None):
        super().__init__()
        chans = tuple(channels) if channels is not None else self.DEFAULT_CHANNELS
        if len(chans) != 5:
            raise ValueError("encoder needs 5 channel counts (strides 2..32)")
        self.out_channels = chans
        stages = []
        in_ch = 3
        for c in chans:
            stages.append(nn.Sequential(
                nn.Conv2d(in_ch, c, 3, stride=2, padding=1),
                nn.SiLU(inplace=True),
                nn.Conv2d(c, c, 3, padding=1),
                nn.SiLU(inplace=True),
            ))
            in_ch = c
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class TorchvisionEfficientNetEncoder(nn.Module):
    """Wraps a torchvision EfficientNet as the pyramid backbone.

    The stage-to-stride mapping is discovered with a dry run, taking the last
    feature map at each of strides 2/4/8/16/32.
    """

    def __init__(self, name: str = "efficientnet_v2_l"):
        super().__init__()
        import torchvision.models as tvm  # optional dependency

        net = getattr(tvm, name)(weights=None)
        self.features = net.features
        with torch.no_grad():
            x = torch.zeros(1, 3, 64, 64)
            stride_to_idx: dict[int, int] = {}
            chans: dict[int, int] = {}
            for i, mod in enumerate(self.features):
                x = mod(x)
                stride = 64 // x.shape[-1]
                stride_to_idx[stride] = i
                chans[stride] = x.shape[1]
        try:
            self.tap_indices = [stride_to_idx[s] for s in (2, 4, 8, 16, 32)]
        except KeyError as e:
            raise ValueError(f"{name} does not expose stride {e} features") from e
        self.out_channels = tuple(chans[s] for s in (2, 4, 8, 16, 32))

    def forward(self, x):
        feats = []
        taps = set(self.tap_indices)
        for i, mod in enumerate(self.features):
            x = mod(x)
            if i in taps:
                feats.append(x)
        return feats


_ENCODERS: dict[str, Callable[[ModelConfig], nn.Module]] = {
    "tiny": lambda cfg: TinyEncoder(cfg.encoder_channels),
    "efficientnet_v2_l": lambda cfg: TorchvisionEfficientNetEncoder("efficientnet_v2_l"),
    "efficientnet_v2_s": lambda cfg: TorchvisionEfficientNetEncoder("efficientnet_v2_s"),
}


def register_encoder(name: str, builder: Callable[[ModelConfig], nn.Module]) -> None:
    _ENCODERS[name] = builder


# --- the model ----------------------------------------------------------------


class MultiDecoderNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        if config.encoder not in _ENCODERS:
            raise ValueError(f"unknown encoder {config.encoder!r}")
        self.config = config
        self.encoder = _ENCODERS[config.encoder](config)
        enc_ch = self.encoder.out_channels
        w = config.decoder_widths
        n = config.n_classes

        if config.variant == "full":
            n_dec = n + (1 if config.overall_decoder else 0)
            self.decoders = nn.ModuleList(Decoder(enc_ch, w) for _ in range(n_dec))
            self.heads = nn.ModuleList(
                TaskHeads(w[-1], ("centroid", "seg", "contour"), 1) for _ in range(n_dec))
        elif config.variant == "single_head":
            self.decoders = nn.ModuleList([Decoder(enc_ch, w)])
            self.heads = nn.ModuleList([TaskHeads(w[-1], ("centroid", "seg", "contour"), n)])
        else:  # det_only
            self.decoders = nn.ModuleList([Decoder(enc_ch, w)])
            self.heads = nn.ModuleList([TaskHeads(w[-1], ("centroid",), n)])

    @property
    def tasks(self) -> tuple[str, ...]:
        return ("centroid",) if self.config.variant == "det_only" else ("centroid", "seg", "contour")

    def forward(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        """x is (B, 3, H, W) with H, W divisible by 32; returns per-task maps
        (B, n_classes, H, W) plus ``overall_*`` entries when configured."""
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) input, got {tuple(x.shape)}")
        if x.shape[2] % 32 or x.shape[3] % 32:
            raise ValueError(f"input H, W must be divisible by 32, got {tuple(x.shape[2:])}")
        pyramid = self.encoder(x)

        cfg = self.config
        if cfg.variant == "full":
            per_class = [head(dec(pyramid)) for dec, head in
                         zip(self.decoders[:cfg.n_classes], self.heads[:cfg.n_classes])]
            out = {t: torch.cat([m[t] for m in per_class], dim=1) for t in self.tasks}
            if cfg.overall_decoder:
                om = self.heads[-1](self.decoders[-1](pyramid))
                out.update({f"overall_{t}": om[t] for t in self.tasks})
            return out
        return self.heads[0](self.decoders[0](pyramid))


def build(config: ModelConfig) -> MultiDecoderNet:
    return MultiDecoderNet(config)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


# --- inference helpers ----------------------------------------------------------


def to_unit_float(pixels: np.ndarray) -> np.ndarray:
    """Intensities to float32 in [0, 1]; integer dtypes are assumed 0..255."""
    if np.issubdtype(pixels.dtype, np.integer):
        return pixels.astype(np.float32) / 255.0
    return pixels.astype(np.float32)


def prepare_batch(images: Sequence[np.ndarray], config: ModelConfig,
                  dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Stack HWC images into a normalised (B, 3, H, W) tensor."""
    mean = np.asarray(config.normalize_mean, dtype=np.float32)
    std = np.asarray(config.normalize_std, dtype=np.float32)
    arrs = [(to_unit_float(np.asarray(im)) - mean) / std for im in images]
    batch = np.stack(arrs).transpose(0, 3, 1, 2)
    return torch.as_tensor(np.ascontiguousarray(batch), dtype=dtype)


def predict(model: MultiDecoderNet, patches: Sequence[ImagePatch] | Sequence[np.ndarray],
            batch_size: int = 8) -> list[PredictionMaps]:
    """Deterministic eval-mode forward over patches, one PredictionMaps each."""
    images = [p.pixels if isinstance(p, ImagePatch) else p for p in patches]
    model.eval()
    results: list[PredictionMaps] = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = images[start:start + batch_size]
            x = prepare_batch(chunk, model.config, dtype=next(model.parameters()).dtype)
            out = {k: v.cpu().numpy() for k, v in model(x).items()}
            for b in range(len(chunk)):
                results.append(PredictionMaps(
                    centroid=out["centroid"][b],
                    seg=out["seg"][b] if "seg" in out else None,
                    contour=out["contour"][b] if "contour" in out else None,
                    overall_centroid=out.get("overall_centroid", [None] * len(chunk))[b],
                    overall_seg=out.get("overall_seg", [None] * len(chunk))[b],
                    overall_contour=out.get("overall_contour", [None] * len(chunk))[b],
                ))
    return results


# --- checkpointing ----------------------------------------------------------------

_REQUIRED_KEYS = ("state_dict", "model_config", "class_spec", "format_version")


def save_checkpoint(path: str | Path, model: MultiDecoderNet, class_spec: ClassSpec,
                    extra: Optional[dict] = None) -> None:
    """One container for weights + full config + normalisation stats + classes."""
    payload = {
        "format_version": 1,
        "state_dict": model.state_dict(),
        "model_config": asdict(model.config),
        "class_spec": asdict(class_spec),
    }
    if extra:
        overlap = set(extra) & set(payload)
        if overlap:
            raise ValueError(f"extra keys collide with checkpoint fields: {sorted(overlap)}")
        payload.update(extra)
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> tuple[MultiDecoderNet, ClassSpec, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    missing = [k for k in _REQUIRED_KEYS if k not in payload]
    if missing:
        raise ValueError(f"checkpoint is missing required field(s): {missing}")
    config = ModelConfig(**payload["model_config"])
    spec = ClassSpec(**payload["class_spec"])
    model = build(config)
    model.load_state_dict(payload["state_dict"])
    extra = {k: v for k, v in payload.items() if k not in _REQUIRED_KEYS}
    return model, spec, extra
