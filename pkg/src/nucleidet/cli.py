"""Command-line interface: synth, train, infer, eval.

Config files are YAML documents whose sections mirror the dataclass field
names (ModelConfig under ``model``, TrainConfig under ``train`` and so on);
see README for a complete example.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from . import evaluate as ev
from . import postprocess as pp
from .losses import LossConfig
from .model import ModelConfig, build, load_checkpoint
from .pipeline import TrainConfig, infer_large, train
from .preprocess import build_target_set
from .sampler import build_sampler_state, class_weights, export_weights_csv, patch_weights
from .testkit import SynthSpec, synth_patch
from .types import (AnnotationSet, ClassSpec, ImagePatch, read_annotation_csv,
                    read_instance_npz, write_annotation_csv, write_instance_npz)


def _load_image(path: Path) -> np.ndarray:
    if path.suffix == ".npy":
        return np.load(path)
    from PIL import Image

    return np.asarray(Image.open(path).convert("RGB"))


def _save_image(path: Path, pixels: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(pixels).save(path)


# --- synth ----------------------------------------------------------------------


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = SynthSpec(size=args.size, n_classes=args.classes,
                     count_range=(args.count_min, args.count_max),
                     hues=tuple(args.hues) if args.hues else None,
                     mpp=args.mpp)
    names = [f"class_{k}" for k in range(spec.n_classes)]
    cspec = ClassSpec(classes=tuple(names),
                      dilation_diameters=(5,) * spec.n_classes,
                      matching_radii=(6.0,) * spec.n_classes)
    patches = []
    for i in range(args.n):
        patch, ann = synth_patch(spec, args.seed * 100003 + i)
        pid = f"patch_{i:04d}"
        _save_image(out / f"{pid}.png", patch.pixels)
        write_annotation_csv(out / f"{pid}.csv", ann, cspec)
        write_instance_npz(out / f"{pid}.npz", ann)
        patches.append({"id": pid, "image": f"{pid}.png",
                        "annotations": f"{pid}.csv", "masks": f"{pid}.npz"})
    manifest = {"mpp": spec.mpp, "classes": names, "patches": patches}
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)
    print(f"wrote {args.n} patches to {out}")
    return 0


def load_dataset_dir(data_dir: Path, cspec: ClassSpec,
                     tasks: str, include_overall: bool):
    """Load a synth-format dataset directory into (patch, targets) pairs."""
    with open(data_dir / "manifest.json") as f:
        manifest = json.load(f)
    dataset = []
    annotations = []
    for entry in manifest["patches"]:
        pixels = _load_image(data_dir / entry["image"])
        patch = ImagePatch(pixels=pixels, mpp=manifest["mpp"], id=entry["id"])
        ann = read_annotation_csv(data_dir / entry["annotations"], cspec)
        if entry.get("masks"):
            mask, mask_classes = read_instance_npz(data_dir / entry["masks"])
            ann = AnnotationSet(xy=ann.xy, class_indices=ann.class_indices,
                                instance_mask=mask, instance_classes=mask_classes,
                                ids=ann.ids)
        targets = build_target_set(ann, cspec, patch, tasks=tasks,
                                   include_overall=include_overall)
        dataset.append((patch, targets))
        annotations.append(ann)
    return dataset, annotations


# --- train ----------------------------------------------------------------------


def cmd_train(args) -> int:
    with open(args.config) as f:
        cfg = yaml.safe_load(f)
    cspec = ClassSpec(classes=tuple(cfg["classes"]["names"]),
                      dilation_diameters=tuple(cfg["classes"]["dilation_diameters"]),
                      matching_radii=tuple(cfg["classes"]["matching_radii"]))
    model_cfg = ModelConfig(**{k: tuple(v) if isinstance(v, list) else v
                               for k, v in cfg.get("model", {}).items()})
    loss_cfg = LossConfig(**cfg.get("loss", {}))
    train_cfg = TrainConfig(**{k: tuple(v) if isinstance(v, list) else v
                               for k, v in cfg.get("train", {}).items()})
    model = build(model_cfg)

    data_dir = Path(cfg["data"]["dir"])
    tasks = "det" if model_cfg.variant == "det_only" else "full"
    dataset, annotations = load_dataset_dir(data_dir, cspec, tasks, model_cfg.overall_decoder)

    weights = None
    if cfg.get("sampler", "balanced") == "balanced":
        patch = dataset[0][0]
        state = build_sampler_state(annotations, cspec, float(patch.height * patch.width))
        weights = patch_weights(state, class_weights(state))
        sampler_csv = cfg.get("output", {}).get("sampler_csv")
        if sampler_csv:
            export_weights_csv(sampler_csv, [p.id for p, _ in dataset], weights)

    out = cfg.get("output", {})
    result = train(model, dataset, loss_cfg, train_cfg, cspec,
                   sampler_weights=weights,
                   checkpoint_path=out.get("checkpoint", "checkpoint.pt"),
                   log_path=out.get("loss_log"),
                   resume_from=args.resume)
    first, last = result.loss_log[0]["total"], result.loss_log[-1]["total"]
    print(f"trained {len(result.loss_log)} steps; total loss {first:.4f} -> {last:.4f}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


# --- infer ----------------------------------------------------------------------


def cmd_infer(args) -> int:
    model, cspec, _ = load_checkpoint(args.checkpoint)
    image = _load_image(Path(args.input))
    if args.preset:
        config = pp.PRESETS[args.preset]
    else:
        config = pp.PostprocessConfig(
            centroid_weight=args.centroid_weight, peak_threshold=args.peak_threshold,
            min_distance=args.min_distance, box_size=args.box_size,
            overlap_threshold=args.overlap_threshold)
    detections = infer_large(image, model, config, tile=args.tile,
                             stride=args.stride, tta=args.tta)
    pp.write_detections_csv(args.out, detections, cspec)
    if args.json_out:
        pp.write_detections_json(args.json_out, detections, cspec)
    print(f"{len(detections)} detections -> {args.out}")
    return 0


# --- eval -----------------------------------------------------------------------


def _grouped(path: str, cspec: ClassSpec):
    return pp.read_grouped_detections_csv(path, cspec)


def cmd_eval(args) -> int:
    names = args.class_names.split(",")
    cspec = ClassSpec(classes=tuple(names),
                      dilation_diameters=(5,) * len(names),
                      matching_radii=(args.radius,) * len(names))
    preds = _grouped(args.pred, cspec)
    gts = _grouped(args.gt, cspec)
    images = sorted(set(preds) | set(gts))
    report: dict = {"protocol": args.protocol, "images": len(images)}

    if args.protocol == "pannuke":
        result = ev.pannuke_evaluate(
            [preds.get(i, []) for i in images],
            [gts.get(i, []) for i in images],
            n_classes=len(names), radius=args.radius)
        report["detection"] = result["detection"]
        report["classification"] = {
            names[k]: result["classification"][k] for k in range(len(names))}
    elif args.protocol in ("global_f1", "per_image_f1"):
        per_class = {}
        for k, name in enumerate(names):
            results = []
            for i in images:
                pk = [d for d in preds.get(i, []) if d.class_index == k]
                gk = [d for d in gts.get(i, []) if d.class_index == k]
                results.append(ev.match_points(pk, gk, args.radius))
            per_class[name] = (ev.f1_global(results) if args.protocol == "global_f1"
                               else ev.f1_per_image_avg(results))
        report["per_class_f1"] = per_class
        report["macro_f1"] = float(np.mean(list(per_class.values())))
    elif args.protocol == "froc":
        fp_rates = tuple(float(v) for v in args.fp_rates.split(","))
        per_class = {}
        curves = {}
        for k, name in enumerate(names):
            pk = [d for i in images for d in preds.get(i, []) if d.class_index == k]
            gk = [d for i in images for d in gts.get(i, []) if d.class_index == k]
            curve, score = ev.froc(pk, gk, margin_um=args.margin_um, mpp=args.mpp,
                                   area_mm2=args.area_mm2, fp_rates=fp_rates)
            per_class[name] = score
            curves[name] = curve
        report["froc_score"] = per_class
        report["macro_froc"] = float(np.mean(list(per_class.values())))
        if args.curve_out:
            with open(args.curve_out, "w") as f:
                f.write("class_name,fp_per_mm2,sensitivity\n")
                for name, curve in curves.items():
                    for fp_rate, sens in curve.points:
                        f.write(f"{name},{fp_rate:g},{sens:g}\n")
    else:
        raise ValueError(f"unknown protocol {args.protocol!r}")

    with open(args.out, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


# --- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nucleidet")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--count-min", type=int, default=2)
    p.add_argument("--count-max", type=int, default=4)
    p.add_argument("--hues", type=float, nargs="*", default=None)
    p.add_argument("--mpp", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train from a YAML config")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="tiled inference over one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--json-out", default=None)
    p.add_argument("--tile", type=int, default=256)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--tta", choices=["none", "x4", "x16"], default="none")
    p.add_argument("--preset", choices=sorted(pp.PRESETS), default=None)
    p.add_argument("--centroid-weight", type=float, default=1.0)
    p.add_argument("--peak-threshold", type=float, default=0.5)
    p.add_argument("--min-distance", type=float, default=5.0)
    p.add_argument("--box-size", type=float, default=5.0)
    p.add_argument("--overlap-threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score prediction CSV against ground truth CSV")
    p.add_argument("--protocol", choices=["froc", "pannuke", "global_f1", "per_image_f1"],
                   required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--class-names", default="class_0,class_1,class_2")
    p.add_argument("--radius", type=float, default=6.0)
    p.add_argument("--margin-um", type=float, default=5.0)
    p.add_argument("--mpp", type=float, default=0.5)
    p.add_argument("--area-mm2", type=float, default=1.0)
    p.add_argument("--fp-rates", default="10,20,50,100,200")
    p.add_argument("--curve-out", default=None)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
