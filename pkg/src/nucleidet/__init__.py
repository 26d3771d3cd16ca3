"""Multi-decoder nuclei detection and classification toolkit."""

from .types import (AnnotationSet, ClassSpec, Detection, ImagePatch,
                    PredictionMaps, TargetMaskSet, validate_annotation)
from .model import ModelConfig, MultiDecoderNet, build, count_parameters, predict
from .losses import LossConfig, UncertaintyParams
from .postprocess import PostprocessConfig, extract_detections
from .pipeline import TrainConfig, infer_large, tile_image, train, tta_forward
from .evaluate import (FrocCurve, MatchResult, f1_from_counts, f1_global,
                       f1_per_image_avg, froc, match_points, pannuke_f1)

__version__ = "0.1.0"

__all__ = [
    "AnnotationSet", "ClassSpec", "Detection", "ImagePatch", "PredictionMaps",
    "TargetMaskSet", "validate_annotation",
    "ModelConfig", "MultiDecoderNet", "build", "count_parameters", "predict",
    "LossConfig", "UncertaintyParams",
    "PostprocessConfig", "extract_detections",
    "TrainConfig", "infer_large", "tile_image", "train", "tta_forward",
    "FrocCurve", "MatchResult", "f1_from_counts", "f1_global",
    "f1_per_image_avg", "froc", "match_points", "pannuke_f1",
    "__version__",
]
