"""Confidence-guided residual crowd counting toolkit."""

from .annotations import (
    AnnotatedImage,
    Blur,
    DatasetStats,
    HeadAnnotation,
    ImageLabels,
    Occlusion,
    Split,
    Weather,
    compute_stats,
    export_split,
    parse_annotation_file,
)
from .densitygen import DensityMap, generate_density_map, pyramid_targets
from .losses import LossConfig, confidence_loss, density_loss, total_loss, weather_loss
from .metrics import EvalReport, build_report, categorize, mae_mse
from .network import BackboneConfig, CrowdRefineNet, PredictionPyramid, build_model
from .synthdata import SceneSpec, generate_scene
from .trainer import TrainConfig, evaluate, resize_policy, sample_patch, train

__all__ = [
    "AnnotatedImage",
    "BackboneConfig",
    "Blur",
    "CrowdRefineNet",
    "DatasetStats",
    "DensityMap",
    "EvalReport",
    "HeadAnnotation",
    "ImageLabels",
    "LossConfig",
    "Occlusion",
    "PredictionPyramid",
    "SceneSpec",
    "Split",
    "TrainConfig",
    "Weather",
    "build_model",
    "build_report",
    "categorize",
    "compute_stats",
    "confidence_loss",
    "density_loss",
    "evaluate",
    "export_split",
    "generate_density_map",
    "generate_scene",
    "mae_mse",
    "parse_annotation_file",
    "pyramid_targets",
    "resize_policy",
    "sample_patch",
    "total_loss",
    "train",
    "weather_loss",
]
