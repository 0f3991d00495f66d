"""Desk-scale differentiable Gaussian splatting with a joint color +
language-feature renderer, per-Gaussian channel attention, and pose-blending
augmentation."""

from .augmentation import BlendConfig, BlendSample, make_blend_sample, sample_ratio, slerp, ssim
from .errors import (
    DataError,
    EngineError,
    InvalidParameterError,
    InvalidStateError,
    NumericError,
)
from .fusion import AttentionWeights, FusionModel, fuse, fuse_backward, make_fusion_model
from .projection import project, project_batch
from .query import QuerySet, decode_labels, localize, localization_accuracy, mean_iou, relevancy, segment
from .rasterizer import (
    IndicatorMode,
    RasterConfig,
    RenderOutput,
    rasterize,
    rasterize_backward,
    rasterize_reference,
)
from .scene import Camera, Dataset, GaussianCloud, TrainSample
from .synthetic import SyntheticSpec, generate_synthetic
from .training import TrainConfig, TrainResult, psnr, train

__version__ = "0.1.0"

__all__ = [
    "AttentionWeights",
    "BlendConfig",
    "BlendSample",
    "Camera",
    "DataError",
    "Dataset",
    "EngineError",
    "FusionModel",
    "GaussianCloud",
    "IndicatorMode",
    "InvalidParameterError",
    "InvalidStateError",
    "NumericError",
    "QuerySet",
    "RasterConfig",
    "RenderOutput",
    "SyntheticSpec",
    "TrainConfig",
    "TrainResult",
    "TrainSample",
    "decode_labels",
    "fuse",
    "fuse_backward",
    "generate_synthetic",
    "localization_accuracy",
    "localize",
    "make_blend_sample",
    "make_fusion_model",
    "mean_iou",
    "project",
    "project_batch",
    "psnr",
    "rasterize",
    "rasterize_backward",
    "rasterize_reference",
    "relevancy",
    "sample_ratio",
    "segment",
    "slerp",
    "ssim",
    "train",
]
