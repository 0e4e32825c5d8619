"""Multi-resolution cascaded 3-D U-Net pipeline for kidney CT segmentation."""

from .config import (
    PipelineConfig,
    apply_preset,
    config_diff,
    config_hash,
    load_config,
    parse_config,
    render_config,
)
from .errors import KidneySegError
from .estimator import KidneySegmenter
from .inference import (
    ProbabilityMaps,
    SegmentationResult,
    ensemble,
    postprocess,
    predict_volume,
    split_left_right,
)
from .metrics import dice, evaluate_cohort, mann_whitney_u, summarize
from .nifti import read_nifti, write_nifti
from .phantom import PhantomSpec, generate, make_cohort, write_cohort
from .training import (
    TrainCase,
    build_model,
    preprocess_case,
    pretrain_lowres,
    split_cases,
    train,
)
from .unet import CascadeModel, UNet, UNetConfig
from .volume import Volume, clip_hu, merge_format1, resample

__version__ = "0.1.0"

__all__ = [
    "CascadeModel",
    "KidneySegError",
    "KidneySegmenter",
    "PhantomSpec",
    "PipelineConfig",
    "ProbabilityMaps",
    "SegmentationResult",
    "TrainCase",
    "UNet",
    "UNetConfig",
    "Volume",
    "apply_preset",
    "build_model",
    "clip_hu",
    "config_diff",
    "config_hash",
    "dice",
    "ensemble",
    "evaluate_cohort",
    "generate",
    "load_config",
    "make_cohort",
    "mann_whitney_u",
    "merge_format1",
    "parse_config",
    "postprocess",
    "predict_volume",
    "preprocess_case",
    "pretrain_lowres",
    "read_nifti",
    "render_config",
    "resample",
    "split_cases",
    "split_left_right",
    "summarize",
    "train",
    "write_cohort",
    "write_nifti",
]
