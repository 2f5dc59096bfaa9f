"""Hybrid CNN / windowed-attention Unet for liver and lesion segmentation,
with the preprocessing, augmentation, metric, cross-validation and ablation
pipeline around it, runnable end to end on synthetic phantoms."""

from .augment import AugmentSpec, augment_dataset
from .errors import (ChecksumError, ConfigError, ContractError, DegenerateInputError, DimensionError,
                     FormatError, GenerationError, LengthError, MagicError, SwtrError, TensorNameError,
                     TrainingError, UndefinedMetricError, VersionError)
from .estimator import SwtrSegmenter
from .lesions import lesion_stats, sphericity, stratify, surface_distance
from .metrics import MetricReport, dice, false_positive_rate, hausdorff, patient_report
from .model import SwtrConfig, SwtrModel, build, forward, predict_mask
from .phantom import PhantomSpec, generate, generate_cohort
from .preprocess import make_preprocessing_pipeline, preprocess_pair, preprocess_volume
from .tensor import Tensor, grad_check, no_grad
from .training import FoldPlan, TrainConfig, ablation_run, make_folds, train
from .volume import VolumeImage, VoxelMask, read_volume, write_volume
from .weights import load_weights, save_weights

__version__ = "0.1.0"

__all__ = [
    "AugmentSpec", "augment_dataset",
    "ChecksumError", "ConfigError", "ContractError", "DegenerateInputError", "DimensionError",
    "FormatError", "GenerationError", "LengthError", "MagicError", "SwtrError", "TensorNameError",
    "TrainingError", "UndefinedMetricError", "VersionError",
    "SwtrSegmenter",
    "lesion_stats", "sphericity", "stratify", "surface_distance",
    "MetricReport", "dice", "false_positive_rate", "hausdorff", "patient_report",
    "SwtrConfig", "SwtrModel", "build", "forward", "predict_mask",
    "PhantomSpec", "generate", "generate_cohort",
    "make_preprocessing_pipeline", "preprocess_pair", "preprocess_volume",
    "Tensor", "grad_check", "no_grad",
    "FoldPlan", "TrainConfig", "ablation_run", "make_folds", "train",
    "VolumeImage", "VoxelMask", "read_volume", "write_volume",
    "load_weights", "save_weights",
]
