"""Feedback-attention segmentation network and its training/evaluation harness."""

__version__ = "0.1.0"

from .mask_codec import (
    MaskStore,
    RleMask,
    downscale_mask,
    otsu_threshold,
    rle_decode,
    rle_encode,
)
from .network import FANet, NetworkConfig, SELayer, SEResidualBlock, MixPoolBlock, count_parameters
from .training import TrainConfig, combined_loss, dice_loss, fit, train_epoch
from .inference import RefinementTrace, binarize, iterative_predict, predict_once
from .metrics import ConfusionCounts, confusion, evaluate_dataset, metric_suite
from .data import (
    DatasetManifest,
    SegmentationData,
    SyntheticSpec,
    generate_synthetic,
    load_manifest,
    load_sample,
)
from .augment import augment_offline
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "__version__",
    "MaskStore",
    "RleMask",
    "downscale_mask",
    "otsu_threshold",
    "rle_decode",
    "rle_encode",
    "FANet",
    "NetworkConfig",
    "SELayer",
    "SEResidualBlock",
    "MixPoolBlock",
    "count_parameters",
    "TrainConfig",
    "combined_loss",
    "dice_loss",
    "fit",
    "train_epoch",
    "RefinementTrace",
    "binarize",
    "iterative_predict",
    "predict_once",
    "ConfusionCounts",
    "confusion",
    "evaluate_dataset",
    "metric_suite",
    "DatasetManifest",
    "SegmentationData",
    "SyntheticSpec",
    "generate_synthetic",
    "load_manifest",
    "load_sample",
    "augment_offline",
    "load_checkpoint",
    "save_checkpoint",
]
