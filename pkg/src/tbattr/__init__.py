"""Attribute-assisted weakly supervised lesion detection for chest X-rays.

A compact two-stage detector whose feature pyramid is refined by clinical
sign (attribute) features: grouped-convolution attribute extraction with
channel shuffle, attribute-attribute cross-attention, and similarity-gated
attribute-to-target fusion, trained jointly with a multi-label attribute
classifier under mixed supervision.
"""

from .config import Config
from .data import (
    BoundingBox,
    DatasetManifest,
    XrayRecord,
    dataset_digest,
    load_manifest,
    save_manifest,
    synthesize_dataset,
)
from .evaluation import (
    EvalReport,
    ablation_report,
    aggregate_runs,
    compute_accuracy,
    compute_f_score,
    compute_map,
    evaluate_model,
)
from .model import TbAttrModel, build_model, load_checkpoint, save_checkpoint
from .training import AblationFlags, TrainConfig, joint_loss, lr_at_epoch, run_training

__version__ = "0.1.0"

__all__ = [
    "AblationFlags",
    "BoundingBox",
    "Config",
    "DatasetManifest",
    "EvalReport",
    "TbAttrModel",
    "TrainConfig",
    "XrayRecord",
    "ablation_report",
    "aggregate_runs",
    "build_model",
    "compute_accuracy",
    "compute_f_score",
    "compute_map",
    "dataset_digest",
    "evaluate_model",
    "joint_loss",
    "load_checkpoint",
    "load_manifest",
    "lr_at_epoch",
    "run_training",
    "save_checkpoint",
    "save_manifest",
    "synthesize_dataset",
]
