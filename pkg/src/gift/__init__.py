"""Soft-label evaluation toolkit: cosine loss on refined labels, baselines and harness."""

from .autodiff import Graph, ShapeError, Tensor, evaluate_with_grad, finite_diff_grad
from .data import AugmentConfig, DatasetBundle, augment_batch, load_idx, make_synthetic, select_ipc_subset
from .labels import LabelMatrix, generate_soft_labels, label_accuracy, refine_labels, smooth_labels
from .losses import LOSS_IDS, LossId, compute_loss, loss_cosine, parse_loss
from .models import ModelSpec, build_model, evaluate_accuracy, forward, train_model, train_teacher
from .optim import OptimizerConfig, adam_step, adamw_step, lr_schedule, sgd_step
from .theory import BoundReport, check_bound, infonce_loss, orthogonality_stats

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig", "BoundReport", "DatasetBundle", "Graph", "LOSS_IDS", "LabelMatrix", "LossId",
    "ModelSpec", "OptimizerConfig", "ShapeError", "Tensor", "adam_step", "adamw_step", "augment_batch",
    "build_model", "check_bound", "compute_loss", "evaluate_accuracy", "evaluate_with_grad",
    "finite_diff_grad", "forward", "generate_soft_labels", "infonce_loss", "label_accuracy",
    "load_idx", "loss_cosine", "lr_schedule", "make_synthetic", "orthogonality_stats", "parse_loss",
    "refine_labels", "select_ipc_subset", "sgd_step", "smooth_labels", "train_model", "train_teacher",
]
