"""stylespace: multi-task speaking-style representation learning.

A shared embedding space regularized by graded label similarity, per-task
contrastive subspaces with EMA class prototypes, caption-side alignment, and
prototype-based classification / style manipulation on top.
"""

from .autograd import Tensor, backward
from .data import (Dataset, LabeledSample, TaskSchema, generate_synthetic,
                   load_jsonl, split_subject_independent, write_jsonl)
from .inference import (ManipulationReport, StyleVector, classify,
                        classify_caption, extract_style, manipulate)
from .losses import (LossBreakdown, PairWeights, meta_loss,
                     pair_similarity_weights, prototype_alignment_loss,
                     scl_total, supervised_contrastive_loss, total_loss)
from .metrics import balanced_accuracy, evaluate, evaluate_runs, macro_f1, weighted_f1
from .model import Model, init_model
from .prototypes import PrototypeBank, batch_centroids, ema_update, init_bank
from .trainer import (TrainConfig, TrainState, load_checkpoint, run_training,
                      save_checkpoint, train_step)

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward",
    "Dataset", "LabeledSample", "TaskSchema",
    "generate_synthetic", "load_jsonl", "split_subject_independent", "write_jsonl",
    "LossBreakdown", "PairWeights", "meta_loss", "pair_similarity_weights",
    "prototype_alignment_loss", "scl_total", "supervised_contrastive_loss", "total_loss",
    "PrototypeBank", "batch_centroids", "ema_update", "init_bank",
    "Model", "init_model",
    "TrainConfig", "TrainState", "train_step", "run_training",
    "save_checkpoint", "load_checkpoint",
    "StyleVector", "ManipulationReport", "classify", "classify_caption",
    "extract_style", "manipulate",
    "balanced_accuracy", "macro_f1", "weighted_f1", "evaluate", "evaluate_runs",
]
