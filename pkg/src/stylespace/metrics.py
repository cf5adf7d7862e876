"""Evaluation kernels: confusion matrices, balanced accuracy, macro/weighted F1.

Classes with zero support (no true samples) are excluded from the balanced
accuracy and macro-F1 means; weighted F1 weighs by support so they drop out
naturally.
"""

from __future__ import annotations

import json
from typing import Optional, Sequence

import numpy as np

from .data import Dataset, split_subject_independent
from .errors import InferenceError, StylespaceError
from .model import Model


def confusion_matrix(y_true: Sequence[int], y_pred: Sequence[int],
                     num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        cm[int(t), int(p)] += 1
    return cm


def _check_cm(cm: np.ndarray) -> np.ndarray:
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or cm.shape[0] < 1:
        raise ValueError(f"confusion matrix must be square, got shape {cm.shape}")
    if (cm < 0).any():
        raise ValueError("confusion matrix entries must be non-negative")
    if cm.sum() == 0:
        raise StylespaceError("confusion matrix is empty (no evaluated samples)")
    return cm


def balanced_accuracy(cm: np.ndarray) -> float:
    """Mean per-class recall over classes with support."""
    cm = _check_cm(cm)
    support = cm.sum(axis=1)
    live = support > 0
    recalls = np.diag(cm)[live] / support[live]
    return float(recalls.mean())


def _per_class_f1(cm: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    tp = np.diag(cm).astype(np.float64)
    f1 = np.zeros(cm.shape[0])
    for c in range(cm.shape[0]):
        denom = support[c] + predicted[c]   # 2PR/(P+R) reduces to 2TP/(supp+pred)
        if denom > 0:
            f1[c] = 2.0 * tp[c] / denom
    return f1, support


def macro_f1(cm: np.ndarray) -> float:
    """Unweighted mean F1 over classes with support."""
    cm = _check_cm(cm)
    f1, support = _per_class_f1(cm)
    live = support > 0
    return float(f1[live].mean())


def weighted_f1(cm: np.ndarray) -> float:
    """Support-weighted mean F1."""
    cm = _check_cm(cm)
    f1, support = _per_class_f1(cm)
    return float((f1 * support).sum() / support.sum())


# ---------------------------------------------------------------------------
# model evaluation
# ---------------------------------------------------------------------------

def _predict_dataset(model: Model, data: Dataset) -> dict[str, np.ndarray]:
    """Confusion matrix per task over samples carrying that task's true label."""
    if not data.samples:
        raise StylespaceError("cannot evaluate on an empty dataset")
    schema = model.schema
    per_task: dict[str, tuple[list[int], list[int]]] = {t: ([], []) for t in schema.task_names}
    chunk = 256
    for start in range(0, len(data.samples), chunk):
        block = data.samples[start:start + chunk]
        _, z_per_task = model.embed([s.frames for s in block])
        for t, task in enumerate(schema.task_names):
            protos = model.bank.task_matrix(task)
            mask = model.bank.initialized_mask(task)
            if not mask.all():
                missing = [c for c, ok in zip(schema.classes(task), mask) if not ok]
                raise InferenceError(
                    f"task '{task}' has uninitialized prototypes for classes {missing}")
            z = z_per_task[t].values
            norms = np.maximum(np.linalg.norm(z, axis=1, keepdims=True), 1e-8)
            pnorms = np.maximum(np.linalg.norm(protos, axis=1, keepdims=True), 1e-8)
            sims = (z / norms) @ (protos / pnorms).T
            preds = sims.argmax(axis=1)
            for i, s in enumerate(block):
                y = s.labels[t]
                if y is None:
                    continue
                per_task[task][0].append(int(y))
                per_task[task][1].append(int(preds[i]))
    cms = {}
    for task in schema.task_names:
        y_true, y_pred = per_task[task]
        cms[task] = confusion_matrix(y_true, y_pred, len(schema.classes(task)))
    return cms


def evaluate(model: Model, data: Dataset) -> dict[str, dict]:
    """Per-task metric report for one test set."""
    report = {}
    for task, cm in _predict_dataset(model, data).items():
        report[task] = {
            "balanced_accuracy": balanced_accuracy(cm),
            "macro_f1": macro_f1(cm),
            "weighted_f1": weighted_f1(cm),
            "confusion": cm.tolist(),
        }
    return report


def evaluate_runs(model: Model, data: Dataset, runs: int = 1,
                  test_fraction: float = 0.2, seed: int = 0) -> dict:
    """Evaluate over `runs` subject-level subsamples of `data` and aggregate
    mean/std per metric. With runs == 1 the whole dataset is one run."""
    if runs < 1:
        raise ValueError("runs must be >= 1")
    per_run = []
    for r in range(runs):
        subset = data
        if runs > 1:
            _, subset = split_subject_independent(data, test_fraction, seed + r)
        per_run.append(evaluate(model, subset))

    tasks = {}
    metric_names = ("balanced_accuracy", "macro_f1", "weighted_f1")
    for task in model.schema.task_names:
        entry = {}
        for metric in metric_names:
            vals = np.array([run[task][metric] for run in per_run])
            entry[metric] = {"mean": float(vals.mean()),
                             "std": float(vals.std(ddof=0)),
                             "per_run": [float(v) for v in vals]}
        entry["confusion"] = (np.sum([np.array(run[task]["confusion"])
                                      for run in per_run], axis=0)).tolist()
        tasks[task] = entry
    return {"runs": runs, "tasks": tasks}


def report_to_json(report: dict, extra: Optional[dict] = None) -> str:
    payload = dict(report)
    if extra:
        payload.update(extra)
    return json.dumps(payload, indent=2)
