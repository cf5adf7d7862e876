"""Downstream applications: prototype classification, style-vector export,
embedding-swap manipulation, and caption classification.

Everything here is read-only over a model snapshot.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .data import Dataset, LabeledSample
from .errors import InferenceError
from .model import Model
from .projection import encode_caption, parse_caption_classes

COSINE_EPS = 1e-8


def _cos(u: np.ndarray, v: np.ndarray) -> float:
    # identical vectors are collinear by construction; bypass norm rounding
    if np.array_equal(u, v):
        return 1.0
    nu = max(float(np.linalg.norm(u)), COSINE_EPS)
    nv = max(float(np.linalg.norm(v)), COSINE_EPS)
    return float(np.dot(u, v) / (nu * nv))


@dataclass
class StyleVector:
    """Per-task embeddings in schema task order plus their concatenation."""

    task_names: list[str]
    parts: list[np.ndarray]          # each 1-D of length d

    @property
    def concat(self) -> np.ndarray:
        return np.concatenate(self.parts)

    def part(self, task: str) -> np.ndarray:
        return self.parts[self.task_names.index(task)]

    def replace_part(self, task: str, value: np.ndarray) -> "StyleVector":
        parts = [p.copy() for p in self.parts]
        parts[self.task_names.index(task)] = np.asarray(value, dtype=np.float64)
        return StyleVector(task_names=list(self.task_names), parts=parts)


@dataclass
class ManipulationReport:
    task: str
    source_class: str
    target_class: str
    orig_sim: float
    manip_sim: float
    reclass_hit: bool
    other_tasks_stable: bool


def _frames_of(sample: Union[LabeledSample, np.ndarray]) -> np.ndarray:
    return sample.frames if isinstance(sample, LabeledSample) else np.asarray(sample)


def _task_embeddings(sample, model: Model) -> list[np.ndarray]:
    _, z_per_task = model.embed([_frames_of(sample)])
    return [z.values[0].copy() for z in z_per_task]


def _classify_vector(vec: np.ndarray, protos: np.ndarray) -> tuple[int, float]:
    sims = [_cos(vec, protos[c]) for c in range(protos.shape[0])]
    best = int(np.argmax(sims))     # first max wins: ties break to lowest index
    return best, sims[best]


def _require_initialized(model: Model, task: str) -> np.ndarray:
    mask = model.bank.initialized_mask(task)
    if not mask.all():
        missing = [cls for cls, ok in zip(model.schema.classes(task), mask) if not ok]
        raise InferenceError(
            f"task '{task}' has uninitialized prototypes for classes {missing}")
    return model.bank.task_matrix(task)


def classify(sample, model: Model,
             tasks: Optional[Sequence[str]] = None) -> dict[str, tuple[str, float]]:
    """Nearest-prototype (cosine) class per task: {task: (class_name, similarity)}."""
    task_names = list(tasks) if tasks is not None else model.schema.task_names
    embs = _task_embeddings(sample, model)
    result = {}
    for task in task_names:
        t = model.schema.task_names.index(task)
        protos = _require_initialized(model, task)
        idx, sim = _classify_vector(embs[t], protos)
        result[task] = (model.schema.classes(task)[idx], sim)
    return result


def extract_style(sample, model: Model) -> StyleVector:
    """Concatenated task-specific embeddings, the TTS-conditioning export."""
    embs = _task_embeddings(sample, model)
    return StyleVector(task_names=list(model.schema.task_names), parts=embs)


def manipulate(sample, task: str, target_class: str, model: Model,
               alpha: float = 1.0) -> tuple[StyleVector, ManipulationReport]:
    """Swap one task's slice toward the target class prototype.

    The new slice is (1-alpha)*z + alpha*p, rescaled to the original slice's
    magnitude (direction is the contract; downstream use is cosine-based).
    All other slices are returned bit-identical.
    """
    if not (0.0 <= alpha <= 1.0):
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    protos = _require_initialized(model, task)
    classes = model.schema.classes(task)
    if target_class not in classes:
        raise InferenceError(f"unknown class '{target_class}' for task '{task}'")
    target_idx = classes.index(target_class)
    target = protos[target_idx]

    style = extract_style(sample, model)
    original = classify(sample, model)
    z = style.part(task)

    blended = (1.0 - alpha) * z + alpha * target
    z_norm = float(np.linalg.norm(z))
    b_norm = float(np.linalg.norm(blended))
    if b_norm < COSINE_EPS:
        raise InferenceError(
            f"manipulation of task '{task}' collapsed to a zero vector (alpha={alpha})")
    new_slice = blended * (z_norm / b_norm) if z_norm >= COSINE_EPS else blended

    manipulated = style.replace_part(task, new_slice)
    pred_idx, _ = _classify_vector(manipulated.part(task), protos)

    others_stable = True
    for other in model.schema.task_names:
        if other == task:
            continue
        other_protos = _require_initialized(model, other)
        idx, _ = _classify_vector(manipulated.part(other), other_protos)
        if model.schema.classes(other)[idx] != original[other][0]:
            others_stable = False

    report = ManipulationReport(
        task=task,
        source_class=original[task][0],
        target_class=target_class,
        orig_sim=_cos(z, target),
        manip_sim=_cos(manipulated.part(task), target),
        reclass_hit=(pred_idx == target_idx),
        other_tasks_stable=others_stable,
    )
    return manipulated, report


def classify_caption(caption: str, model: Model) -> dict[str, tuple[str, float]]:
    """Classify a style caption's projected embeddings against the prototypes.
    Only tasks the caption actually mentions appear in the result."""
    parsed = parse_caption_classes(caption, model.schema)
    embs = encode_caption(caption, model.caption_encoder)
    result = {}
    for t, task in enumerate(model.schema.task_names):
        if parsed[t] is None:
            continue
        protos = _require_initialized(model, task)
        vec = embs[task].values[0]
        idx, sim = _classify_vector(vec, protos)
        result[task] = (model.schema.classes(task)[idx], sim)
    return result


# ---------------------------------------------------------------------------
# CSV export
# ---------------------------------------------------------------------------

def export_embeddings_csv(model: Model, data: Dataset, path,
                          split_label: str = "all") -> None:
    """One row per sample: id, split, meta_0..meta_{D-1}, then d columns per
    task named <task>_0..; values at 9 significant digits."""
    meta_dim = model.meta_dim
    task_dim = model.task_dim
    header = ["id", "split"]
    header += [f"meta_{i}" for i in range(meta_dim)]
    for task in model.schema.task_names:
        header += [f"{task}_{i}" for i in range(task_dim)]

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        chunk = 256
        for start in range(0, len(data.samples), chunk):
            block = data.samples[start:start + chunk]
            x, z_per_task = model.embed([s.frames for s in block])
            for i, s in enumerate(block):
                row = [s.id, split_label]
                row += [f"{v:.9g}" for v in x.values[i]]
                for z in z_per_task:
                    row += [f"{v:.9g}" for v in z.values[i]]
                writer.writerow(row)


def manipulation_report_csv(reports_by_task: dict[str, list[ManipulationReport]],
                            path) -> None:
    """Aggregate manipulation outcomes per task: mean similarities and the
    target-reclassification accuracy in percent."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task", "orig_sim", "manip_sim", "accuracy"])
        for task, reports in reports_by_task.items():
            if not reports:
                continue
            orig = float(np.mean([r.orig_sim for r in reports]))
            manip = float(np.mean([r.manip_sim for r in reports]))
            acc = 100.0 * float(np.mean([1.0 if r.reclass_hit else 0.0 for r in reports]))
            writer.writerow([task, f"{orig:.4f}", f"{manip:.4f}", f"{acc:.2f}"])
