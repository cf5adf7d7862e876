"""Task schema, labeled samples, JSONL ingestion, and the synthetic generator.

File formats:
  schema JSON   {"tasks": [{"name": str, "classes": [str, ...]}, ...]}
  data JSONL    one record per line:
                {"id": str, "subject": str, "frames": [[float,...],...],
                 "labels": {task: class, ...}, "caption": str|null}
                frames is row-major: F rows of t floats.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ParseError, SchemaError, SplitError


@dataclass(frozen=True)
class TaskSchema:
    """Ordered task list with each task's class vocabulary.

    The single source of truth for label indices: class index = position in
    the task's class list.
    """

    tasks: tuple[tuple[str, tuple[str, ...]], ...]

    def __post_init__(self):
        if len(self.tasks) < 1:
            raise SchemaError("schema needs at least one task")
        names = [t for t, _ in self.tasks]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate task names in schema: {names}")
        for name, classes in self.tasks:
            if len(classes) < 2:
                raise SchemaError(f"task '{name}' needs at least 2 classes")
            if len(set(classes)) != len(classes):
                raise SchemaError(f"duplicate class names in task '{name}'")

    @property
    def task_names(self) -> list[str]:
        return [t for t, _ in self.tasks]

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    def classes(self, task: str) -> tuple[str, ...]:
        for name, classes in self.tasks:
            if name == task:
                return classes
        raise SchemaError(f"unknown task '{task}'")

    def class_counts(self) -> list[int]:
        return [len(c) for _, c in self.tasks]

    def class_index(self, task: str, class_name: str) -> int:
        classes = self.classes(task)
        try:
            return classes.index(class_name)
        except ValueError:
            raise SchemaError(f"unknown class '{class_name}' for task '{task}'") from None

    def to_dict(self) -> dict:
        return {"tasks": [{"name": n, "classes": list(c)} for n, c in self.tasks]}

    @staticmethod
    def from_dict(payload: dict) -> "TaskSchema":
        try:
            tasks = tuple((t["name"], tuple(t["classes"])) for t in payload["tasks"])
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed schema payload: {exc}") from exc
        return TaskSchema(tasks)

    @staticmethod
    def load(path) -> "TaskSchema":
        try:
            payload = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ParseError(f"schema file {path} is not valid JSON: {exc}") from exc
        return TaskSchema.from_dict(payload)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


@dataclass
class LabeledSample:
    """One sample: frame features plus optional per-task labels and caption.

    labels[t] is the class index for task t or None when that task is
    unlabeled (at most one class per task).
    """

    id: str
    subject: str
    frames: np.ndarray                       # F x t
    labels: tuple[Optional[int], ...]
    caption: Optional[str] = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1 or self.frames.shape[1] < 1:
            raise ParseError(f"sample '{self.id}': frames must be a non-empty 2-D matrix")


@dataclass
class Dataset:
    schema: TaskSchema
    samples: list[LabeledSample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def subjects(self) -> list[str]:
        seen: dict[str, None] = {}
        for s in self.samples:
            seen.setdefault(s.subject, None)
        return list(seen)

    def validate(self) -> None:
        counts = self.schema.class_counts()
        for s in self.samples:
            if len(s.labels) != self.schema.num_tasks:
                raise SchemaError(f"sample '{s.id}': expected {self.schema.num_tasks} label slots")
            for t, y in enumerate(s.labels):
                if y is not None and not (0 <= y < counts[t]):
                    raise SchemaError(
                        f"sample '{s.id}': label index {y} out of range for task "
                        f"'{self.schema.task_names[t]}'")


def _record_to_sample(record: dict, schema: TaskSchema, where: str) -> LabeledSample:
    for key in ("id", "subject", "frames"):
        if key not in record:
            raise ParseError(f"{where}: missing required field '{key}'")
    try:
        frames = np.array(record["frames"], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"{where}: malformed frames: {exc}") from exc
    if frames.ndim != 2:
        raise ParseError(f"{where}: frames must be a rectangular matrix")

    raw_labels = record.get("labels") or {}
    labels: list[Optional[int]] = [None] * schema.num_tasks
    for task, class_name in raw_labels.items():
        if task not in schema.task_names:
            raise SchemaError(f"{where}: unknown task '{task}'")
        try:
            idx = schema.class_index(task, class_name)
        except SchemaError as exc:
            raise SchemaError(f"{where}: {exc}") from None
        labels[schema.task_names.index(task)] = idx
    return LabeledSample(id=str(record["id"]), subject=str(record["subject"]),
                         frames=frames, labels=tuple(labels),
                         caption=record.get("caption"))


def load_jsonl(path, schema: TaskSchema) -> Dataset:
    """Load and validate a JSONL dataset; errors carry the offending line number."""
    samples = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            samples.append(_record_to_sample(record, schema, f"{path}:{lineno}"))
    data = Dataset(schema=schema, samples=samples)
    data.validate()
    return data


def write_jsonl(data: Dataset, path) -> None:
    with open(path, "w") as fh:
        for s in data.samples:
            label_names = {}
            for t, y in enumerate(s.labels):
                if y is not None:
                    name, classes = data.schema.tasks[t]
                    label_names[name] = classes[y]
            record = {
                "id": s.id,
                "subject": s.subject,
                "frames": [[float(v) for v in row] for row in s.frames],
                "labels": label_names,
                "caption": s.caption,
            }
            fh.write(json.dumps(record) + "\n")


# ---------------------------------------------------------------------------
# synthetic multi-factor data
# ---------------------------------------------------------------------------

def render_caption(schema: TaskSchema, labels: Sequence[Optional[int]]) -> str:
    """Caption template: "a <class_1> ... <class_T> voice" in task order."""
    words = [classes[labels[t]] for t, (_, classes) in enumerate(schema.tasks)
             if labels[t] is not None]
    return "a " + " ".join(words) + " voice" if words else "a voice"


def class_templates(schema: TaskSchema, feat_dim: int, num_frames: int,
                    seed: int) -> list[list[np.ndarray]]:
    """Per-(task, class) additive patterns: seeded random F x t matrices at
    unit Frobenius norm. Shared by the generator and by nearest-template
    oracles, so both sides see identical patterns for a given seed.
    """
    rng = np.random.default_rng([int(seed), 915])
    templates = []
    for _, classes in schema.tasks:
        per_class = []
        for _ in classes:
            m = rng.standard_normal((feat_dim, num_frames))
            per_class.append(m / np.linalg.norm(m))
        templates.append(per_class)
    return templates


def all_label_combinations(schema: TaskSchema) -> list[tuple[int, ...]]:
    return list(itertools.product(*[range(c) for c in schema.class_counts()]))


def generate_synthetic(schema: TaskSchema, n: int, feat_dim: int, num_frames: int,
                       noise_sigma: float, seed: int,
                       n_subjects: Optional[int] = None) -> Dataset:
    """Seeded synthetic dataset: frames are the sum of one template per task
    plus i.i.d. Gaussian noise (per-entry std = noise_sigma).

    Labels are drawn uniformly per task. Each synthetic subject carries
    exactly one class combination, so a subject-disjoint split is also
    combination-disjoint at the subject level; a sample is attached to a
    uniformly chosen subject among those carrying its combination.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    combos = all_label_combinations(schema)
    if n_subjects is None:
        n_subjects = max(40, len(combos))
    if n_subjects < len(combos):
        raise ValueError(
            f"n_subjects={n_subjects} cannot cover all {len(combos)} class combinations")

    rng = np.random.default_rng([int(seed), 77])
    templates = class_templates(schema, feat_dim, num_frames, seed)

    # every combination gets at least one subject; the remainder are spread
    # round-robin over a shuffled combination order
    combo_order = list(rng.permutation(len(combos)))
    subject_combo = [combos[combo_order[i % len(combos)]] for i in range(n_subjects)]
    by_combo: dict[tuple[int, ...], list[int]] = {}
    for subj, combo in enumerate(subject_combo):
        by_combo.setdefault(combo, []).append(subj)

    samples = []
    counts = schema.class_counts()
    for i in range(n):
        labels = tuple(int(rng.integers(c)) for c in counts)
        owners = by_combo[labels]
        subject = owners[int(rng.integers(len(owners)))]
        frames = np.zeros((feat_dim, num_frames))
        for t, y in enumerate(labels):
            frames += templates[t][y]
        if noise_sigma > 0:
            frames = frames + noise_sigma * rng.standard_normal((feat_dim, num_frames))
        samples.append(LabeledSample(
            id=f"syn{i:06d}",
            subject=f"subj{subject:04d}",
            frames=frames,
            labels=labels,
            caption=render_caption(schema, labels),
        ))
    data = Dataset(schema=schema, samples=samples)
    data.validate()
    return data


def split_subject_independent(data: Dataset, test_fraction: float,
                              seed: int) -> tuple[Dataset, Dataset]:
    """Partition by subject so train and test subject sets are disjoint."""
    if not (0.0 < test_fraction < 1.0):
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    subjects = sorted(data.subjects)
    if len(subjects) < 2:
        raise SplitError(f"need at least 2 distinct subjects, found {len(subjects)}")
    rng = np.random.default_rng([int(seed), 402])
    order = [subjects[i] for i in rng.permutation(len(subjects))]
    n_test = min(max(1, round(test_fraction * len(subjects))), len(subjects) - 1)
    test_subjects = set(order[:n_test])
    train = Dataset(schema=data.schema,
                    samples=[s for s in data.samples if s.subject not in test_subjects])
    test = Dataset(schema=data.schema,
                   samples=[s for s in data.samples if s.subject in test_subjects])
    return train, test
