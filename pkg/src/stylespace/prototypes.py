"""Per-task class prototype banks with EMA tracking.

Prototypes never receive loss gradients; they move only through
p <- m*p + (1-m)*z_c, where z_c is the batch centroid of class c.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import TaskSchema
from .errors import CheckpointError, SchemaError

BANK_FORMAT_VERSION = 1


@dataclass
class PrototypeBank:
    schema: TaskSchema
    embed_dim: int
    momentum: float = 0.99
    prototypes: dict[str, np.ndarray] = field(default_factory=dict)   # task -> C_t x d
    initialized: dict[str, np.ndarray] = field(default_factory=dict)  # task -> C_t bools

    def task_matrix(self, task: str) -> np.ndarray:
        if task not in self.prototypes:
            raise SchemaError(f"unknown task '{task}' in prototype bank")
        return self.prototypes[task]

    def initialized_mask(self, task: str) -> np.ndarray:
        return self.initialized[task]

    def all_initialized(self, task: str) -> bool:
        return bool(self.initialized[task].all())

    def snapshot(self) -> "PrototypeBank":
        return PrototypeBank(
            schema=self.schema, embed_dim=self.embed_dim, momentum=self.momentum,
            prototypes={t: m.copy() for t, m in self.prototypes.items()},
            initialized={t: m.copy() for t, m in self.initialized.items()})


def init_bank(schema: TaskSchema, embed_dim: int, rng: np.random.Generator,
              momentum: float = 0.99, init_scale: float = 0.1) -> PrototypeBank:
    if not (0.0 <= momentum < 1.0):
        raise ValueError(f"momentum must be in [0, 1), got {momentum}")
    protos, masks = {}, {}
    for name, classes in schema.tasks:
        protos[name] = rng.uniform(-init_scale, init_scale, size=(len(classes), embed_dim))
        masks[name] = np.zeros(len(classes), dtype=bool)
    return PrototypeBank(schema=schema, embed_dim=embed_dim, momentum=momentum,
                         prototypes=protos, initialized=masks)


def batch_centroids(z_values: np.ndarray, labels: Sequence[Optional[int]],
                    num_classes: int) -> list[Optional[np.ndarray]]:
    """Mean embedding per class over the labeled members present in the batch;
    classes with no member yield None."""
    z = np.asarray(z_values, dtype=np.float64)
    sums = np.zeros((num_classes, z.shape[1]))
    counts = np.zeros(num_classes, dtype=np.int64)
    for i, y in enumerate(labels):
        if y is None:
            continue
        y = int(y)
        if y < 0:
            continue
        sums[y] += z[i]
        counts[y] += 1
    return [sums[c] / counts[c] if counts[c] > 0 else None for c in range(num_classes)]


def ema_update(bank: PrototypeBank, task: str,
               centroids: Sequence[Optional[np.ndarray]]) -> None:
    """Move each present class's prototype toward its centroid; absent classes
    are untouched bit-for-bit."""
    protos = bank.task_matrix(task)
    mask = bank.initialized[task]
    m = bank.momentum
    for c, z_c in enumerate(centroids):
        if z_c is None:
            continue
        z_c = np.asarray(z_c, dtype=np.float64)
        if z_c.shape != (bank.embed_dim,):
            raise SchemaError(
                f"centroid for task '{task}' class {c} has shape {z_c.shape}, "
                f"expected ({bank.embed_dim},)")
        protos[c] = m * protos[c] + (1.0 - m) * z_c
        mask[c] = True


def bank_to_dict(bank: PrototypeBank) -> dict:
    return {
        "version": BANK_FORMAT_VERSION,
        "momentum": bank.momentum,
        "embed_dim": bank.embed_dim,
        "schema": bank.schema.to_dict(),
        "prototypes": {t: [[float(v) for v in row] for row in m]
                       for t, m in bank.prototypes.items()},
        "initialized": {t: [bool(v) for v in m] for t, m in bank.initialized.items()},
    }


def bank_from_dict(payload: dict, schema: Optional[TaskSchema] = None) -> PrototypeBank:
    version = payload.get("version")
    if version != BANK_FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported prototype bank version {version!r}; this build reads "
            f"version {BANK_FORMAT_VERSION}")
    stored_schema = TaskSchema.from_dict(payload["schema"])
    if schema is not None and stored_schema != schema:
        raise SchemaError("prototype bank was saved against a different schema")
    protos = {t: np.array(m, dtype=np.float64) for t, m in payload["prototypes"].items()}
    masks = {t: np.array(m, dtype=bool) for t, m in payload["initialized"].items()}
    for name, classes in stored_schema.tasks:
        if name not in protos or protos[name].shape[0] != len(classes):
            raise SchemaError(f"prototype bank rows do not match schema for task '{name}'")
    return PrototypeBank(schema=stored_schema, embed_dim=int(payload["embed_dim"]),
                         momentum=float(payload["momentum"]),
                         prototypes=protos, initialized=masks)


def save_bank(bank: PrototypeBank, path) -> None:
    Path(path).write_text(json.dumps(bank_to_dict(bank)) + "\n")


def load_bank(path, schema: Optional[TaskSchema] = None) -> PrototypeBank:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"prototype bank file {path} is corrupt: {exc}") from exc
    return bank_from_dict(payload, schema)
