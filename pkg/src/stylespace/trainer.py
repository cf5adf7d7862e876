"""Training loop: decoupled-weight-decay Adam over all objectives, EMA
prototype updates from pre-step embeddings, loss CSV logging, and resumable
JSON checkpoints.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import Dataset, LabeledSample, TaskSchema
from .errors import CheckpointError, NumericError
from .losses import (LossBreakdown, meta_loss, pair_similarity_weights,
                     prototype_alignment_loss, scl_total, total_loss)
from .model import Model, init_model
from .projection import encode_caption, parse_caption_classes
from .prototypes import bank_from_dict, bank_to_dict, batch_centroids, ema_update

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class TrainConfig:
    batch_size: int = 32
    max_steps: int = 40000
    learning_rate: float = 2e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    tau: float = 1.0
    momentum: float = 0.99
    meta_dim: int = 64           # D
    task_dim: int = 16           # d
    text_dim: int = 32
    hidden: int = 64
    backbone_kind: str = "frame_mlp"
    denominator_mode: str = "as_written"
    seed: int = 0
    precision: str = "float64"
    checkpoint_every: int = 0    # 0 = final checkpoint only

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        for name in ("learning_rate", "beta1", "beta2", "adam_eps", "tau"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")
        if self.max_steps > 40000:
            raise ValueError("max_steps ceiling is 40000")
        if self.precision not in ("float64", "float32"):
            raise ValueError("precision must be 'float64' or 'float32'")

    @property
    def dtype(self):
        return np.float64 if self.precision == "float64" else np.float32


class AdamW:
    """Adam with decoupled weight decay. With zero gradients a step multiplies
    each decayed parameter by exactly (1 - lr * wd)."""

    def __init__(self, config: TrainConfig):
        self.lr = config.learning_rate
        self.wd = config.weight_decay
        self.beta1 = config.beta1
        self.beta2 = config.beta2
        self.eps = config.adam_eps
        self.step_count = 0
        self.moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def step(self, named_params: list[tuple[str, Tensor, bool]]) -> None:
        self.step_count += 1
        b1c = 1.0 - self.beta1 ** self.step_count
        b2c = 1.0 - self.beta2 ** self.step_count
        for name, t, decay in named_params:
            g = t.grad if t.grad is not None else np.zeros_like(t.values)
            if name not in self.moments:
                self.moments[name] = (np.zeros_like(t.values), np.zeros_like(t.values))
            m, v = self.moments[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            if decay and self.wd != 0.0:
                t.values *= (1.0 - self.lr * self.wd)
            t.values -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)

    def state_dict(self) -> dict:
        return {
            "step_count": self.step_count,
            "moments": {k: [m.tolist(), v.tolist()] for k, (m, v) in self.moments.items()},
        }

    def load_state_dict(self, state: dict, dtype) -> None:
        self.step_count = int(state["step_count"])
        self.moments = {k: (np.array(m, dtype=dtype), np.array(v, dtype=dtype))
                        for k, (m, v) in state["moments"].items()}


@dataclass
class TrainState:
    model: Model
    optimizer: AdamW
    config: TrainConfig
    step: int = 0
    epoch_perm: list[int] = field(default_factory=list)
    cursor: int = 0
    rng_state: Optional[dict] = None

    def rng(self) -> np.random.Generator:
        gen = np.random.default_rng([self.config.seed, 5])
        if self.rng_state is not None:
            gen.bit_generator.state = self.rng_state
        return gen


def init_state(schema: TaskSchema, feat_dim: int, config: TrainConfig) -> TrainState:
    model = init_model(schema, config.backbone_kind, feat_dim, config.hidden,
                       config.meta_dim, config.task_dim, config.text_dim,
                       config.momentum, config.seed, dtype=config.dtype)
    return TrainState(model=model, optimizer=AdamW(config), config=config)


def compute_batch_losses(model: Model, batch: list[LabeledSample],
                         config: TrainConfig) -> tuple[LossBreakdown, list[Tensor]]:
    """Forward pass for one batch; returns the breakdown plus the per-task
    projected embeddings (reused for the EMA prototype update)."""
    schema = model.schema
    labels = [s.labels for s in batch]
    batch_size = len(batch)

    x, z_per_task = model.embed([s.frames for s in batch])
    weights = pair_similarity_weights(labels)
    l_meta = meta_loss(x, weights, tau=config.tau)
    l_scl_sum, scl_terms = scl_total(z_per_task, labels, tau=config.tau,
                                     denominator_mode=config.denominator_mode)

    pal_speech = ag.scalar(0.0, dtype=config.dtype)
    for t, (task, _) in enumerate(schema.tasks):
        term = prototype_alignment_loss(
            z_per_task[t], [s.labels[t] for s in batch],
            model.bank.task_matrix(task),
            active=model.bank.initialized_mask(task))
        pal_speech = ag.add(pal_speech, term)

    # caption side: encode each distinct caption once, reuse rows per task
    encoded: dict[str, dict[str, Tensor]] = {}
    parsed: dict[str, list[Optional[int]]] = {}
    for s in batch:
        if s.caption and s.caption not in encoded:
            encoded[s.caption] = encode_caption(s.caption, model.caption_encoder)
            parsed[s.caption] = parse_caption_classes(s.caption, schema)

    pal_text = ag.scalar(0.0, dtype=config.dtype)
    for t, (task, _) in enumerate(schema.tasks):
        rows, row_labels = [], []
        for s in batch:
            if not s.caption:
                continue
            cls = parsed[s.caption][t]
            if cls is None:
                continue
            rows.append(encoded[s.caption][task])
            row_labels.append(cls)
        if not rows:
            continue
        z_text = ag.concat_rows(rows)
        term = prototype_alignment_loss(
            z_text, row_labels, model.bank.task_matrix(task),
            active=model.bank.initialized_mask(task), batch_denom=batch_size)
        pal_text = ag.add(pal_text, term)

    breakdown = total_loss(l_meta, scl_terms, pal_speech, pal_text)
    return breakdown, z_per_task


def train_step(state: TrainState, batch: list[LabeledSample]) -> LossBreakdown:
    """One optimization step: forward, backward, AdamW update, then the EMA
    prototype update from this batch's pre-step embeddings."""
    model = state.model
    config = state.config
    breakdown, z_per_task = compute_batch_losses(model, batch, config)

    for name, value in breakdown.component_values(model.schema.task_names).items():
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss component '{name}' at step {state.step}")

    params = model.named_parameters()
    ag.clear_grads(t for _, t, _ in params)
    ag.backward(breakdown.total)
    state.optimizer.step(params)

    for t, (task, classes) in enumerate(model.schema.tasks):
        centroids = batch_centroids(z_per_task[t].values,
                                    [s.labels[t] for s in batch], len(classes))
        ema_update(model.bank, task, centroids)

    state.step += 1
    return breakdown


def _next_batch(state: TrainState, samples: list[LabeledSample],
                rng: np.random.Generator) -> list[LabeledSample]:
    bsz = state.config.batch_size
    per_epoch = len(samples) // bsz
    if per_epoch < 1:
        raise ValueError(
            f"dataset of {len(samples)} samples cannot fill a batch of {bsz}")
    if state.cursor + bsz > per_epoch * bsz or not state.epoch_perm:
        state.epoch_perm = [int(i) for i in rng.permutation(len(samples))]
        state.cursor = 0
    idx = state.epoch_perm[state.cursor:state.cursor + bsz]
    state.cursor += bsz
    return [samples[i] for i in idx]


def run_training(data: Dataset, config: TrainConfig,
                 state: Optional[TrainState] = None,
                 loss_log_path=None,
                 checkpoint_path=None) -> TrainState:
    """Train to config.max_steps (resuming from `state` if given), appending
    one CSV row per step and checkpointing per config.checkpoint_every."""
    data.validate()
    if state is None:
        feat_dim = data.samples[0].frames.shape[0]
        state = init_state(data.schema, feat_dim, config)
    rng = state.rng()

    log_fh = None
    if loss_log_path is not None:
        fresh = not Path(loss_log_path).exists() or state.step == 0
        log_fh = open(loss_log_path, "w" if fresh else "a")
        if fresh:
            cols = ["step", "meta"]
            cols += [f"scl_{t}" for t in data.schema.task_names]
            cols += ["pal_speech", "pal_text", "total"]
            log_fh.write(",".join(cols) + "\n")
    try:
        while state.step < config.max_steps:
            batch = _next_batch(state, data.samples, rng)
            breakdown = train_step(state, batch)
            if log_fh is not None:
                vals = breakdown.component_values(data.schema.task_names)
                row = [str(state.step - 1)] + [repr(v) for v in vals.values()]
                log_fh.write(",".join(row) + "\n")
            if (checkpoint_path is not None and config.checkpoint_every > 0
                    and state.step % config.checkpoint_every == 0):
                state.rng_state = rng.bit_generator.state
                save_checkpoint(state, checkpoint_path)
    finally:
        if log_fh is not None:
            log_fh.close()
    state.rng_state = rng.bit_generator.state
    if checkpoint_path is not None:
        save_checkpoint(state, checkpoint_path)
    return state


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _params_to_dict(named) -> dict:
    return {name: t.values.tolist() for name, t, _ in named}


def _load_section(named, payload: dict, section: str) -> None:
    for name, t, _ in named:
        if name not in payload:
            raise CheckpointError(f"checkpoint is missing parameter '{name}' in '{section}'")
        arr = np.array(payload[name], dtype=t.values.dtype)
        if arr.shape != t.values.shape:
            raise CheckpointError(
                f"checkpoint parameter '{name}' has shape {arr.shape}, "
                f"expected {t.values.shape}")
        t.values = arr


def save_checkpoint(state: TrainState, path) -> None:
    model = state.model
    payload = {
        "version": CHECKPOINT_FORMAT_VERSION,
        "config": asdict(state.config),
        "schema": model.schema.to_dict(),
        "feat_dim": model.encoder.feat_dim,
        "step": state.step,
        "encoder": _params_to_dict(model.encoder.named_parameters()),
        "heads": _params_to_dict(model.heads.named_parameters()),
        "caption_encoder": _params_to_dict(model.caption_encoder.named_parameters()),
        "caption_vocab": model.caption_encoder.vocab,
        "prototype_bank": bank_to_dict(model.bank),
        "optimizer": state.optimizer.state_dict(),
        "epoch_perm": state.epoch_perm,
        "cursor": state.cursor,
        "rng_state": state.rng_state,
    }
    Path(path).write_text(json.dumps(payload) + "\n")


def load_checkpoint(path) -> TrainState:
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    version = payload.get("version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {version!r}; this build reads "
            f"version {CHECKPOINT_FORMAT_VERSION}")
    config = TrainConfig(**payload["config"])
    schema = TaskSchema.from_dict(payload["schema"])
    state = init_state(schema, int(payload["feat_dim"]), config)
    model = state.model

    _load_section(model.encoder.named_parameters(), payload["encoder"], "encoder")
    _load_section(model.heads.named_parameters(), payload["heads"], "heads")
    if payload.get("caption_vocab") != model.caption_encoder.vocab:
        raise CheckpointError("checkpoint caption vocabulary does not match schema")
    _load_section(model.caption_encoder.named_parameters(),
                  payload["caption_encoder"], "caption_encoder")
    model.bank = bank_from_dict(payload["prototype_bank"], schema)
    state.optimizer.load_state_dict(payload["optimizer"], config.dtype)
    state.step = int(payload["step"])
    state.epoch_perm = [int(i) for i in payload["epoch_perm"]]
    state.cursor = int(payload["cursor"])
    state.rng_state = payload["rng_state"]
    return state
