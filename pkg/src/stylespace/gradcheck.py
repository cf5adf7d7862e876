"""Finite-difference verification of analytic gradients for every loss
component, over a small randomly initialized model. Backs the `grad-check`
CLI command.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autograd as ag
from .data import TaskSchema, generate_synthetic
from .model import Model, init_model
from .trainer import TrainConfig, compute_batch_losses

FD_STEP = 1e-5


def _check_schema() -> TaskSchema:
    return TaskSchema((
        ("gender", ("female", "male")),
        ("emotion", ("happy", "sad", "angry")),
        ("age", ("child", "adult", "senior")),
    ))


def max_relative_error(model: Model, loss_fn: Callable[[], ag.Tensor],
                       step: float = FD_STEP) -> float:
    """Compare d(loss)/d(param) from backward against central differences for
    every trainable value. Relative error uses max(|analytic|, |numeric|, 1)
    as the scale, so near-zero gradients compare absolutely."""
    params = model.named_parameters()
    ag.clear_grads(t for _, t, _ in params)
    ag.backward(loss_fn())
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.values))
                for name, t, _ in params}

    worst = 0.0
    for name, t, _ in params:
        flat = t.values.reshape(-1)
        grad_flat = analytic[name].reshape(-1)
        for k in range(flat.size):
            keep = flat[k]
            flat[k] = keep + step
            up = loss_fn().item()
            flat[k] = keep - step
            down = loss_fn().item()
            flat[k] = keep
            numeric = (up - down) / (2.0 * step)
            scale = max(abs(grad_flat[k]), abs(numeric), 1.0)
            worst = max(worst, abs(grad_flat[k] - numeric) / scale)
    return worst


def run_grad_check(seed: int = 3, batch_size: int = 5) -> dict[str, float]:
    """Max relative gradient error per loss component on a seeded batch."""
    schema = _check_schema()
    config = TrainConfig(batch_size=max(2, batch_size), max_steps=0, seed=seed,
                         meta_dim=12, task_dim=6, text_dim=10, hidden=8)
    data = generate_synthetic(schema, n=batch_size, feat_dim=7, num_frames=3,
                              noise_sigma=0.3, seed=seed)
    model = init_model(schema, config.backbone_kind, 7, config.hidden,
                       config.meta_dim, config.task_dim, config.text_dim,
                       config.momentum, seed)
    # mark every prototype initialized so both alignment losses participate
    rng = np.random.default_rng([seed, 9])
    for task, _ in schema.tasks:
        model.bank.prototypes[task] = rng.normal(size=model.bank.prototypes[task].shape)
        model.bank.initialized[task][:] = True
    batch = data.samples[:batch_size]

    def component(name: str) -> Callable[[], ag.Tensor]:
        def build():
            breakdown, _ = compute_batch_losses(model, batch, config)
            return {
                "meta": breakdown.meta,
                "scl": breakdown.scl_per_task[0] if name == "scl" else None,
                "pal_speech": breakdown.pal_speech,
                "pal_text": breakdown.pal_text,
                "total": breakdown.total,
            }[name]
        return build

    results = {}
    for name in ("meta", "pal_speech", "pal_text", "total"):
        results[name] = max_relative_error(model, component(name))

    for mode in ("as_written", "standard"):
        cfg = TrainConfig(batch_size=config.batch_size, max_steps=0, seed=seed,
                          meta_dim=config.meta_dim, task_dim=config.task_dim,
                          text_dim=config.text_dim, hidden=config.hidden,
                          denominator_mode=mode)

        def scl_loss(cfg=cfg):
            breakdown, _ = compute_batch_losses(model, batch, cfg)
            total = breakdown.scl_per_task[0]
            for term in breakdown.scl_per_task[1:]:
                total = ag.add(total, term)
            return total

        results[f"scl_{mode}"] = max_relative_error(model, scl_loss)
    return results
