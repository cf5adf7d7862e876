"""Training objectives.

All losses act on cosine similarities and average over the full batch size B;
samples excluded by a missing label (or an empty positive set, or an
uninitialized prototype class) contribute 0 without shrinking the 1/B
denominator.

The per-task contrastive loss has two denominator modes:
  as_written   term = log( e^{cos(z_i,z_j)/tau} / sum_{k != i} e^{cos(z_k,z_j)/tau} )
  standard     denominator anchored at z_i: sum_{k != i} e^{cos(z_i,z_k)/tau}
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autograd as ag
from .autograd import COSINE_EPS, Tensor
from .errors import GraphError

DENOMINATOR_MODES = ("as_written", "standard")


class DegenerateBatchError(GraphError):
    """Batch too small for a pairwise loss."""


@dataclass
class PairWeights:
    """Graded pair-similarity weights over a batch.

    w[i,j] = (#tasks where i and j are both labeled and agree)
             / (#tasks where both are labeled), 0 when nothing is co-labeled.
    w_hat row-normalizes w over j != i; rows with zero off-diagonal mass are
    flagged invalid and left all-zero.
    """

    w: np.ndarray
    w_hat: np.ndarray
    valid_row: np.ndarray


def _label_matrix(labels: Sequence[Sequence[Optional[int]]]) -> np.ndarray:
    """Rows of per-task label indices with -1 marking a missing label."""
    return np.array([[-1 if y is None else int(y) for y in row] for row in labels],
                    dtype=np.int64)


def pair_similarity_weights(labels: Sequence[Sequence[Optional[int]]]) -> PairWeights:
    y = _label_matrix(labels)
    batch = y.shape[0]
    if batch < 2:
        raise DegenerateBatchError(f"pair weights need a batch of >= 2, got {batch}")
    present = y >= 0
    both = present[:, None, :] & present[None, :, :]
    agree = both & (y[:, None, :] == y[None, :, :])
    denom = both.sum(axis=2)
    w = np.where(denom > 0, agree.sum(axis=2) / np.maximum(denom, 1), 0.0)
    np.fill_diagonal(w, 0.0)

    mass = w.sum(axis=1)
    valid = mass > 0
    w_hat = np.zeros_like(w)
    w_hat[valid] = w[valid] / mass[valid, None]
    return PairWeights(w=w, w_hat=w_hat, valid_row=valid)


def meta_loss(embeddings: Tensor, weights: PairWeights, tau: float = 1.0) -> Tensor:
    """Graded-similarity regularizer on the shared embedding space.

    -(1/B) * sum_i sum_{j != i} w_hat[i,j] * log p[i,j], where log p is the
    diagonal-masked row softmax of pairwise cosine similarities / tau.
    Invalid rows (no co-labeled partner) contribute 0.
    """
    batch = embeddings.shape[0]
    if batch < 2:
        raise DegenerateBatchError(f"meta_loss needs a batch of >= 2, got {batch}")
    sims = ag.scale(ag.cosine_sim_matrix(embeddings, embeddings), 1.0 / tau)
    log_p = ag.log_softmax_row_masked(sims, exclude_diagonal=True)
    weighted = ag.mul(log_p, Tensor(weights.w_hat))
    return ag.scale(ag.sum_all(weighted), -1.0 / batch)


def _positive_weights(y: np.ndarray) -> np.ndarray:
    """Row i holds 1/|P_i| on positives j (j != i, same label); zero rows for
    unlabeled anchors or empty positive sets."""
    batch = y.shape[0]
    same = (y[:, None] == y[None, :]) & (y[:, None] >= 0) & (y[None, :] >= 0)
    np.fill_diagonal(same, False)
    counts = same.sum(axis=1)
    w = np.zeros((batch, batch))
    live = counts > 0
    w[live] = same[live] / counts[live, None]
    return w


def supervised_contrastive_loss(z: Tensor, labels: Sequence[Optional[int]],
                                tau: float = 1.0,
                                denominator_mode: str = "as_written") -> Tensor:
    """Per-task supervised contrastive loss over one task subspace."""
    if denominator_mode not in DENOMINATOR_MODES:
        raise ValueError(f"denominator_mode must be one of {DENOMINATOR_MODES}")
    batch = z.shape[0]
    if batch < 2:
        raise DegenerateBatchError(f"contrastive loss needs a batch of >= 2, got {batch}")
    y = np.array([-1 if v is None else int(v) for v in labels], dtype=np.int64)
    pos = _positive_weights(y)
    if not pos.any():
        return ag.scalar(0.0, dtype=z.values.dtype)

    sims = ag.scale(ag.cosine_sim_matrix(z, z), 1.0 / tau)
    if denominator_mode == "standard":
        log_p = ag.log_softmax_row_masked(sims, exclude_diagonal=True)
    else:
        # log p[i,j] = s[i,j] - log sum_{k != i} e^{s[k,j]}; a constant shift
        # keeps exp() tame and cancels exactly.
        shift = float(sims.values.max())
        shifted = ag.sub(sims, ag.scalar(shift, dtype=sims.values.dtype))
        e = ag.exp(shifted)
        denom = ag.sub(ag.col_sum(e), e)      # [i,j] -> column sum minus own entry
        log_p = ag.sub(shifted, ag.log(denom))
    picked = ag.mul(log_p, Tensor(pos))
    return ag.scale(ag.sum_all(picked), -1.0 / batch)


def scl_total(z_per_task: Sequence[Tensor],
              labels: Sequence[Sequence[Optional[int]]],
              tau: float = 1.0,
              denominator_mode: str = "as_written") -> tuple[Tensor, list[Tensor]]:
    """Sum of per-task contrastive losses; also returns the per-task terms."""
    y = _label_matrix(labels)
    per_task = [supervised_contrastive_loss(z, y[:, t], tau, denominator_mode)
                for t, z in enumerate(z_per_task)]
    total = per_task[0]
    for term in per_task[1:]:
        total = ag.add(total, term)
    return total, per_task


def prototype_alignment_loss(z: Tensor, labels: Sequence[Optional[int]],
                             prototypes: np.ndarray,
                             active: Optional[Sequence[bool]] = None,
                             batch_denom: Optional[int] = None,
                             eps: float = COSINE_EPS) -> Tensor:
    """Mean (1 - cosine) pull of each labeled embedding toward its class
    prototype. Prototypes are constants: no gradient reaches them.

    `active` masks classes whose prototype has not yet received an EMA update;
    their samples contribute 0. `batch_denom` overrides the 1/B denominator
    (used when z holds only a labeled subset of a larger batch).
    """
    protos = np.asarray(prototypes, dtype=np.float64)
    batch = z.shape[0]
    denom = batch if batch_denom is None else int(batch_denom)
    keep, classes = [], []
    for i, y in enumerate(labels):
        if y is None:
            continue
        y = int(y)
        if not (0 <= y < protos.shape[0]):
            raise IndexError(f"label index {y} out of range for {protos.shape[0]} prototypes")
        if active is not None and not active[y]:
            continue
        keep.append(i)
        classes.append(y)
    if not keep:
        return ag.scalar(0.0, dtype=z.values.dtype)
    z_sel = ag.gather_rows(z, keep)
    p_sel = Tensor(protos[classes].astype(z.values.dtype))
    cos = ag.cosine_sim_rows(z_sel, p_sel, eps)
    one_minus = ag.sub(Tensor(np.ones_like(cos.values)), cos)
    return ag.scale(ag.sum_all(one_minus), 1.0 / denom)


@dataclass
class LossBreakdown:
    """All objective components for one batch, kept as graph scalars."""

    meta: Tensor
    scl_per_task: list[Tensor]
    pal_speech: Tensor
    pal_text: Tensor
    total: Tensor

    def component_values(self, task_names: Sequence[str]) -> dict[str, float]:
        vals = {"meta": self.meta.item()}
        for name, term in zip(task_names, self.scl_per_task):
            vals[f"scl_{name}"] = term.item()
        vals["pal_speech"] = self.pal_speech.item()
        vals["pal_text"] = self.pal_text.item()
        vals["total"] = self.total.item()
        return vals


def total_loss(meta: Tensor, scl_per_task: Sequence[Tensor],
               pal_speech: Tensor, pal_text: Tensor) -> LossBreakdown:
    """Unweighted sum of all components (no coefficients)."""
    scl_sum = scl_per_task[0]
    for term in scl_per_task[1:]:
        scl_sum = ag.add(scl_sum, term)
    total = ag.add(ag.add(ag.add(meta, scl_sum), pal_speech), pal_text)
    return LossBreakdown(meta=meta, scl_per_task=list(scl_per_task),
                         pal_speech=pal_speech, pal_text=pal_text, total=total)
