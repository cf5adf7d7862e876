"""Model container: encoder, projection heads, caption encoder, prototype bank."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autograd import Tensor
from .data import TaskSchema
from .encoder import EncoderParams, count_parameters, encode_batch, init_encoder
from .projection import (CaptionEncoderParams, ProjectionHeads, init_caption_encoder,
                         init_heads, project_all)
from .prototypes import PrototypeBank, init_bank


@dataclass
class Model:
    schema: TaskSchema
    encoder: EncoderParams
    heads: ProjectionHeads
    caption_encoder: CaptionEncoderParams
    bank: PrototypeBank

    @property
    def meta_dim(self) -> int:
        return self.encoder.embed_dim

    @property
    def task_dim(self) -> int:
        return self.bank.embed_dim

    def named_parameters(self) -> list[tuple[str, Tensor, bool]]:
        """All trainable tensors as (name, tensor, weight_decay_applies), in a
        fixed order. The prototype bank is not trainable and is absent here."""
        return (self.encoder.named_parameters()
                + self.heads.named_parameters()
                + self.caption_encoder.named_parameters())

    def embed(self, frames_batch: Sequence[np.ndarray]) -> tuple[Tensor, list[Tensor]]:
        """Shared embedding and its per-task projections for a batch."""
        x = encode_batch(frames_batch, self.encoder)
        return x, project_all(x, self.heads)

    def section_param_counts(self) -> dict[str, int]:
        counts = {
            "encoder": count_parameters(self.encoder),
            "heads": sum(t.values.size for _, t, _ in self.heads.named_parameters()),
            "caption_encoder": sum(t.values.size
                                   for _, t, _ in self.caption_encoder.named_parameters()),
        }
        counts["total_trainable"] = sum(counts.values())
        counts["prototypes_non_trainable"] = sum(
            m.size for m in self.bank.prototypes.values())
        return counts


def init_model(schema: TaskSchema, backbone_kind: str, feat_dim: int, hidden: int,
               meta_dim: int, task_dim: int, text_dim: int, momentum: float,
               seed: int, dtype=np.float64) -> Model:
    """Build a freshly initialized model; each section gets its own seeded
    stream so adding tasks does not reshuffle encoder init."""
    enc_rng = np.random.default_rng([int(seed), 1])
    heads_rng = np.random.default_rng([int(seed), 2])
    text_rng = np.random.default_rng([int(seed), 3])
    proto_rng = np.random.default_rng([int(seed), 4])
    return Model(
        schema=schema,
        encoder=init_encoder(backbone_kind, feat_dim, hidden, meta_dim, enc_rng, dtype),
        heads=init_heads(schema, meta_dim, task_dim, heads_rng, dtype),
        caption_encoder=init_caption_encoder(schema, text_dim, task_dim, text_rng, dtype),
        bank=init_bank(schema, task_dim, proto_rng, momentum=momentum),
    )
