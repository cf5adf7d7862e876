"""Task-specific projection heads and the caption-side encoder.

Each task owns an independent linear map from the shared D-dim space into its
d-dim subspace. Captions go through a bag-of-tokens encoder (mean of learned
token embeddings) followed by independent per-task projections, so the text
side lands in the same subspaces the prototypes live in.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import TaskSchema
from .encoder import xavier_uniform
from .errors import CaptionError

UNKNOWN_TOKEN = "<unk>"
TEMPLATE_TOKENS = ("a", "voice")


@dataclass
class ProjectionHeads:
    task_names: list[str]
    weights: dict[str, Tensor] = field(default_factory=dict)  # task -> D x d
    biases: dict[str, Tensor] = field(default_factory=dict)   # task -> 1 x d

    def named_parameters(self) -> list[tuple[str, Tensor, bool]]:
        out = []
        for task in self.task_names:
            out.append((f"heads.{task}.W", self.weights[task], True))
            out.append((f"heads.{task}.b", self.biases[task], False))
        return out


def init_heads(schema: TaskSchema, meta_dim: int, task_dim: int,
               rng: np.random.Generator, dtype=np.float64) -> ProjectionHeads:
    heads = ProjectionHeads(task_names=list(schema.task_names))
    for task in heads.task_names:
        heads.weights[task] = Tensor(xavier_uniform(rng, meta_dim, task_dim, dtype),
                                     requires_grad=True, name=f"heads.{task}.W")
        heads.biases[task] = Tensor(np.zeros((1, task_dim), dtype=dtype),
                                    requires_grad=True, name=f"heads.{task}.b")
    return heads


def project_all(z_meta: Tensor, heads: ProjectionHeads) -> list[Tensor]:
    """Apply every task head to a batch of shared embeddings."""
    return [ag.add(ag.matmul(z_meta, heads.weights[t]), heads.biases[t])
            for t in heads.task_names]


# ---------------------------------------------------------------------------
# captions
# ---------------------------------------------------------------------------

def tokenize(caption: str) -> list[str]:
    return caption.lower().split()


def build_vocab(schema: TaskSchema) -> list[str]:
    """Deterministic token vocabulary: class-name tokens, template words, and
    a reserved unknown slot."""
    tokens: dict[str, None] = {UNKNOWN_TOKEN: None}
    for word in TEMPLATE_TOKENS:
        tokens.setdefault(word, None)
    for _, classes in schema.tasks:
        for cls in classes:
            for word in tokenize(cls):
                tokens.setdefault(word, None)
    return list(tokens)


@dataclass
class CaptionEncoderParams:
    vocab: list[str]
    text_dim: int
    task_names: list[str]
    table: Tensor = None                                     # vocab x D_text
    proj_w: dict[str, Tensor] = field(default_factory=dict)  # task -> D_text x d
    proj_b: dict[str, Tensor] = field(default_factory=dict)  # task -> 1 x d
    token_index: dict[str, int] = field(default_factory=dict)

    def named_parameters(self) -> list[tuple[str, Tensor, bool]]:
        out = [("caption_encoder.table", self.table, False)]
        for task in self.task_names:
            out.append((f"caption_encoder.{task}.W", self.proj_w[task], True))
            out.append((f"caption_encoder.{task}.b", self.proj_b[task], False))
        return out


def init_caption_encoder(schema: TaskSchema, text_dim: int, task_dim: int,
                         rng: np.random.Generator, dtype=np.float64) -> CaptionEncoderParams:
    vocab = build_vocab(schema)
    ce = CaptionEncoderParams(vocab=vocab, text_dim=text_dim,
                              task_names=list(schema.task_names))
    ce.table = Tensor(xavier_uniform(rng, len(vocab), text_dim, dtype),
                      requires_grad=True, name="caption_encoder.table")
    for task in ce.task_names:
        ce.proj_w[task] = Tensor(xavier_uniform(rng, text_dim, task_dim, dtype),
                                 requires_grad=True, name=f"caption_encoder.{task}.W")
        ce.proj_b[task] = Tensor(np.zeros((1, task_dim), dtype=dtype),
                                 requires_grad=True, name=f"caption_encoder.{task}.b")
    ce.token_index = {tok: i for i, tok in enumerate(vocab)}
    return ce


def encode_caption(caption: str, ce: CaptionEncoderParams) -> dict[str, Tensor]:
    """Mean of token embeddings, projected into each task subspace (1 x d each).
    Unknown tokens hit the reserved slot; token order does not matter."""
    tokens = tokenize(caption or "")
    if not tokens:
        raise CaptionError("caption is empty")
    unk = ce.token_index[UNKNOWN_TOKEN]
    ids = [ce.token_index.get(tok, unk) for tok in tokens]
    pooled = ag.col_mean(ag.gather_rows(ce.table, ids))  # 1 x D_text
    return {task: ag.add(ag.matmul(pooled, ce.proj_w[task]), ce.proj_b[task])
            for task in ce.task_names}


def parse_caption_classes(caption: str, schema: TaskSchema) -> list[Optional[int]]:
    """Scan caption tokens for class names (longest class name first; matched
    tokens are consumed). At most one class mention per task; a second mention
    for the same task is an error.
    """
    tokens = tokenize(caption or "")
    consumed = [False] * len(tokens)
    mentions: list[list[tuple[int, str]]] = [[] for _ in schema.tasks]

    entries = []
    for t, (_, classes) in enumerate(schema.tasks):
        for c, cls in enumerate(classes):
            entries.append((t, c, cls, tokenize(cls)))
    entries.sort(key=lambda e: len(e[3]), reverse=True)

    for t, c, cls, words in entries:
        if not words:
            continue
        for start in range(len(tokens) - len(words) + 1):
            span = range(start, start + len(words))
            if any(consumed[k] for k in span):
                continue
            if all(tokens[k] == words[j] for j, k in enumerate(span)):
                for k in span:
                    consumed[k] = True
                mentions[t].append((c, cls))

    result: list[Optional[int]] = [None] * schema.num_tasks
    for t, found in enumerate(mentions):
        if len(found) > 1:
            names = ", ".join(cls for _, cls in found)
            raise CaptionError(
                f"caption mentions multiple classes for task "
                f"'{schema.task_names[t]}': {names}")
        if found:
            result[t] = found[0][0]
    return result
