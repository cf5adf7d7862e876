"""Frame-matrix encoders producing fixed-width embeddings.

Three desk-scale backbones behind one contract (B samples of F x t frames in,
B x D embedding out, any t):

  frame_mlp       mean over time frames, then a 2-layer tanh network
  recurrent       tanh RNN over frames, final hidden state, linear readout
  attention_pool  one learned query scores frames, softmax-weighted pool,
                  linear readout
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ShapeError

BACKBONES = ("frame_mlp", "recurrent", "attention_pool")


@dataclass
class EncoderParams:
    backbone_kind: str
    feat_dim: int            # F
    hidden: int
    embed_dim: int           # D
    params: dict[str, Tensor] = field(default_factory=dict)

    def named_parameters(self) -> list[tuple[str, Tensor, bool]]:
        """(name, tensor, weight_decay_applies) triples in a fixed order."""
        out = []
        for name, t in self.params.items():
            decay = not name.startswith("b")
            out.append((f"encoder.{name}", t, decay))
        return out


def xavier_uniform(rng: np.random.Generator, rows: int, cols: int,
                   dtype=np.float64) -> np.ndarray:
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols)).astype(dtype)


def init_encoder(backbone_kind: str, feat_dim: int, hidden: int, embed_dim: int,
                 rng: np.random.Generator, dtype=np.float64) -> EncoderParams:
    if backbone_kind not in BACKBONES:
        raise ValueError(f"unknown backbone '{backbone_kind}'; expected one of {BACKBONES}")
    F, H, D = feat_dim, hidden, embed_dim
    p: dict[str, Tensor] = {}

    def weight(name, r, c):
        p[name] = Tensor(xavier_uniform(rng, r, c, dtype), requires_grad=True,
                         name=f"encoder.{name}")

    def bias(name, c):
        p[name] = Tensor(np.zeros((1, c), dtype=dtype), requires_grad=True,
                         name=f"encoder.{name}")

    if backbone_kind == "frame_mlp":
        weight("W1", F, H); bias("b1", H)
        weight("W2", H, D); bias("b2", D)
    elif backbone_kind == "recurrent":
        weight("Wx", F, H); weight("Wh", H, H); bias("bh", H)
        weight("Wo", H, D); bias("bo", D)
    else:  # attention_pool
        weight("Wk", F, H); weight("q", 1, H)
        weight("Wo", F, D); bias("bo", D)
    return EncoderParams(backbone_kind, F, H, D, p)


def count_parameters(enc: EncoderParams) -> int:
    """Analytic trainable-value count per backbone.

    frame_mlp:       F*H + H + H*D + D
    recurrent:       F*H + H*H + H + H*D + D
    attention_pool:  F*H + H + F*D + D
    """
    F, H, D = enc.feat_dim, enc.hidden, enc.embed_dim
    if enc.backbone_kind == "frame_mlp":
        return F * H + H + H * D + D
    if enc.backbone_kind == "recurrent":
        return F * H + H * H + H + H * D + D
    return F * H + H + F * D + D


def _check_batch(frames_batch: Sequence[np.ndarray], feat_dim: int) -> list[np.ndarray]:
    if not frames_batch:
        raise ShapeError("encode_batch needs at least one sample")
    mats = []
    for i, f in enumerate(frames_batch):
        m = np.asarray(f, dtype=np.float64)
        if m.ndim != 2:
            raise ShapeError(f"sample {i}: frames must be 2-D, got shape {m.shape}")
        if m.shape[0] != feat_dim:
            raise ShapeError(
                f"sample {i}: feature dim {m.shape[0]} does not match encoder F={feat_dim}")
        mats.append(m)
    return mats


def encode_batch(frames_batch: Sequence[np.ndarray], enc: EncoderParams) -> Tensor:
    """Encode a batch of F x t frame matrices into a B x D embedding tensor."""
    mats = _check_batch(frames_batch, enc.feat_dim)
    dtype = next(iter(enc.params.values())).values.dtype
    p = enc.params

    if enc.backbone_kind == "frame_mlp":
        pooled = np.stack([m.mean(axis=1) for m in mats]).astype(dtype)
        h = ag.tanh(ag.add(ag.matmul(Tensor(pooled), p["W1"]), p["b1"]))
        return ag.add(ag.matmul(h, p["W2"]), p["b2"])

    if enc.backbone_kind == "recurrent":
        rows = []
        for m in mats:
            h = Tensor(np.zeros((1, enc.hidden), dtype=dtype))
            for k in range(m.shape[1]):
                x = Tensor(m[:, k].reshape(1, -1).astype(dtype))
                pre = ag.add(ag.add(ag.matmul(x, p["Wx"]), ag.matmul(h, p["Wh"])), p["bh"])
                h = ag.tanh(pre)
            rows.append(ag.add(ag.matmul(h, p["Wo"]), p["bo"]))
        return ag.concat_rows(rows)

    # attention_pool: scores_k = <q, Wk^T x_k> / sqrt(H)
    rows = []
    inv_sqrt = 1.0 / np.sqrt(enc.hidden)
    for m in mats:
        ft = Tensor(m.T.astype(dtype))                      # t x F
        keys = ag.matmul(ft, p["Wk"])                       # t x H
        scores = ag.transpose(ag.matmul(keys, ag.transpose(p["q"])))  # 1 x t
        attn = ag.softmax_rows(ag.scale(scores, inv_sqrt))
        pooled = ag.matmul(attn, ft)                        # 1 x F
        rows.append(ag.add(ag.matmul(pooled, p["Wo"]), p["bo"]))
    return ag.concat_rows(rows)
