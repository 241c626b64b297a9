"""Short-term branch: self-attention blocks over the graph-refined sequence
and the in-batch target contrastive loss.

Attention is bidirectional over the observed prefix; padded keys are masked
out.  The short-term preference is the last valid row of the final block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import F, Tensor
from .numerics.tensor import layer_norm_rows


class EmptySequenceError(ValueError):
    """Raised when a sequence has no valid (non-padded) position."""


def _uniform(rng, shape, d, dtype):
    bound = 1.0 / math.sqrt(d)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def _fill(value, d, dtype):
    return Tensor(np.full(d, value, dtype=dtype), requires_grad=True)


@dataclass
class SABBlock:
    wq: Tensor  # d x d, heads concatenated column-wise
    wk: Tensor
    wv: Tensor
    wo: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor

    @classmethod
    def init(cls, d, rng, dtype=np.float64) -> "SABBlock":
        mats = [_uniform(rng, (d, d), d, dtype) for _ in range(6)]
        wq, wk, wv, wo, w1, w2 = mats
        return cls(wq, wk, wv, wo, w1, _fill(0.0, d, dtype), w2, _fill(0.0, d, dtype),
                   _fill(1.0, d, dtype), _fill(0.0, d, dtype), _fill(1.0, d, dtype), _fill(0.0, d, dtype))

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{k}": v for k, v in vars(self).items()}


@dataclass
class SABParams:
    blocks: list[SABBlock]
    position: Tensor  # n_max x d
    heads: int = 1
    keep: float = 1.0

    def __post_init__(self):
        d = self.position.shape[1]
        if self.heads < 1 or d % self.heads:
            raise ValueError(f"embedding size {d} is not divisible by {self.heads} heads")

    @classmethod
    def init(cls, d, n_max, blocks, heads, rng, keep=1.0, dtype=np.float64) -> "SABParams":
        return cls([SABBlock.init(d, rng, dtype) for _ in range(blocks)],
                   _uniform(rng, (n_max, d), d, dtype), heads, keep)

    def named(self) -> dict[str, Tensor]:
        out = {"sab.position": self.position}
        for k, b in enumerate(self.blocks):
            out.update(b.named(f"sab.{k}"))
        return out


@dataclass
class ShortTermOutput:
    encoded: Tensor  # (B, n, d)
    z: Tensor  # (B, d)
    attention: list[Tensor]  # per block, (B, h, n, n)


def last_valid_index(mask: np.ndarray) -> np.ndarray:
    """Index of the last True position per row; errors on an all-False row."""
    mask = np.asarray(mask, dtype=bool)
    empty = ~mask.any(axis=-1)
    if np.any(empty):
        raise EmptySequenceError(f"{int(empty.sum())} sequence(s) have no valid position")
    n = mask.shape[-1]
    return n - 1 - np.argmax(mask[..., ::-1], axis=-1)


def multi_head_attention(x: Tensor, mask: np.ndarray, block: SABBlock, heads: int) -> tuple[Tensor, Tensor]:
    b, n, d = x.shape
    dk = d // heads

    def split(t):
        return F.transpose(F.reshape(t, (b, n, heads, dk)), (0, 2, 1, 3))

    q, k, v = (split(F.matmul(x, w)) for w in (block.wq, block.wk, block.wv))
    scores = F.scale(F.matmul(q, F.transpose(k)), 1.0 / math.sqrt(dk))
    attn = F.softmax_rows(scores, mask=mask[:, None, None, :])
    ctx = F.reshape(F.transpose(F.matmul(attn, v), (0, 2, 1, 3)), (b, n, d))
    return F.matmul(ctx, block.wo), attn


def feed_forward(x: Tensor, block: SABBlock) -> Tensor:
    hidden = F.relu(F.matmul(x, block.w1) + block.b1)
    return F.matmul(hidden, block.w2) + block.b2


def sab_forward(H: Tensor, mask: np.ndarray, params: SABParams, train: bool = False,
                rng: np.random.Generator | None = None) -> ShortTermOutput:
    """Encode ``H`` of shape (B, n, d) (or (n, d)) with stacked attention blocks."""
    H = H if isinstance(H, Tensor) else Tensor(H)
    mask = np.asarray(mask, dtype=bool)
    single = H.ndim == 2
    if single:
        H, mask = F.reshape(H, (1, *H.shape)), mask[None]
    b, n, d = H.shape
    if n > params.position.shape[0]:
        raise ValueError(f"sequence length {n} exceeds position table size {params.position.shape[0]}")
    last = last_valid_index(mask)

    x = H + F.row_slice(params.position, slice(0, n))
    x = F.dropout(x, params.keep, train, rng)
    maps = []
    for block in params.blocks:
        att, a = multi_head_attention(x, mask, block, params.heads)
        maps.append(a)
        x = layer_norm_rows(x + F.dropout(att, params.keep, train, rng), block.ln1_gain, block.ln1_bias)
        x = layer_norm_rows(x + F.dropout(feed_forward(x, block), params.keep, train, rng),
                            block.ln2_gain, block.ln2_bias)
    z = F.embedding_gather(F.reshape(x, (b * n, d)), np.arange(b) * n + last)
    if single:
        x = F.reshape(x, (n, d))
    return ShortTermOutput(x, z, maps)


def info_nce(anchors: Tensor, candidates: Tensor, negative_mask: np.ndarray | None = None) -> Tensor:
    """Mean of ``-log softmax(anchors @ candidates^T)`` on the diagonal.

    ``negative_mask[u, v]`` False drops candidate v from u's denominator;
    the diagonal is always kept.
    """
    bsz = anchors.shape[0]
    if bsz < 2:
        raise ValueError(f"contrastive loss needs a batch of at least 2, got {bsz}")
    keep = np.ones((bsz, bsz), dtype=bool) if negative_mask is None else np.asarray(negative_mask, dtype=bool).copy()
    np.fill_diagonal(keep, True)
    logp = F.log_softmax_rows(F.matmul(anchors, F.transpose(candidates)), mask=keep)
    diag = F.sum(logp * np.eye(bsz, dtype=logp.dtype), axis=-1)
    return F.scale(F.sum(diag), -1.0 / bsz)


def short_cl_loss(z: Tensor, target_embeddings: Tensor, target_items: np.ndarray | None = None) -> Tensor:
    """In-batch contrastive loss pulling ``z_u`` toward its next item.

    Other rows' targets are negatives, except those naming the same item as
    the positive.
    """
    mask = None
    if target_items is not None:
        t = np.asarray(target_items)
        mask = t[:, None] != t[None, :]
    return info_nce(z, target_embeddings, mask)
