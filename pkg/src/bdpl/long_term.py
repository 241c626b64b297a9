"""Long-term branch: purchase-oriented gating, sequence-capture blocks that
mix across positions, subsequence-swap augmentation and the contrastive loss
between a sequence and its augmented view.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Event
from .graph import segment_at_purchases
from .numerics import F, Tensor
from .numerics.tensor import layer_norm_rows
from .short_term import EmptySequenceError, info_nce


def _uniform(rng, shape, bound, dtype):
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


@dataclass
class GatingParams:
    w1: Tensor  # (d, 1)
    w2: Tensor  # (n_max, d)

    @classmethod
    def init(cls, d, n_max, rng, dtype=np.float64) -> "GatingParams":
        b = 1.0 / math.sqrt(d)
        return cls(_uniform(rng, (d, 1), b, dtype), _uniform(rng, (n_max, d), b, dtype))

    def named(self) -> dict[str, Tensor]:
        return {"gate.w1": self.w1, "gate.w2": self.w2}


def gate_values(H: Tensor, purchase_embedding: Tensor, params: GatingParams) -> Tensor:
    """Per-position gate in (0, 1), shaped (..., n, 1)."""
    n, d = H.shape[-2:]
    pos = F.matmul(F.row_slice(params.w2, slice(0, n)), F.reshape(purchase_embedding, (d, 1)))
    return F.sigmoid(F.matmul(H, params.w1) + pos)


def target_gate(H: Tensor, purchase_embedding: Tensor, params: GatingParams) -> Tensor:
    return H * gate_values(H, purchase_embedding, params)


@dataclass
class SCBBlock:
    w3: Tensor  # (n_max, d)
    w4: Tensor  # (d, n_max)
    ln_gain: Tensor
    ln_bias: Tensor


@dataclass
class SCBParams:
    blocks: list[SCBBlock]

    @classmethod
    def init(cls, d, n_max, blocks, rng, dtype=np.float64) -> "SCBParams":
        out = []
        for _ in range(blocks):
            out.append(SCBBlock(_uniform(rng, (n_max, d), 1.0 / math.sqrt(d), dtype),
                                _uniform(rng, (d, n_max), 1.0 / math.sqrt(d), dtype),
                                Tensor(np.ones(d, dtype=dtype), requires_grad=True),
                                Tensor(np.zeros(d, dtype=dtype), requires_grad=True)))
        return cls(out)

    def named(self) -> dict[str, Tensor]:
        out = {}
        for k, b in enumerate(self.blocks):
            out.update({f"scb.{k}.{name}": t for name, t in vars(b).items()})
        return out


def scb_forward(H: Tensor, params: SCBParams, mask: np.ndarray | None = None) -> Tensor:
    """Token-mixing blocks over (B, n, d) or (n, d) input.

    With a mask, padded rows are zeroed before and after every block.
    """
    n = H.shape[-2]
    keep = None if mask is None else np.asarray(mask, dtype=bool)[..., None].astype(H.dtype)
    swap = tuple(range(H.ndim - 2)) + (H.ndim - 1, H.ndim - 2)
    for block in params.blocks:
        if block.w3.shape[0] != n:
            raise ValueError(f"sequence length {n} does not match mixing size {block.w3.shape[0]}")
        if keep is not None:
            H = H * keep
        normed = layer_norm_rows(H, block.ln_gain, block.ln_bias)
        if keep is not None:
            normed = normed * keep
        mixed = F.matmul(F.gelu(F.matmul(F.transpose(normed, swap), block.w3)), block.w4)
        H = H + F.transpose(mixed, swap)
        if keep is not None:
            H = H * keep
    return H


def extract_long_pref(H: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over valid rows."""
    m = np.asarray(mask, dtype=bool)
    counts = m.sum(axis=-1, keepdims=True)
    if np.any(counts == 0):
        raise EmptySequenceError("sequence has no valid position")
    weights = (m / counts)[..., None].astype(H.dtype)
    return F.sum(H * weights, axis=-2)


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentedPair:
    original: tuple[Event, ...]
    augmented: tuple[Event, ...]
    swap: tuple[int, int] | None


def destination_weights(m: int, source: int) -> np.ndarray:
    """Sampling distribution over segments, favoring those near ``source``."""
    j = np.arange(m)
    w = np.zeros(m)
    other = j != source
    w[other] = 1.0 / np.abs(j[other] - source)
    return w / w.sum()


def subsequence_swap(events: Sequence[Event], seed: int | np.random.Generator) -> AugmentedPair:
    events = tuple(events)
    segments, tail = segment_at_purchases(events)
    m = len(segments)
    if m <= 1:
        return AugmentedPair(events, events, None)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    source = int(rng.integers(m))
    dest = int(rng.choice(m, p=destination_weights(m, source)))
    order = list(range(m))
    order[source], order[dest] = order[dest], order[source]
    augmented = tuple(e for k in order for e in segments[k].events) + tail
    return AugmentedPair(events, augmented, (source, dest))


def long_cl_loss(z: Tensor, z_aug: Tensor) -> Tensor:
    """Each sequence must pick out its own augmented view among the batch's."""
    return info_nce(z, z_aug)
