"""End-to-end model: parameters, configuration, the batched forward pass and
its three losses.

The forward pass per batch: build and encode each sequence's behavior
graphs, lay the refined node embeddings out along the padded sequence, run
the short-term (attention) and long-term (gate + sequence mixing) branches,
fuse the two preferences and score every real item.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import PAD, Batch, Behavior, Event
from .encoder import (
    AUX2TAR,
    TAR2AUX,
    GraphBatch,
    GraphEncoderParams,
    batch_graphs,
    compile_graph,
    encode_batch,
    initial_node_embeddings,
)
from .long_term import GatingParams, SCBParams, extract_long_pref, long_cl_loss, scb_forward, subsequence_swap, target_gate
from .numerics import F, Tensor
from .short_term import SABParams, sab_forward, short_cl_loss

ABLATIONS = ("no_bge", "no_spl", "no_lpl", "no_cl_short", "no_cl_long")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    d: int = 64
    batch_size: int = 128
    keep: float = 0.5
    n_max: int = 50
    learning_rate: float = 1e-3
    layers: int = 1
    sab_blocks: int = 1
    scb_blocks: int = 1
    heads: int = 1
    lambda1: float = 0.1
    lambda2: float = 0.1
    patience: int = 10
    max_epochs: int = 200
    seed: int = 0
    cascade_direction: str = TAR2AUX
    no_bge: bool = False
    no_spl: bool = False
    no_lpl: bool = False
    no_cl_short: bool = False
    no_cl_long: bool = False
    dtype: str = "float64"
    eval_batch_size: int = 256
    report_timing: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("lambda1 and lambda2 must be non-negative")
        if self.no_spl and self.no_lpl:
            raise ConfigError("no_spl and no_lpl cannot both be set")
        if self.cascade_direction not in (TAR2AUX, AUX2TAR):
            raise ConfigError(f"cascade_direction must be {TAR2AUX} or {AUX2TAR}, got {self.cascade_direction!r}")
        for name in ("d", "batch_size", "n_max", "heads", "eval_batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("layers", "sab_blocks", "scb_blocks", "patience", "max_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        if not 0.0 < self.keep <= 1.0:
            raise ConfigError("keep must be in (0, 1]")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**raw)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class BDPLParams:
    items: Tensor  # (|V| + 1, d), row 0 is padding and stays zero
    behaviors: Tensor  # (2, d)
    encoder: GraphEncoderParams
    sab: SABParams
    gate: GatingParams
    scb: SCBParams
    fusion: Tensor  # (2d, 1)

    @property
    def position(self) -> Tensor:
        return self.sab.position

    @property
    def n_items(self) -> int:
        return self.items.shape[0] - 1

    @classmethod
    def init(cls, n_items: int, config: TrainConfig, rng: np.random.Generator) -> "BDPLParams":
        d, dt = config.d, config.np_dtype
        bound = 1.0 / math.sqrt(d)

        def u(shape):
            return Tensor(rng.uniform(-bound, bound, size=shape).astype(dt), requires_grad=True)

        items = u((n_items + 1, d))
        items.value[PAD] = 0.0
        behaviors = u((2, d))
        encoder = GraphEncoderParams.init(d, config.layers, rng, dt)
        sab = SABParams.init(d, config.n_max, config.sab_blocks, config.heads, rng, config.keep, dt)
        gate = GatingParams.init(d, config.n_max, rng, dt)
        scb = SCBParams.init(d, config.n_max, config.scb_blocks, rng, dt)
        return cls(items, behaviors, encoder, sab, gate, scb, u((2 * d, 1)))

    def named(self) -> dict[str, Tensor]:
        out = {"items": self.items, "behaviors": self.behaviors}
        out.update(self.encoder.named())
        out.update(self.sab.named())
        out.update(self.gate.named())
        out.update(self.scb.named())
        out["fusion"] = self.fusion
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.value.copy() for k, t in self.named().items()}

    def load(self, arrays: dict[str, np.ndarray]) -> None:
        named = self.named()
        missing = sorted(set(named) - set(arrays))
        if missing:
            raise KeyError(f"missing parameter arrays: {', '.join(missing)}")
        for k, t in named.items():
            if arrays[k].shape != t.shape:
                raise ValueError(f"parameter {k}: expected shape {t.shape}, got {arrays[k].shape}")
            t.value = np.array(arrays[k], dtype=t.dtype)


# ---------------------------------------------------------------------------
# fusion, scoring and losses


def fuse_preferences(z_s: Tensor, z_l: Tensor, w_f: Tensor) -> tuple[Tensor, Tensor]:
    """Gate-weighted convex combination; returns ``(o, beta)``."""
    single = z_s.ndim == 1
    if single:
        z_s, z_l = F.reshape(z_s, (1, -1)), F.reshape(z_l, (1, -1))
    beta = F.sigmoid(F.matmul(F.concat_cols(z_s, z_l), w_f))
    o = z_s * beta + z_l * (1.0 - beta)
    if single:
        o, beta = F.reshape(o, (-1,)), F.reshape(beta, (-1,))
    return o, beta


def score_logits(o: Tensor, item_table: Tensor) -> Tensor:
    """Dot product of ``o`` with every real item (padding row excluded)."""
    real = F.row_slice(item_table, slice(1, None))
    if o.ndim == 1:
        return F.reshape(F.matmul(F.reshape(o, (1, -1)), F.transpose(real)), (-1,))
    return F.matmul(o, F.transpose(real))


def score_items(o: Tensor, item_table: Tensor) -> Tensor:
    """Probabilities over real items; column k is item k + 1."""
    return F.softmax_rows(score_logits(o, item_table))


def _check_targets(targets: np.ndarray, n_items: int) -> np.ndarray:
    t = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    if np.any(t == PAD):
        raise ValueError("target is the padding index")
    if np.any((t < 1) | (t > n_items)):
        raise ValueError(f"target out of range 1..{n_items}")
    return t


def rec_loss_from_logits(logits: Tensor, targets) -> Tensor:
    """Mean full-softmax cross-entropy; ``targets`` are 1-based item ids."""
    single = logits.ndim == 1
    if single:
        logits = F.reshape(logits, (1, -1))
    t = _check_targets(targets, logits.shape[1])
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(t)), t - 1] = 1.0
    picked = F.sum(F.log_softmax_rows(logits) * onehot)
    return F.scale(picked, -1.0 / len(t))


def rec_loss(probs: Tensor, targets) -> Tensor:
    """``-log p_target`` averaged over rows, from a probability vector."""
    single = probs.ndim == 1
    if single:
        probs = F.reshape(probs, (1, -1))
    t = _check_targets(targets, probs.shape[1])
    onehot = np.zeros(probs.shape, dtype=probs.dtype)
    onehot[np.arange(len(t)), t - 1] = 1.0
    return F.scale(F.sum(F.log(F.sum(probs * onehot, axis=-1))), -1.0 / len(t))


def joint_loss(rec, cl_short=None, cl_long=None, lambda1: float = 0.0, lambda2: float = 0.0,
               no_cl_short: bool = False, no_cl_long: bool = False):
    """``rec + lambda1 * cl_short + lambda2 * cl_long``; a flagged or missing
    term contributes nothing."""
    if lambda1 < 0 or lambda2 < 0:
        raise ConfigError("lambda1 and lambda2 must be non-negative")
    total = rec
    if not no_cl_short and cl_short is not None and lambda1:
        total = total + cl_short * float(lambda1)
    if not no_cl_long and cl_long is not None and lambda2:
        total = total + cl_long * float(lambda2)
    return total


# ---------------------------------------------------------------------------
# forward pass


class GraphCache:
    """Memoises compiled graphs by event tuple."""

    def __init__(self, limit: int = 200_000):
        self.limit = limit
        self._store: dict[tuple, object] = {}

    def get(self, events: tuple[Event, ...]):
        key = tuple((int(i), int(b)) for i, b in events)
        hit = self._store.get(key)
        if hit is None:
            hit = compile_graph(events)
            if len(self._store) < self.limit:
                self._store[key] = hit
        return hit

    def batch(self, sequences: Sequence[tuple[Event, ...]]) -> GraphBatch:
        return batch_graphs([self.get(s) for s in sequences])


@dataclass
class ForwardOutput:
    o: Tensor  # (B, d)
    logits: Tensor  # (B, |V|)
    rec: Tensor | None
    cl_short: Tensor | None
    cl_long: Tensor | None
    z_s: Tensor | None = None
    z_l: Tensor | None = None
    beta: Tensor | None = None
    swaps: list = field(default_factory=list)

    def joint(self, config: TrainConfig) -> Tensor:
        return joint_loss(self.rec, self.cl_short, self.cl_long, config.lambda1, config.lambda2,
                          config.no_cl_short, config.no_cl_long)


def sequence_matrix(gb: GraphBatch, node_rows: Tensor, mask: np.ndarray) -> Tensor:
    """Scatter per-node embeddings into the (B, n, d) left-padded layout."""
    b, n = mask.shape
    index = np.full((b, n), gb.n_nodes, dtype=np.int64)
    for r in range(b):
        index[r, mask[r]] = gb.position_nodes[r]
    zero = Tensor(np.zeros((1, node_rows.shape[1]), dtype=node_rows.dtype))
    return F.embedding_gather(F.concat_rows(node_rows, zero), index)


def encode_nodes(gb: GraphBatch, params: BDPLParams, config: TrainConfig) -> Tensor:
    if config.no_bge:
        return initial_node_embeddings(gb, params.items, params.behaviors)
    return encode_batch(gb, params.items, params.behaviors, params.encoder, config.cascade_direction).h_tilde


def long_term_preference(H: Tensor, mask: np.ndarray, params: BDPLParams) -> Tensor:
    purchase = F.row_slice(params.behaviors, int(Behavior.PURCHASE))
    return extract_long_pref(scb_forward(target_gate(H, purchase, params.gate), params.scb, mask), mask)


def forward(batch: Batch, params: BDPLParams, config: TrainConfig, mode: str = "eval",
            rng: np.random.Generator | None = None, cache: GraphCache | None = None) -> ForwardOutput:
    """Run the model on one batch.

    ``mode="train"`` enables dropout and the augmented view; it needs
    ``rng``.  Contrastive terms are only produced in train mode.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    train = mode == "train"
    if train and rng is None:
        raise ValueError("train mode needs an rng")
    cache = cache or GraphCache(limit=0)
    mask = np.asarray(batch.mask, dtype=bool)
    sequences = [batch.events(r) for r in range(len(batch))]

    gb = cache.batch(sequences)
    H = sequence_matrix(gb, encode_nodes(gb, params, config), mask)

    z_s = z_l = None
    if not config.no_spl:
        z_s = sab_forward(H, mask, params.sab, train=train, rng=rng).z
    if not config.no_lpl:
        z_l = long_term_preference(H, mask, params)

    beta = None
    if z_s is None:
        o = z_l
    elif z_l is None:
        o = z_s
    else:
        o, beta = fuse_preferences(z_s, z_l, params.fusion)

    logits = score_logits(o, params.items)
    targets = np.asarray(batch.targets)
    rec = rec_loss_from_logits(logits, targets) if np.all(targets != PAD) else None

    cl_short = cl_long = None
    swaps = []
    if train and len(batch) >= 2:
        if z_s is not None and not config.no_cl_short and config.lambda1 > 0:
            cl_short = short_cl_loss(z_s, F.embedding_gather(params.items, targets), targets)
        if z_l is not None and not config.no_cl_long and config.lambda2 > 0:
            pairs = [subsequence_swap(s, rng) for s in sequences]
            swaps = [p.swap for p in pairs]
            gb_aug = cache.batch([p.augmented for p in pairs])
            H_aug = sequence_matrix(gb_aug, encode_nodes(gb_aug, params, config), mask)
            cl_long = long_cl_loss(z_l, long_term_preference(H_aug, mask, params))
    return ForwardOutput(o, logits, rec, cl_short, cl_long, z_s, z_l, beta, swaps)


__all__ = [
    "ABLATIONS",
    "BDPLParams",
    "ConfigError",
    "ForwardOutput",
    "GraphCache",
    "TrainConfig",
    "forward",
    "fuse_preferences",
    "joint_loss",
    "rec_loss",
    "rec_loss_from_logits",
    "score_items",
    "score_logits",
]
