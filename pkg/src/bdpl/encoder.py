"""Behavior-aware graph encoder.

All sequences of a batch are encoded together: their item nodes are stacked
into one ``N x d`` matrix and each relation becomes a block-diagonal sparse
mean-pooling operator.  Per-relation aggregates are fused with a softmax over
the relations that actually have neighbors; a node with no neighbors at all
carries its previous-layer embedding forward.  The purchase pass runs first,
its layer-sum output is linearly transformed and seeds the examination pass
(the reverse under ``aux2tar``), and the two results are averaged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .data import Behavior, Event
from .graph import R_E, R_P, BehaviorSubgraphs, RelationGraph, RelationType, build_subgraphs
from .numerics import F, SparseMatrix, Tensor, sparse_matmul

TAR2AUX = "tar2aux"
AUX2TAR = "aux2tar"


def uniform_init(rng: np.random.Generator, shape, d: int, dtype=np.float64) -> np.ndarray:
    bound = 1.0 / math.sqrt(d)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass
class GraphEncoderParams:
    attn_p: list[Tensor]  # per layer, one row per relation of R_P
    attn_e: list[Tensor]  # per layer, one row per relation of R_E
    cascade: Tensor  # d x d

    @property
    def layers(self) -> int:
        return len(self.attn_p)

    @classmethod
    def init(cls, d: int, layers: int, rng: np.random.Generator, dtype=np.float64) -> "GraphEncoderParams":
        def t(shape):
            return Tensor(uniform_init(rng, shape, d, dtype), requires_grad=True)

        return cls([t((len(R_P), d)) for _ in range(layers)],
                   [t((len(R_E), d)) for _ in range(layers)],
                   t((d, d)))

    def named(self) -> dict[str, Tensor]:
        out = {f"encoder.attn_p.{l}": w for l, w in enumerate(self.attn_p)}
        out.update({f"encoder.attn_e.{l}": w for l, w in enumerate(self.attn_e)})
        out["encoder.cascade"] = self.cascade
        return out


# ---------------------------------------------------------------------------
# compiled per-sequence graphs and their batched union


@dataclass
class CompiledGraph:
    nodes: np.ndarray  # item index per local node
    node_behaviors: np.ndarray  # behavior of each node's most recent occurrence
    positions: np.ndarray  # local node index of every event
    edges: dict[RelationType, tuple[np.ndarray, np.ndarray, np.ndarray]]  # rows, cols, weights


def compile_graph(events: Sequence[Event], subgraphs: BehaviorSubgraphs | None = None) -> CompiledGraph:
    g = subgraphs if subgraphs is not None else build_subgraphs(events)
    local = {item: k for k, item in enumerate(g.nodes)}
    last_beh = {}
    for item, b in events:
        last_beh[item] = int(b)
    edges = {}
    for graph in (g.purchase, g.examination):
        for r in graph.relations:
            rows, cols, vals = [], [], []
            for v, ns in graph.adjacency[r].items():
                w = 1.0 / len(ns)
                for u in ns:
                    rows.append(local[v])
                    cols.append(local[u])
                    vals.append(w)
            edges[r] = (np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64),
                        np.array(vals, dtype=np.float64))
    return CompiledGraph(np.array(g.nodes, dtype=np.int64),
                         np.array([last_beh[i] for i in g.nodes], dtype=np.int64),
                         np.array([local[i] for i, _ in events], dtype=np.int64), edges)


@dataclass
class GraphBatch:
    node_items: np.ndarray  # (N,)
    node_behaviors: np.ndarray  # (N,)
    operators: dict[RelationType, SparseMatrix]
    participating: dict[RelationType, np.ndarray]  # (N,) bool
    seq_offsets: np.ndarray  # (B + 1,) node offsets per sequence
    position_nodes: list[np.ndarray]  # global node index per event, per sequence

    @property
    def n_nodes(self) -> int:
        return len(self.node_items)

    def relation_mask(self, relations: Sequence[RelationType]) -> np.ndarray:
        return np.stack([self.participating[r] for r in relations], axis=1)


def batch_graphs(compiled: Sequence[CompiledGraph]) -> GraphBatch:
    sizes = np.array([len(c.nodes) for c in compiled], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    n = int(offsets[-1])
    operators, participating = {}, {}
    for r in RelationType:
        rows = np.concatenate([c.edges[r][0] + o for c, o in zip(compiled, offsets)]) if compiled else np.zeros(0, np.int64)
        cols = np.concatenate([c.edges[r][1] + o for c, o in zip(compiled, offsets)]) if compiled else np.zeros(0, np.int64)
        vals = np.concatenate([c.edges[r][2] for c in compiled]) if compiled else np.zeros(0)
        operators[r] = SparseMatrix.from_coo(rows, cols, vals, (n, n))
        part = np.zeros(n, dtype=bool)
        part[rows] = True
        participating[r] = part
    return GraphBatch(
        np.concatenate([c.nodes for c in compiled]) if compiled else np.zeros(0, np.int64),
        np.concatenate([c.node_behaviors for c in compiled]) if compiled else np.zeros(0, np.int64),
        operators, participating, offsets,
        [c.positions + o for c, o in zip(compiled, offsets)])


# ---------------------------------------------------------------------------
# batched encoding


def fuse_relations(aggregates: Sequence[Tensor], weights: Tensor, participating: np.ndarray,
                   previous: Tensor) -> tuple[Tensor, Tensor]:
    """Attention-weighted sum of per-relation aggregates.

    ``aggregates``: R tensors of shape (N, d); ``weights``: (R, d);
    ``participating``: (N, R) bool.  Returns ``(fused, alpha)``.
    """
    n, d = previous.shape
    r = len(aggregates)
    stack = F.reshape(F.concat_cols(*aggregates), (n, r, d))
    scores = F.scale(F.sum(stack * weights, axis=-1), 1.0 / math.sqrt(d))
    alpha = F.softmax_rows(scores, mask=participating)
    fused = F.reshape(F.matmul(F.reshape(alpha, (n, 1, r)), stack), (n, d))
    isolated = (~participating.any(axis=1))[:, None].astype(previous.dtype)
    if isolated.any():
        fused = fused + previous * isolated
    return fused, alpha


def encode_behavior_batch(gb: GraphBatch, relations: Sequence[RelationType], initial: Tensor,
                          layer_weights: Sequence[Tensor], trace: list | None = None) -> Tensor:
    """L rounds of aggregate + fuse; returns the sum of layers 0..L."""
    mask = gb.relation_mask(relations)
    h = initial
    total = initial
    for w in layer_weights:
        aggs = [sparse_matmul(gb.operators[r], h) for r in relations]
        h, alpha = fuse_relations(aggs, w, mask, h)
        if trace is not None:
            trace.append(alpha)
        total = total + h
    return total


def cascade_rows(h: Tensor, params: GraphEncoderParams) -> Tensor:
    """Apply the cascade matrix to every node row: ``W h`` per node."""
    return F.matmul(h, F.transpose(params.cascade))


@dataclass
class EncodedBatch:
    h_p: Tensor
    h_e: Tensor
    h_tilde: Tensor


def initial_node_embeddings(gb: GraphBatch, item_table: Tensor, behavior_table: Tensor) -> Tensor:
    return (F.embedding_gather(item_table, gb.node_items)
            + F.embedding_gather(behavior_table, gb.node_behaviors))


def encode_batch(gb: GraphBatch, item_table: Tensor, behavior_table: Tensor, params: GraphEncoderParams,
                 direction: str = TAR2AUX, trace: list | None = None) -> EncodedBatch:
    h0 = initial_node_embeddings(gb, item_table, behavior_table)
    if direction == TAR2AUX:
        h_p = encode_behavior_batch(gb, R_P, h0, params.attn_p, trace)
        h_e = encode_behavior_batch(gb, R_E, cascade_rows(h_p, params), params.attn_e, trace)
    elif direction == AUX2TAR:
        h_e = encode_behavior_batch(gb, R_E, h0, params.attn_e, trace)
        h_p = encode_behavior_batch(gb, R_P, cascade_rows(h_e, params), params.attn_p, trace)
    else:
        raise ValueError(f"unknown cascade direction {direction!r}")
    return EncodedBatch(h_p, h_e, F.scale(h_p + h_e, 0.5))


# ---------------------------------------------------------------------------
# per-sequence API (dict in, dict out); thin wrappers over the batched path


@dataclass
class EncodedItems:
    h_p: dict[int, np.ndarray]
    h_e: dict[int, np.ndarray]
    h_tilde: dict[int, np.ndarray]


def relation_aggregate(graph: RelationGraph, node: int, relation: RelationType,
                       previous: Mapping[int, np.ndarray]) -> np.ndarray:
    ns = graph.adjacency[relation].get(node, [])
    if not ns:
        d = len(next(iter(previous.values())))
        return np.zeros(d)
    return np.mean([np.asarray(previous[u], dtype=float) for u in ns], axis=0)


def relation_attention_fuse(aggregates: Mapping[RelationType, np.ndarray | None],
                            weights: Mapping[RelationType, np.ndarray],
                            previous: np.ndarray) -> tuple[np.ndarray, dict[RelationType, float]]:
    """Fuse one node's aggregates; ``None`` marks an empty neighbor set."""
    rels = list(aggregates)
    d = len(previous)
    aggs = [Tensor(np.asarray(aggregates[r] if aggregates[r] is not None else np.zeros(d),
                              dtype=float).reshape(1, d)) for r in rels]
    part = np.array([[aggregates[r] is not None for r in rels]])
    w = Tensor(np.stack([np.asarray(weights[r], dtype=float) for r in rels]))
    fused, alpha = fuse_relations(aggs, w, part, Tensor(np.asarray(previous, dtype=float).reshape(1, d)))
    return fused.value[0], {r: float(a) for r, a in zip(rels, alpha.value[0]) if part[0, rels.index(r)]}


def _single_batch(events: Sequence[Event]) -> GraphBatch:
    return batch_graphs([compile_graph(tuple(events))])


def _rows(gb: GraphBatch, vectors: Mapping[int, np.ndarray]) -> Tensor:
    return Tensor(np.stack([np.asarray(vectors[int(i)], dtype=float) for i in gb.node_items]))


def _dict(gb: GraphBatch, t: Tensor) -> dict[int, np.ndarray]:
    return {int(i): t.value[k] for k, i in enumerate(gb.node_items)}


def encode_behavior(events: Sequence[Event], which: str, initial: Mapping[int, np.ndarray],
                    params: GraphEncoderParams) -> dict[int, np.ndarray]:
    """Run one behavior graph (``"purchase"`` or ``"examination"``)."""
    gb = _single_batch(events)
    rels, weights = (R_P, params.attn_p) if which == "purchase" else (R_E, params.attn_e)
    return _dict(gb, encode_behavior_batch(gb, rels, _rows(gb, initial), weights))


def cascade_transform(outputs: Mapping[int, np.ndarray], params: GraphEncoderParams) -> dict[int, np.ndarray]:
    w = params.cascade.value
    return {v: w @ np.asarray(h) for v, h in outputs.items()}


def encode_sequence(events: Sequence[Event], item_table: Tensor, behavior_table: Tensor,
                    params: GraphEncoderParams, direction: str = TAR2AUX) -> EncodedItems:
    gb = _single_batch(events)
    enc = encode_batch(gb, item_table, behavior_table, params, direction)
    return EncodedItems(_dict(gb, enc.h_p), _dict(gb, enc.h_e), _dict(gb, enc.h_tilde))


def node_behaviors(events: Sequence[Event]) -> dict[int, Behavior]:
    out = {}
    for item, b in events:
        out[item] = Behavior(b)
    return out
