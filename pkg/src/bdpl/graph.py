"""Per-sequence behavior-aware transition subgraphs.

Two graphs are built from one sequence.  The examination graph carries
E2E_FWD, E2E_BWD and E2P_BWD; the purchase graph carries P2P_FWD, P2P_BWD
and E2P_FWD.  Adjacency is stored from the aggregating node's point of
view: ``adjacency[r][v]`` lists the items whose messages v pulls under r.
A FWD relation pulls temporal predecessors, a BWD relation pulls
successors, so ``u in adj[r_fwd][v]`` iff ``v in adj[r_bwd][u]``.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .data import Behavior, Event, UserSequence


class RelationType(enum.Enum):
    E2E_FWD = "e2e+"
    E2E_BWD = "e2e-"
    P2P_FWD = "p2p+"
    P2P_BWD = "p2p-"
    E2P_FWD = "e2p+"
    E2P_BWD = "e2p-"

    @property
    def mirror(self) -> "RelationType":
        return _MIRROR[self]


_MIRROR = {
    RelationType.E2E_FWD: RelationType.E2E_BWD,
    RelationType.E2E_BWD: RelationType.E2E_FWD,
    RelationType.P2P_FWD: RelationType.P2P_BWD,
    RelationType.P2P_BWD: RelationType.P2P_FWD,
    RelationType.E2P_FWD: RelationType.E2P_BWD,
    RelationType.E2P_BWD: RelationType.E2P_FWD,
}

R_E = (RelationType.E2E_FWD, RelationType.E2E_BWD, RelationType.E2P_BWD)
R_P = (RelationType.P2P_FWD, RelationType.P2P_BWD, RelationType.E2P_FWD)


class RelationError(ValueError):
    pass


@dataclass
class RelationGraph:
    """One of the two behavior graphs over a sequence's item nodes."""

    name: str
    relations: tuple[RelationType, ...]
    nodes: tuple[int, ...]
    adjacency: dict[RelationType, dict[int, list[int]]] = field(default_factory=dict)

    def __post_init__(self):
        for r in self.relations:
            self.adjacency.setdefault(r, {})

    def edge_count(self, relation: RelationType) -> int:
        return sum(len(v) for v in self.adjacency[relation].values())


@dataclass
class BehaviorSubgraphs:
    examination: RelationGraph
    purchase: RelationGraph

    @property
    def nodes(self) -> tuple[int, ...]:
        return self.purchase.nodes

    def to_json(self) -> dict:
        out = {}
        for g in (self.examination, self.purchase):
            for r in g.relations:
                out[r.value] = {str(v): list(ns) for v, ns in g.adjacency[r].items()}
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


@dataclass(frozen=True)
class PurchaseSegment:
    events: tuple[Event, ...]

    @property
    def purchase(self) -> int:
        return self.events[-1][0]

    @property
    def auxiliaries(self) -> tuple[Event, ...]:
        return self.events[:-1]


def _events(sequence: UserSequence | Sequence[Event]) -> tuple[Event, ...]:
    if isinstance(sequence, UserSequence):
        return sequence.events
    return tuple(sequence)


def segment_at_purchases(sequence: UserSequence | Sequence[Event]) -> tuple[list[PurchaseSegment], tuple[Event, ...]]:
    """Cut the sequence after every purchase; events after the final
    purchase are returned as the tail."""
    events = _events(sequence)
    segments = []
    start = 0
    for t, (_, b) in enumerate(events):
        if b == Behavior.PURCHASE:
            segments.append(PurchaseSegment(events[start:t + 1]))
            start = t + 1
    return segments, events[start:]


def _link(adj: dict[RelationType, dict[int, list[int]]], relation: RelationType, earlier: int, later: int) -> None:
    if earlier == later:
        return
    fwd = adj[relation].setdefault(later, [])
    if earlier not in fwd:
        fwd.append(earlier)
    bwd = adj[relation.mirror].setdefault(earlier, [])
    if later not in bwd:
        bwd.append(later)


def build_subgraphs(sequence: UserSequence | Sequence[Event]) -> BehaviorSubgraphs:
    events = _events(sequence)
    nodes = tuple(dict.fromkeys(i for i, _ in events))
    adj: dict[RelationType, dict[int, list[int]]] = {r: {} for r in RelationType}

    for behavior, relation in ((Behavior.EXAMINATION, RelationType.E2E_FWD),
                               (Behavior.PURCHASE, RelationType.P2P_FWD)):
        chain = [i for i, b in events if b == behavior]
        for earlier, later in zip(chain, chain[1:]):
            _link(adj, relation, earlier, later)

    segments, _ = segment_at_purchases(events)
    for seg in segments:
        for item, _ in seg.auxiliaries:
            _link(adj, RelationType.E2P_FWD, item, seg.purchase)

    def graph(name, rels):
        return RelationGraph(name, rels, nodes, {r: adj[r] for r in rels})

    return BehaviorSubgraphs(graph("examination", R_E), graph("purchase", R_P))


def neighbors(graph: RelationGraph, item: int, relation: RelationType) -> list[int]:
    if relation not in graph.relations:
        raise RelationError(f"relation {relation.value} is not part of the {graph.name} graph")
    return list(graph.adjacency[relation].get(item, ()))


def relation_edges(graph: RelationGraph, relation: RelationType) -> Iterable[tuple[int, int]]:
    """``(aggregating node, neighbor)`` pairs in insertion order."""
    for v, ns in graph.adjacency[relation].items():
        for u in ns:
            yield v, u
