"""Interaction logs: loading, preprocessing, leave-one-out splits, batching,
and a planted-structure synthetic generator."""

from __future__ import annotations

import enum
import json
import os
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

SCHEMA_VERSION = 1
PAD = 0


class DataError(ValueError):
    pass


class SchemaVersionError(DataError):
    pass


class Behavior(enum.IntEnum):
    EXAMINATION = 0
    PURCHASE = 1

    @classmethod
    def parse(cls, name: str | int | "Behavior") -> "Behavior":
        if isinstance(name, (Behavior, int)):
            return cls(int(name))
        key = str(name).strip().lower()
        aliases = {"examination": cls.EXAMINATION, "e": cls.EXAMINATION,
                   "purchase": cls.PURCHASE, "p": cls.PURCHASE}
        if key not in aliases:
            raise DataError(f"unknown canonical behavior {name!r}")
        return aliases[key]


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    behavior: str
    timestamp: int
    kind: Behavior


Event = tuple[int, Behavior]


@dataclass(frozen=True)
class UserSequence:
    user: int
    events: tuple[Event, ...]


@dataclass(frozen=True)
class Instance:
    user: int
    events: tuple[Event, ...]
    target: int


@dataclass
class Vocab:
    users: list[str]
    items: list[str]

    def __post_init__(self):
        self.user_index = {u: k + 1 for k, u in enumerate(self.users)}
        self.item_index = {i: k + 1 for k, i in enumerate(self.items)}

    def encode_item(self, raw: str) -> int:
        return self.item_index[raw]

    def decode_item(self, index: int) -> str:
        if index <= PAD or index > len(self.items):
            raise KeyError(index)
        return self.items[index - 1]


@dataclass
class DatasetSplit:
    train: list[Instance]
    valid: list[Instance]
    test: list[Instance]
    n_items: int
    n_users: int
    dropped_users: int = 0
    stats: dict = field(default_factory=dict)

    @property
    def item_count(self) -> int:
        """Rows of the item table: real items plus the padding row 0."""
        return self.n_items + 1

    @property
    def user_count(self) -> int:
        return self.n_users


@dataclass
class Batch:
    items: np.ndarray  # (B, n_max) int64, PAD on the left
    behaviors: np.ndarray  # (B, n_max) int64
    mask: np.ndarray  # (B, n_max) bool
    targets: np.ndarray  # (B,) int64
    users: np.ndarray  # (B,) int64

    def __len__(self) -> int:
        return len(self.targets)

    def events(self, row: int) -> tuple[Event, ...]:
        m = self.mask[row]
        return tuple((int(i), Behavior(int(b)))
                     for i, b in zip(self.items[row][m], self.behaviors[row][m]))


# ---------------------------------------------------------------------------
# loading


def parse_behavior_map(raw: Mapping[str, str]) -> dict[str, Behavior]:
    return {str(k): Behavior.parse(v) for k, v in raw.items()}


def load_interactions(path: str | os.PathLike, behavior_map: Mapping[str, str | Behavior]) -> list[Interaction]:
    """Read ``user<TAB>item<TAB>behavior<TAB>timestamp`` lines."""
    bmap = parse_behavior_map(behavior_map)
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
            user, item, label, ts = parts
            try:
                stamp = int(ts)
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad timestamp {ts!r}") from None
            if stamp < 0:
                raise DataError(f"{path}:{lineno}: negative timestamp {stamp}")
            if label not in bmap:
                raise DataError(f"{path}:{lineno}: unknown behavior label {label!r}")
            out.append(Interaction(user, item, label, stamp, bmap[label]))
    return out


def write_interactions(rows: Iterable[Interaction], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in rows:
            fh.write(f"{r.user_id}\t{r.item_id}\t{r.behavior}\t{r.timestamp}\n")


# ---------------------------------------------------------------------------
# preprocessing


def _num_workers() -> int:
    try:
        return max(1, int(os.environ.get("BDPL_NUM_WORKERS", "1")))
    except ValueError:
        return 1


def _dedup_sorted(rows: list[tuple[int, int, str, Behavior]]) -> list[tuple[int, str, Behavior]]:
    # rows: (timestamp, order, item, kind); sort is stable on file order
    rows = sorted(rows, key=lambda r: (r[0], r[1]))
    seen = set()
    kept = []
    for ts, _, item, kind in rows:
        if (item, kind) in seen:
            continue
        seen.add((item, kind))
        kept.append((ts, item, kind))
    return kept


def preprocess_with_vocab(interactions: Sequence[Interaction], min_item_interactions: int = 0,
                          min_user_interactions: int = 0) -> tuple[list[UserSequence], Vocab]:
    """Deduplicate, filter cold-start items/users to a fixed point, sort,
    and reindex densely from 1."""
    if min_item_interactions < 0 or min_user_interactions < 0:
        raise DataError("thresholds must be >= 0")
    per_user: dict[str, list] = {}
    for order, r in enumerate(interactions):
        per_user.setdefault(r.user_id, []).append((r.timestamp, order, r.item_id, r.kind))

    users = sorted(per_user)
    workers = _num_workers()
    if workers > 1 and len(users) > 1000:
        with ProcessPoolExecutor(workers) as pool:
            cleaned = list(pool.map(_dedup_sorted, (per_user[u] for u in users), chunksize=256))
    else:
        cleaned = [_dedup_sorted(per_user[u]) for u in users]
    seqs = dict(zip(users, cleaned))

    while True:
        item_counts = Counter(item for evs in seqs.values() for _, item, _ in evs)
        bad_items = {i for i, c in item_counts.items() if c < min_item_interactions}
        if bad_items:
            seqs = {u: [e for e in evs if e[1] not in bad_items] for u, evs in seqs.items()}
        bad_users = {u for u, evs in seqs.items() if len(evs) < min_user_interactions or not evs}
        if bad_users:
            seqs = {u: evs for u, evs in seqs.items() if u not in bad_users}
        if not bad_items and not bad_users:
            break
    if not seqs:
        raise DataError("no interactions left after filtering")

    vocab = Vocab(sorted(seqs), sorted({item for evs in seqs.values() for _, item, _ in evs}))
    out = [UserSequence(vocab.user_index[u],
                        tuple((vocab.item_index[item], kind) for _, item, kind in seqs[u]))
           for u in vocab.users]
    return out, vocab


def preprocess(interactions: Sequence[Interaction], min_item_interactions: int = 0,
               min_user_interactions: int = 0) -> list[UserSequence]:
    return preprocess_with_vocab(interactions, min_item_interactions, min_user_interactions)[0]


def sequence_stats(sequences: Sequence[UserSequence]) -> dict:
    n_exam = sum(1 for s in sequences for _, b in s.events if b == Behavior.EXAMINATION)
    n_purch = sum(1 for s in sequences for _, b in s.events if b == Behavior.PURCHASE)
    items = {i for s in sequences for i, _ in s.events}
    return {
        "users": len(sequences),
        "items": len(items),
        "examinations": n_exam,
        "purchases": n_purch,
        "avg_length": (n_exam + n_purch) / len(sequences) if sequences else 0.0,
    }


# ---------------------------------------------------------------------------
# splitting and batching


def split_leave_one_out(sequences: Sequence[UserSequence]) -> DatasetSplit:
    """Last purchase to test, penultimate to validation, earlier purchases to
    training (one instance per purchase with a non-empty history)."""
    train, valid, test = [], [], []
    dropped = 0
    n_items = 0
    for seq in sequences:
        ev = seq.events
        buys = [t for t, (_, b) in enumerate(ev) if b == Behavior.PURCHASE]
        if len(buys) < 2:
            dropped += 1
            continue
        last, penult = buys[-1], buys[-2]
        # auxiliary events between the last two purchases are discarded
        test_events = ev[:penult + 1]
        test.append(Instance(seq.user, test_events, ev[last][0]))
        valid.append(Instance(seq.user, ev[:penult], ev[penult][0]))
        for t in buys[:-2]:
            if t > 0:
                train.append(Instance(seq.user, ev[:t], ev[t][0]))
        n_items = max(n_items, max(i for i, _ in ev))
    stats = sequence_stats(sequences)
    return DatasetSplit(train, valid, test, n_items=max(n_items, stats["items"]),
                        n_users=len(test), dropped_users=dropped, stats=stats)


def batch_sequences(instances: Sequence[Instance], batch_size: int, n_max: int,
                    shuffle_seed: int | None = None) -> list[Batch]:
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(instances))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(instances))
    batches = []
    for start in range(0, len(order), batch_size):
        chunk = [instances[k] for k in order[start:start + batch_size]]
        B = len(chunk)
        items = np.zeros((B, n_max), dtype=np.int64)
        behs = np.zeros((B, n_max), dtype=np.int64)
        mask = np.zeros((B, n_max), dtype=bool)
        for r, inst in enumerate(chunk):
            ev = inst.events[-n_max:]
            k = len(ev)
            if k:
                items[r, n_max - k:] = [i for i, _ in ev]
                behs[r, n_max - k:] = [int(b) for _, b in ev]
                mask[r, n_max - k:] = True
        batches.append(Batch(items, behs, mask,
                             np.array([i.target for i in chunk], dtype=np.int64),
                             np.array([i.user for i in chunk], dtype=np.int64)))
    return batches


# ---------------------------------------------------------------------------
# cache


def _encode_instance(split_name: str, inst: Instance) -> str:
    return json.dumps({"split": split_name, "user": inst.user, "target": inst.target,
                       "events": [[i, int(b)] for i, b in inst.events]}, separators=(",", ":"))


def save_split(split: DatasetSplit, path: str | os.PathLike) -> None:
    """JSON-lines cache: a header line, then one line per instance."""
    header = {"schema_version": SCHEMA_VERSION, "kind": "bdpl-split", "n_items": split.n_items,
              "n_users": split.n_users, "dropped_users": split.dropped_users, "stats": split.stats}
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for name in ("train", "valid", "test"):
            for inst in getattr(split, name):
                fh.write(_encode_instance(name, inst) + "\n")


def load_split(path: str | os.PathLike) -> DatasetSplit:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        try:
            header = json.loads(fh.readline())
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: unreadable cache header") from exc
        if header.get("kind") != "bdpl-split":
            raise DataError(f"{path}: not a split cache")
        if header.get("schema_version") != SCHEMA_VERSION:
            raise SchemaVersionError(
                f"{path}: cache schema version {header.get('schema_version')} != {SCHEMA_VERSION}")
        parts: dict[str, list[Instance]] = {"train": [], "valid": [], "test": []}
        for lineno, line in enumerate(fh, start=2):
            try:
                row = json.loads(line)
                events = tuple((int(i), Behavior(int(b))) for i, b in row["events"])
                parts[row["split"]].append(Instance(int(row["user"]), events, int(row["target"])))
            except (json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed cache row") from exc
    return DatasetSplit(parts["train"], parts["valid"], parts["test"], n_items=header["n_items"],
                        n_users=header["n_users"], dropped_users=header["dropped_users"],
                        stats=header.get("stats", {}))


# ---------------------------------------------------------------------------
# synthetic data

SYNTHETIC_BEHAVIOR_MAP = {"view": "examination", "buy": "purchase"}


def planted_transition_table(items: int, fanout: int = 3, seed: int = 0,
                             concentration: float = 0.6) -> np.ndarray:
    """Sparse row-stochastic item-to-item table: each item moves to one of
    ``fanout`` random successors, the first taking ``concentration`` mass and
    the rest sharing the remainder evenly."""
    rng = np.random.default_rng(seed)
    table = np.zeros((items, items))
    for i in range(items):
        succ = rng.choice(np.delete(np.arange(items), i), size=fanout, replace=False)
        table[i, succ[0]] = concentration if fanout > 1 else 1.0
        if fanout > 1:
            table[i, succ[1:]] = (1.0 - concentration) / (fanout - 1)
    return table


def generate_synthetic(users: int, items: int, transitions: np.ndarray,
                       exam_per_purchase: tuple[int, int] = (3, 8),
                       purchases_per_user: tuple[int, int] = (4, 8),
                       seed: int = 0, near_window: int = 2) -> list[Interaction]:
    """Planted sessions: before every purchase, a burst of examinations of
    items within ``near_window`` (ring distance in item index) of the item
    about to be bought; purchases follow ``transitions`` as a first-order
    Markov chain from a uniformly drawn start."""
    table = np.asarray(transitions, dtype=float)
    if table.shape != (items, items):
        raise DataError(f"transition table must be {items}x{items}, got {table.shape}")
    if np.any(table < 0) or not np.allclose(table.sum(axis=1), 1.0, atol=1e-9):
        bad = int(np.argmax((table < 0).any(axis=1) | ~np.isclose(table.sum(axis=1), 1.0, atol=1e-9)))
        raise DataError(f"transition row {bad} is not a probability vector")
    lo_e, hi_e = exam_per_purchase
    lo_p, hi_p = purchases_per_user
    cdf = np.cumsum(table, axis=1)
    rng = np.random.default_rng(seed)
    offsets = np.arange(-near_window, near_window + 1)
    out = []
    for u in range(users):
        uid = f"u{u}"
        ts = 0
        current = int(rng.integers(items))
        for k in range(int(rng.integers(lo_p, hi_p + 1))):
            if k:
                current = min(int(np.searchsorted(cdf[current], rng.random(), side="right")), items - 1)
            for _ in range(int(rng.integers(lo_e, hi_e + 1))):
                near = (current + int(rng.choice(offsets))) % items
                ts += 1
                out.append(Interaction(uid, f"i{near}", "view", ts, Behavior.EXAMINATION))
            ts += 1
            out.append(Interaction(uid, f"i{current}", "buy", ts, Behavior.PURCHASE))
    return out
