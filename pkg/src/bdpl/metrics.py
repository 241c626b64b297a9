"""Full-ranking evaluation: HR@N and NDCG@N against the whole catalog."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Instance, batch_sequences
from .model import BDPLParams, GraphCache, TrainConfig, forward
from .numerics import kernels

CUTOFFS = (5, 10, 20)


@dataclass(frozen=True)
class RankingResult:
    instance: int
    rank: int

    def hit(self, n: int) -> float:
        return 1.0 if self.rank <= n else 0.0

    def ndcg(self, n: int) -> float:
        return 1.0 / math.log2(self.rank + 1) if self.rank <= n else 0.0


@dataclass
class MetricsReport:
    split: str
    instances: int
    hr: dict[int, float]
    ndcg: dict[int, float]
    seconds: float = 0.0

    def to_dict(self) -> dict:
        out = {}
        for n in CUTOFFS:
            out[f"hr@{n}"] = self.hr[n]
        for n in CUTOFFS:
            out[f"ndcg@{n}"] = self.ndcg[n]
        out["instances"] = self.instances
        out["seconds"] = self.seconds
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        keys = [f"hr@{n}" for n in CUTOFFS] + [f"ndcg@{n}" for n in CUTOFFS]
        d = self.to_dict()
        head = f"{'split':<8}{'instances':>10}" + "".join(f"{k:>10}" for k in keys)
        row = f"{self.split:<8}{self.instances:>10}" + "".join(f"{d[k]:>10.4f}" for k in keys)
        return head + "\n" + row + "\n"


def rank_target(scores, target: int) -> int:
    """1-based rank of item ``target`` (1-based; ``scores[0]`` is item 1).

    Items with a strictly greater score rank ahead; ties go to the lower item
    index.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1:
        raise ValueError("scores must be one-dimensional")
    if not 1 <= int(target) <= s.shape[0]:
        raise ValueError(f"target {target} out of range 1..{s.shape[0]}")
    return int(kernels.rank_rows(s[None, :], np.array([int(target) - 1]))[0])


def rank_batch(scores: np.ndarray, targets) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    t = np.asarray(targets, dtype=np.int64)
    if np.any((t < 1) | (t > scores.shape[1])):
        raise ValueError(f"targets out of range 1..{scores.shape[1]}")
    return kernels.rank_rows(scores, t - 1)


def compute_metrics(results: Sequence[RankingResult], split: str = "", seconds: float = 0.0) -> MetricsReport:
    if not results:
        raise ValueError("cannot compute metrics over zero instances")
    ranks = np.array([r.rank for r in results], dtype=np.float64)
    hr = {n: float(np.mean(ranks <= n)) for n in CUTOFFS}
    gains = 1.0 / np.log2(ranks + 1.0)
    ndcg = {n: float(np.mean(np.where(ranks <= n, gains, 0.0))) for n in CUTOFFS}
    return MetricsReport(split, len(results), hr, ndcg, seconds)


def score_instances(params: BDPLParams, config: TrainConfig, instances: Sequence[Instance],
                    cache: GraphCache | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode logits for every instance, in input order, with targets."""
    cache = cache or GraphCache()
    chunks, targets = [], []
    for batch in batch_sequences(list(instances), config.eval_batch_size, config.n_max):
        out = forward(batch, params, config, "eval", cache=cache)
        chunks.append(out.logits.value)
        targets.append(batch.targets)
    if not chunks:
        return np.zeros((0, params.n_items)), np.zeros(0, dtype=np.int64)
    return np.concatenate(chunks), np.concatenate(targets)


def evaluate_params(params: BDPLParams, config: TrainConfig, instances: Sequence[Instance],
                    split: str = "", cache: GraphCache | None = None) -> MetricsReport:
    start = time.perf_counter()
    scores, targets = score_instances(params, config, instances, cache)
    ranks = rank_batch(scores, targets)
    results = [RankingResult(k, int(r)) for k, r in enumerate(ranks)]
    seconds = round(time.perf_counter() - start, 3) if config.report_timing else 0.0
    return compute_metrics(results, split, seconds)


def evaluate(checkpoint, split, name: str = "test") -> MetricsReport:
    """Evaluate a checkpoint on one named part of a split (or an instance list)."""
    instances = getattr(split, name) if hasattr(split, name) else split
    if not instances:
        raise ValueError(f"split {name!r} has no instances")
    return evaluate_params(checkpoint.params, checkpoint.config, instances, name)
