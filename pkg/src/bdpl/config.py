"""Run configuration: one flat JSON document holding data paths,
preprocessing thresholds, an optional synthetic-data recipe and every
training hyperparameter."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .data import SYNTHETIC_BEHAVIOR_MAP, generate_synthetic, planted_transition_table
from .model import ConfigError, TrainConfig


@dataclass
class SyntheticSpec:
    users: int = 300
    items: int = 200
    fanout: int = 2
    concentration: float = 0.9
    exam_per_purchase: tuple[int, int] = (3, 8)
    purchases_per_user: tuple[int, int] = (6, 10)
    near_window: int = 2
    seed: int = 0

    @classmethod
    def from_dict(cls, raw: dict) -> "SyntheticSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown synthetic keys: {', '.join(unknown)}")
        raw = dict(raw)
        for key in ("exam_per_purchase", "purchases_per_user"):
            if key in raw:
                raw[key] = tuple(raw[key])
        return cls(**raw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for key in ("exam_per_purchase", "purchases_per_user"):
            d[key] = list(d[key])
        return d

    def generate(self):
        table = planted_transition_table(self.items, self.fanout, self.seed, self.concentration)
        return generate_synthetic(self.users, self.items, table, self.exam_per_purchase,
                                  self.purchases_per_user, self.seed, self.near_window)


RUN_KEYS = ("name", "interactions", "behavior_map", "min_item_interactions", "min_user_interactions",
            "cache", "output_dir", "synthetic")


@dataclass
class RunConfig:
    name: str = "dataset"
    interactions: str | None = None
    behavior_map: dict = field(default_factory=lambda: dict(SYNTHETIC_BEHAVIOR_MAP))
    min_item_interactions: int = 0
    min_user_interactions: int = 0
    cache: str = "cache/split.jsonl"
    output_dir: str = "runs/default"
    synthetic: SyntheticSpec | None = None
    train: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def from_dict(cls, raw: dict, base_dir: str | os.PathLike = ".") -> "RunConfig":
        train_keys = {f.name for f in dataclasses.fields(TrainConfig)}
        unknown = sorted(set(raw) - set(RUN_KEYS) - train_keys)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        run = {k: raw[k] for k in RUN_KEYS if k in raw}
        if run.get("synthetic") is not None:
            run["synthetic"] = SyntheticSpec.from_dict(run["synthetic"])
        base = Path(base_dir)
        for key in ("interactions", "cache", "output_dir"):
            if run.get(key) is not None:
                run[key] = os.path.normpath(base / run[key])
        train = TrainConfig.from_dict({k: v for k, v in raw.items() if k in train_keys})
        return cls(train=train, **run)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RunConfig":
        p = Path(path)
        try:
            raw = json.loads(p.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"{p}: config file not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{p}: top level must be an object")
        return cls.from_dict(raw, p.parent)

    def to_dict(self) -> dict:
        out = {"name": self.name, "interactions": self.interactions, "behavior_map": self.behavior_map,
               "min_item_interactions": self.min_item_interactions,
               "min_user_interactions": self.min_user_interactions, "cache": self.cache,
               "output_dir": self.output_dir,
               "synthetic": self.synthetic.to_dict() if self.synthetic is not None else None}
        out.update(self.train.to_dict())
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def with_train(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, train=self.train.replace(**changes))
