"""Training loop with early stopping on validation HR@10, telemetry and
checkpoint persistence."""

from __future__ import annotations

import io
import json
import logging
import math
import os
import time
import zipfile
from dataclasses import dataclass, field

import numpy as np

from .data import PAD, DatasetSplit, batch_sequences
from .metrics import evaluate_params
from .model import BDPLParams, GraphCache, TrainConfig, forward
from .numerics import Adam, Tape

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
TELEMETRY_COLUMNS = ("epoch", "rec_loss", "cl_short", "cl_long", "valid_hr@10", "seconds")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite joint loss ({value}) at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


class CheckpointError(ValueError):
    pass


@dataclass
class EpochRecord:
    epoch: int
    rec_loss: float
    cl_short: float
    cl_long: float
    valid_hr10: float
    seconds: float

    def row(self) -> str:
        return (f"{self.epoch},{self.rec_loss:.6f},{self.cl_short:.6f},{self.cl_long:.6f},"
                f"{self.valid_hr10:.6f},{self.seconds:.3f}")


@dataclass
class Checkpoint:
    params: BDPLParams
    config: TrainConfig
    epoch: int = 0
    best_valid_hr10: float | None = None
    rng_state: dict | None = None
    n_items: int = 0
    telemetry: list[EpochRecord] = field(default_factory=list)

    def metadata(self) -> dict:
        return {"kind": "bdpl-checkpoint", "version": CHECKPOINT_VERSION, "config": self.config.to_dict(),
                "epoch": self.epoch, "best_valid_hr10": self.best_valid_hr10, "rng_state": self.rng_state,
                "n_items": self.n_items,
                "shapes": {k: list(t.shape) for k, t in self.params.named().items()}}

    def save(self, path: str | os.PathLike) -> None:
        """Zip container: ``metadata.json`` plus one ``.npy`` per parameter."""
        with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
            _write_member(zf, "metadata.json", json.dumps(self.metadata(), sort_keys=True, indent=2).encode())
            for name, t in sorted(self.params.named().items()):
                buf = io.BytesIO()
                np.save(buf, t.value, allow_pickle=False)
                _write_member(zf, f"params/{name}.npy", buf.getvalue())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Checkpoint":
        try:
            with zipfile.ZipFile(path) as zf:
                meta = json.loads(zf.read("metadata.json"))
                arrays = {}
                for member in zf.namelist():
                    if member.startswith("params/") and member.endswith(".npy"):
                        arrays[member[len("params/"):-len(".npy")]] = np.load(io.BytesIO(zf.read(member)),
                                                                             allow_pickle=False)
        except (zipfile.BadZipFile, KeyError, ValueError, OSError) as exc:
            raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
        if meta.get("kind") != "bdpl-checkpoint":
            raise CheckpointError(f"{path}: not a checkpoint")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: checkpoint version {meta.get('version')} is not supported "
                                  f"(expected {CHECKPOINT_VERSION})")
        config = TrainConfig.from_dict(meta["config"])
        params = BDPLParams.init(int(meta["n_items"]), config, np.random.default_rng(0))
        try:
            params.load(arrays)
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"{path}: {exc}") from exc
        return cls(params, config, int(meta["epoch"]), meta["best_valid_hr10"], meta["rng_state"],
                   int(meta["n_items"]))


def _write_member(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    # fixed timestamp keeps the container byte-stable across runs
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    zf.writestr(info, payload)


def telemetry_csv(records) -> str:
    return ",".join(TELEMETRY_COLUMNS) + "\n" + "".join(r.row() + "\n" for r in records)


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch]))


def train_step(batch, params: BDPLParams, config: TrainConfig, optimizer: Adam, rng, cache) -> tuple:
    named = optimizer.params
    optimizer.zero_grad()
    with Tape() as tape:
        out = forward(batch, params, config, "train", rng=rng, cache=cache)
        loss = out.joint(config)
    tape.backward(loss, wrt=list(named.values()))
    params.items.grad[PAD] = 0.0
    optimizer.step()
    params.items.value[PAD] = 0.0
    parts = tuple(float(t.value) if t is not None else 0.0 for t in (out.rec, out.cl_short, out.cl_long))
    return float(loss.value), parts


def fit(split: DatasetSplit, config: TrainConfig, on_epoch=None) -> Checkpoint:
    """Adam on the joint loss with early stopping on validation HR@10.

    The returned checkpoint holds the best-scoring parameters.  ``on_epoch``
    receives each :class:`EpochRecord` as it is produced.
    """
    if not split.train:
        raise ValueError("training split is empty")
    init_rng = np.random.default_rng(np.random.SeedSequence([config.seed]))
    params = BDPLParams.init(split.n_items, config, init_rng)
    ckpt = Checkpoint(params, config, 0, None, init_rng.bit_generator.state, split.n_items)
    if config.max_epochs == 0:
        return ckpt

    optimizer = Adam(params.named(), learning_rate=config.learning_rate)
    cache = GraphCache()
    best, best_arrays, stale = -math.inf, params.snapshot(), 0
    for epoch in range(1, config.max_epochs + 1):
        start = time.perf_counter()
        rng = _epoch_rng(config.seed, epoch)
        batches = batch_sequences(split.train, config.batch_size, config.n_max,
                                  shuffle_seed=int(rng.integers(2**31)))
        sums = np.zeros(3)
        for b, batch in enumerate(batches):
            loss, parts = train_step(batch, params, config, optimizer, rng, cache)
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch, b, loss)
            sums += np.array(parts) * len(batch)
        means = sums / len(split.train)
        valid = evaluate_params(params, config, split.valid, "valid", cache) if split.valid else None
        hr10 = valid.hr[10] if valid is not None else 0.0
        seconds = time.perf_counter() - start if config.report_timing else 0.0
        record = EpochRecord(epoch, *means, hr10, seconds)
        ckpt.telemetry.append(record)
        log.info("epoch %d rec %.4f cl_s %.4f cl_l %.4f valid hr@10 %.4f", epoch, *means, hr10)
        if on_epoch is not None:
            on_epoch(record)
        if hr10 > best:
            best, best_arrays, stale = hr10, params.snapshot(), 0
            ckpt.epoch, ckpt.best_valid_hr10 = epoch, hr10
            ckpt.rng_state = rng.bit_generator.state
        else:
            stale += 1
            if stale >= config.patience:
                break
    params.load(best_arrays)
    return ckpt
