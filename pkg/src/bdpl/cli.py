"""Command-line entry point: ``bdpl {preprocess,train,evaluate,experiment,synthesize}``.

Every command takes ``--config PATH`` and writes the fully resolved
configuration to ``<output_dir>/config.json``.  Exit status is 0 only when
all requested work succeeded.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

from .config import RunConfig
from .data import (
    SCHEMA_VERSION,
    DataError,
    DatasetSplit,
    load_interactions,
    load_split,
    preprocess,
    save_split,
    split_leave_one_out,
    write_interactions,
)
from .metrics import evaluate
from .model import ABLATIONS, ConfigError
from .train import Checkpoint, CheckpointError, TrainingDiverged, fit, telemetry_csv

SUITES = {
    "ablation": [("full", {}), ("w/o BGE", {"no_bge": True}), ("w/o SPL", {"no_spl": True}),
                 ("w/o LPL", {"no_lpl": True}), ("w/o CL_short", {"no_cl_short": True}),
                 ("w/o CL_long", {"no_cl_long": True})],
    "cascade": [("tar2aux", {"cascade_direction": "tar2aux"}), ("aux2tar", {"cascade_direction": "aux2tar"})],
}

_OVERRIDES = (("seed", "seed"), ("max_epochs", "max_epochs"), ("lambda1", "lambda1"),
              ("lambda2", "lambda2"), ("layers", "layers"), ("cascade_direction", "cascade_direction"))


class CommandError(Exception):
    pass


def _out(text: str = "") -> None:
    print(text, flush=True)


# ---------------------------------------------------------------------------
# config handling


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    changes = {field: getattr(args, attr) for attr, field in _OVERRIDES
               if getattr(args, attr, None) is not None}
    for flag in getattr(args, "ablate", None) or ():
        changes[flag] = True
    if changes:
        cfg = cfg.with_train(**changes)
    return cfg


def echo_config(cfg: RunConfig, directory: str | Path | None = None) -> Path:
    out = Path(directory or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.json"
    path.write_text(cfg.dumps(), encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# preprocessing


def _fingerprint(cfg: RunConfig) -> str:
    h = hashlib.sha256()
    recipe = {"schema_version": SCHEMA_VERSION, "behavior_map": cfg.behavior_map,
              "min_item_interactions": cfg.min_item_interactions,
              "min_user_interactions": cfg.min_user_interactions}
    if cfg.interactions is not None:
        try:
            h.update(Path(cfg.interactions).read_bytes())
        except FileNotFoundError:
            raise CommandError(f"input file not found: {cfg.interactions}") from None
    elif cfg.synthetic is not None:
        recipe["synthetic"] = cfg.synthetic.to_dict()
    else:
        raise CommandError("config names neither 'interactions' nor 'synthetic'")
    h.update(json.dumps(recipe, sort_keys=True).encode())
    return h.hexdigest()


def _meta_path(cache: str | Path) -> Path:
    return Path(str(cache) + ".meta.json")


def summary_table(name: str, split: DatasetSplit) -> str:
    s = split.stats
    header = ("Dataset", "#Users", "#Items", "#Examinations", "#Purchases", "Avg. length")
    row = (name, str(s["users"]), str(s["items"]), str(s["examinations"]), str(s["purchases"]),
           f"{s['avg_length']:.2f}")
    widths = [max(len(a), len(b)) for a, b in zip(header, row)]
    lines = ["  ".join(h.ljust(w) if k == 0 else h.rjust(w) for k, (h, w) in enumerate(zip(header, widths))),
             "  ".join(c.ljust(w) if k == 0 else c.rjust(w) for k, (c, w) in enumerate(zip(row, widths)))]
    return "\n".join(lines)


def run_preprocess(cfg: RunConfig) -> tuple[DatasetSplit, bool]:
    """Build (or reuse) the split cache; returns the split and whether the
    cache was reused."""
    fingerprint = _fingerprint(cfg)
    cache, meta = Path(cfg.cache), _meta_path(cfg.cache)
    if cache.exists() and meta.exists():
        try:
            stored = json.loads(meta.read_text(encoding="utf-8")).get("fingerprint")
        except json.JSONDecodeError:
            stored = None
        if stored == fingerprint:
            return load_split(cache), True
    if cfg.interactions is not None:
        rows = load_interactions(cfg.interactions, cfg.behavior_map)
    else:
        rows = cfg.synthetic.generate()
    seqs = preprocess(rows, cfg.min_item_interactions, cfg.min_user_interactions)
    split = split_leave_one_out(seqs)
    cache.parent.mkdir(parents=True, exist_ok=True)
    save_split(split, cache)
    meta.write_text(json.dumps({"fingerprint": fingerprint}) + "\n", encoding="utf-8")
    return split, False


def _load_cache(cfg: RunConfig) -> DatasetSplit:
    if not Path(cfg.cache).exists():
        raise CommandError(f"preprocessed cache not found: {cfg.cache} (run 'bdpl preprocess' first)")
    return load_split(cfg.cache)


# ---------------------------------------------------------------------------
# commands


def cmd_preprocess(args) -> int:
    cfg = resolve_config(args)
    split, reused = run_preprocess(cfg)
    echo_config(cfg)
    _out(f"cache {'reused' if reused else 'written'}: {cfg.cache}")
    _out(summary_table(cfg.name, split))
    _out(f"users dropped by split (fewer than 2 purchases): {split.dropped_users}")
    _out(f"instances: train {len(split.train)}, valid {len(split.valid)}, test {len(split.test)}")
    return 0


def cmd_synthesize(args) -> int:
    cfg = resolve_config(args)
    if cfg.synthetic is None:
        raise CommandError("config has no 'synthetic' section")
    target = args.output or cfg.interactions
    if target is None:
        raise CommandError("no output path: pass --output or set 'interactions'")
    Path(target).parent.mkdir(parents=True, exist_ok=True)
    rows = cfg.synthetic.generate()
    write_interactions(rows, target)
    _out(f"wrote {len(rows)} interactions to {target}")
    return 0


def _print_epoch(record) -> None:
    _out(f"epoch {record.epoch:3d}  rec {record.rec_loss:.4f}  cl_short {record.cl_short:.4f}  "
         f"cl_long {record.cl_long:.4f}  valid hr@10 {record.valid_hr10:.4f}")


def train_run(cfg: RunConfig, split: DatasetSplit, out_dir: Path, verbose: bool = True) -> Checkpoint:
    out_dir.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out_dir)
    ckpt = fit(split, cfg.train, on_epoch=_print_epoch if verbose else None)
    ckpt.save(out_dir / "checkpoint.ckpt")
    (out_dir / "telemetry.csv").write_text(telemetry_csv(ckpt.telemetry), encoding="utf-8", newline="\n")
    return ckpt


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    split = _load_cache(cfg)
    out = Path(cfg.output_dir)
    ckpt = train_run(cfg, split, out, verbose=not args.quiet)
    best = "n/a" if ckpt.best_valid_hr10 is None else f"{ckpt.best_valid_hr10:.4f}"
    _out(f"best epoch {ckpt.epoch} (valid hr@10 {best}); checkpoint {out / 'checkpoint.ckpt'}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args)
    split = _load_cache(cfg)
    path = Path(args.checkpoint or Path(cfg.output_dir) / "checkpoint.ckpt")
    ckpt = Checkpoint.load(path)
    if ckpt.n_items != split.n_items:
        raise CommandError(f"checkpoint has {ckpt.n_items} items but the cache has {split.n_items}")
    report = evaluate(ckpt, split, args.split)
    echo_config(cfg)
    target = Path(args.output or Path(cfg.output_dir) / f"metrics_{args.split}.json")
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(report.to_json(), encoding="utf-8", newline="\n")
    _out(report.to_json().rstrip("\n") if args.json else report.to_text().rstrip("\n"))
    return 0


def experiment_table(rows: list[dict]) -> str:
    header = ("Variant", "HR@10", "NDCG@10", "Status")
    body = [(r["variant"], "-" if r["hr@10"] is None else f"{r['hr@10']:.4f}",
             "-" if r["ndcg@10"] is None else f"{r['ndcg@10']:.4f}", r["status"]) for r in rows]
    widths = [max(len(str(x)) for x in col) for col in zip(header, *body)]
    fmt = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()  # noqa: E731
    return "\n".join([fmt(header)] + [fmt(b) for b in body])


def run_suite(cfg: RunConfig, split: DatasetSplit, suite: str, verbose: bool = False) -> list[dict]:
    rows = []
    root = Path(cfg.output_dir) / f"experiment_{suite}"
    for k, (label, flags) in enumerate(SUITES[suite]):
        row = {"variant": label, "hr@10": None, "ndcg@10": None, "status": "ok"}
        try:
            variant = cfg.with_train(**flags)
            ckpt = train_run(variant, split, root / f"{k}_{label.replace('/', '').replace(' ', '_')}", verbose)
            report = evaluate(ckpt, split, "test")
            row["hr@10"], row["ndcg@10"] = report.hr[10], report.ndcg[10]
        except (TrainingDiverged, ConfigError, ValueError, FloatingPointError) as exc:
            row["status"] = f"failed: {exc}"
        rows.append(row)
        if verbose:
            _out(f"{label}: {row['status']}")
    return rows


def cmd_experiment(args) -> int:
    cfg = resolve_config(args)
    split = _load_cache(cfg)
    echo_config(cfg)
    rows = run_suite(cfg, split, args.suite, verbose=args.verbose)
    table = experiment_table(rows)
    out = Path(cfg.output_dir)
    (out / f"experiment_{args.suite}.json").write_text(json.dumps(rows, indent=2) + "\n", encoding="utf-8")
    (out / f"experiment_{args.suite}.txt").write_text(table + "\n", encoding="utf-8")
    _out(table)
    failed = sum(r["status"] != "ok" for r in rows)
    if failed:
        print(f"bdpl: {failed} of {len(rows)} variants failed", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bdpl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="run configuration (JSON)")
        p.add_argument("--seed", type=int)
        p.add_argument("--max-epochs", type=int, dest="max_epochs")
        p.add_argument("--lambda1", type=float)
        p.add_argument("--lambda2", type=float)
        p.add_argument("--layers", type=int)
        p.add_argument("--cascade-direction", choices=("tar2aux", "aux2tar"), dest="cascade_direction")
        p.add_argument("--ablate", action="append", choices=ABLATIONS, metavar="FLAG",
                       help=f"disable a component; one of {', '.join(ABLATIONS)} (repeatable)")
        p.set_defaults(func=func)
        return p

    add("preprocess", cmd_preprocess, "load, filter and split raw interactions into the cache")
    p = add("synthesize", cmd_synthesize, "write the configured synthetic interactions to a file")
    p.add_argument("--output", help="destination file (defaults to the config's 'interactions')")
    p = add("train", cmd_train, "train a model from the preprocessed cache")
    p.add_argument("--quiet", action="store_true", help="suppress per-epoch lines")
    p = add("evaluate", cmd_evaluate, "full-ranking evaluation of a checkpoint")
    p.add_argument("--checkpoint", help="checkpoint path (defaults to <output_dir>/checkpoint.ckpt)")
    p.add_argument("--split", choices=("valid", "test"), default="test")
    p.add_argument("--output", help="metrics JSON path (defaults to <output_dir>/metrics_<split>.json)")
    p.add_argument("--json", action="store_true", help="print JSON instead of the text table")
    p = add("experiment", cmd_experiment, "train and compare a suite of variants")
    p.add_argument("suite", choices=sorted(SUITES))
    p.add_argument("--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CommandError, ConfigError, DataError, CheckpointError, TrainingDiverged, OSError) as exc:
        print(f"bdpl: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
