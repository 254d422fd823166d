"""Experiment front end: YAML configs, single runs, class-count sweeps, ablations.

Every output lands under the configured output directory::

    <out>/runs/<variant>_N<n>_seed<s>/metrics.json   deterministic final metrics
    <out>/runs/<variant>_N<n>_seed<s>/timing.json    wall-clock timestamps
    <out>/runs/<variant>_N<n>_seed<s>/log.csv        one row per epoch
    <out>/runs/<variant>_N<n>_seed<s>/*.ckpt         phase1 / final parameters
    <out>/<kind>_results.json / .csv                 ResultsTable rows + aggregates
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import statistics
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .data import DomainPair, PdaTaskSpec, load_idx, make_blob_task
from .errors import ConfigError, TwinsError
from .metrics import export_features, write_features_csv
from .nn import OptimizerConfig, init_pair, load_checkpoint
from .trainer import MethodVariant, TrainLog, TrainSchedule, run

logger = logging.getLogger(__name__)

METRIC_FIELDS = [
    "accuracy_f1", "accuracy_f2", "accuracy_fused",
    "weight_tv", "absent_mass", "disagree_rate", "mean_l1",
]
ALL_VARIANTS = [v.value for v in MethodVariant]


# -- config ------------------------------------------------------------------------


@dataclass
class IdxDomain:
    train_images: str
    train_labels: str
    test_images: str
    test_labels: str


@dataclass
class IdxTask:
    source: IdxDomain
    target: IdxDomain
    keep_classes: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    n_classes: int = 10
    image_size: list[int] | None = None


@dataclass
class TaskConfig:
    kind: str = "blobs"
    blobs: PdaTaskSpec = field(default_factory=PdaTaskSpec)
    idx: IdxTask | None = None


@dataclass
class ModelConfig:
    widths: list[int] = field(default_factory=lambda: [2, 64, 64, 10])
    dropout: float = 0.0


@dataclass
class ExperimentConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    variants: list[str] = field(default_factory=lambda: ["twins", "source_only"])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    class_counts: list[int] = field(default_factory=lambda: [3, 5, 7, 10])
    out_dir: str = "runs"


# Per-run seeds drive data, init and shuffling, so neither nested seed is a config key.
_EXCLUDED = {"PdaTaskSpec": {"seed"}, "TrainSchedule": {"seed"}}


def _from_dict(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping, got {type(data).__name__}", path)
    known = {f.name: f for f in dataclasses.fields(cls) if f.name not in _EXCLUDED.get(cls.__name__, ())}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown}", f"{path}.{unknown[0]}" if path else unknown[0])
    kwargs = {}
    for name, value in data.items():
        sub = f"{path}.{name}" if path else name
        kwargs[name] = _coerce(_NESTED.get((cls.__name__, name)), _default(known[name]), value, sub)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc), path or "config") from None


def _default(f: dataclasses.Field) -> Any:
    if f.default is not dataclasses.MISSING:
        return f.default
    if f.default_factory is not dataclasses.MISSING:
        return f.default_factory()
    return None


def _coerce(nested, default, value, path):
    if nested is not None:
        if value is None and nested is IdxTask:
            return None
        # a partial section overrides the enclosing default, not the class default
        if dataclasses.is_dataclass(default) and isinstance(value, dict):
            value = {**_to_dict(default), **value}
        return _from_dict(nested, value, path)
    if value is None:
        return None
    if isinstance(value, bool) or isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}", path)
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", path)
        return value
    if isinstance(default, float):
        if not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", path)
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", path)
        return value
    if isinstance(value, list):
        return list(value)
    return value


_NESTED = {
    ("ExperimentConfig", "task"): TaskConfig,
    ("ExperimentConfig", "model"): ModelConfig,
    ("ExperimentConfig", "schedule"): TrainSchedule,
    ("TaskConfig", "blobs"): PdaTaskSpec,
    ("TaskConfig", "idx"): IdxTask,
    ("IdxTask", "source"): IdxDomain,
    ("IdxTask", "target"): IdxDomain,
    ("TrainSchedule", "optimizer"): OptimizerConfig,
}


def _to_dict(obj) -> Any:
    if dataclasses.is_dataclass(obj):
        skip = _EXCLUDED.get(type(obj).__name__, ())
        return {f.name: _to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj) if f.name not in skip}
    if isinstance(obj, (list, tuple)):
        return [_to_dict(v) for v in obj]
    return obj


def validate_config(cfg: ExperimentConfig, base_dir: Path | None = None) -> None:
    if not cfg.seeds:
        raise ConfigError("seeds must be nonempty", "seeds")
    if any(not isinstance(s, int) or s < 0 for s in cfg.seeds):
        raise ConfigError("seeds must be nonnegative integers", "seeds")
    if not cfg.variants:
        raise ConfigError("variants must be nonempty", "variants")
    for i, v in enumerate(cfg.variants):
        if v not in ALL_VARIANTS:
            raise ConfigError(f"unknown variant {v!r}; choose from {ALL_VARIANTS}", f"variants[{i}]")
    if len(cfg.model.widths) < 2 or any(not isinstance(w, int) or w < 1 for w in cfg.model.widths):
        raise ConfigError("widths must be >= 2 positive integers", "model.widths")
    if not 0.0 <= cfg.model.dropout < 1.0:
        raise ConfigError("dropout must be in [0, 1)", "model.dropout")
    cfg.schedule.validate()
    kind = cfg.task.kind
    if kind == "blobs":
        cfg.task.blobs.validate()
        for i, n in enumerate(cfg.class_counts):
            if not 1 <= n <= cfg.task.blobs.n_classes:
                raise ConfigError(f"N={n} outside [1, {cfg.task.blobs.n_classes}]", f"class_counts[{i}]")
    elif kind == "idx":
        idx = cfg.task.idx
        if idx is None:
            raise ConfigError("kind is idx but no idx section given", "task.idx")
        for side in ("source", "target"):
            for name in ("train_images", "train_labels", "test_images", "test_labels"):
                p = Path(getattr(getattr(idx, side), name))
                if base_dir is not None and not p.is_absolute():
                    p = base_dir / p
                if not p.is_file():
                    raise ConfigError(f"file not found: {p}", f"task.idx.{side}.{name}")
        if any(not 0 <= c < idx.n_classes for c in idx.keep_classes):
            raise ConfigError("kept classes must lie in [0, n_classes)", "task.idx.keep_classes")
    else:
        raise ConfigError(f"unknown task kind {kind!r}; use blobs or idx", "task.kind")


def parse_config(data: dict | None, base_dir: Path | None = None) -> ExperimentConfig:
    cfg = _from_dict(ExperimentConfig, data or {}, "")
    validate_config(cfg, base_dir)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"not valid YAML: {exc}", str(path)) from None
    except OSError as exc:
        raise ConfigError(str(exc), "--config") from None
    cfg = parse_config(data, path.parent)
    if cfg.task.kind == "idx":
        _resolve_idx_paths(cfg.task.idx, path.parent)
    return cfg


def _resolve_idx_paths(idx: IdxTask, base: Path) -> None:
    for side in (idx.source, idx.target):
        for f in dataclasses.fields(side):
            p = Path(getattr(side, f.name))
            if not p.is_absolute():
                setattr(side, f.name, str(base / p))


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return _to_dict(cfg)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)


# -- tasks and runs ----------------------------------------------------------------


def build_task(cfg: ExperimentConfig, n_target: int | None, seed: int) -> DomainPair:
    """Materialize the task; ``n_target`` overrides the number of kept target classes."""
    if cfg.task.kind == "blobs":
        spec = dataclasses.replace(cfg.task.blobs, seed=seed, translation=list(cfg.task.blobs.translation))
        if n_target is not None:
            spec.n_target_classes = n_target
        return make_blob_task(spec)
    idx = cfg.task.idx
    keep = idx.keep_classes if n_target is None else list(range(n_target))
    size = tuple(idx.image_size) if idx.image_size else None
    k = idx.n_classes
    s, t = idx.source, idx.target
    return DomainPair(
        load_idx(s.train_images, s.train_labels, class_universe=k, split="train", size=size),
        load_idx(s.test_images, s.test_labels, class_universe=k, split="test", size=size),
        load_idx(t.train_images, t.train_labels, keep, k, "train", size),
        load_idx(t.test_images, t.test_labels, keep, k, "test", size),
    )


def _n_target(cfg: ExperimentConfig) -> int:
    return cfg.task.blobs.n_target_classes if cfg.task.kind == "blobs" else len(cfg.task.idx.keep_classes)


class ResultsTable:
    """One row per completed (variant, N, seed) run plus per-(variant, N) aggregates."""

    def __init__(self) -> None:
        self.rows: list[dict] = []

    def add(self, row: dict) -> None:
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def aggregate(self) -> list[dict]:
        groups: dict[tuple[str, int], list[dict]] = {}
        for r in self.rows:
            if r["status"] == "ok":
                groups.setdefault((r["variant"], r["n_classes"]), []).append(r)
        out = []
        for (variant, n), rows in groups.items():
            agg: dict[str, Any] = {"variant": variant, "n_classes": n, "n_seeds": len(rows)}
            for m in METRIC_FIELDS:
                vals = [r[m] for r in rows]
                agg[f"{m}_mean"] = statistics.fmean(vals)
                agg[f"{m}_stdev"] = statistics.stdev(vals) if len(vals) >= 2 else 0.0
            out.append(agg)
        return out

    def mean(self, variant: str, n: int, metric: str = "accuracy_fused") -> float:
        for a in self.aggregate():
            if a["variant"] == variant and a["n_classes"] == n:
                return a[f"{metric}_mean"]
        raise KeyError((variant, n))

    def to_json(self) -> str:
        return json.dumps({"rows": self.rows, "aggregate": self.aggregate()}, indent=2, sort_keys=True) + "\n"

    def write(self, out_dir: Path, stem: str) -> None:
        (out_dir / f"{stem}.json").write_text(self.to_json())
        cols = ["variant", "n_classes", "seed", "status"] + METRIC_FIELDS
        with open(out_dir / f"{stem}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(cols)
            for r in self.rows:
                writer.writerow([r[c] for c in cols])

    def format(self) -> str:
        lines = [f"{'variant':18s} {'N':>3s} {'seeds':>5s}  {'acc_fused':>15s}  {'absent':>7s}  {'tv':>7s}"]
        for a in sorted(self.aggregate(), key=lambda a: (a["n_classes"], a["variant"])):
            lines.append(
                f"{a['variant']:18s} {a['n_classes']:3d} {a['n_seeds']:5d}  "
                f"{a['accuracy_fused_mean']:.4f}+-{a['accuracy_fused_stdev']:.4f}  "
                f"{a['absent_mass_mean']:7.4f}  {a['weight_tv_mean']:7.4f}"
            )
        return "\n".join(lines)


def _inside(root: Path, path: Path) -> Path:
    root, path = root.resolve(), path.resolve()
    if root != path and root not in path.parents:
        raise ConfigError(f"{path} escapes the output directory", "out_dir")
    return path


def metrics_payload(variant: str, n_target: int, seed: int, log: TrainLog) -> dict:
    final = log.final or {m: None for m in METRIC_FIELDS}
    payload = {"variant": variant, "n_classes": n_target, "seed": seed, "status": log.status, "message": log.message}
    payload.update({m: final[m] for m in METRIC_FIELDS})
    return payload


def run_one(cfg: ExperimentConfig, variant: str, n_target: int | None, seed: int, out_dir: Path) -> tuple[dict, Any]:
    """Train one (variant, N, seed) triple and persist its artifacts under ``out_dir``."""
    n = n_target if n_target is not None else _n_target(cfg)
    run_dir = _inside(out_dir, out_dir / "runs" / f"{variant}_N{n}_seed{seed}")
    run_dir.mkdir(parents=True, exist_ok=True)
    started = time.time()
    task = build_task(cfg, n_target, seed)
    schedule = dataclasses.replace(cfg.schedule, seed=seed)
    pair = init_pair(cfg.model.widths, seed, cfg.model.dropout)
    pair, log = run(variant, task, schedule, pair=pair, checkpoint_dir=run_dir)
    log.to_csv(run_dir / "log.csv")
    payload = metrics_payload(variant, n, seed, log)
    (run_dir / "metrics.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    timing = {"started": started, "finished": time.time()}
    (run_dir / "timing.json").write_text(json.dumps(timing, indent=2) + "\n")
    logger.info("%s N=%d seed=%d: %s fused=%s", variant, n, seed, log.status, payload["accuracy_fused"])
    return payload, pair


def _grid(cfg: ExperimentConfig, variants, counts, stem: str) -> ResultsTable:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(cfg))
    table = ResultsTable()
    for n in counts:
        for seed in cfg.seeds:
            for variant in variants:
                payload, _ = run_one(cfg, variant, n, seed, out)
                table.add(payload)
    table.write(out, stem)
    return table


def run_single(cfg: ExperimentConfig) -> ResultsTable:
    return _grid(cfg, cfg.variants, [None], "results")


def run_sweep(cfg: ExperimentConfig, class_counts: list[int] | None = None) -> ResultsTable:
    counts = list(class_counts if class_counts is not None else cfg.class_counts)
    universe = cfg.task.blobs.n_classes if cfg.task.kind == "blobs" else cfg.task.idx.n_classes
    for i, n in enumerate(counts):
        if not 1 <= n <= universe:
            raise ConfigError(f"N={n} outside [1, {universe}]", f"class_counts[{i}]")
    return _grid(cfg, cfg.variants, counts, "sweep_results")


def run_ablations(cfg: ExperimentConfig) -> ResultsTable:
    return _grid(cfg, ALL_VARIANTS, [None], "ablation_results")


def run_export(cfg: ExperimentConfig, checkpoint: str | None, layer: int | None, network: str) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.seeds[0]
    if checkpoint is not None:
        pair = load_checkpoint(checkpoint)
    else:
        _, pair = run_one(cfg, cfg.variants[0], None, seed, out)
    task = build_task(cfg, None, seed)
    keep = task.target_classes()
    feats, meta = [], []
    for ds, domain in ((task.source_test, "source"), (task.target_test, "target")):
        ds = dataclasses.replace(ds, name=domain)
        f, m = export_features(pair, ds, layer, keep, network)
        feats.append(f)
        meta.extend(m)
    path = _inside(out, out / "features.csv")
    write_features_csv(path, np.concatenate(feats), meta)
    return path


# -- entry point -------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="twins", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb, text in [
        ("run", "train the configured variants for every seed"),
        ("sweep", "vary the number of target classes"),
        ("ablate", "run all four variants on identical tasks and seeds"),
        ("export-features", "write hidden features of source and target test rows"),
    ]:
        p = sub.add_parser(verb, help=text)
        p.add_argument("--config", help="YAML experiment config (defaults are used when omitted)")
        p.add_argument("--out", help="output directory (overrides out_dir)")
        p.add_argument("--seed-override", type=int, help="run this single seed instead of the config list")
        p.add_argument("--variant", action="append", choices=ALL_VARIANTS,
                       help="restrict to this variant (repeatable)")
        if verb == "sweep":
            p.add_argument("--counts", type=int, nargs="+", help="target class counts, e.g. 3 5 7 10")
        if verb == "export-features":
            p.add_argument("--checkpoint", help="checkpoint to load instead of training")
            p.add_argument("--layer", type=int, help="hidden layer index (default: last hidden)")
            p.add_argument("--network", choices=["f1", "f2"], default="f1")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else parse_config({})
        if args.out:
            cfg.out_dir = args.out
        if args.seed_override is not None:
            cfg.seeds = [args.seed_override]
        if args.variant:
            cfg.variants = list(dict.fromkeys(args.variant))
        validate_config(cfg)
        if args.verb == "run":
            table = run_single(cfg)
        elif args.verb == "sweep":
            table = run_sweep(cfg, args.counts)
        elif args.verb == "ablate":
            table = run_ablations(cfg)
        else:
            print(run_export(cfg, args.checkpoint, args.layer, args.network))
            return 0
    except TwinsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(table.format())
    return 1 if any(r["status"] != "ok" for r in table.rows) else 0


if __name__ == "__main__":
    sys.exit(main())
