"""Experiment configuration, multi-seed runs, and head-count sweeps.

A config file is YAML whose sections mirror the dataclasses field for field::

    seeds: 10                 # count (0..n-1) or explicit list
    out_dir: runs/default
    task: {synthetic: {...}}  # or {path: some/dataset/dir}
    model: {...}              # ModelConfig
    train: {...}              # TrainConfig, with nested sampler/regularizer
    variants:                 # optional; each overrides train/model
      - {name: RMA-SVGD, train: {sampler: {rule: svgd}}}
    metrics: {...}            # MetricsConfig

Unknown keys anywhere are errors.
"""
from __future__ import annotations

import csv
import io
import json
import math
import re
import traceback
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

import numpy as np
import yaml

from .attention import atomic_write_text, forward_batch, pad_batch, save_checkpoint
from .data import Dataset, SyntheticTaskConfig, gen_synthetic, load_dataset
from .metrics import (
    calibration_bins,
    calibration_csv,
    ece,
    entropy_cdf,
    entropy_cdf_csv,
    head_distance,
    oe,
    predictive_entropy,
    redundancy_csv,
    redundancy_report,
    redundant_fraction,
)
from .trainer import ModelConfig, TrainConfig, evaluate, train

_NAME_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9_.+-]*$")


class ConfigError(ValueError):
    pass


class ExperimentError(RuntimeError):
    """A run failed; ``record`` is what was written to ``error.json``."""

    def __init__(self, record: dict):
        super().__init__(f"{record['type']}: {record['message']}")
        self.record = record


@dataclass(frozen=True)
class TaskConfig:
    synthetic: SyntheticTaskConfig | None = None
    path: str | None = None

    def __post_init__(self):
        if self.path is not None and self.synthetic is not None:
            raise ConfigError("task takes either 'synthetic' or 'path', not both")

    def load(self, base: Path | None = None) -> Dataset:
        if self.path is None:
            return gen_synthetic(self.synthetic or SyntheticTaskConfig())
        path = Path(self.path)
        if base is not None and not path.is_absolute():
            path = base / path
        return load_dataset(path)


@dataclass(frozen=True)
class MetricsConfig:
    dist: bool = True
    calibration: bool = True
    entropy: bool = True
    redundancy: bool = True
    n_bins: int = 10
    redundancy_threshold: float = 0.005
    attention_dump: int = 4  # test examples per run; 0 disables
    checkpoints: bool = True
    history: bool = True

    def __post_init__(self):
        if self.n_bins < 1 or self.attention_dump < 0:
            raise ConfigError("n_bins must be >= 1 and attention_dump >= 0")


@dataclass(frozen=True)
class Variant:
    name: str
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if not _NAME_RE.match(self.name):
            raise ConfigError(f"variant name {self.name!r} must match {_NAME_RE.pattern}")
        unknown = set(self.overrides) - {"train", "model"}
        if unknown:
            raise ConfigError(f"variant {self.name!r}: unknown section(s) {sorted(unknown)}")


@dataclass(frozen=True)
class ExperimentConfig:
    seeds: tuple[int, ...] = tuple(range(10))
    out_dir: str = "runs/default"
    task: TaskConfig = field(default_factory=TaskConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    variants: tuple[Variant, ...] = ()
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if self.model.n_heads < 1:
            raise ConfigError("n_heads must be >= 1")
        names = [v.name for v in self.variants]
        if len(set(names)) != len(names):
            raise ConfigError("variant names must be unique")

    def resolved_variants(self) -> list[tuple[str, ModelConfig, TrainConfig]]:
        """Each variant's effective model and train config (one per rule if none given)."""
        if not self.variants:
            return [(self.train.sampler.rule, self.model, self.train)]
        out = []
        for v in self.variants:
            model = _merge(self.model, v.overrides.get("model", {}), f"variants.{v.name}.model")
            tr = _merge(self.train, v.overrides.get("train", {}), f"variants.{v.name}.train")
            out.append((v.name, model, tr))
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        d["train"].pop("seed")  # per-run seeds come from ``seeds``
        d["variants"] = [{"name": v.name, **v.overrides} for v in self.variants]
        return d


# ---------------------------------------------------------------------------
# Strict dict -> dataclass construction
# ---------------------------------------------------------------------------


def _dataclass_type(hint):
    """The dataclass inside ``hint`` (including ``X | None``), else None."""
    if is_dataclass(hint):
        return hint
    for arg in typing.get_args(hint):
        if is_dataclass(arg):
            return arg
    return None


def build(cls, data, where: str = "config"):
    """Construct dataclass ``cls`` from a mapping, rejecting unknown keys."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}; allowed: {sorted(known)}")
    kwargs = {}
    for key, value in data.items():
        sub = _dataclass_type(hints[key])
        if sub is not None and (value is None or isinstance(value, dict)):
            kwargs[key] = None if value is None and sub is not hints[key] else build(sub, value, f"{where}.{key}")
        elif _accepts_float(hints[key]) and isinstance(value, (int, str)) and not isinstance(value, bool):
            kwargs[key] = _to_float(value, f"{where}.{key}")
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _accepts_float(hint) -> bool:
    return hint is float or float in typing.get_args(hint)


def _to_float(value, where):
    try:
        return float(value)
    except ValueError as exc:
        raise ConfigError(f"{where}: expected a number, got {value!r}") from exc


def _merge(base, overrides: dict, where: str):
    """``base`` with a (possibly nested) partial mapping applied on top."""
    merged = _deep_update(asdict(base), overrides, where)
    return build(type(base), merged, where)


def _deep_update(base: dict, over: dict, where: str) -> dict:
    if not isinstance(over, dict):
        raise ConfigError(f"{where}: expected a mapping")
    out = dict(base)
    for key, value in over.items():
        if key not in out:
            raise ConfigError(f"{where}: unknown key {key!r}")
        if isinstance(out[key], dict) and isinstance(value, dict):
            sub = dict(out[key])
            if key == "regularizer" and "kind" in value and "lam" not in value:
                sub["lam"] = None  # a new kind brings its own default weight
            out[key] = _deep_update(sub, value, f"{where}.{key}")
        else:
            out[key] = value
    return out


def config_from_dict(data: dict, base_dir: Path | None = None) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    data = dict(data)
    allowed = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"config: unknown key(s) {unknown}; allowed: {sorted(allowed)}")
    kwargs = {}
    if "seeds" in data:
        seeds = data["seeds"]
        if isinstance(seeds, int) and not isinstance(seeds, bool):
            kwargs["seeds"] = tuple(range(seeds))
        elif isinstance(seeds, list) and all(isinstance(s, int) for s in seeds):
            kwargs["seeds"] = tuple(seeds)
        else:
            raise ConfigError("seeds: expected a count or a list of integers")
    if "out_dir" in data:
        kwargs["out_dir"] = str(data["out_dir"])
    for key, cls in (("task", TaskConfig), ("model", ModelConfig), ("metrics", MetricsConfig)):
        if key in data:
            kwargs[key] = build(cls, data[key], key)
    if "train" in data:
        tr = data["train"] or {}
        if isinstance(tr, dict) and "seed" in tr:
            raise ConfigError("train.seed: set seeds at the top level")
        kwargs["train"] = build(TrainConfig, tr, "train")
    if "variants" in data:
        variants = []
        for i, v in enumerate(data["variants"] or []):
            if not isinstance(v, dict) or "name" not in v:
                raise ConfigError(f"variants[{i}]: expected a mapping with a 'name'")
            v = dict(v)
            name = str(v.pop("name"))
            try:
                variants.append(Variant(name, v))
            except ConfigError as exc:
                raise ConfigError(f"variants[{i}]: {exc}") from exc
        kwargs["variants"] = tuple(variants)
    config = ExperimentConfig(**kwargs)
    if config.task.path is not None:
        path = Path(config.task.path)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        if not path.is_dir():
            raise ConfigError(f"task.path: dataset directory {path} does not exist")
        config = replace(config, task=replace(config.task, path=str(path)))
    config.resolved_variants()  # validate overrides eagerly
    return config


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data or {}, base_dir=path.parent)


def dump_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=True, default_flow_style=False)


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------


def _stats(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return {"mean": None, "std": None, "values": list(values)}
    arr = np.asarray(vals, dtype=np.float64)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return {"mean": float(arr.mean()), "std": std, "values": [None if v is None else float(v) for v in values]}


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow(["" if v is None else repr(float(v)) if isinstance(v, (float, np.floating)) else v
                    for v in row])
    return buf.getvalue()


def _strip_header(text: str, first: bool) -> str:
    return text if first else text.split("\n", 1)[1]


def _attention_dump(model, split, count: int) -> str:
    count = min(count, len(split.labels))
    tokens, valid = pad_batch(split.sequences[:count], model.vocab_size)
    a = forward_batch(model, tokens, valid).a
    rows = []
    for e in range(count):
        n = int(valid[e].sum())
        for i in range(model.n_heads):
            rows.extend((e, i, t, int(tokens[e, t]), float(a[e, i, t])) for t in range(n))
    return _csv_text(["example", "head", "position", "token", "weight"], rows)


METRIC_NAMES = ("test_acc", "test_error", "val_acc", "val_error", "dist", "ece", "oe",
                "redundant_fraction", "entropy_test", "entropy_ood")


def _run_one(name, model_cfg, train_cfg, dataset, metrics: MetricsConfig, out: Path, seed: int):
    """Train one (variant, seed); return per-metric values and CSV fragments."""
    model, history = train(train_cfg, dataset, model_cfg)
    tag = f"{name}_seed{seed}"
    if metrics.history:
        atomic_write_text(out / "history" / f"{tag}.csv", history.to_csv())
    if metrics.checkpoints:
        save_checkpoint(model, out / "checkpoints" / f"{tag}.json")
    if metrics.attention_dump:
        atomic_write_text(out / "attention" / f"{tag}.csv",
                          _attention_dump(model, dataset.test, metrics.attention_dump))

    test = evaluate(model, dataset.test, train_cfg.eval_batch_size)
    val = evaluate(model, dataset.val, train_cfg.eval_batch_size)
    prefix = (("variant", name), ("seed", seed))
    values = dict.fromkeys(METRIC_NAMES)
    values.update(test_acc=test.accuracy, test_error=1.0 - test.accuracy,
                  val_acc=val.accuracy, val_error=1.0 - val.accuracy)
    frags = {}
    if metrics.dist and model.n_heads >= 2:
        values["dist"] = head_distance(test.z)
        frags["dist"] = _csv_text(["variant", "seed", "rule", "dist"],
                                  [(name, seed, train_cfg.sampler.rule, values["dist"])])
    if metrics.calibration:
        values["ece"] = ece(test.confidences, test.correct, metrics.n_bins)
        values["oe"] = oe(test.confidences, test.correct, metrics.n_bins)
        frags["calibration"] = calibration_csv(
            calibration_bins(test.confidences, test.correct, metrics.n_bins), prefix)
    if metrics.entropy:
        parts = [("test", test.probs)]
        values["entropy_test"] = float(predictive_entropy(test.probs).mean())
        if dataset.ood is not None:
            ood = evaluate(model, dataset.ood, train_cfg.eval_batch_size)
            parts.append(("ood", ood.probs))
            values["entropy_ood"] = float(predictive_entropy(ood.probs).mean())
        frags["entropy_cdf"] = "".join(
            _strip_header(entropy_cdf_csv(*entropy_cdf(p), prefix + (("split", s),)), k == 0)
            for k, (s, p) in enumerate(parts))
    if metrics.redundancy:
        records = redundancy_report(model, dataset.test, train_cfg.eval_batch_size)
        values["redundant_fraction"] = redundant_fraction(records, metrics.redundancy_threshold)
        frags["redundancy"] = redundancy_csv(records, prefix)
    return values, frags


def _error_record(exc: BaseException, variant=None, seed=None) -> dict:
    return {"type": type(exc).__name__, "message": str(exc), "variant": variant, "seed": seed,
            "traceback": traceback.format_exception_only(type(exc), exc)[-1].strip()}


def run_experiment(config: ExperimentConfig, out_dir=None, dataset: Dataset | None = None) -> Path:
    """Train every variant on every seed and write the report directory.

    Writes ``config.yaml``, ``summary.json``, ``table.csv`` and the per-metric
    CSVs plus ``history/``, ``checkpoints/`` and ``attention/`` files, all
    under ``out_dir``. On failure an ``error.json`` record is written there
    and :class:`ExperimentError` is raised.
    """
    out = Path(out_dir if out_dir is not None else config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    variant, seed = None, None
    try:
        atomic_write_text(out / "config.yaml", dump_config(config))
        if dataset is None:
            dataset = config.task.load()
        combined, csv_parts, table = {}, {}, []
        for variant, model_cfg, train_cfg in config.resolved_variants():
            per_seed = {k: [] for k in METRIC_NAMES}
            for seed in config.seeds:
                values, frags = _run_one(variant, model_cfg, replace(train_cfg, seed=seed), dataset,
                                         config.metrics, out, seed)
                for k in METRIC_NAMES:
                    per_seed[k].append(values[k])
                for k, text in frags.items():
                    csv_parts.setdefault(k, []).append(text)
            stats = {k: _stats(v) for k, v in per_seed.items() if any(x is not None for x in v)}
            combined[variant] = {
                "rule": train_cfg.sampler.rule,
                "regularizer": train_cfg.regularizer.kind,
                "combined": train_cfg.combined,
                "n_heads": model_cfg.n_heads,
                "metrics": stats,
            }
            table.append([variant, train_cfg.sampler.rule, train_cfg.regularizer.kind, model_cfg.n_heads]
                         + [stats.get(k, {}).get(s) for k in METRIC_NAMES for s in ("mean", "std")])
        variant, seed = None, None
        for k, parts in csv_parts.items():
            atomic_write_text(out / f"{k}.csv", "".join(_strip_header(t, i == 0) for i, t in enumerate(parts)))
        header = ["variant", "rule", "regularizer", "n_heads"] + [f"{k}_{s}" for k in METRIC_NAMES
                                                                  for s in ("mean", "std")]
        atomic_write_text(out / "table.csv", _csv_text(header, table))
        summary = {"seeds": list(config.seeds), "variants": combined}
        atomic_write_text(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
        stale = out / "error.json"
        if stale.exists():
            stale.unlink()
    except Exception as exc:
        record = _error_record(exc, variant, seed)
        atomic_write_text(out / "error.json", json.dumps(record, indent=2, sort_keys=True) + "\n")
        raise ExperimentError(record) from exc
    return out


def head_sweep(config: ExperimentConfig, head_counts, rules=("plain", "svgd"), out_dir=None) -> Path:
    """Run each rule at each head count; writes ``sweep.csv`` with one row per (M, rule).

    Each (M, rule) cell is a full :func:`run_experiment` under ``M{m}/``.
    The base config's variants are replaced by one variant per rule.
    """
    head_counts = [int(m) for m in head_counts]
    if not head_counts or any(m < 1 for m in head_counts):
        raise ConfigError("head counts must be a non-empty list of integers >= 1")
    out = Path(out_dir if out_dir is not None else config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = config.task.load()
    variants = tuple(Variant(rule, {"train": {"sampler": {"rule": rule}}}) for rule in rules)
    rows = []
    for m in head_counts:
        cfg = replace(config, model=replace(config.model, n_heads=m), variants=variants,
                      metrics=replace(config.metrics, redundancy=False, calibration=False, entropy=False,
                                      attention_dump=0, checkpoints=False))
        run_experiment(cfg, out / f"M{m}", dataset)
        summary = json.loads((out / f"M{m}" / "summary.json").read_text())
        for rule in rules:
            s = summary["variants"][rule]["metrics"]
            dist = s.get("dist", {})
            rows.append((m, rule, s["val_error"]["mean"], s["val_error"]["std"],
                         s["test_error"]["mean"], s["test_error"]["std"], dist.get("mean")))
    atomic_write_text(out / "sweep.csv", _csv_text(
        ["M", "rule", "val_error_mean", "val_error_std", "test_error_mean", "test_error_std", "dist_mean"], rows))
    return out / "sweep.csv"


def read_sweep(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["M"] = int(r["M"])
        for k in ("val_error_mean", "val_error_std", "test_error_mean", "test_error_std", "dist_mean"):
            r[k] = float(r[k]) if r[k] != "" else math.nan
    return rows
