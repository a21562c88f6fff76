"""Command-line entry point: ``repulsive-attention <command> ...``.

Exit codes: 0 success, 1 run failure (``error.json`` written), 2 bad
configuration or arguments.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .attention import atomic_write_text, load_checkpoint, save_checkpoint
from .data import SyntheticTaskConfig, save_dataset
from .experiment import (
    ConfigError,
    ExperimentConfig,
    ExperimentError,
    Variant,
    head_sweep,
    load_config,
    read_sweep,
    run_experiment,
)
from .kernel import KernelSpec
from .metrics import (
    calibration_bins,
    calibration_csv,
    ece,
    entropy_cdf,
    entropy_cdf_csv,
    oe,
    redundancy_csv,
    redundancy_report,
    redundant_fraction,
)
from .sampler import RULES, SamplerConfig
from .toy import TARGETS, sample_toy, trace_csv
from .trainer import evaluate, train


def _json(path: Path, data):
    atomic_write_text(path, json.dumps(data, indent=2, sort_keys=True) + "\n")


def _load(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        config = replace(config, seeds=(args.seed,))
    if getattr(args, "rule", None):
        config = replace(config, variants=(Variant(args.rule, {"train": {"sampler": {"rule": args.rule}}}),))
    return config


def _out(args, config: ExperimentConfig) -> Path:
    return Path(args.out if args.out else config.out_dir)


def _single_model(args, config):
    """A checkpointed model, or one trained from the config's first variant and seed."""
    dataset = config.task.load()
    if args.checkpoint:
        return load_checkpoint(args.checkpoint), dataset, config.train.eval_batch_size
    name, model_cfg, train_cfg = config.resolved_variants()[0]
    model, _ = train(replace(train_cfg, seed=config.seeds[0]), dataset, model_cfg)
    return model, dataset, train_cfg.eval_batch_size


def cmd_gen_data(args) -> int:
    config = _load(args)
    synth = config.task.synthetic or SyntheticTaskConfig()
    if config.task.path is not None:
        raise ConfigError("gen-data needs a synthetic task, not task.path")
    if args.seed is not None:
        synth = replace(synth, seed=args.seed)
    from .data import gen_synthetic

    out = Path(args.out or "data/synthetic")
    save_dataset(gen_synthetic(synth), out)
    print(f"wrote dataset to {out}")
    return 0


def cmd_train(args) -> int:
    config = _load(args)
    out = run_experiment(config, _out(args, config))
    print(f"wrote report to {out}")
    return 0


def cmd_sweep_heads(args) -> int:
    config = _load(args)
    heads = [int(h) for h in args.heads.split(",")]
    rules = tuple(args.rules.split(","))
    bad = [r for r in rules if r not in RULES]
    if bad:
        raise ConfigError(f"unknown rule(s) {bad}")
    path = head_sweep(replace(config, variants=()), heads, rules, _out(args, config))
    for row in read_sweep(path):
        print(f"M={row['M']:>3} {row['rule']:<6} val_err={row['val_error_mean']:.4f} "
              f"test_err={row['test_error_mean']:.4f}")
    return 0


def cmd_mask_analysis(args) -> int:
    config = _load(args)
    out = _out(args, config)
    model, dataset, bs = _single_model(args, config)
    records = redundancy_report(model, dataset.test, bs)
    atomic_write_text(out / "redundancy.csv", redundancy_csv(records))
    frac = redundant_fraction(records, config.metrics.redundancy_threshold)
    _json(out / "mask_summary.json", {"baseline": records[0].baseline, "redundant_fraction": frac,
                                      "deltas": [r.delta for r in records]})
    if not args.checkpoint:
        save_checkpoint(model, out / "checkpoint.json")
    print(f"redundant fraction {frac:.3f}")
    return 0


def cmd_calibrate(args) -> int:
    config = _load(args)
    out = _out(args, config)
    model, dataset, bs = _single_model(args, config)
    n_bins = config.metrics.n_bins
    test = evaluate(model, dataset.test, bs)
    bins = calibration_bins(test.confidences, test.correct, n_bins)
    atomic_write_text(out / "calibration.csv", calibration_csv(bins))
    parts = [entropy_cdf_csv(*entropy_cdf(test.probs), (("split", "test"),))]
    if dataset.ood is not None:
        ood = evaluate(model, dataset.ood, bs)
        parts.append(entropy_cdf_csv(*entropy_cdf(ood.probs), (("split", "ood"),)).split("\n", 1)[1])
    atomic_write_text(out / "entropy_cdf.csv", "".join(parts))
    summary = {"accuracy": test.accuracy, "ece": ece(test.confidences, test.correct, n_bins),
               "oe": oe(test.confidences, test.correct, n_bins)}
    _json(out / "calibration_summary.json", summary)
    if not args.checkpoint:
        save_checkpoint(model, out / "checkpoint.json")
    print(f"ECE {summary['ece']:.4f}  OE {summary['oe']:.4f}")
    return 0


def cmd_sample_toy(args) -> int:
    sampler = SamplerConfig(rule=args.rule or "svgd", eps=args.eps, alpha=args.alpha, beta=args.beta,
                            kernel=KernelSpec(args.kernel))
    result = sample_toy(args.target, sampler, args.m, args.iterations, args.seed or 0, init=args.init)
    out = Path(args.out or "runs/toy")
    atomic_write_text(out / "trace.csv", trace_csv(result))
    _json(out / "summary.json", dict(result.summary(), rule=sampler.rule, iterations=args.iterations,
                                     particles=[float(x) for x in result.particles]))
    s = result.summary()
    print(f"mean {s['mean']:.4f} var {s['var']:.4f} left {s['n_left']} right {s['n_right']}")
    return 0


def format_report(summary: dict) -> str:
    cols = ("test_acc", "dist", "ece", "oe", "redundant_fraction", "entropy_ood")
    lines = ["variant            rule   " + " ".join(f"{c:>20}" for c in cols)]
    for name, v in summary["variants"].items():
        cells = []
        for c in cols:
            s = v["metrics"].get(c)
            cells.append(f"{'-':>20}" if not s or s["mean"] is None else f"{s['mean']:>11.4f} ± {s['std']:<6.4f}")
        lines.append(f"{name:<18} {v['rule']:<6} " + " ".join(cells))
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    run_dir = Path(args.out or (load_config(args.config).out_dir if args.config else "runs/default"))
    path = run_dir / "summary.json"
    if not path.exists():
        raise ConfigError(f"{path} does not exist; run 'train' first")
    text = format_report(json.loads(path.read_text()))
    atomic_write_text(run_dir / "report.txt", text)
    sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="repulsive-attention",
                                     description="Repulsive multi-head attention experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_, config=True, seed=True, rule=True):
        p = sub.add_parser(name, help=help_)
        if config:
            p.add_argument("--config", type=Path, help="YAML experiment config")
        if seed:
            p.add_argument("--seed", type=int, help="run this single seed")
        p.add_argument("--out", type=Path, help="output directory")
        if rule:
            p.add_argument("--rule", choices=RULES, help="override the update rule")
        p.set_defaults(func=fn)
        return p

    add("gen-data", cmd_gen_data, "write the synthetic dataset", rule=False)
    add("train", cmd_train, "train all variants and seeds, write a report directory")
    p = add("sweep-heads", cmd_sweep_heads, "error versus number of heads", rule=False)
    p.add_argument("--heads", default="1,2,4,8,16,32")
    p.add_argument("--rules", default="plain,svgd")
    for name, fn, help_ in (("mask-analysis", cmd_mask_analysis, "accuracy drop from masking each head"),
                            ("calibrate", cmd_calibrate, "ECE, OE and predictive-entropy CDF")):
        p = add(name, fn, help_)
        p.add_argument("--checkpoint", type=Path, help="analyze this checkpoint instead of training")
    p = add("sample-toy", cmd_sample_toy, "run a sampler on a 1-D target", config=False)
    p.add_argument("--target", choices=TARGETS, default="gaussian-1d")
    p.add_argument("--m", type=int, default=50)
    p.add_argument("--iterations", type=int, default=2000)
    p.add_argument("--eps", type=float, default=0.05)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=1000.0)
    p.add_argument("--kernel", default="rbf-median")
    p.add_argument("--init", type=float, help="start every particle at this value")
    add("report", cmd_report, "print the comparison table of a finished run", seed=False, rule=False)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ExperimentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
