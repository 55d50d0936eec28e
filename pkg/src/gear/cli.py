"""Command line: gen-synth, make-ood, train, eval, run."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from gear.data import (SyntheticSpec, bias_label_correlation, generate_synthetic, load_dataset,
                       synthetic_manifest, write_dataset)
from gear.errors import ConfigError, GearError, TrainingAborted
from gear.experiment import ExperimentConfig, evaluate_model, prepare_data, run_experiment, run_seed
from gear.metrics import compute_metrics
from gear.model import GearModel
from gear.ood import OODConfig, build_ood_suite, write_ood_suite
from gear.training import evaluate_split

EXIT_OK, EXIT_CONFIG, EXIT_TRAIN = 0, 2, 3


def _read_json(path) -> dict:
    if path is None:
        return {}
    try:
        obj = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return obj


def _experiment(args) -> ExperimentConfig:
    if args.config is None:
        raise ConfigError("--config is required")
    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg.seeds = [args.seed]
    return cfg


def _out(args, cfg: ExperimentConfig | None = None) -> Path:
    out = args.out or (cfg.out if cfg is not None else None)
    if out is None:
        raise ConfigError("--out is required")
    return Path(out)


def cmd_gen_synth(args) -> int:
    obj = _read_json(args.config)
    obj = obj.get("synthetic", obj)
    if args.seed is not None:
        obj["seed"] = args.seed
    spec = SyntheticSpec.from_dict(obj)
    out = _out(args)
    train, test = generate_synthetic(spec)
    write_dataset(out, synthetic_manifest(spec), {"train": train, "test": test})
    corr = bias_label_correlation(train + test)
    print(f"train={len(train)} test={len(test)} rho={spec.rho}")
    print("measured bias-label correlation: " + " ".join(f"{m}={v:.4f}" for m, v in corr.items()))
    return EXIT_OK


def cmd_make_ood(args) -> int:
    if args.input is None:
        raise ConfigError("--input (a split .jsonl) is required")
    if not Path(args.input).exists():
        raise ConfigError(f"input split not found: {args.input}")
    obj = _read_json(args.config)
    obj = obj.get("ood", obj)
    if args.seed is not None:
        obj["seed"] = args.seed
    _, records = load_dataset(args.input)
    suite = build_ood_suite(records, OODConfig.from_dict(obj))
    write_ood_suite(suite, _out(args))
    for name, s in suite.items():
        print(f"{name}: kept {s.report['n_kept']}/{s.report['n_iid']} "
              f"energy {s.report['initial_energy']:.0f} -> {s.report['final_energy']:.0f}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _experiment(args)
    out = _out(args, cfg)
    data = prepare_data(cfg)
    name = next(iter(cfg.variants))
    seed = cfg.seeds[0]
    _, hist, metrics = run_seed(cfg.variant_config(name, seed), data, out)
    print(json.dumps({"seed": seed, "best_epoch": hist.best_epoch, "metrics": metrics}, indent=2))
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.checkpoint is None or args.input is None:
        raise ConfigError("--checkpoint and --input are required")
    for p in (args.checkpoint, args.input):
        if not Path(p).exists():
            raise ConfigError(f"not found: {p}")
    model, _ = GearModel.load(args.checkpoint)
    manifest, records = load_dataset(args.input)
    metrics = compute_metrics(evaluate_split(model, records, manifest), [r.label for r in records])
    text = json.dumps(metrics, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _experiment(args)
    out = _out(args, cfg)
    reports = run_experiment(cfg, out)
    for name, rep in reports.items():
        mean = rep.mean()
        print(name + ": " + " ".join(f"{s}={m['acc2_nonneg']:.2f}" for s, m in mean.items()))
    return EXIT_OK


COMMANDS = {"gen-synth": cmd_gen_synth, "make-ood": cmd_make_ood, "train": cmd_train,
            "eval": cmd_eval, "run": cmd_run}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gear", description="Multimodal sentiment debiasing experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory (eval: metrics file)")
        if name in ("make-ood", "eval"):
            sp.add_argument("--input", help="split .jsonl with manifest.json alongside")
        if name == "eval":
            sp.add_argument("--checkpoint")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except TrainingAborted as exc:
        print(f"error: training aborted: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    except GearError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
