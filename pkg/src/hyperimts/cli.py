"""Command-line entry point: synth | train | eval | stats | gradcheck | bench.

Exit codes: 0 success, 1 validation or runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigFileError, RunConfig, load_run_config
from .data import DataError, Dataset, assign_splits, dataset_stats, dump_dataset, load_dataset, normalize, synth_generate
from .gradcheck import model_gradcheck, tiny_config, tiny_instance
from .model import ABLATIONS, ConfigError, ModelParams, attention_costs, forward
from . import tensor as tt
from .training import (
    TrainingDivergedError,
    aggregate,
    evaluate,
    forecast_instances,
    format_mean_std,
    masked_mse,
    results_table,
    train,
)

log = logging.getLogger("hyperimts")


class CommandError(Exception):
    """A command failed validation; reported on stderr with exit code 1."""


def _seeds(text: str) -> tuple[int, ...]:
    try:
        out = tuple(int(x) for x in text.replace(",", " ").split())
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed list {text!r}") from None
    if not out:
        raise argparse.ArgumentTypeError("empty seed list")
    return out


def _load_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "ablation", None):
        cfg = replace(cfg, model=cfg.model.replace(ablation=args.ablation))
    if getattr(args, "seeds", None):
        cfg = replace(cfg, train=replace(cfg.train, seeds=args.seeds))
    if getattr(args, "dataset", None):
        cfg = replace(cfg, dataset=args.dataset)
    return cfg


def _prepare_dataset(cfg: RunConfig) -> Dataset:
    if not cfg.dataset:
        raise CommandError("no dataset given (set 'dataset' in the config or pass --dataset)")
    ds = assign_splits(load_dataset(cfg.dataset), cfg.split_seed)
    return normalize(ds) if cfg.normalize else ds


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    ds = synth_generate(
        args.samples,
        args.variables,
        t_max=args.t_max,
        rate=args.rate,
        seed=args.seed,
        shared_frac=args.shared_frac,
        coupling=args.coupling,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_dataset(ds, out / "dataset.jsonl")
    print(dataset_stats(ds).to_text())
    return 0


def cmd_stats(args) -> int:
    rep = dataset_stats(load_dataset(args.data))
    print(rep.to_json() if args.json else rep.to_text())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "stats.json").write_text(rep.to_json() + "\n")
        (out / "report.txt").write_text(rep.to_text() + "\n")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    ds = _prepare_dataset(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    csv = ["seed,epoch,train_loss,val_loss,lr"]
    single = len(cfg.train.seeds) == 1
    for seed in cfg.train.seeds:
        rec = train(ds, cfg.model, cfg.train, seed=seed)
        records.append(rec)
        (out / f"run_{seed}.json").write_text(rec.to_json() + "\n")
        csv += [f"{seed},{row}" for row in rec.metrics_csv_rows()]
        rec.params.save(out / ("checkpoint.bin" if single else f"checkpoint_{seed}.bin"))
        log.info("seed %d: best epoch %d, test MSE %.4f", seed, rec.best_epoch, rec.test_mse)
    (out / "metrics.csv").write_text("\n".join(csv) + "\n")
    report = [results_table({cfg.model.ablation: records}), ""]
    report.append(
        "seconds per iteration: " + format_mean_std(*aggregate([r.seconds_per_iteration for r in records]))
    )
    text = "\n".join(report)
    (out / "report.txt").write_text(text + "\n")
    print(text)
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    ds = _prepare_dataset(cfg)
    params = ModelParams.load(args.checkpoint, cfg.model)
    items = forecast_instances(ds, args.split, cfg.train)
    if not items:
        raise CommandError(f"split {args.split!r} has no usable samples")
    mse, mae = evaluate(items, params, params.config)
    print(json.dumps({"split": args.split, "mse": mse, "mae": mae, "n_samples": len(items)}, sort_keys=True))
    return 0


def cmd_gradcheck(args) -> int:
    cfg = load_run_config(args.config).model if args.config else tiny_config()
    if args.ablation:
        cfg = cfg.replace(ablation=args.ablation)
    inst = tiny_instance(args.seed)
    params = ModelParams.init(cfg, inst.graph.U)
    report = model_gradcheck(inst, params, cfg, tolerance=args.tolerance)
    print(report.summary())
    if not report.passed:
        name, err = report.worst
        print(f"worst parameter: {name} (rel. err {err:.3e})", file=sys.stderr)
        return 1
    return 0


def cmd_bench(args) -> int:
    cfg = _load_config(args)
    if cfg.dataset:
        ds = _prepare_dataset(cfg)
    else:
        ds = normalize(synth_generate(args.samples, 5, seed=0))
    items = forecast_instances(ds, "train", cfg.train)
    if not items:
        raise CommandError("no usable training samples for the benchmark")
    params = ModelParams.init(cfg.model, ds.U)

    started = time.perf_counter()
    n_batches = 0
    bs = cfg.train.batch_size
    for lo in range(0, len(items), bs):
        batch = items[lo : lo + bs]
        params.zero_grad()
        preds = tt.concat([forward(i, params, cfg.model) for i in batch], axis=0)
        masked_mse(preds, np.concatenate([i.targets for i in batch])).backward()
        n_batches += 1
    per_iter = (time.perf_counter() - started) / n_batches

    M = float(np.mean([i.graph.M for i in items]))
    T = float(np.mean([i.graph.T for i in items]))
    U = float(np.mean([i.graph.n_present for i in items]))
    costs = attention_costs(int(round(M)), int(round(T)), int(round(U)), cfg.model)
    report = {
        "ablation": cfg.model.ablation,
        "n_params": params.count(),
        "seconds_per_iteration": per_iter,
        "batches": n_batches,
        "avg_M": M,
        "avg_T": T,
        "avg_U": U,
        "attention_multiplies": costs,
    }
    print(json.dumps(report, indent=2, sort_keys=True))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hyperimts", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic IMTS dataset")
    s.add_argument("--out", required=True, help="output directory (dataset.jsonl is written there)")
    s.add_argument("--samples", type=int, default=100)
    s.add_argument("--variables", type=int, default=5)
    s.add_argument("--rate", type=float, default=0.25, help="observations per time unit per variable")
    s.add_argument("--t-max", type=float, default=48.0)
    s.add_argument("--shared-frac", type=float, default=0.3)
    s.add_argument("--coupling", type=float, default=0.6)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train one model per seed")
    s.add_argument("--config", required=True)
    s.add_argument("--ablation", choices=ABLATIONS)
    s.add_argument("--seeds", type=_seeds)
    s.add_argument("--dataset")
    s.add_argument("--out", default="runs")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint")
    s.add_argument("--config", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--split", choices=("train", "val", "test"), default="test")
    s.add_argument("--dataset")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("stats", help="observation counts with and without padding")
    s.add_argument("--data", required=True)
    s.add_argument("--json", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("gradcheck", help="finite-difference check of every parameter gradient")
    s.add_argument("--config")
    s.add_argument("--ablation", choices=ABLATIONS)
    s.add_argument("--tolerance", type=float, default=1e-4)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("bench", help="parameter count, time per iteration, attention costs")
    s.add_argument("--config")
    s.add_argument("--dataset")
    s.add_argument("--ablation", choices=ABLATIONS)
    s.add_argument("--samples", type=int, default=64, help="synthetic samples when no dataset is set")
    s.add_argument("--out")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (CommandError, ConfigFileError, ConfigError, DataError, TrainingDivergedError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
