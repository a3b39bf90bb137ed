"""Command-line entry point: ``trajflow {train,sample,verify,analyze}``.

Exit status is 0 on success, 1 when a check fails or training diverges,
and 2 on configuration or input errors.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .analysis import (DEFAULT_PAIRS, cosine_protocol, energy_distance, eval_loss_suite,
                       fresh_batches, write_cosine_csv, write_loss_suite_csv)
from .checks import SCOPES, run_checks
from .config import FILE_DATASET, ConfigError, RunConfig, load_config, parse_config_text
from .network import load_checkpoint
from .paths import DATASETS, read_points_csv, sample_dataset, write_points_csv
from .sampling import CONSISTENCY, ODE, SamplerConfig, generate, make_timesteps
from .svg import write_scatter_svg
from .training import TrainingDiverged, run_training

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
REFERENCE_SIZE = 4096

logger = logging.getLogger("trajflow")


class InputError(ValueError):
    """Bad command-line input (exit status 2)."""


def _override_pairs(items) -> dict[str, str]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve_run_config(args) -> RunConfig:
    config = load_config(args.config) if args.config else parse_config_text("")
    overrides = _override_pairs(args.set)
    for flag, key in (("steps", "steps"), ("seed", "seed"), ("run_dir", "run_dir")):
        value = getattr(args, flag)
        if value is not None:
            overrides[key] = str(value)
    return config.with_overrides(overrides)


def cmd_train(args) -> int:
    run = resolve_run_config(args)
    train_config = run.to_train_config()
    X = y = None
    if run["dataset"] == FILE_DATASET:
        if not run["data.path"]:
            raise ConfigError("dataset = file needs data.path")
        X, y = read_points_csv(run["data.path"])
    run_dir = Path(run["run_dir"])
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(run.to_text(), encoding="utf-8")
    try:
        state, _ = run_training(train_config, run_dir, X, y)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_FAIL
    print(f"trained {state.step} steps; wrote {run_dir / 'final.npz'}")
    return EXIT_OK


def _parse_sweep(text: str) -> np.ndarray:
    try:
        start, stop, step = (float(p) for p in text.split(":"))
    except ValueError:
        raise InputError(f"--sweep-mid expects start:stop:step, got {text!r}") from None
    if step <= 0 or not 0.0 < start <= stop < 1.0:
        raise InputError("--sweep-mid needs 0 < start <= stop < 1 and step > 0")
    count = int(np.floor((stop - start) / step + 1e-9)) + 1
    return np.round(start + step * np.arange(count), 10)


def _parse_labels(text):
    if text is None or text == "random":
        return None
    if text == "balanced":
        return "balanced"
    try:
        return int(text)
    except ValueError:
        raise InputError(f"--labels expects random, balanced or a class index; got {text!r}") from None


def _load_weights(path, weights: str):
    try:
        return load_checkpoint(path, weights)
    except KeyError:
        raise InputError(f"checkpoint {path} has no {weights!r} weights") from None
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read checkpoint {path}: {exc}") from None


def _reference_points(args, meta, n: int, seed: int):
    if getattr(args, "data", None):
        X, _ = read_points_csv(args.data)
        return X
    dataset = args.dataset or meta.get("dataset")
    if dataset not in DATASETS:
        raise InputError("no reference data: pass --dataset or --data")
    return sample_dataset(dataset, n, seed)[0]


def cmd_sample(args) -> int:
    params, meta = _load_weights(args.checkpoint, args.weights)
    if params.config.data_dim != 2:
        raise InputError(f"checkpoint model has data_dim {params.config.data_dim}; sampling writes 2-D CSV")
    labels = _parse_labels(args.labels)
    if isinstance(labels, int) and not 0 <= labels < max(params.config.num_classes, 1):
        raise InputError(f"label {labels} out of range for a model with "
                         f"{params.config.num_classes} classes")
    if args.sweep_mid:
        reference = _reference_points(args, meta, REFERENCE_SIZE, args.seed + 1)
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("mid", "energy_distance"))
            for mid in _parse_sweep(args.sweep_mid):
                cfg = SamplerConfig(mode=args.mode, timesteps=make_timesteps(2, mid),
                                    num_samples=args.num_samples, labels=labels, seed=args.seed)
                z, _ = generate(params, cfg)
                w.writerow([repr(float(mid)), repr(energy_distance(z, reference))])
        print(f"wrote sweep to {args.out}")
        return EXIT_OK
    try:
        timesteps = make_timesteps(args.nfe, args.mid)
        cfg = SamplerConfig(mode=args.mode, timesteps=timesteps, num_samples=args.num_samples,
                            labels=labels, seed=args.seed)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    z, sample_labels = generate(params, cfg)
    write_points_csv(args.out, z, sample_labels)
    print(f"wrote {len(z)} samples ({args.mode}, timesteps {timesteps}) to {args.out}")
    if args.svg:
        data = _reference_points(args, meta, 2000, args.seed + 1)
        write_scatter_svg(args.svg, data, z, sample_labels)
        print(f"wrote {args.svg}")
    return EXIT_OK


def cmd_verify(args) -> int:
    results = run_checks(args.scope)
    for r in results:
        print(r.line())
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_FAIL if failed else EXIT_OK


def _parse_pairs(text: str):
    pairs = []
    for item in text.split(","):
        parts = item.strip().split(":")
        if len(parts) != 2:
            raise InputError(f"--pairs expects a:b[,c:d...], got {text!r}")
        pairs.append((parts[0], parts[1]))
    return pairs


def cmd_analyze(args) -> int:
    params, meta = _load_weights(args.checkpoint, args.weights)
    pairs = _parse_pairs(args.pairs) if args.pairs else DEFAULT_PAIRS
    X = y = None
    dataset = args.dataset or meta.get("dataset")
    if args.data:
        X, y = read_points_csv(args.data)
        dataset = None
    elif dataset not in DATASETS:
        raise InputError("no data to analyze: pass --dataset or --data")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        reports, raw = cosine_protocol(params, pairs, args.iters, args.batch, args.seed,
                                       dataset, X, y)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    write_cosine_csv(out_dir / "cosine.csv", reports, raw)
    for rep in reports:
        print(f"{rep.pair}: mean {rep.mean:.4f} p05 {rep.p05:.4f} p95 {rep.p95:.4f}"
              f" ({rep.iterations} iterations, {rep.undefined} undefined)")
    if args.loss_batches > 0:
        batches = fresh_batches(params, args.loss_batches, args.batch, args.seed + 1, dataset, X, y)
        summaries, per_batch = eval_loss_suite(params, batches)
        write_loss_suite_csv(out_dir / "loss_suite.csv", summaries, per_batch)
        for s in summaries:
            print(f"{s.name}: mean {s.mean:.5g} p05 {s.p05:.5g} p95 {s.p95:.5g}")
    print(f"wrote {out_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trajflow", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a key = value config file")
    p.add_argument("config", nargs="?", help="config file (defaults apply when omitted)")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--run-dir", dest="run_dir")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate samples from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--out", default="samples.csv")
    p.add_argument("--nfe", type=int, default=1)
    p.add_argument("--mode", choices=(ODE, CONSISTENCY), default=ODE)
    p.add_argument("--mid", type=float, help="intermediate time for --nfe 2 (default 0.5)")
    p.add_argument("--num-samples", type=int, default=1000)
    p.add_argument("--labels", help="random (default), balanced, or a class index")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--weights", choices=("ema", "params"), default="ema",
                   help="EMA shadow (default) or live weights")
    p.add_argument("--svg", help="also write a scatter plot over reference data")
    p.add_argument("--sweep-mid", help="start:stop:step; 2-step energy distance per midpoint")
    p.add_argument("--dataset", choices=DATASETS, help="reference data (default: from checkpoint)")
    p.add_argument("--data", help="reference points CSV instead of a named dataset")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("verify", help="run the numerical self-checks")
    p.add_argument("--scope", choices=("all",) + SCOPES, default="all")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("analyze", help="gradient cosines and loss tracking for a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--iters", type=int, default=200)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pairs", help="comma-separated loss pairs, e.g. tfm:tc_c,fm_prime:tc_c")
    p.add_argument("--weights", choices=("params", "ema"), default="params",
                   help="live weights (default) or the EMA shadow")
    p.add_argument("--loss-batches", type=int, default=50,
                   help="batches for the loss suite (0 skips it)")
    p.add_argument("--dataset", choices=DATASETS)
    p.add_argument("--data", help="points CSV instead of a named dataset")
    p.add_argument("--out-dir", default="analysis")
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
