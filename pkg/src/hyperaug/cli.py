"""Command line: ``hyperaug train | verify | sweep | export-policy``.

Exit codes: 0 success, 1 runtime failure, 2 configuration or input error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .augment import OPS
from .autodiff import precision
from .config import ConfigError, RunConfig, build_run_config, load_run_config, parse_override, set_path
from .data import Dataset, FormatError, SplitSpec, load_cifar10_binary, load_mnist_idx, split, synth_dataset
from .hypergrad import HypergradConfig
from .models import save_checkpoint
from .policy import PolicySnapshot
from .trainloop import RunMetrics, run

__all__ = ["main", "cmd_train", "cmd_verify", "cmd_sweep", "cmd_export_policy", "load_datasets", "train_from_config"]

log = logging.getLogger("hyperaug")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


# ---------------------------------------------------------------- data plumbing
def load_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset, Dataset | None]:
    """(train, validation, test) for the configured dataset."""
    d = cfg.data
    if d.kind == "synth":
        full = synth_dataset(d.synth_n, d.synth_classes, seed=d.split_seed)
        test = synth_dataset(d.synth_test_n, d.synth_classes, seed=d.split_seed + 10_000)
    elif d.kind == "mnist":
        full = load_mnist_idx(d.path, "train")
        test = _optional(lambda: load_mnist_idx(d.path, "test"))
    else:
        full = load_cifar10_binary(d.path, "train")
        test = _optional(lambda: load_cifar10_binary(d.path, "test"))
    if d.subset:
        full = full.subset(np.arange(min(d.subset, len(full))))
    train, val = split(full, SplitSpec(d.validation_fraction, d.split_seed))
    return train, val, test


def _optional(loader):
    try:
        return loader()
    except FileNotFoundError:
        return None


class MetricsWriter:
    """Appends one JSON line per record and flushes immediately."""

    def __init__(self, path: Path):
        self.path = path
        self._fh = open(path, "w", encoding="utf-8")

    def __call__(self, record: dict):
        self._fh.write(json.dumps(record, sort_keys=False) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()


def train_from_config(cfg: RunConfig, out_dir: Path | None = None) -> RunMetrics:
    """Run one training job and write metrics.jsonl, policy.json and the checkpoint."""
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    writer = MetricsWriter(out / "metrics.jsonl")
    try:
        with precision(cfg.precision):
            train, val, test = load_datasets(cfg)
            metrics = run(cfg.train, cfg.model, train, val, test, sink=writer)
    finally:
        writer.close()
    final = metrics.records[-1]["policy_snapshot"]
    raw = {n: np.asarray(a).tolist() for n, a in zip(metrics.policy.names, metrics.policy.arrays())}
    (out / "policy.json").write_text(json.dumps({**final, "temperature": metrics.policy.temperature, "raw": raw}, indent=2))
    save_checkpoint(out / "model", cfg.model, metrics.params)
    return metrics


# ---------------------------------------------------------------- verbs
def cmd_train(config_path, overrides=(), output_dir=None) -> int:
    try:
        cfg = load_run_config(config_path, overrides)
        if output_dir:
            cfg = replace(cfg, output_dir=str(output_dir))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        metrics = train_from_config(cfg)
    except (FileNotFoundError, FormatError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - report, never traceback at the CLI
        print(f"training failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    last = metrics.records[-1]
    print(f"done: {len(metrics.records) - 1} epochs, test_error={last['test_error']}, output in {cfg.output_dir}")
    return EXIT_OK


def cmd_verify(alpha: float | None = None, neumann_terms: int = 200, stream=None) -> int:
    from .oracles import run_all

    stream = stream or sys.stdout
    try:
        # validate injected values before any compute
        HypergradConfig(alpha=alpha if alpha is not None else 1e-3, neumann_terms=neumann_terms)
    except ConfigError as exc:
        print(f"config error: {exc}", file=stream)
        return EXIT_CONFIG
    rows = run_all(alpha=alpha, neumann_terms=neumann_terms)
    width = max(len(r[0]) for r in rows)
    for name, ok, detail in rows:
        print(f"{'PASS' if ok else 'FAIL'}  {name:<{width}}  {detail}", file=stream)
    failed = sum(not ok for _, ok, _ in rows)
    print(f"{len(rows) - failed}/{len(rows)} oracles passed", file=stream)
    return EXIT_OK if failed == 0 else EXIT_FAIL


def _dedupe(values):
    seen, out = set(), []
    for v in values:
        if v not in seen:
            seen.add(v)
            out.append(v)
    return out


SWEEP_FIELDS = ["param", "param_value", "seed", "final_test_error", "peak_memory_proxy", "status"]


def cmd_sweep(param: str, values, config_path, seeds=(0,), overrides=(), output_dir=None) -> int:
    """One training run per (value, seed); rows go to ``sweep.csv``."""
    values = _dedupe([parse_override(f"{param}={v}")[1] if isinstance(v, str) else v for v in values])
    seeds = _dedupe(list(seeds))
    try:
        base = load_run_config(config_path, overrides)
        configs = []
        for v in values:
            for s in seeds:
                tree = base.to_dict()
                set_path(tree, param, v)
                tree["seed"] = s
                configs.append((v, s, build_run_config(tree, env={})))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(output_dir or base.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    failures = 0
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS)
        w.writeheader()
        for v, s, cfg in configs:
            row = {"param": param, "param_value": v, "seed": s}
            try:
                m = train_from_config(cfg, out / f"{param}={v}" / f"seed={s}")
                row.update(
                    final_test_error=m.records[-1]["test_error"],
                    peak_memory_proxy=max(r["peak_tape_nodes"] for r in m.records),
                    status="ok",
                )
            except Exception as exc:  # noqa: BLE001 - one bad run must not stop the sweep
                failures += 1
                row.update(final_test_error="", peak_memory_proxy="", status=f"error: {type(exc).__name__}: {exc}")
            w.writerow(row)
            fh.flush()
            print(f"{param}={v} seed={s}: {row['status']}")
    return EXIT_OK if failures == 0 else EXIT_FAIL


EVOLUTION_FIELDS = ["epoch", "stage", "op", "pi", "p", "mu"]


def read_snapshots(run_dir) -> list[PolicySnapshot]:
    path = Path(run_dir) / "metrics.jsonl"
    snaps = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                snaps.append(PolicySnapshot.from_dict(json.loads(line)["policy_snapshot"]))
    return snaps


def cmd_export_policy(run_dir, include_initial: bool = False, output=None) -> int:
    """metrics.jsonl snapshots -> policy_evolution.csv (epoch, stage, op, pi, p, mu)."""
    try:
        snaps = read_snapshots(run_dir)
    except FileNotFoundError:
        print(f"error: no metrics.jsonl in {run_dir}", file=sys.stderr)
        return EXIT_CONFIG
    except (json.JSONDecodeError, KeyError) as exc:
        print(f"error: malformed metrics.jsonl in {run_dir}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(output) if output else Path(run_dir) / "policy_evolution.csv"
    mag_slot = {}
    for op in OPS:
        if op.has_magnitude:
            mag_slot[op] = len(mag_slot)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EVOLUTION_FIELDS)
        for snap in snaps:
            if snap.epoch == 0 and not include_initial:
                continue
            for stage, (pi, p, mu) in enumerate(zip(snap.pi, snap.p, snap.mu)):
                for i, op in enumerate(OPS):
                    m = repr(mu[mag_slot[op]]) if op in mag_slot else ""
                    w.writerow([snap.epoch, stage, op.value, repr(pi[i]), repr(p[i]), m])
    print(f"wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------- argparse
def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hyperaug", description="Differentiable augmentation policy search.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)

    t = sub.add_parser("train", help="train a classifier (and policy) from a config file")
    t.add_argument("config")
    t.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    t.add_argument("--output-dir")

    v = sub.add_parser("verify", help="run the closed-form oracle suite")
    v.add_argument("--alpha", type=float)
    v.add_argument("--neumann-terms", type=int, default=200)

    s = sub.add_parser("sweep", help="train once per parameter value and seed")
    s.add_argument("config")
    s.add_argument("--param", required=True, help="dotted key, e.g. train.inner_steps")
    s.add_argument("--values", required=True, help="comma-separated values")
    s.add_argument("--seeds", default="0", help="comma-separated seeds")
    s.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    s.add_argument("--output-dir")

    e = sub.add_parser("export-policy", help="write policy_evolution.csv from a run directory")
    e.add_argument("run_dir")
    e.add_argument("--include-initial", action="store_true", help="also export the epoch-0 snapshot")
    e.add_argument("--output")
    return ap


def main(argv=None) -> int:
    ap = _parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.verb == "train":
        return cmd_train(args.config, args.overrides, args.output_dir)
    if args.verb == "verify":
        return cmd_verify(args.alpha, args.neumann_terms)
    if args.verb == "sweep":
        try:
            seeds = [int(x) for x in args.seeds.split(",") if x.strip()]
        except ValueError:
            print(f"config error: --seeds: not a list of integers: {args.seeds!r}", file=sys.stderr)
            return EXIT_CONFIG
        values = [x.strip() for x in args.values.split(",") if x.strip()]
        return cmd_sweep(args.param, values, args.config, seeds, args.overrides, args.output_dir)
    return cmd_export_policy(args.run_dir, args.include_initial, args.output)


if __name__ == "__main__":
    sys.exit(main())
