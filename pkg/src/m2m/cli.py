"""Command line: gen-data, train, eval, ablate, sweep.

Exit codes: 0 success, 2 configuration error, 3 numerical abort, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import checkpoint as ckpt
from .config import VARIANTS
from .data import TASKS, ConfigError, DatasetFormatError
from .features import vocab_from_config
from .metrics import evaluate
from .run import (
    DESK_MODEL,
    DESK_TRAIN,
    SWEEP_AXES,
    RunConfig,
    ablate,
    dataset_hash,
    fit,
    generate_dataset,
    load_bundle,
    revision,
    sweep,
)
from .tensor import ShapeError
from .training import NumericalAbort

log = logging.getLogger("m2m")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _config(args) -> RunConfig:
    if args.desk:
        raw = _read_json(args.config) if args.config else {}
        for section, preset in (("model", DESK_MODEL), ("train", DESK_TRAIN)):
            raw[section] = {**preset, **raw.get(section, {})}
        cfg = RunConfig.from_dict(raw)
    else:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "variant", None):
        cfg.variant = args.variant
    if getattr(args, "dataset", None):
        cfg.dataset = args.dataset
    if args.out:
        cfg.out = args.out
    cfg.validate()
    return cfg


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON ({err})") from err


def _stamp(cfg: RunConfig) -> dict:
    return {"config_hash": cfg.hash(), "seed": cfg.seed, "revision": revision()}


def cmd_gen_data(cfg: RunConfig, args) -> int:
    target = args.out or cfg.dataset
    info = generate_dataset(cfg, target)
    print(f"wrote {target}: " + ", ".join(f"{k}={v}" for k, v in info["counts"].items()))
    print("task,scenario_a,scenario_b,target,empirical")
    for row in info["correlations"]:
        print(f"{row['task']},{row['scenario_a']},{row['scenario_b']},{row['target']:.3f},{row['empirical']:.3f}")
    print(f"dataset_hash {info['dataset_hash']}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    bundle = load_bundle(cfg.dataset, cfg.features)
    meta = _stamp(cfg)
    resume, model = None, None
    if args.resume:
        resume = ckpt.load_resume(args.resume)
        if resume is None:
            raise ConfigError(f"{args.resume} carries no resume state")
        model = ckpt.load(args.resume)
        mcfg = model.cfg
    else:
        mcfg = cfg.model_config(vocab_from_config(bundle.gen, cfg.features.n_buckets))
    o = fit(bundle, mcfg, cfg.train, meta, history_path=out / "history.csv", resume=resume, model=model)
    ckpt.save(out / "checkpoint.npz", o.model, meta={**meta, "dataset_hash": bundle.digest}, resume=o.resume)
    o.report.to_csv(out / "test_metrics.csv")
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
    print(f"best epoch {o.best_epoch}; test overall NMAE {o.report.overall_nmae:.4f} "
          f"(macro {o.report.macro_nmae:.4f}); checkpoint {out / 'checkpoint.npz'}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    header = ckpt.header(args.checkpoint)
    bundle = load_bundle(cfg.dataset, cfg.features)
    if args.config and cfg.model:
        # an explicit model section must be shape-compatible with the checkpoint
        stored = ckpt.model_config(args.checkpoint)
        mcfg = cfg.model_config(vocab_from_config(bundle.gen, cfg.features.n_buckets), variant=stored.variant)
        model = ckpt.load(args.checkpoint, mcfg)
    else:
        model = ckpt.load(args.checkpoint)
    meta = {
        "checkpoint_config_hash": header["meta"].get("config_hash", ""),
        "seed": header["meta"].get("seed", ""),
        "revision": revision(),
        "dataset_hash": bundle.digest,
        "variant": header["variant"],
    }
    report = evaluate(model, bundle.test, meta=meta)
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    path = Path(cfg.out) / "eval_metrics.csv"
    report.to_csv(path, list(bundle.gen.scenario_names), TASKS)
    print(f"overall NMAE pooled {report.overall_nmae:.4f} macro {report.macro_nmae:.4f}; "
          f"SMAPE pooled {report.overall_smape:.4f} macro {report.macro_smape:.4f}; wrote {path}")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, args) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    before = dataset_hash(cfg.dataset)
    bundle = load_bundle(cfg.dataset, cfg.features)
    results = ablate(bundle, cfg, _stamp(cfg))
    if dataset_hash(cfg.dataset) != before:
        raise RuntimeError("dataset files changed during the ablation")
    names = list(bundle.gen.scenario_names)
    path = out / "ablation.csv"
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash: {cfg.hash()}\n# dataset_hash: {before}\n# seed: {cfg.seed}\n")
        w = csv.DictWriter(fh, ["variant", "scenario", "task", "nmae", "smape", "n"], lineterminator="\n")
        w.writeheader()
        for variant, o in results.items():
            for row in o.report.rows(names, TASKS):
                w.writerow({"variant": variant, **row})
    for variant, o in results.items():
        print(f"{variant:8s} overall NMAE {o.report.overall_nmae:.4f}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, args) -> int:
    axis = args.axis or cfg.sweep["axis"]
    values = [int(v) for v in args.values.split(",")] if args.values else list(cfg.sweep["values"])
    if axis not in SWEEP_AXES or not values:
        raise ConfigError(f"sweep needs --axis in {sorted(SWEEP_AXES)} and a nonempty --values list")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    before = dataset_hash(cfg.dataset)
    bundle = load_bundle(cfg.dataset, cfg.features)
    rows = sweep(bundle, cfg, axis, values, _stamp(cfg))
    if dataset_hash(cfg.dataset) != before:
        raise RuntimeError("dataset files changed during the sweep")
    path = out / f"sweep_{axis}.csv"
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash: {cfg.hash()}\n# dataset_hash: {before}\n# axis: {axis}\n")
        w = csv.DictWriter(fh, ["value", "overall_nmae", "overall_smape"], lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    print(f"wrote {path}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="m2m", description="Multi-scenario multi-task forecasting experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON run configuration (all fields optional)")
        s.add_argument("--seed", type=int, help="overrides the configured seed")
        s.add_argument("--desk", action="store_true", help="start from the single-core model and schedule preset")
        s.add_argument("--out", help="output directory")
        if name != "gen-data":
            s.add_argument("--dataset", help="dataset directory written by gen-data")
        if name in ("train", "ablate", "sweep"):
            s.add_argument("--variant", choices=VARIANTS)
        if name == "train":
            s.add_argument("--resume", help="checkpoint to continue training from")
        if name == "eval":
            s.add_argument("--checkpoint")
        if name == "sweep":
            s.add_argument("--axis", choices=sorted(SWEEP_AXES))
            s.add_argument("--values", help="comma-separated integers")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = _config(args)
        return COMMANDS[args.command](cfg, args)
    except NumericalAbort as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetFormatError, ckpt.CheckpointError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ShapeError, ValueError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
