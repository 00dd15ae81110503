"""Command-line entry point: ``gsa-mia <subcommand> [flags]``.

Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ATTACKS, ConfigError, ExperimentConfig, dump_config, load_config
from .data import generate_synthetic_dataset, import_cifar10
from .defenses import DEFENSE_KINDS
from .features import SAMPLERS
from .pipeline import STAGES, SWEEP_AXES, Run, StageError, run_experiment, run_stage, sweep
from .plots import emit_roc_plot, emit_sweep_plot

EXIT_CONFIG, EXIT_STAGE = 2, 3


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="INI experiment config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--attack", choices=ATTACKS)
    p.add_argument("--sampler", choices=SAMPLERS)
    p.add_argument("--k", type=int, help="number of sampled timesteps")
    p.add_argument("--layer-fraction", type=float)
    p.add_argument("--defense", choices=DEFENSE_KINDS)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gsa-mia", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset into --out")
    _common(p)
    p.add_argument("--count", type=int)
    p.add_argument("--side", type=int)
    p.add_argument("--classes", type=int)

    p = sub.add_parser("import-cifar10", help="convert a CIFAR-10 binary file into --out/dataset.npz")
    _common(p)
    p.add_argument("path")

    for stage in STAGES[1:]:
        _common(sub.add_parser(stage, help=f"run the {stage} stage"))

    p = sub.add_parser("run", help="run every stage")
    _common(p)

    p = sub.add_parser("sweep", help="vary one axis and tabulate the results")
    _common(p)
    p.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    p.add_argument("--values", required=True, help="comma-separated axis values")

    p = sub.add_parser("plot", help="render SVGs from a ROC or sweep CSV")
    p.add_argument("--roc", help="ROC CSV (fpr,tpr,threshold)")
    p.add_argument("--table", help="sweep CSV")
    p.add_argument("--svg", required=True)
    p.add_argument("--log-fpr", action="store_true")

    p = sub.add_parser("show-config", help="print the effective config")
    _common(p)
    return ap


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {
        "seed": args.seed, "out_dir": args.out, "attack": args.attack, "sampler.method": args.sampler,
        "sampler.k": args.k, "layer_fraction": args.layer_fraction, "defense.kind": args.defense,
    }
    for extra in ("count", "side", "classes"):
        if getattr(args, extra, None) is not None:
            overrides[f"dataset.{extra}"] = getattr(args, extra)
    cfg = cfg.replace(**{k: v for k, v in overrides.items() if v is not None})
    return cfg.validate()


def _parse_values(axis: str, raw: str) -> list:
    items = [v.strip() for v in raw.split(",") if v.strip()]
    if axis == "sampler_method":
        return items
    cast = float if axis == "layer_fraction" else int
    try:
        return [cast(v) for v in items]
    except ValueError:
        raise ConfigError(f"bad value list for axis {axis}: {raw!r}") from None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        if args.command == "plot":
            if bool(args.roc) == bool(args.table):
                raise ConfigError("plot needs exactly one of --roc or --table")
            if args.roc:
                emit_roc_plot(args.roc, args.svg, args.log_fpr)
            else:
                emit_sweep_plot(args.table, args.svg)
            return 0
        cfg = resolve_config(args)
        if args.command == "show-config":
            sys.stdout.write(dump_config(cfg))
            return 0
        if args.command == "sweep":
            table = sweep(cfg, args.axis, _parse_values(args.axis, args.values))
            for row in table:
                print(f"{args.axis}={row['axis_value']}: asr={row['asr']:.4f} auc={row['auc']:.4f}")
            return 0
        if args.command == "run":
            report = run_experiment(cfg)
            sys.stdout.write(report.to_json())
            return 0
        run = Run(cfg)
        if args.command == "gen-data":
            if cfg.dataset.source != "synthetic":
                raise ConfigError("gen-data only produces the synthetic source")
            d = cfg.dataset
            ds = generate_synthetic_dataset(d.count, d.side, d.classes, run.seed(1), d.channels)
            ds.save(run.path("dataset.npz"))
            print(f"wrote {len(ds)} images to {run.path('dataset.npz')}")
            return 0
        if args.command == "import-cifar10":
            try:
                ds = import_cifar10(args.path)
            except (OSError, ValueError) as exc:
                raise StageError("import-cifar10", exc) from exc
            Path(run.out).mkdir(parents=True, exist_ok=True)
            ds.save(run.path("dataset.npz"))
            print(f"wrote {len(ds)} images to {run.path('dataset.npz')}")
            return 0
        result = run_stage(run, args.command)
        if result is not None and hasattr(result, "to_json"):
            sys.stdout.write(result.to_json())
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StageError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
