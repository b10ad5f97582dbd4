"""Command line entry point: ``hierafl run|ablate|eval|partition-report``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import data as D
from .config import ConfigError, ExperimentConfig, default_config, load_config
from .ensemble import META_KEY, EnsembleLibrary
from .experiment import evaluate, partition_report, run_ablation, run_experiment
from .model import load_checkpoint

PRESET = "preset"


def _load(path: str, seed: int | None = None) -> ExperimentConfig:
    cfg = default_config() if path == PRESET else load_config(path)
    return cfg.with_seed(seed) if seed is not None else cfg


def parse_data_spec(spec: str) -> D.Dataset:
    """``synthetic:k=v,...`` | ``idx:IMAGES,LABELS`` | ``csv:PATH``."""
    kind, _, rest = spec.partition(":")
    if kind == "idx":
        parts = rest.split(",")
        if len(parts) != 2:
            raise ValueError("idx data spec is idx:IMAGES,LABELS")
        return D.load_idx(*parts)
    if kind == "csv":
        return D.load_csv(rest)
    if kind == "synthetic":
        opts = dict(classes=10, dim=64, per_class=100, spread=0.3, seed=1234, stream=1)
        for item in filter(None, rest.split(",")):
            key, _, value = item.partition("=")
            if key not in opts:
                raise ValueError(f"unknown synthetic option {key!r}")
            opts[key] = float(value) if key == "spread" else int(value)
        return D.generate_synthetic(
            opts["classes"], opts["dim"], opts["per_class"], opts["spread"], opts["seed"], sample_stream=opts["stream"]
        )
    raise ValueError(f"unknown data spec kind {kind!r}")


def cmd_run(args) -> int:
    cfg = _load(args.config, args.seed)
    result = run_experiment(cfg, output_dir=args.out)
    print(f"metrics={result.output_dir / 'metrics.csv'}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load(args.config, args.seed)
    finals = run_ablation(cfg, output_dir=args.out, jobs=args.jobs)
    K = cfg.model.num_exits
    for mode, accs in finals.items():
        print(f"{mode}.final_acc_{K}={accs[-1]:.2f}")
    return 0


def cmd_eval(args) -> int:
    arrays = load_checkpoint(args.checkpoint)
    meta = arrays.pop(META_KEY, None)
    library = EnsembleLibrary(meta) if meta is not None else None
    accs, ens = evaluate(arrays, parse_data_spec(args.data), library)
    for i, a in enumerate(accs, start=1):
        print(f"acc_{i}={a:.2f}")
    print(f"acc_ensemble={ens:.2f}")
    return 0


def cmd_partition_report(args) -> int:
    sys.stdout.write(partition_report(_load(args.config, args.seed)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hierafl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment")
    p.add_argument("--config", required=True, help=f"INI path or '{PRESET}'")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="run the off / logits_only / full ladder")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="synthetic:k=v,... | idx:IMAGES,LABELS | csv:PATH")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("partition-report", help="print per-device class histograms")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_partition_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error kind=config path={exc.path} message={exc.message!r}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, OSError) as exc:
        message = str(exc).replace("\n", " ")
        print(f"error kind={type(exc).__name__} message={message!r}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
