"""Experiment driver: data preparation, evaluation, metrics and ablations."""

from __future__ import annotations

import csv
import io
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import data as D
from .config import ConfigError, ExperimentConfig, serialize_config
from .ensemble import META_KEY, MODES, EnsembleLibrary
from .model import build_network, forward_all_exits, save_checkpoint
from .protocol import DeviceState, RoundMetrics, ServerState, make_devices, run_round

log = logging.getLogger(__name__)

OUTPUT_ENV = "HIERAFL_OUT"
METRICS_FILE = "metrics.csv"
SUMMARY_FILE = "summary.txt"
CHECKPOINT_FILE = "checkpoint.hfl"


def metrics_header(num_exits: int) -> list[str]:
    return (
        ["round", "lr"]
        + [f"acc_{i}" for i in range(1, num_exits + 1)]
        + ["acc_ensemble", "loss_meta", "loss_distill"]
        + [f"m_{i}" for i in range(1, num_exits + 1)]
    )


@dataclass
class MetricsRow:
    round: int
    lr: float
    acc: list[float]
    acc_ensemble: float
    loss_meta: float
    loss_distill: float
    weights: list[float]

    def cells(self) -> list[str]:
        return (
            [str(self.round), f"{self.lr:.6g}"]
            + [f"{a:.2f}" for a in self.acc]
            + [f"{self.acc_ensemble:.2f}", f"{self.loss_meta:.6f}", f"{self.loss_distill:.6f}"]
            + [f"{w:.6f}" for w in self.weights]
        )


@dataclass
class PreparedData:
    train: D.Dataset
    test: D.Dataset
    split: D.PublicSplit
    plan: D.PartitionPlan

    @property
    def shards(self) -> list[D.Dataset]:
        return [self.split.remainder.subset(a) for a in self.plan.assignment]


@dataclass
class ExperimentResult:
    rows: list[MetricsRow]
    server: ServerState
    devices: list[DeviceState]
    output_dir: Path | None = None
    round_metrics: list[RoundMetrics] = field(default_factory=list)

    @property
    def final(self) -> MetricsRow:
        return self.rows[-1]


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


def load_datasets(cfg: ExperimentConfig) -> tuple[D.Dataset, D.Dataset]:
    ds = cfg.dataset
    seed = cfg.seed if ds.seed is None else ds.seed
    if ds.kind == "synthetic":
        train = D.generate_synthetic(ds.classes, ds.dim, ds.per_class, ds.spread, seed, sample_stream=0)
        test = D.generate_synthetic(ds.classes, ds.dim, ds.test_per_class, ds.spread, seed, sample_stream=1)
        return train, test
    C = cfg.model.num_classes
    if ds.kind == "idx":
        train = D.load_idx(ds.images, ds.labels, C)
        test = D.load_idx(ds.test_images, ds.test_labels, C) if ds.test_images and ds.test_labels else None
    else:
        train = D.load_csv(ds.path, C)
        test = D.load_csv(ds.test_path, C) if ds.test_path else None
    if test is None:
        train, test = D.split_holdout(train, ds.test_fraction, seed)
    return train, test


def prepare_data(cfg: ExperimentConfig) -> PreparedData:
    train, test = load_datasets(cfg)
    if train.dim != cfg.model.input_dim:
        raise ConfigError("model.input_dim", f"dataset has {train.dim} features, model expects {cfg.model.input_dim}")
    if train.num_classes != cfg.model.num_classes:
        raise ConfigError("model.num_classes", f"dataset has {train.num_classes} classes")
    split = D.split_public(train, cfg.dataset.public_fraction, cfg.seed)
    N = cfg.rounds.devices
    if cfg.partition.scheme == "iid":
        plan = D.iid_partition(split.remainder, N, cfg.seed)
    else:
        plan = D.dirichlet_partition(split.remainder, N, cfg.partition.alpha, cfg.seed)
    return PreparedData(train, test, split, plan)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def evaluate(params, test: D.Dataset, library: EnsembleLibrary | None = None) -> tuple[list[float], float]:
    """Per-exit accuracy (percent) and ensemble accuracy under the meta weights.

    ``np.argmax`` breaks ties toward the lowest class index.
    """
    if len(test) == 0:
        raise ValueError("test set is empty")
    C = params["exit.1.cls.W"].shape[1]
    if C != test.num_classes:
        raise ValueError(f"model predicts {C} classes but the test set has {test.num_classes}")
    outputs = forward_all_exits(params, test.features)
    K = outputs.num_exits
    library = library or EnsembleLibrary.uniform(K)
    accs = [float(np.mean(np.argmax(v.data, axis=1) == test.labels) * 100.0) for v in outputs.logits]
    w = library.weights
    mixed = np.zeros(outputs.probs[0].shape)
    for i in range(K):
        mixed = mixed + w[i] * outputs.probs[i].data
    ens = float(np.mean(np.argmax(mixed, axis=1) == test.labels) * 100.0)
    return accs, ens


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------


def resolve_output(cfg: ExperimentConfig, override: str | Path | None = None) -> Path:
    if override is not None:
        return Path(override)
    env = os.environ.get(OUTPUT_ENV)
    return Path(env) if env else Path(cfg.output)


def init_server(cfg: ExperimentConfig, prepared: PreparedData) -> ServerState:
    params = build_network(cfg.model, cfg.seed)
    return ServerState(params=params, library=EnsembleLibrary.uniform(cfg.model.num_exits), public=prepared.split.public)


def run_experiment(
    cfg: ExperimentConfig,
    output_dir: str | Path | None = None,
    write: bool = True,
    on_round: Callable[[ServerState, list[DeviceState], MetricsRow], None] | None = None,
) -> ExperimentResult:
    """Run all rounds; optionally write metrics, summary and checkpoint files."""
    prepared = prepare_data(cfg)
    server = init_server(cfg, prepared)
    devices = make_devices(server, prepared.shards, cfg.rounds)
    rows: list[MetricsRow] = []
    round_metrics: list[RoundMetrics] = []
    for _ in range(cfg.rounds.rounds):
        server, m = run_round(server, devices, cfg.rounds, cfg.distill)
        accs, ens = evaluate(server.params, prepared.test, server.library)
        row = MetricsRow(m.round, m.lr, accs, ens, m.loss_meta, m.loss_distill, server.library.weights.tolist())
        rows.append(row)
        round_metrics.append(m)
        log.info("round %d lr=%.4g acc=%s ens=%.2f", m.round, m.lr, ["%.2f" % a for a in accs], ens)
        if on_round is not None:
            on_round(server, devices, row)

    out = None
    if write:
        out = resolve_output(cfg, output_dir)
        write_outputs(out, cfg, rows, server)
    return ExperimentResult(rows, server, devices, out, round_metrics)


def format_metrics(rows: list[MetricsRow], num_exits: int) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(metrics_header(num_exits))
    for row in rows:
        writer.writerow(row.cells())
    return buf.getvalue()


def format_summary(cfg: ExperimentConfig, rows: list[MetricsRow]) -> str:
    final = rows[-1]
    lines = [
        f"seed={cfg.seed}",
        f"mode={cfg.distill.mode}",
        f"rounds={final.round}",
        f"devices={cfg.rounds.devices}",
        f"num_exits={cfg.model.num_exits}",
        f"partition={cfg.partition.scheme}",
        f"alpha={cfg.partition.alpha!r}" if cfg.partition.scheme == "dirichlet" else "alpha=iid",
    ]
    lines += [f"final_acc_{i}={a:.2f}" for i, a in enumerate(final.acc, start=1)]
    lines.append(f"final_acc_ensemble={final.acc_ensemble:.2f}")
    lines += [f"final_m_{i}={w:.6f}" for i, w in enumerate(final.weights, start=1)]
    return "\n".join(lines) + "\n"


def write_outputs(out: Path, cfg: ExperimentConfig, rows: list[MetricsRow], server: ServerState) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / METRICS_FILE).write_text(format_metrics(rows, cfg.model.num_exits))
    (out / SUMMARY_FILE).write_text(format_summary(cfg, rows))
    (out / "config.ini").write_text(serialize_config(cfg))
    save_checkpoint(out / CHECKPOINT_FILE, {**server.params, META_KEY: server.library.meta_logits})


def _run_mode(args: tuple[ExperimentConfig, str, Path]) -> tuple[str, list[float], float]:
    cfg, mode, out = args
    result = run_experiment(cfg.with_mode(mode), output_dir=out / mode)
    return mode, result.final.acc, result.final.acc_ensemble


def run_ablation(cfg: ExperimentConfig, output_dir: str | Path | None = None, jobs: int = 1) -> dict[str, list[float]]:
    """Run off / logits_only / full from the same seed and write a comparison summary."""
    out = resolve_output(cfg, output_dir)
    tasks = [(cfg, mode, out) for mode in MODES]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(MODES))) as pool:
            results = list(pool.map(_run_mode, tasks))
    else:
        results = [_run_mode(t) for t in tasks]
    K = cfg.model.num_exits
    lines = [f"seed={cfg.seed}"]
    finals: dict[str, list[float]] = {}
    for mode, accs, ens in results:
        finals[mode] = accs
        lines.append(f"{mode}.final_acc_{K}={accs[-1]:.2f}")
        lines.append(f"{mode}.final_acc_1={accs[0]:.2f}")
        lines.append(f"{mode}.final_acc_ensemble={ens:.2f}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation_summary.txt").write_text("\n".join(lines) + "\n")
    return finals


def partition_report(cfg: ExperimentConfig) -> str:
    """Per-device class histogram table (tab separated)."""
    prepared = prepare_data(cfg)
    remainder = prepared.split.remainder
    hist = prepared.plan.histograms(remainder)
    C = remainder.num_classes
    lines = ["\t".join(["device", "capability", "n", *[f"c{c}" for c in range(C)]])]
    for dev_id, row in enumerate(hist):
        cap = cfg.rounds.capability_of(dev_id, cfg.model.num_exits)
        lines.append("\t".join([str(dev_id), str(cap), str(int(row.sum())), *[str(int(v)) for v in row]]))
    lines.append(f"# public={len(prepared.split.public)} test={len(prepared.test)} "
                 f"entropy={D.class_share_entropy(prepared.plan, remainder):.4f}")
    return "\n".join(lines) + "\n"
