"""Federated round loop: local training, layer-alignment averaging, dispatch.

Devices upload the cumulative weight change of their local epochs (a
pseudo-gradient).  The server averages every parameter over exactly the
devices that hold it, adds the result to the previous global model, runs the
cloud distillation phase and sends every device its slice again.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .data import Dataset
from .ensemble import DistillConfig, DistillStats, EnsembleLibrary, distill_epoch, evaluate_losses
from .model import extract_subset, forward_exit, merge_named_update, num_exits_of, subset_capability, subset_names

GradientBuffer = dict[int, dict[str, np.ndarray]]

# sub-stream tags for np.random.default_rng([seed, tag, ...])
_LOCAL_STREAM = 101
_DISTILL_STREAM = 202


@dataclass
class RoundConfig:
    rounds: int = 30
    devices: int = 8
    local_epochs: int = 5
    batch_size: int = 32
    lr0: float = 0.05
    lr_decay: float = 0.1
    lr_decay_every: int = 30
    server_lr: float = 1.0
    seed: int = 1234
    capabilities: tuple[int, ...] | None = None  # None: round-robin over 1..K

    def __post_init__(self):
        for name in ("rounds", "devices", "local_epochs", "batch_size", "lr_decay_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.lr0 > 0 or not self.lr_decay > 0 or not self.server_lr > 0:
            raise ValueError("lr0, lr_decay and server_lr must be positive")
        if self.capabilities is not None:
            self.capabilities = tuple(int(c) for c in self.capabilities)
            if len(self.capabilities) != self.devices:
                raise ValueError(f"{len(self.capabilities)} capabilities given for {self.devices} devices")

    def lr_at(self, round_index: int) -> float:
        """Device learning rate for the 1-based round ``round_index``."""
        return self.lr0 * self.lr_decay ** ((round_index - 1) // self.lr_decay_every)

    def capability_of(self, device_id: int, num_exits: int) -> int:
        if self.capabilities is not None:
            c = self.capabilities[device_id]
        else:
            c = device_id % num_exits + 1
        if not 1 <= c <= num_exits:
            raise ValueError(f"device {device_id} capability {c} outside [1, {num_exits}]")
        return c


@dataclass
class DeviceState:
    id: int
    capability: int
    data: Dataset
    params: dict[str, np.ndarray]
    active_from: int = 1  # first round this device trains in
    last_loss: float | None = None


@dataclass
class ServerState:
    params: dict[str, np.ndarray]
    library: EnsembleLibrary
    public: Dataset | None = None
    round: int = 0  # completed rounds
    previous: dict[str, np.ndarray] | None = None  # global model before the last aggregation

    @property
    def num_exits(self) -> int:
        return num_exits_of(self.params)

    def replace(self, **changes) -> "ServerState":
        return dataclasses.replace(self, **changes)


@dataclass
class RoundMetrics:
    round: int
    lr: float
    loss_meta: float
    loss_distill: float
    loss_local: float
    participants: list[int] = field(default_factory=list)


def delta_between(after: Mapping[str, np.ndarray], before: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: after[k] - before[k] for k in before}


def local_train(device: DeviceState, epochs: int, lr: float, batch_size: int, seed) -> dict[str, np.ndarray]:
    """Mini-batch SGD on the device's exit; returns ``w_after - w_before``.

    The device keeps ``w_after``.  ``seed`` feeds the shuffling generator.
    """
    if len(device.data) == 0:
        raise ValueError(f"device {device.id} holds no data")
    if lr < 0:
        raise ValueError("lr must be >= 0")
    subset_capability(device.params)
    before = device.params
    params = dict(before)
    rng = np.random.default_rng(seed)
    x, y = device.data.features, device.data.labels
    n = len(device.data)
    losses = []
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            leaves = T.bind(params)
            logits, _, _ = forward_exit(leaves, x[idx])
            loss = T.cross_entropy(logits, y[idx])
            losses.append(float(loss.data))
            if lr > 0:
                params = T.sgd_step(params, T.backward(loss), lr)
    device.params = params
    device.last_loss = float(np.mean(losses)) if losses else None
    return delta_between(params, before)


def layer_alignment_average(buffer: Mapping[int, Mapping[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """Mean of each parameter over exactly the devices whose update holds it.

    Sums run in ascending device id, then divide by the holder count.
    """
    if not buffer:
        raise ValueError("gradient buffer is empty")
    sums: dict[str, np.ndarray] = {}
    counts: dict[str, int] = {}
    for dev_id in sorted(buffer):
        for name, delta in buffer[dev_id].items():
            if name in sums:
                if sums[name].shape != delta.shape:
                    raise ValueError(
                        f"device {dev_id} sent {name} with shape {delta.shape}, others sent {sums[name].shape}"
                    )
                sums[name] = sums[name] + delta
                counts[name] += 1
            else:
                sums[name] = np.array(delta, dtype=np.float64)
                counts[name] = 1
    return {name: sums[name] / counts[name] for name in sums}


def apply_global_update(server: ServerState, avg_delta: Mapping[str, np.ndarray], server_lr: float = 1.0) -> ServerState:
    """``w_G <- w_G + server_lr * avg_delta``; names absent from the delta are carried over."""
    step = {k: v if server_lr == 1.0 else server_lr * v for k, v in avg_delta.items()}
    return server.replace(params=merge_named_update(server.params, step), previous=server.params)


def dispatch(server: ServerState, devices: Sequence[DeviceState]) -> list[DeviceState]:
    for device in devices:
        device.params = extract_subset(server.params, device.capability)
    return list(devices)


def make_devices(server: ServerState, shards: Sequence[Dataset], config: RoundConfig) -> list[DeviceState]:
    K = server.num_exits
    devices = []
    for dev_id, shard in enumerate(shards):
        c = config.capability_of(dev_id, K)
        devices.append(DeviceState(dev_id, c, shard, extract_subset(server.params, c)))
    return devices


def add_device(server: ServerState, capability: int, data: Dataset, device_id: int) -> DeviceState:
    """Hot-plug a device: it inherits the current global slice and trains from the next round on.

    ``server.round`` counts completed rounds, so a join now lands inside round
    ``server.round + 1`` and the device first trains in ``server.round + 2``.
    """
    K = server.num_exits
    if not 1 <= capability <= K:
        raise ValueError(f"capability {capability} outside [1, {K}]")
    if len(data) == 0:
        raise ValueError("a joining device needs data")
    return DeviceState(
        device_id, capability, data, extract_subset(server.params, capability), active_from=server.round + 2
    )


def run_round(
    server: ServerState,
    devices: Sequence[DeviceState],
    config: RoundConfig,
    distill: DistillConfig | None = None,
) -> tuple[ServerState, RoundMetrics]:
    """One communication round: train, average, update, distill, dispatch."""
    r = server.round + 1
    lr = config.lr_at(r)
    active = sorted((d for d in devices if d.active_from <= r), key=lambda d: d.id)
    if not active:
        raise ValueError(f"no device participates in round {r}")
    for d in active:
        expected = set(subset_names(d.capability))
        if set(d.params) != expected:
            raise ValueError(f"device {d.id} store does not match capability {d.capability}")

    buffer: GradientBuffer = {}
    for d in active:
        buffer[d.id] = local_train(d, config.local_epochs, lr, config.batch_size, [config.seed, _LOCAL_STREAM, r, d.id])
    server = apply_global_update(server, layer_alignment_average(buffer), config.server_lr)

    distill = distill or DistillConfig(mode="off")
    stats = DistillStats()
    if distill.mode != "off" and distill.epochs > 0:
        rng = np.random.default_rng([config.seed, _DISTILL_STREAM, r])
        server = distill_epoch(server, server.public, distill, lr, rng, stats)
    if stats.meta_losses:
        loss_meta = float(np.mean(stats.meta_losses))
        loss_distill = float(np.mean(stats.distill_losses))
    elif server.public is not None:
        loss_meta, loss_distill = evaluate_losses(server.params, server.library, server.public, distill.effective_beta)
    else:
        loss_meta = loss_distill = float("nan")

    server = server.replace(round=r)
    dispatch(server, devices)
    local = [d.last_loss for d in active if d.last_loss is not None]
    metrics = RoundMetrics(
        round=r,
        lr=lr,
        loss_meta=loss_meta,
        loss_distill=loss_distill,
        loss_local=float(np.mean(local)) if local else float("nan"),
        participants=[d.id for d in active],
    )
    return server, metrics
