"""Ensemble library and exit-to-exit distillation on the server.

The meta-learner holds ``K`` trainable logits ``m``; the exit weights are
``M = softmax(m)`` so every mixture of exit outputs is convex.  Per public
mini-batch the cloud

1. fits ``m`` on the cross-entropy of the mixed prediction ``sum_i M_i P_i``,
2. rebuilds the ensemble prediction ``P_M`` and feature ``F_M``,
3. takes one SGD step on the model weights against the hierarchical loss::

       L_G = sum_{i<K} [KL(P_K || exit i) + beta * MSE(F_i, F_K)]
             + KL(P_M || exit K) + beta * MSE(F_K, F_M)

Teachers (``P_K``, ``F_K``, ``P_M``, ``F_M``) are always detached.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np

from . import tensor as T
from .model import ExitOutputs, forward_all_exits

if TYPE_CHECKING:
    from .data import Dataset
    from .protocol import ServerState

MODES = ("off", "logits_only", "full")

META_KEY = "ensemble.meta_logits"


@dataclass
class EnsembleLibrary:
    meta_logits: np.ndarray
    ensemble_probs: np.ndarray | None = None
    ensemble_features: np.ndarray | None = None

    @classmethod
    def uniform(cls, num_exits: int) -> "EnsembleLibrary":
        return cls(np.zeros(num_exits))

    @property
    def num_exits(self) -> int:
        return self.meta_logits.shape[0]

    @property
    def weights(self) -> np.ndarray:
        return T.softmax(self.meta_logits).data

    def copy(self) -> "EnsembleLibrary":
        return EnsembleLibrary(
            self.meta_logits.copy(),
            None if self.ensemble_probs is None else self.ensemble_probs.copy(),
            None if self.ensemble_features is None else self.ensemble_features.copy(),
        )


@dataclass
class DistillConfig:
    epochs: int = 5
    beta: float = 0.1
    lr: float | None = None  # None ties it to the round's device lr
    meta_lr: float | None = None  # None uses the distillation lr
    batch_size: int = 32
    mode: str = "full"

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("distill epochs must be >= 0")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.batch_size < 1:
            raise ValueError("distill batch_size must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("lr", "meta_lr"):
            value = getattr(self, name)
            if value is not None and not value > 0:
                raise ValueError(f"distill {name} must be positive")

    @property
    def effective_beta(self) -> float:
        return 0.0 if self.mode == "logits_only" else self.beta


@dataclass
class DistillStats:
    meta_losses: list[float] = field(default_factory=list)
    distill_losses: list[float] = field(default_factory=list)


def _check_exits(lib: EnsembleLibrary, outputs: ExitOutputs) -> None:
    if lib.num_exits != outputs.num_exits:
        raise ValueError(f"meta-learner has {lib.num_exits} weights but outputs have {outputs.num_exits} exits")


def meta_loss(meta_logits: T.Tensor, probs: Sequence[np.ndarray], labels) -> T.Tensor:
    """Cross-entropy of the mixed distribution ``sum_i softmax(m)_i P_i`` (probabilities mixed first)."""
    weights = T.softmax(meta_logits)
    K = len(probs)
    onehots = np.eye(K)
    mixed = None
    for i, p in enumerate(probs):
        w_i = T.reduce_sum(weights * onehots[i])
        term = w_i * p
        mixed = term if mixed is None else mixed + term
    labels = np.asarray(labels, dtype=np.int64)
    B, C = mixed.shape
    if labels.shape != (B,) or labels.min() < 0 or labels.max() >= C:
        raise ValueError(f"labels must be {B} integers in [0, {C})")
    return -T.mean(T.log(T.pick(mixed, labels)))


def update_meta_learner(
    lib: EnsembleLibrary, outputs: ExitOutputs, labels, lr: float
) -> tuple[EnsembleLibrary, float]:
    """One SGD step on the meta logits; exit outputs are constants here."""
    _check_exits(lib, outputs)
    m = T.parameter(lib.meta_logits, "meta")
    loss = meta_loss(m, [p.data for p in outputs.probs], labels)
    grads = T.backward(loss)
    new_logits = T.sgd_step({"meta": lib.meta_logits}, {"meta": grads.get("meta", np.zeros_like(lib.meta_logits))}, lr)["meta"]
    return EnsembleLibrary(new_logits, lib.ensemble_probs, lib.ensemble_features), float(loss.data)


def compute_ensemble(lib: EnsembleLibrary, outputs: ExitOutputs) -> tuple[np.ndarray, np.ndarray]:
    """Weighted ensemble prediction and feature; cached on ``lib`` as constants."""
    _check_exits(lib, outputs)
    shapes = {p.shape for p in outputs.probs}
    fshapes = {f.shape for f in outputs.features}
    if len(shapes) != 1 or len(fshapes) != 1:
        raise ValueError(f"exit outputs disagree in shape: probs {shapes}, features {fshapes}")
    w = lib.weights
    P_M = np.zeros(outputs.probs[0].shape)
    F_M = np.zeros(outputs.features[0].shape)
    for i in range(outputs.num_exits):
        P_M = P_M + w[i] * outputs.probs[i].data
        F_M = F_M + w[i] * outputs.features[i].data
    lib.ensemble_probs = P_M
    lib.ensemble_features = F_M
    return P_M, F_M


@dataclass
class DistillTerm:
    kind: str  # "kl" or "mse"
    student: int  # 1-based exit index
    teacher: str  # "exit{K}" or "ensemble"
    value: T.Tensor


def distill_terms(outputs: ExitOutputs, P_M, F_M, beta: float) -> list[DistillTerm]:
    if beta < 0:
        raise ValueError("beta must be >= 0")
    K = outputs.num_exits
    if K < 1:
        raise ValueError("need at least one exit")
    top_p = outputs.probs[K - 1].data
    top_f = outputs.features[K - 1].data
    terms: list[DistillTerm] = []
    for i in range(1, K + 1):
        if i < K:
            p_teacher, f_teacher, label = top_p, top_f, f"exit{K}"
        else:
            p_teacher, f_teacher, label = np.asarray(P_M), np.asarray(F_M), "ensemble"
        student_logits = outputs.logits[i - 1]
        student_feat = outputs.features[i - 1]
        terms.append(DistillTerm("kl", i, label, T.kl_divergence(p_teacher, student_logits)))
        terms.append(DistillTerm("mse", i, label, beta * T.mean_squared_error(student_feat, f_teacher)))
    return terms


def hierarchical_distill_loss(outputs: ExitOutputs, P_M, F_M, beta: float) -> T.Tensor:
    total = None
    for term in distill_terms(outputs, P_M, F_M, beta):
        total = term.value if total is None else total + term.value
    return total


def distill_step(params, lib: EnsembleLibrary, x, y, beta: float, lr: float, meta_lr: float):
    """Meta step, ensemble refresh and one weight step on a single public batch."""
    leaves = T.bind(params)
    outputs = forward_all_exits(leaves, x)
    lib, loss_m = update_meta_learner(lib, outputs, y, meta_lr)
    P_M, F_M = compute_ensemble(lib, outputs)
    loss_g = hierarchical_distill_loss(outputs, P_M, F_M, beta)
    grads = T.backward(loss_g)
    return T.sgd_step(params, grads, lr), lib, loss_m, float(loss_g.data)


def distill_epoch(
    server: "ServerState",
    public: "Dataset",
    cfg: DistillConfig,
    lr: float,
    rng: np.random.Generator,
    stats: DistillStats | None = None,
) -> "ServerState":
    """Run ``cfg.epochs`` passes of distillation over the public set."""
    if cfg.mode == "off" or cfg.epochs == 0:
        return server
    if public is None or len(public) == 0:
        raise ValueError("distillation needs a non-empty public set")
    d_lr = cfg.lr if cfg.lr is not None else lr
    m_lr = cfg.meta_lr if cfg.meta_lr is not None else d_lr
    params, lib = server.params, server.library
    M = len(public)
    for _ in range(cfg.epochs):
        order = rng.permutation(M)
        for start in range(0, M, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            params, lib, loss_m, loss_g = distill_step(
                params, lib, public.features[idx], public.labels[idx], cfg.effective_beta, d_lr, m_lr
            )
            if stats is not None:
                stats.meta_losses.append(loss_m)
                stats.distill_losses.append(loss_g)
    return server.replace(params=params, library=lib)


def evaluate_losses(params, lib: EnsembleLibrary, public: "Dataset", beta: float) -> tuple[float, float]:
    """``(L_M, L_G)`` on the whole public set without updating anything."""
    outputs = forward_all_exits(params, public.features)
    loss_m = meta_loss(T.Tensor(lib.meta_logits), [p.data for p in outputs.probs], public.labels)
    probe = lib.copy()
    P_M, F_M = compute_ensemble(probe, outputs)
    loss_g = hierarchical_distill_loss(outputs, P_M, F_M, beta)
    return float(loss_m.data), float(loss_g.data)
