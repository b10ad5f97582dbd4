"""Multi-exit dense network and its nested hierarchy sub-models.

The global network is a stack of ``K`` dense trunk blocks.  After block ``i``
an exit head (projector + classifier) produces a feature ``F_i``, logits
``V_i`` and probabilities ``P_i``.  A device of capability ``c`` holds trunk
blocks ``1..c`` plus exit head ``c`` only.

Parameter names::

    trunk.{b}.W, trunk.{b}.b                      b = 1..K
    exit.{i}.proj.W, exit.{i}.proj.b               i = 1..K
    exit.{i}.cls.W,  exit.{i}.cls.b
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .tensor import GradientMap, ParameterStore, Tensor, as_tensor, linear_forward, relu, softmax

CHECKPOINT_MAGIC = b"HFL1"


@dataclass(frozen=True)
class HierarchyNetSpec:
    num_exits: int
    input_dim: int
    trunk_widths: tuple[int, ...]
    feature_dim: int
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "trunk_widths", tuple(int(w) for w in self.trunk_widths))
        if self.num_exits < 1:
            raise ValueError("num_exits must be >= 1")
        if len(self.trunk_widths) != self.num_exits:
            raise ValueError(
                f"trunk_widths has {len(self.trunk_widths)} entries, expected num_exits={self.num_exits}"
            )
        dims = (self.input_dim, self.feature_dim, self.num_classes, *self.trunk_widths)
        if min(dims) < 1:
            raise ValueError("all network dimensions must be >= 1")

    def shapes(self) -> dict[str, tuple[int, ...]]:
        out: dict[str, tuple[int, ...]] = {}
        fan_in = self.input_dim
        for b, width in enumerate(self.trunk_widths, start=1):
            out[f"trunk.{b}.W"] = (fan_in, width)
            out[f"trunk.{b}.b"] = (width,)
            fan_in = width
        for i, width in enumerate(self.trunk_widths, start=1):
            out[f"exit.{i}.proj.W"] = (width, self.feature_dim)
            out[f"exit.{i}.proj.b"] = (self.feature_dim,)
            out[f"exit.{i}.cls.W"] = (self.feature_dim, self.num_classes)
            out[f"exit.{i}.cls.b"] = (self.num_classes,)
        return out


@dataclass
class ExitOutputs:
    """Per-exit features, logits and probabilities of one forward pass."""

    features: list[Tensor]
    logits: list[Tensor]
    probs: list[Tensor]

    @property
    def num_exits(self) -> int:
        return len(self.logits)


def trunk_names(b: int) -> tuple[str, str]:
    return f"trunk.{b}.W", f"trunk.{b}.b"


def exit_names(i: int) -> tuple[str, str, str, str]:
    return f"exit.{i}.proj.W", f"exit.{i}.proj.b", f"exit.{i}.cls.W", f"exit.{i}.cls.b"


def subset_names(capability: int) -> list[str]:
    names: list[str] = []
    for b in range(1, capability + 1):
        names.extend(trunk_names(b))
    names.extend(exit_names(capability))
    return names


def build_network(spec: HierarchyNetSpec, seed: int) -> ParameterStore:
    """Glorot-uniform weights and zero biases, deterministic in ``(spec, seed)``."""
    rng = np.random.default_rng(seed)
    params: ParameterStore = {}
    for name, shape in spec.shapes().items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-limit, limit, size=shape)
    return params


_TRUNK_RE = re.compile(r"^trunk\.(\d+)\.[Wb]$")
_EXIT_RE = re.compile(r"^exit\.(\d+)\.(proj|cls)\.[Wb]$")


def _trunk_depth(params: Mapping[str, object]) -> int:
    return sum(1 for k in params if _TRUNK_RE.match(k)) // 2


def _exit_ids(params: Mapping[str, object]) -> list[int]:
    return sorted({int(m.group(1)) for k in params if (m := _EXIT_RE.match(k))})


def _missing(params: Mapping[str, object], names) -> list[str]:
    return [n for n in names if n not in params]


def _trunk_hidden(params, x: Tensor, depth: int):
    h = x
    hidden = []
    for b in range(1, depth + 1):
        W, bias = trunk_names(b)
        h = relu(linear_forward(h, params[W], params[bias]))
        hidden.append(h)
    return hidden


def _head(params, h: Tensor, i: int) -> tuple[Tensor, Tensor, Tensor]:
    pW, pb, cW, cb = exit_names(i)
    feature = relu(linear_forward(h, params[pW], params[pb]))
    logits = linear_forward(feature, params[cW], params[cb])
    return feature, logits, softmax(logits)


def _input(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2 or x.shape[0] == 0:
        raise ValueError(f"input batch must be a non-empty 2-D array, got shape {x.shape}")
    return x


def forward_all_exits(params: Mapping[str, object], x) -> ExitOutputs:
    """Run the full network and return every exit's (F, V, P).

    ``params`` may hold numpy arrays (constants) or bound Tensors.
    """
    depth = _trunk_depth(params)
    expected = [n for b in range(1, depth + 1) for n in (*trunk_names(b), *exit_names(b))]
    missing = _missing(params, expected)
    if depth == 0 or missing:
        raise ValueError(f"forward_all_exits needs a full global store; missing {missing or ['trunk.1.*']}")
    x = _input(x)
    hidden = _trunk_hidden(params, x, depth)
    feats, logits, probs = [], [], []
    for i, h in enumerate(hidden, start=1):
        f, v, p = _head(params, h, i)
        feats.append(f)
        logits.append(v)
        probs.append(p)
    return ExitOutputs(feats, logits, probs)


def subset_capability(params: Mapping[str, object]) -> int:
    """Capability of a well-formed subset store; raises if malformed."""
    depth = _trunk_depth(params)
    exits = _exit_ids(params)
    if depth < 1 or exits != [depth]:
        raise ValueError(f"malformed subset store: trunk depth {depth}, exit heads {exits}")
    expected = set(subset_names(depth))
    if set(params) != expected:
        raise ValueError(
            f"malformed subset store for capability {depth}: "
            f"missing {sorted(expected - set(params))}, unexpected {sorted(set(params) - expected)}"
        )
    return depth


def forward_exit(params: Mapping[str, object], x) -> tuple[Tensor, Tensor, Tensor]:
    """Forward a capability-c subset store; returns ``(V, P, F)`` of exit c."""
    c = subset_capability(params)
    x = _input(x)
    h = _trunk_hidden(params, x, c)[-1]
    feature, logits, probs = _head(params, h, c)
    return logits, probs, feature


def num_exits_of(params: Mapping[str, object]) -> int:
    return _trunk_depth(params)


def extract_subset(global_params: ParameterStore, capability: int) -> ParameterStore:
    K = _trunk_depth(global_params)
    if not 1 <= capability <= K:
        raise ValueError(f"capability {capability} outside [1, {K}]")
    names = subset_names(capability)
    missing = _missing(global_params, names)
    if missing:
        raise ValueError(f"global store is missing {missing}")
    return {n: global_params[n].copy() for n in names}


def merge_named_update(global_params: ParameterStore, update: GradientMap) -> ParameterStore:
    """Add ``update[k]`` to every keyed parameter; other entries are carried over untouched."""
    unknown = sorted(k for k in update if k not in global_params)
    if unknown:
        raise KeyError(f"update names unknown parameters: {unknown}")
    merged = dict(global_params)
    for k, delta in update.items():
        if delta.shape != global_params[k].shape:
            raise ValueError(f"update for {k} has shape {delta.shape}, expected {global_params[k].shape}")
        merged[k] = global_params[k] + delta
    return merged


def spec_from_store(params: ParameterStore) -> HierarchyNetSpec:
    K = _trunk_depth(params)
    if K < 1:
        raise ValueError("store has no trunk blocks")
    widths = tuple(params[f"trunk.{b}.W"].shape[1] for b in range(1, K + 1))
    return HierarchyNetSpec(
        num_exits=K,
        input_dim=params["trunk.1.W"].shape[0],
        trunk_widths=widths,
        feature_dim=params["exit.1.proj.W"].shape[1],
        num_classes=params["exit.1.cls.W"].shape[1],
    )


# ---------------------------------------------------------------------------
# checkpoint files
# ---------------------------------------------------------------------------
# Layout (all integers little-endian):
#   b"HFL1" | u32 record count | records...
#   record: u16 name length | utf-8 name | u8 ndim | u32 dims[ndim] | f64 values


def save_checkpoint(path: str | Path, arrays: Mapping[str, np.ndarray]) -> None:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        value = np.ascontiguousarray(arrays[name], dtype="<f8")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}I", *value.shape))
        chunks.append(value.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {blob[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    offset = 4

    def take(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(blob):
            raise ValueError(f"{path}: truncated checkpoint at byte {offset}")
        chunk = blob[offset:offset + n]
        offset += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
    if offset != len(blob):
        raise ValueError(f"{path}: {len(blob) - offset} trailing bytes after last record")
    return out
