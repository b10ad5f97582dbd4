"""Experiment configuration stored as an INI file.

Sections map one-to-one onto the config dataclasses::

    [experiment]  seed, output
    [dataset]     kind (synthetic | idx | csv) and its source keys
    [partition]   scheme (dirichlet | iid), alpha
    [rounds]      RoundConfig fields
    [model]       HierarchyNetSpec fields
    [distill]     DistillConfig fields

Unknown sections or keys are rejected.  ``auto`` stands for ``None``.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .ensemble import DistillConfig
from .model import HierarchyNetSpec
from .protocol import RoundConfig

DATASET_KINDS = ("synthetic", "idx", "csv")
SCHEMES = ("dirichlet", "iid")


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path
        self.message = message


@dataclass
class DatasetConfig:
    kind: str = "synthetic"
    classes: int = 10
    dim: int = 64
    per_class: int = 200
    test_per_class: int = 100
    spread: float = 0.3
    seed: int | None = None  # None follows the experiment seed
    public_fraction: float = 0.01
    images: str | None = None
    labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    path: str | None = None
    test_path: str | None = None
    test_fraction: float = 0.2

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ValueError(f"kind must be one of {DATASET_KINDS}, got {self.kind!r}")
        if not 0 < self.public_fraction < 1:
            raise ValueError("public_fraction must lie in (0, 1)")
        if not 0 < self.test_fraction < 1:
            raise ValueError("test_fraction must lie in (0, 1)")
        if self.kind == "synthetic":
            if min(self.classes, self.dim, self.per_class, self.test_per_class) < 1:
                raise ValueError("classes, dim, per_class and test_per_class must be >= 1")
            if self.spread < 0:
                raise ValueError("spread must be >= 0")
        elif self.kind == "idx" and (not self.images or not self.labels):
            raise ValueError("idx datasets need images and labels")
        elif self.kind == "csv" and not self.path:
            raise ValueError("csv datasets need path")


@dataclass
class PartitionConfig:
    scheme: str = "dirichlet"
    alpha: float = 0.5

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")


def _default_model() -> HierarchyNetSpec:
    return HierarchyNetSpec(num_exits=4, input_dim=64, trunk_widths=(64, 64, 64, 64), feature_dim=32, num_classes=10)


@dataclass
class ExperimentConfig:
    seed: int = 1234
    output: str = "runs/default"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    rounds: RoundConfig = field(default_factory=RoundConfig)
    model: HierarchyNetSpec = field(default_factory=_default_model)
    distill: DistillConfig = field(default_factory=DistillConfig)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return self.replace(seed=seed, rounds=dataclasses.replace(self.rounds, seed=seed))

    def with_mode(self, mode: str) -> "ExperimentConfig":
        return self.replace(distill=dataclasses.replace(self.distill, mode=mode))


_SECTIONS = {
    "dataset": DatasetConfig,
    "partition": PartitionConfig,
    "rounds": RoundConfig,
    "model": HierarchyNetSpec,
    "distill": DistillConfig,
}


def _field_types(cls) -> dict[str, object]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def _parse_value(raw: str, hint, path: str):
    raw = raw.strip()
    args = typing.get_args(hint)
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType) and type(None) in args:
        if raw.lower() in ("auto", "none", ""):
            return None
        (inner,) = [a for a in args if a is not type(None)]
        return _parse_value(raw, inner, path)
    try:
        if origin is tuple:
            return tuple(int(v) for v in raw.replace(" ", "").split(",") if v)
        if hint is bool:
            return {"true": True, "false": False}[raw.lower()]
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
    except (ValueError, KeyError):
        raise ConfigError(path, f"cannot parse {raw!r} as {getattr(hint, '__name__', hint)}") from None
    return raw


def _format_value(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str  # keep key case
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(source, str(exc).splitlines()[0]) from None
    unknown = [s for s in parser.sections() if s not in _SECTIONS and s != "experiment"]
    if unknown:
        raise ConfigError(unknown[0], "unknown section")

    top: dict[str, object] = {}
    if parser.has_section("experiment"):
        for key, raw in parser.items("experiment"):
            if key == "seed":
                top["seed"] = _parse_value(raw, int, "experiment.seed")
            elif key == "output":
                top["output"] = raw.strip()
            else:
                raise ConfigError(f"experiment.{key}", "unknown key")

    seed = top.get("seed", ExperimentConfig.seed)
    sections: dict[str, object] = {}
    for name, cls in _SECTIONS.items():
        hints = _field_types(cls)
        values: dict[str, object] = {}
        if parser.has_section(name):
            for key, raw in parser.items(name):
                if key not in hints:
                    raise ConfigError(f"{name}.{key}", "unknown key")
                values[key] = _parse_value(raw, hints[key], f"{name}.{key}")
        if name == "rounds":
            values.setdefault("seed", seed)
        if name == "model" and not values:
            sections[name] = _default_model()
            continue
        if name == "model":
            base = dataclasses.asdict(_default_model())
            base.update(values)
            if "num_exits" in values and "trunk_widths" not in values:
                base["trunk_widths"] = (base["trunk_widths"][0],) * int(values["num_exits"])
            values = base
        try:
            sections[name] = cls(**values)
        except (ValueError, TypeError) as exc:
            raise ConfigError(name, str(exc)) from None
    cfg = ExperimentConfig(**top, **sections)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    """Cross-field consistency; raises ConfigError with a field path."""
    if cfg.rounds.seed != cfg.seed:
        raise ConfigError("rounds.seed", f"must equal experiment.seed ({cfg.seed})")
    K = cfg.model.num_exits
    if cfg.rounds.capabilities is not None:
        bad = [c for c in cfg.rounds.capabilities if not 1 <= c <= K]
        if bad:
            raise ConfigError("rounds.capabilities", f"values {bad} outside [1, {K}]")
    if cfg.dataset.kind == "synthetic":
        if cfg.dataset.classes != cfg.model.num_classes:
            raise ConfigError("model.num_classes", f"must equal dataset.classes ({cfg.dataset.classes})")
        if cfg.dataset.dim != cfg.model.input_dim:
            raise ConfigError("model.input_dim", f"must equal dataset.dim ({cfg.dataset.dim})")


def serialize_config(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    parser["experiment"] = {"seed": str(cfg.seed), "output": cfg.output}
    for name in _SECTIONS:
        section = getattr(cfg, name)
        parser[name] = {f.name: _format_value(getattr(section, f.name)) for f in dataclasses.fields(section)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read config ({exc.strerror})") from None
    return parse_config(text, source=str(path))


def default_config() -> ExperimentConfig:
    """The desk-scale preset."""
    return ExperimentConfig()
