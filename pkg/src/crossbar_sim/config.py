"""Dataclass configuration for tiles and experiments, loaded from TOML."""

from __future__ import annotations

import copy
import dataclasses
import enum
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import tomli

from .compounds import CompoundKind, CompoundParams, optimizer_kind
from .devices import DeviceParams
from .hwa import ClipRemapParams, InputRangeParams, ModifierParams
from .inference import NoiseModelParams
from .mvm import IOParams
from .update import UpdateParams


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending field path."""


class TileMode(str, enum.Enum):
    inference = "inference"  # analog forward, FP backward and FP update (HWA training)
    training = "training"  # analog forward/backward, pulsed in-memory update
    digital = "digital"  # plain floating point


@dataclass
class MappingParams:
    max_in_size: int = 512
    max_out_size: int = 0
    weight_scaling_omega: float | None = None  # None: 0.3 for training, 1.0 otherwise
    weight_scaling_columnwise: bool = False
    learn_out_scaling: bool = False
    # divide analog-weight updates by alpha^2 so lr acts on the represented weights
    weight_scaling_lr_compensation: bool = True
    digital_bias: bool = True

    def __post_init__(self):
        if self.max_in_size < 1 or self.max_out_size < 0:
            raise ValueError("max_in_size must be >= 1 and max_out_size >= 0")
        if self.weight_scaling_omega is not None and self.weight_scaling_omega < 0:
            raise ValueError("weight_scaling_omega must be >= 0")


@dataclass
class TileConfig:
    mode: TileMode = TileMode.inference
    forward: IOParams = field(default_factory=IOParams)
    backward: IOParams = field(default_factory=IOParams)
    update: UpdateParams = field(default_factory=UpdateParams)
    device: DeviceParams = field(default_factory=DeviceParams)
    a_device: DeviceParams | None = None
    compound: CompoundParams = field(default_factory=CompoundParams)
    mapping: MappingParams = field(default_factory=MappingParams)
    modifier: ModifierParams = field(default_factory=ModifierParams)
    clip: ClipRemapParams = field(default_factory=ClipRemapParams)
    input_range: InputRangeParams = field(default_factory=InputRangeParams)
    noise_model: NoiseModelParams = field(default_factory=NoiseModelParams)
    noise_enabled: bool = True
    drift_compensation: bool = True

    def __post_init__(self):
        self.mode = TileMode(self.mode)

    @property
    def omega(self) -> float:
        w = self.mapping.weight_scaling_omega
        if w is None:
            return 0.3 if self.mode == TileMode.training else 1.0
        return w


class ExperimentMode(str, enum.Enum):
    train_fp = "train_fp"
    train_inmemory = "train_inmemory"
    train_hwa = "train_hwa"
    infer_eval = "infer_eval"
    sweep = "sweep"


@dataclass
class DatasetSpec:
    kind: str = "blobs"  # blobs | mnist_idx
    path: str = ""
    train_subset: int = 0  # 0: all
    test_subset: int = 0
    n_samples: int = 600
    n_features: int = 16
    n_classes: int = 2
    spread: float = 0.5

    def __post_init__(self):
        if self.kind not in ("blobs", "mnist_idx"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "mnist_idx" and not self.path:
            raise ValueError("mnist_idx dataset needs a path")


@dataclass
class NetworkSpec:
    widths: list[int] = field(default_factory=lambda: [784, 256, 128, 10])
    activations: list[str] = field(default_factory=lambda: ["sigmoid", "sigmoid", "softmax"])

    def __post_init__(self):
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise ValueError("widths needs at least two positive entries")
        if len(self.activations) != len(self.widths) - 1:
            raise ValueError("need one activation per layer")


@dataclass
class OptimizerSpec:
    name: str = "sgd"
    lr: float = 0.1
    batch_size: int = 10
    epochs: int = 20
    decay_epochs: list[int] = field(default_factory=list)
    decay_factor: float = 0.1

    def __post_init__(self):
        optimizer_kind(self.name)
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("need lr >= 0, batch_size >= 1, epochs >= 0")


@dataclass
class EvalSpec:
    time_grid: list[float] = field(default_factory=lambda: [60.0, 3600.0, 86400.0, 31536000.0])
    repetitions: int = 10
    seeds: list[int] = field(default_factory=lambda: [0])

    def __post_init__(self):
        self.time_grid = [float(t) for t in self.time_grid]
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if any(b <= a for a, b in zip(self.time_grid, self.time_grid[1:])) or any(t < 0 for t in self.time_grid):
            raise ValueError("time_grid must be non-negative and strictly ascending")


@dataclass
class SweepSpec:
    parameters: list[str] = field(default_factory=lambda: ["device.dw_min"])
    factors: list[float] = field(default_factory=lambda: [1.0])
    train_mode: ExperimentMode = ExperimentMode.train_inmemory

    def __post_init__(self):
        self.train_mode = ExperimentMode(self.train_mode)
        if not self.factors or min(self.factors) <= 0:
            raise ValueError("sweep factors must be positive")


@dataclass
class ExperimentSpec:
    mode: ExperimentMode = ExperimentMode.train_fp
    name: str = "run"
    seed: int = 0
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    network: NetworkSpec = field(default_factory=NetworkSpec)
    tile: TileConfig = field(default_factory=TileConfig)
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    eval: EvalSpec = field(default_factory=EvalSpec)
    sweep: SweepSpec = field(default_factory=SweepSpec)
    checkpoint: str = ""
    train_mode: ExperimentMode = ExperimentMode.train_hwa  # how infer_eval trains without a checkpoint
    dtype: str = "float32"

    def __post_init__(self):
        self.mode = ExperimentMode(self.mode)
        self.train_mode = ExperimentMode(self.train_mode)
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")


def _normalize_tile_dict(d: dict) -> dict:
    """Accept ``clip.type``, ``remap.*`` and ``pre_post.input_range.*`` spellings."""
    d = copy.deepcopy(d)
    clip = d.setdefault("clip", {}) if ("clip" in d or "remap" in d) else None
    if clip is not None and "type" in clip:
        clip["clip_type"] = clip.pop("type")
    if "remap" in d:
        remap = d.pop("remap")
        if "type" in remap:
            remap["remap_type"] = remap.pop("type")
        clip.update(remap)
    if "pre_post" in d:
        pre_post = d.pop("pre_post")
        if "input_range" in pre_post:
            d["input_range"] = pre_post.pop("input_range")
        if pre_post:
            raise ConfigError(f"pre_post: unknown keys {sorted(pre_post)}")
    if "optimizer" in d.get("compound", {}):
        d["compound"]["kind"] = optimizer_kind(d["compound"].pop("optimizer")).value
    return d


def _unwrap_optional(tp):
    if typing.get_origin(tp) in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if len(args) == 1:
            return args[0], True
    return tp, False


def from_dict(cls, data: Any, path: str = ""):
    """Build dataclass ``cls`` from nested dicts; errors name the field path."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or cls.__name__}: expected a table, got {type(data).__name__}")
    if cls is TileConfig:
        data = _normalize_tile_dict(data)
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{path + '.' if path else ''}{sorted(unknown)[0]}: unknown field")
    kwargs = {}
    for name, value in data.items():
        kwargs[name] = _convert(hints[name], value, f"{path}.{name}" if path else name)
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{path or cls.__name__}: {exc}") from exc


def _convert(tp, value, path):
    tp, optional = _unwrap_optional(tp)
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{path}: value required")
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, path)
    if isinstance(tp, type) and issubclass(tp, enum.Enum):
        try:
            return tp(value)
        except ValueError:
            raise ConfigError(f"{path}: {value!r} is not one of {[m.value for m in tp]}") from None
    origin = typing.get_origin(tp)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list")
        (inner,) = typing.get_args(tp) or (Any,)
        return [_convert(inner, v, f"{path}[{i}]") for i, v in enumerate(value)]
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def to_dict(obj) -> Any:
    """Plain-data view of a config (enums as strings, ``None`` fields dropped)."""
    if dataclasses.is_dataclass(obj):
        out = {}
        for f in dataclasses.fields(obj):
            v = to_dict(getattr(obj, f.name))
            if v is not None:
                out[f.name] = v
        return out
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, list):
        return [to_dict(v) for v in obj]
    return obj


def load_spec(path: str | Path) -> ExperimentSpec:
    with open(path, "rb") as fh:
        try:
            data = tomli.load(fh)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(ExperimentSpec, data)


def get_path(obj, dotted: str):
    for part in dotted.split("."):
        if not dataclasses.is_dataclass(obj) or not hasattr(obj, part):
            raise ConfigError(f"{dotted}: unknown parameter path")
        obj = getattr(obj, part)
    return obj


def scale_path(obj, dotted: str, factor: float) -> None:
    """Multiply the numeric field at ``dotted`` by ``factor`` in place."""
    parent_path, _, leaf = dotted.rpartition(".")
    parent = get_path(obj, parent_path) if parent_path else obj
    value = get_path(obj, dotted)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{dotted}: not a numeric parameter")
    setattr(parent, leaf, value * factor if isinstance(value, float) else int(round(value * factor)))


def compound_for(tile: TileConfig, optimizer: str) -> TileConfig:
    """Copy of ``tile`` whose compound kind follows an optimizer name."""
    tile = copy.deepcopy(tile)
    tile.compound.kind = optimizer_kind(optimizer)
    return tile


__all__ = [
    "CompoundKind", "ConfigError", "DatasetSpec", "EvalSpec", "ExperimentMode", "ExperimentSpec",
    "MappingParams", "NetworkSpec", "OptimizerSpec", "SweepSpec", "TileConfig", "TileMode",
    "from_dict", "get_path", "load_spec", "scale_path", "to_dict", "compound_for",
]
