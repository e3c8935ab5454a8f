"""Run configuration: one YAML file driving every CLI subcommand."""

from __future__ import annotations

import dataclasses
import enum
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import yaml

from . import __version__
from .augment import AugmentConfig, CoarseDropoutConfig
from .core import ConfigError
from .dataio import atomic_path
from .models import ModelConfig, ModelKind, WidthPreset
from .pipeline import STAGE2_MEMBERS, CascadeConfig, default_stage2
from .preprocess import NormalizationScheme
from .training import TrainConfig

DATA_ROOT_ENV = "PETCT_DATA_ROOT"
AUTO = "AUTO"
TRAIN_KEYS = ("stage1",) + tuple(STAGE2_MEMBERS)


@dataclass(frozen=True)
class Paths:
    data_root: str = "data"
    output_dir: str = "runs/toy"


@dataclass(frozen=True)
class PreprocessConfig:
    scheme: NormalizationScheme = field(default_factory=NormalizationScheme)
    # AUTO until `preprocess` freezes the train-split mean spacing
    target_spacing: Union[str, Tuple[float, float, float]] = AUTO


@dataclass(frozen=True)
class SplitConfig:
    ratio: float = 0.8
    seed: int = 0


# Stage 1 learns detection from scratch and gets twice the patch draws per
# epoch; stage-2 members start from an informative mask channel.
STAGE1_PATCHES_PER_VOLUME = 6


def default_train(preset: WidthPreset = WidthPreset.TOY) -> Dict[str, TrainConfig]:
    epochs = 774 if WidthPreset(preset) is WidthPreset.PAPER else 25
    out = {}
    for i, name in enumerate(TRAIN_KEYS):
        extra = {"patches_per_volume": STAGE1_PATCHES_PER_VOLUME} if name == "stage1" else {}
        out[name] = TrainConfig(epochs=epochs, seed=100 + i, **extra)
    return out


@dataclass(frozen=True)
class RunConfig:
    preset: WidthPreset = WidthPreset.TOY
    paths: Paths = field(default_factory=Paths)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    train: Dict[str, TrainConfig] = field(default_factory=default_train)
    cascade: CascadeConfig = field(default_factory=CascadeConfig)
    code_version: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "preset", WidthPreset(self.preset))
        missing = [k for k in TRAIN_KEYS if k not in self.train]
        if missing:
            raise ConfigError(f"train section lacks entries for {missing}")
        presets = {self.cascade.stage1.width_preset} | {m.width_preset for m in self.cascade.stage2.members}
        if presets != {self.preset}:
            raise ConfigError(f"model presets {sorted(p.value for p in presets)} disagree with run preset {self.preset.value}")

    @classmethod
    def for_preset(cls, preset: WidthPreset, **kw) -> "RunConfig":
        preset = WidthPreset(preset)
        cascade = CascadeConfig(
            stage1=ModelConfig(ModelKind.DYNUNET, in_channels=2, width_preset=preset),
            stage2=default_stage2(preset),
        )
        return cls(preset=preset, train=default_train(preset), cascade=cascade, **kw)

    @property
    def spacing_frozen(self) -> bool:
        return self.preprocess.target_spacing != AUTO

    def member_config(self, name: str) -> ModelConfig:
        kind = STAGE2_MEMBERS[name]
        for m in self.cascade.stage2.members:
            if m.kind is kind:
                return m
        raise ConfigError(f"ensemble has no {name} member")

    def resolved(self, target_spacing=None) -> "RunConfig":
        pre = self.preprocess
        if target_spacing is not None:
            pre = dataclasses.replace(pre, target_spacing=tuple(float(s) for s in target_spacing))
        return dataclasses.replace(self, preprocess=pre, code_version=__version__)

    @property
    def data_root(self) -> Path:
        return Path(os.environ.get(DATA_ROOT_ENV) or self.paths.data_root)

    @property
    def output_dir(self) -> Path:
        return Path(self.paths.output_dir)


# --- plain-data conversion ----------------------------------------------------


def to_plain(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, dict):
        return {str(k): to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    return obj


def from_plain(tp: Any, data: Any) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if tp is Any:
        return data
    if origin is Union:
        if data is None and type(None) in args:
            return None
        errors = []
        for arg in args:
            if arg is type(None):
                continue
            try:
                return from_plain(arg, data)
            except (TypeError, ValueError) as e:
                errors.append(str(e))
        raise ConfigError(f"value {data!r} matches none of {args}: {errors}")
    if dataclasses.is_dataclass(tp):
        if not isinstance(data, dict):
            raise ConfigError(f"expected a mapping for {tp.__name__}, got {data!r}")
        hints = typing.get_type_hints(tp)
        names = {f.name for f in dataclasses.fields(tp) if f.init}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown {tp.__name__} fields: {sorted(unknown)}")
        return tp(**{k: from_plain(hints[k], v) for k, v in data.items()})
    if origin in (tuple, typing.Tuple):
        if not isinstance(data, (list, tuple)):
            raise TypeError(f"expected a sequence, got {data!r}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(from_plain(args[0], v) for v in data)
        if len(args) != len(data):
            raise TypeError(f"expected {len(args)} values, got {data!r}")
        return tuple(from_plain(a, v) for a, v in zip(args, data))
    if origin in (dict, typing.Dict):
        return {k: from_plain(args[1], v) for k, v in dict(data).items()}
    if isinstance(tp, type) and issubclass(tp, enum.Enum):
        return tp(data)
    if tp is float:
        if isinstance(data, bool) or not isinstance(data, (int, float)):
            raise TypeError(f"expected a number, got {data!r}")
        return float(data)
    if tp is int:
        if isinstance(data, bool) or not isinstance(data, int):
            raise TypeError(f"expected an integer, got {data!r}")
        return data
    if tp is str:
        if not isinstance(data, str):
            raise TypeError(f"expected a string, got {data!r}")
        return data
    if tp is bool:
        if not isinstance(data, bool):
            raise TypeError(f"expected a boolean, got {data!r}")
        return data
    return data


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_plain(cfg), sort_keys=False)


def parse_config(text: str) -> RunConfig:
    data = yaml.safe_load(text) or {}
    try:
        return from_plain(RunConfig, data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid run config: {e}") from e


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config(path.read_text())


def save_config(cfg: RunConfig, path) -> None:
    with atomic_path(path) as tmp:
        tmp.write_text(dump_config(cfg))
