"""Model zoo: four segmentation architectures behind one forward contract.

Every model maps ``(B, in_channels, px, py, pz)`` to ``(B, 1, px, py, pz)``
logits. ``TOY`` presets are sized to train on a CPU; ``PAPER`` presets use
the reference widths.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import torch
from torch import nn

from ..core import ConfigError, ContractError, Shape3, as_shape3
from .dynunet import DynUNet, derive_strides
from .segresnet import SegResNet
from .swin_unetr import SwinUNETR
from .unet import UNet

CHECKPOINT_FORMAT = 1


class ModelKind(str, enum.Enum):
    DYNUNET = "DYNUNET"
    SWIN_UNETR = "SWIN_UNETR"
    SEGRESNET = "SEGRESNET"
    UNET = "UNET"


class WidthPreset(str, enum.Enum):
    TOY = "TOY"
    PAPER = "PAPER"


PAPER_PATCH = {
    ModelKind.DYNUNET: (128, 160, 112),
    ModelKind.UNET: (128, 160, 112),
    ModelKind.SWIN_UNETR: (96, 96, 96),
    ModelKind.SEGRESNET: (192, 192, 192),
}

# Architecture hyperparameters per preset. TOY widths are the PAPER widths / 4;
# TOY depth is the deepest the quartered patch admits.
ARCH = {
    (ModelKind.DYNUNET, WidthPreset.PAPER): dict(filters=(32, 64, 128, 256, 320), max_depth=4),
    (ModelKind.DYNUNET, WidthPreset.TOY): dict(filters=(8, 16, 32, 64), max_depth=3),
    (ModelKind.UNET, WidthPreset.PAPER): dict(channels=(16, 32, 64, 128, 256), num_res_units=2),
    (ModelKind.UNET, WidthPreset.TOY): dict(channels=(4, 8, 16), num_res_units=2),
    (ModelKind.SEGRESNET, WidthPreset.PAPER): dict(init_filters=32, blocks_down=(1, 2, 2, 4), blocks_up=(1, 1, 1)),
    (ModelKind.SEGRESNET, WidthPreset.TOY): dict(init_filters=8, blocks_down=(1, 2, 2), blocks_up=(1, 1)),
    (ModelKind.SWIN_UNETR, WidthPreset.PAPER): dict(
        feature_size=48, depths=(2, 2, 2, 2), num_heads=(3, 6, 12, 24), window_size=7
    ),
    (ModelKind.SWIN_UNETR, WidthPreset.TOY): dict(feature_size=12, depths=(2, 2), num_heads=(3, 6), window_size=7),
}


def default_patch_size(kind: ModelKind, preset: WidthPreset) -> Shape3:
    patch = PAPER_PATCH[ModelKind(kind)]
    if WidthPreset(preset) is WidthPreset.TOY:
        patch = tuple(p // 4 for p in patch)
    return patch


@dataclass(frozen=True)
class ModelConfig:
    kind: ModelKind
    in_channels: int = 2
    out_channels: int = 1
    patch_size: Optional[Shape3] = None
    width_preset: WidthPreset = WidthPreset.TOY
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", ModelKind(self.kind))
        object.__setattr__(self, "width_preset", WidthPreset(self.width_preset))
        if self.patch_size is None:
            object.__setattr__(self, "patch_size", default_patch_size(self.kind, self.width_preset))
        else:
            object.__setattr__(self, "patch_size", as_shape3(self.patch_size))
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.out_channels != 1:
            raise ConfigError("models emit a single sigmoid logit channel; out_channels must be 1")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "patch_size": list(self.patch_size),
            "width_preset": self.width_preset.value,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def stride_product(config: ModelConfig) -> Tuple[int, int, int]:
    """Total downsampling factor per axis the architecture applies to a patch."""
    arch = ARCH[(config.kind, config.width_preset)]
    if config.kind is ModelKind.DYNUNET:
        strides = derive_strides(config.patch_size, arch["max_depth"])
        return tuple(math.prod(s[i] for s in strides) for i in range(3))
    if config.kind is ModelKind.UNET:
        f = 2 ** (len(arch["channels"]) - 1)
    elif config.kind is ModelKind.SEGRESNET:
        f = 2 ** (len(arch["blocks_down"]) - 1)
    else:
        f = 2 ** (len(arch["depths"]) + 1)
    return (f, f, f)


def _validate(config: ModelConfig) -> None:
    factors = stride_product(config)
    bad = [(p, f) for p, f in zip(config.patch_size, factors) if p % f]
    if bad:
        raise ConfigError(
            f"{config.kind.value} ({config.width_preset.value}) needs patch dims divisible by {factors}, "
            f"got {config.patch_size}"
        )
    if config.kind is ModelKind.DYNUNET and factors == (1, 1, 1):
        raise ConfigError(f"DYNUNET patch {config.patch_size} is too small to downsample")


def _build_net(config: ModelConfig) -> nn.Module:
    arch = dict(ARCH[(config.kind, config.width_preset)])
    cin, cout = config.in_channels, config.out_channels
    if config.kind is ModelKind.DYNUNET:
        strides = derive_strides(config.patch_size, arch["max_depth"])
        return DynUNet(cin, cout, arch["filters"], strides)
    if config.kind is ModelKind.UNET:
        return UNet(cin, cout, **arch)
    if config.kind is ModelKind.SEGRESNET:
        return SegResNet(cin, cout, **arch)
    return SwinUNETR(cin, cout, **arch)


class SegmentationModel(nn.Module):
    """A network plus the config that built it."""

    def __init__(self, config: ModelConfig, net: nn.Module):
        super().__init__()
        self.config = config
        self.net = net

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 5 or x.shape[1] != self.config.in_channels:
            raise ContractError(
                f"{self.config.kind.value} expects (B, {self.config.in_channels}, X, Y, Z) input, "
                f"got {tuple(x.shape)}"
            )
        return self.net(x)


def build_model(config: ModelConfig) -> SegmentationModel:
    """Build and deterministically initialize a model from ``config.seed``."""
    _validate(config)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        net = _build_net(config)
    return SegmentationModel(config, net)


def save_checkpoint(model: SegmentationModel, path, extra: Optional[dict] = None) -> None:
    from ..dataio import atomic_path

    payload = {
        "format_version": CHECKPOINT_FORMAT,
        "config": model.config.to_dict(),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    with atomic_path(path) as tmp:
        torch.save(payload, tmp)


def load_checkpoint(
    path, kind: Optional[ModelKind] = None, in_channels: Optional[int] = None
) -> SegmentationModel:
    """Restore a model; ``kind``/``in_channels`` guard against loading the wrong network."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format_version", 0) > CHECKPOINT_FORMAT:
        raise ConfigError(f"{path}: checkpoint format {payload['format_version']} is newer than supported")
    config = ModelConfig.from_dict(payload["config"])
    if kind is not None and config.kind is not ModelKind(kind):
        raise ConfigError(f"{path}: checkpoint holds {config.kind.value}, expected {ModelKind(kind).value}")
    if in_channels is not None and config.in_channels != in_channels:
        raise ConfigError(
            f"{path}: checkpoint has in_channels={config.in_channels}, expected {in_channels}"
        )
    model = build_model(config)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model


__all__ = [
    "ModelKind",
    "WidthPreset",
    "ModelConfig",
    "SegmentationModel",
    "build_model",
    "save_checkpoint",
    "load_checkpoint",
    "default_patch_size",
    "stride_product",
]
