"""Domain types shared across the pipeline.

Everything here is an immutable value: a :class:`Volume` freezes its voxel
buffer on construction, so volumes can be handed between threads freely.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

Shape3 = Tuple[int, int, int]
Spacing3 = Tuple[float, float, float]


class ContractError(ValueError):
    """A caller violated an operation's precondition (shape, grid, kind)."""


class FormatError(ValueError):
    """A file or record parsed but holds values the pipeline cannot accept."""


class ConfigError(ValueError):
    """An inconsistent or invalid configuration."""


class VolumeKind(str, enum.Enum):
    CT = "CT"
    PET = "PET"
    PROBABILITY = "PROBABILITY"
    MASK = "MASK"


class Tracer(str, enum.Enum):
    FDG = "FDG"
    PSMA = "PSMA"
    SYNTHETIC = "SYNTHETIC"


@dataclass(frozen=True, eq=False)
class Volume:
    """A 3D float32 grid with physical spacing in mm."""

    voxels: np.ndarray
    spacing: Spacing3
    kind: VolumeKind

    def __post_init__(self):
        arr = np.array(self.voxels, dtype=np.float32, copy=True)
        if arr.ndim != 3:
            raise ContractError(f"volume must be 3D, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ContractError(f"volume dims must be >= 1, got {arr.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(s > 0 and np.isfinite(s) for s in spacing):
            raise ContractError(f"spacing must be three positive numbers, got {self.spacing}")
        kind = VolumeKind(self.kind)
        if kind is VolumeKind.MASK and not np.all((arr == 0) | (arr == 1)):
            raise ContractError("MASK volume holds values outside {0, 1}")
        if kind is VolumeKind.PROBABILITY and not np.all((arr >= 0) & (arr <= 1)):
            raise ContractError("PROBABILITY volume holds values outside [0, 1]")
        arr.flags.writeable = False
        object.__setattr__(self, "voxels", arr)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "kind", kind)

    @property
    def shape(self) -> Shape3:
        return tuple(int(n) for n in self.voxels.shape)

    def same_grid(self, other: "Volume") -> bool:
        return self.shape == other.shape and self.spacing == other.spacing

    def with_voxels(self, voxels: np.ndarray, kind: Optional[VolumeKind] = None) -> "Volume":
        return Volume(voxels, self.spacing, self.kind if kind is None else kind)


def voxel_count(volume: Volume) -> int:
    nx, ny, nz = volume.shape
    return nx * ny * nz


def mask_volume_ml(volume: Volume) -> float:
    """Physical volume of the foreground of a mask, in millilitres."""
    if volume.kind is not VolumeKind.MASK:
        raise TypeError(f"mask_volume_ml needs a MASK volume, got {volume.kind.value}")
    sx, sy, sz = volume.spacing
    return int(np.count_nonzero(volume.voxels)) * sx * sy * sz / 1000.0


def require_same_grid(*volumes: Volume, what: str = "volumes") -> None:
    ref = volumes[0]
    for v in volumes[1:]:
        if not ref.same_grid(v):
            raise ContractError(
                f"{what} do not share a grid: {ref.shape}@{ref.spacing} vs {v.shape}@{v.spacing}"
            )


@dataclass(frozen=True)
class Case:
    id: str
    ct: Volume
    pet: Volume
    label: Optional[Volume] = None
    tracer: Tracer = Tracer.SYNTHETIC

    def __post_init__(self):
        if self.ct.kind is not VolumeKind.CT:
            raise ContractError(f"case {self.id}: ct has kind {self.ct.kind.value}")
        if self.pet.kind is not VolumeKind.PET:
            raise ContractError(f"case {self.id}: pet has kind {self.pet.kind.value}")
        if self.label is not None and self.label.kind is not VolumeKind.MASK:
            raise ContractError(f"case {self.id}: label has kind {self.label.kind.value}")
        object.__setattr__(self, "tracer", Tracer(self.tracer))

    @property
    def grid_aligned(self) -> bool:
        vols = [self.ct, self.pet] + ([self.label] if self.label is not None else [])
        return all(vols[0].same_grid(v) for v in vols[1:])


STAGE1_CHANNELS = ("CT", "PET")
STAGE2_CHANNELS = ("CT", "PET", "STAGE1_MASK")


@dataclass(frozen=True)
class MultiChannelVolume:
    channels: Tuple[Volume, ...]
    channel_names: Tuple[str, ...]

    def __post_init__(self):
        channels = tuple(self.channels)
        names = tuple(self.channel_names)
        if not channels:
            raise ContractError("multi-channel volume needs at least one channel")
        if len(channels) != len(names):
            raise ContractError(f"{len(channels)} channels but {len(names)} names")
        require_same_grid(*channels, what="channels")
        object.__setattr__(self, "channels", channels)
        object.__setattr__(self, "channel_names", names)

    @property
    def shape(self) -> Shape3:
        return self.channels[0].shape

    @property
    def spacing(self) -> Spacing3:
        return self.channels[0].spacing

    def __len__(self) -> int:
        return len(self.channels)

    def array(self) -> np.ndarray:
        """Channels stacked as a (C, nx, ny, nz) float32 array."""
        return np.stack([c.voxels for c in self.channels]).astype(np.float32, copy=False)


class BlendMode(str, enum.Enum):
    GAUSSIAN = "GAUSSIAN"
    UNIFORM = "UNIFORM"


@dataclass(frozen=True)
class SlidingWindowPlan:
    """Window placements over a (possibly padded) volume.

    ``pad`` holds (before, after) voxel counts per axis; ``positions`` are
    start corners in padded coordinates.
    """

    vol_shape: Shape3
    patch_size: Shape3
    positions: Tuple[Shape3, ...]
    pad: Tuple[Tuple[int, int], ...] = ((0, 0), (0, 0), (0, 0))
    blend: BlendMode = BlendMode.GAUSSIAN

    @property
    def padded_shape(self) -> Shape3:
        return tuple(n + b + a for n, (b, a) in zip(self.vol_shape, self.pad))

    def __len__(self) -> int:
        return len(self.positions)


def as_shape3(values: Sequence[int]) -> Shape3:
    out = tuple(int(v) for v in values)
    if len(out) != 3:
        raise ContractError(f"expected three values, got {values}")
    return out
