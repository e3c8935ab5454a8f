"""Resampling to a common spacing and intensity normalization."""

from __future__ import annotations

import enum
import logging
import math
import warnings
from dataclasses import dataclass, replace
from typing import Iterable, List, Optional, Tuple

import numpy as np
from scipy import ndimage

from .core import Case, ContractError, Spacing3, Volume, VolumeKind
from .dataio import Manifest, ManifestEntry, load_volume

log = logging.getLogger(__name__)


class Interpolation(str, enum.Enum):
    TRILINEAR = "TRILINEAR"
    NEAREST = "NEAREST"


class PetMode(str, enum.Enum):
    ZSCORE_FOREGROUND = "ZSCORE_FOREGROUND"
    NONE = "NONE"


@dataclass(frozen=True)
class NormalizationScheme:
    ct_clip: Tuple[float, float] = (-1024.0, 1024.0)
    ct_out_range: Tuple[float, float] = (-1.0, 1.0)
    pet_mode: PetMode = PetMode.ZSCORE_FOREGROUND
    foreground_ct_threshold: float = -500.0

    def __post_init__(self):
        object.__setattr__(self, "ct_clip", tuple(float(v) for v in self.ct_clip))
        object.__setattr__(self, "ct_out_range", tuple(float(v) for v in self.ct_out_range))
        object.__setattr__(self, "pet_mode", PetMode(self.pet_mode))
        if not self.ct_clip[0] < self.ct_clip[1]:
            raise ValueError(f"ct_clip must satisfy lo < hi, got {self.ct_clip}")


def _entry_spacing(entry: ManifestEntry) -> Spacing3:
    if entry.spacing is not None:
        return entry.spacing
    return load_volume(entry.ct_path, VolumeKind.CT).spacing


def compute_average_spacing(manifest: Manifest | Iterable[ManifestEntry]) -> Spacing3:
    """Per-axis arithmetic mean spacing over the given entries."""
    spacings = [_entry_spacing(e) for e in manifest]
    if not spacings:
        raise ValueError("cannot average spacing over an empty manifest")
    mean = np.mean(np.asarray(spacings, dtype=np.float64), axis=0)
    return tuple(float(s) for s in mean)


def _round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def resampled_shape(shape, spacing, target_spacing) -> Tuple[int, int, int]:
    return tuple(
        max(1, _round_half_away(n * s / t)) for n, s, t in zip(shape, spacing, target_spacing)
    )


def resample(volume: Volume, target_spacing, interpolation: Optional[Interpolation] = None) -> Volume:
    """Resample onto ``target_spacing`` keeping the physical center fixed.

    Output voxel ``i`` sits at ``(i - (m - 1) / 2) * t`` mm from the center,
    which maps back to source index ``(i - (m - 1) / 2) * t / s + (n - 1) / 2``.
    Samples beyond the source grid take the nearest edge value.
    """
    target = tuple(float(t) for t in target_spacing)
    if len(target) != 3 or not all(t > 0 for t in target):
        raise ContractError(f"target spacing must be three positive numbers, got {target_spacing}")
    if interpolation is None:
        interpolation = Interpolation.NEAREST if volume.kind is VolumeKind.MASK else Interpolation.TRILINEAR
    interpolation = Interpolation(interpolation)
    if volume.kind is VolumeKind.MASK and interpolation is not Interpolation.NEAREST:
        raise ContractError("MASK volumes must be resampled with NEAREST interpolation")
    if target == volume.spacing:
        return volume

    out_shape = resampled_shape(volume.shape, volume.spacing, target)
    scale = [t / s for t, s in zip(target, volume.spacing)]
    offset = [
        (n - 1) / 2.0 - (m - 1) / 2.0 * k for n, m, k in zip(volume.shape, out_shape, scale)
    ]
    order = 0 if interpolation is Interpolation.NEAREST else 1
    src = np.asarray(volume.voxels, dtype=np.float32)
    with warnings.catch_warnings():
        # a 1-D matrix selects scipy's per-axis zoom+shift path, which is what we want
        warnings.simplefilter("ignore", UserWarning)
        out = ndimage.affine_transform(
            src, scale, offset=offset, output_shape=out_shape, order=order, mode="nearest", prefilter=False
        )
    if volume.kind is VolumeKind.PROBABILITY:
        np.clip(out, 0.0, 1.0, out=out)
    return Volume(out, target, volume.kind)


def resample_case(case: Case, target_spacing) -> Case:
    """Bring CT, PET and label onto ``target_spacing``; PET/label follow the CT grid."""
    ct = resample(case.ct, target_spacing)
    pet = resample(case.pet, target_spacing)
    label = None if case.label is None else resample(case.label, target_spacing, Interpolation.NEAREST)
    for name, vol in (("pet", pet), ("label", label)):
        if vol is not None and vol.shape != ct.shape:
            raise ContractError(f"case {case.id}: {name} grid {vol.shape} differs from ct grid {ct.shape}")
    return replace(case, ct=ct, pet=pet, label=label)


def normalize_ct(ct: np.ndarray, scheme: NormalizationScheme) -> np.ndarray:
    lo, hi = scheme.ct_clip
    out_lo, out_hi = scheme.ct_out_range
    clipped = np.clip(ct.astype(np.float64), lo, hi)
    out = (clipped - lo) / (hi - lo) * (out_hi - out_lo) + out_lo
    return np.clip(out, min(out_lo, out_hi), max(out_lo, out_hi)).astype(np.float32)


def _zscore(values: np.ndarray, region: np.ndarray) -> Optional[np.ndarray]:
    if not region.any():
        return None
    sample = values[region].astype(np.float64)
    std = sample.std()
    if not std > 0:
        return None
    return ((values.astype(np.float64) - sample.mean()) / std).astype(np.float32)


def normalize_case(case: Case, scheme: NormalizationScheme, messages: Optional[List[str]] = None) -> Case:
    """Clip/rescale CT and z-score PET over the CT body region.

    PET statistics fall back to the whole volume when the body region is
    empty or flat; a still-degenerate PET becomes all zeros and a message is
    appended to ``messages``.
    """
    if not case.ct.same_grid(case.pet):
        raise ContractError(f"case {case.id}: ct and pet must share a grid before normalization")
    ct_raw = case.ct.voxels
    ct = normalize_ct(ct_raw, scheme)

    pet_raw = case.pet.voxels
    if scheme.pet_mode is PetMode.NONE:
        pet = pet_raw
    else:
        foreground = ct_raw > scheme.foreground_ct_threshold
        pet = _zscore(pet_raw, foreground)
        if pet is None:
            pet = _zscore(pet_raw, np.ones_like(foreground))
        if pet is None:
            msg = f"case {case.id}: PET has zero variance; set to zeros"
            log.warning(msg)
            if messages is not None:
                messages.append(msg)
            pet = np.zeros_like(pet_raw)
    return replace(case, ct=case.ct.with_voxels(ct), pet=case.pet.with_voxels(pet))


def preprocess_case(case: Case, target_spacing, scheme: NormalizationScheme) -> Case:
    return normalize_case(resample_case(case, target_spacing), scheme)
