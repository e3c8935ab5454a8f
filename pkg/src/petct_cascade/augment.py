"""Training-time random transforms and coarse dropout of conditioning masks.

Every function takes an explicit ``numpy.random.Generator``; nothing here
touches global RNG state.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy import ndimage

from .core import MultiChannelVolume, Volume, VolumeKind

INTENSITY_CHANNELS = frozenset({"CT", "PET"})


@dataclass(frozen=True)
class AugmentConfig:
    p_affine: float = 0.2
    p_noise: float = 0.2
    p_smooth: float = 0.2
    p_intensity: float = 0.2
    p_contrast: float = 0.2
    p_flip: float = 0.5
    rotation_max: float = 15.0
    scale_range: Tuple[float, float] = (0.9, 1.1)
    translate_max: float = 10.0
    noise_std: float = 0.1
    smooth_sigma_range: Tuple[float, float] = (0.5, 1.0)
    intensity_shift_max: float = 0.1
    contrast_range: Tuple[float, float] = (0.75, 1.25)

    def __post_init__(self):
        for name in ("p_affine", "p_noise", "p_smooth", "p_intensity", "p_contrast", "p_flip"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        for name in ("scale_range", "smooth_sigma_range", "contrast_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} must be ordered, got {(lo, hi)}")
            object.__setattr__(self, name, (float(lo), float(hi)))

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(p_affine=0.0, p_noise=0.0, p_smooth=0.0, p_intensity=0.0, p_contrast=0.0, p_flip=0.0)


@dataclass(frozen=True)
class CoarseDropoutConfig:
    p_apply: float = 0.5
    holes_range: Tuple[int, int] = (1, 8)
    hole_size_range: Tuple[float, float] = (0.05, 0.20)
    fill_value: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.p_apply <= 1.0:
            raise ValueError(f"p_apply must lie in [0, 1], got {self.p_apply}")
        lo, hi = (int(v) for v in self.holes_range)
        if lo < 1 or hi < lo:
            raise ValueError(f"holes_range must satisfy 1 <= min <= max, got {self.holes_range}")
        slo, shi = (float(v) for v in self.hole_size_range)
        if not (0 < slo <= shi <= 1):
            raise ValueError(f"hole_size_range must lie in (0, 1] and be ordered, got {self.hole_size_range}")
        if self.fill_value != 0:
            raise ValueError("coarse dropout only supports fill_value 0")
        object.__setattr__(self, "holes_range", (lo, hi))
        object.__setattr__(self, "hole_size_range", (slo, shi))


def coarse_dropout(mask: Volume, config: CoarseDropoutConfig, rng: np.random.Generator) -> Volume:
    """Zero out random axis-aligned cuboids of a binary mask.

    Fires with probability ``p_apply``. Hole sides are a uniform fraction of
    each mask dimension (at least one voxel); holes lie fully inside the mask.
    """
    if rng.random() >= config.p_apply:
        return mask
    out = np.array(mask.voxels, copy=True)
    shape = np.array(mask.shape)
    k = int(rng.integers(config.holes_range[0], config.holes_range[1] + 1))
    for _ in range(k):
        frac = rng.uniform(config.hole_size_range[0], config.hole_size_range[1], size=3)
        sides = np.clip(np.rint(frac * shape).astype(int), 1, shape)
        starts = [int(rng.integers(0, n - s + 1)) for n, s in zip(shape, sides)]
        out[tuple(slice(a, a + s) for a, s in zip(starts, sides))] = config.fill_value
    return mask.with_voxels(out)


def sample_affine(config: AugmentConfig, rng: np.random.Generator, shape) -> Tuple[np.ndarray, np.ndarray]:
    """Draw a random rotation/scale/translation about the volume center.

    Returns ``(matrix, offset)`` in the pull-back convention of
    ``scipy.ndimage.affine_transform``: output index ``o`` samples input
    index ``matrix @ o + offset``.
    """
    angles = np.deg2rad(rng.uniform(-config.rotation_max, config.rotation_max, size=3))
    scales = rng.uniform(config.scale_range[0], config.scale_range[1], size=3)
    shift = rng.uniform(-config.translate_max, config.translate_max, size=3)

    cx, cy, cz = np.cos(angles)
    sx, sy, sz = np.sin(angles)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    forward = rz @ ry @ rx @ np.diag(scales)
    matrix = np.linalg.inv(forward)
    center = (np.asarray(shape, dtype=np.float64) - 1) / 2.0
    offset = center - matrix @ (center + shift)
    return matrix, offset


def _warp(arr: np.ndarray, matrix, offset, order: int) -> np.ndarray:
    return ndimage.affine_transform(
        arr, matrix, offset=offset, order=order, mode="constant", cval=0.0, prefilter=False
    ).astype(np.float32)


def _adjust_contrast(x: np.ndarray, gamma: float) -> np.ndarray:
    lo, hi = float(x.min()), float(x.max())
    if hi - lo <= 0:
        return x
    return (((x - lo) / (hi - lo)) ** gamma * (hi - lo) + lo).astype(np.float32)


def apply_augmentations(
    sample: MultiChannelVolume,
    label: Volume,
    config: AugmentConfig,
    rng: np.random.Generator,
) -> Tuple[MultiChannelVolume, Volume]:
    """Apply the random transform suite to one training sample.

    Draw order is fixed: one uniform per transform kind (affine, noise,
    smooth, intensity, contrast) and one per flip axis, then the parameters
    of each transform that fires, in that same order. Spatial transforms hit
    every channel and the label (nearest neighbour for masks); intensity
    transforms only touch CT/PET channels.
    """
    fire = rng.random(5) < np.array(
        [config.p_affine, config.p_noise, config.p_smooth, config.p_intensity, config.p_contrast]
    )
    flips = rng.random(3) < config.p_flip
    p_affine, p_noise, p_smooth, p_intensity, p_contrast = fire
    if not fire.any() and not flips.any():
        return sample, label

    arrays = [np.array(c.voxels, copy=True) for c in sample.channels]
    is_mask = [c.kind is VolumeKind.MASK for c in sample.channels]
    lab = np.array(label.voxels, copy=True)
    shape = lab.shape

    if p_affine:
        matrix, offset = sample_affine(config, rng, shape)
        arrays = [_warp(a, matrix, offset, 0 if m else 1) for a, m in zip(arrays, is_mask)]
        lab = _warp(lab, matrix, offset, 0)

    intensity_idx = [i for i, n in enumerate(sample.channel_names) if n in INTENSITY_CHANNELS]
    if p_noise:
        for i in intensity_idx:
            arrays[i] = arrays[i] + rng.normal(0.0, config.noise_std, shape).astype(np.float32)
    if p_smooth:
        sigma = rng.uniform(*config.smooth_sigma_range)
        for i in intensity_idx:
            arrays[i] = ndimage.gaussian_filter(arrays[i], sigma).astype(np.float32)
    if p_intensity:
        for i in intensity_idx:
            arrays[i] = arrays[i] + np.float32(rng.uniform(-config.intensity_shift_max, config.intensity_shift_max))
    if p_contrast:
        for i in intensity_idx:
            arrays[i] = _adjust_contrast(arrays[i], rng.uniform(*config.contrast_range))

    channels = tuple(c.with_voxels(a) for c, a in zip(sample.channels, arrays))
    sample, label = MultiChannelVolume(channels, sample.channel_names), label.with_voxels(lab)
    for axis in np.flatnonzero(flips):
        sample, label = flip_sample(sample, label, int(axis))
    return sample, label


def flip_sample(sample: MultiChannelVolume, label: Volume, axis: int) -> Tuple[MultiChannelVolume, Volume]:
    channels = tuple(c.with_voxels(np.flip(c.voxels, axis=axis)) for c in sample.channels)
    return MultiChannelVolume(channels, sample.channel_names), label.with_voxels(np.flip(label.voxels, axis=axis))
