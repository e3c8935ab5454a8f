"""Sliding-window inference, the two-stage cascade and ensemble fusion."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .augment import CoarseDropoutConfig, coarse_dropout
from .core import (
    STAGE1_CHANNELS,
    STAGE2_CHANNELS,
    BlendMode,
    Case,
    ConfigError,
    ContractError,
    MultiChannelVolume,
    SlidingWindowPlan,
    Volume,
    VolumeKind,
    as_shape3,
)
from .models import ModelConfig, ModelKind, WidthPreset

STAGE2_MEMBERS = {
    "segresnet": ModelKind.SEGRESNET,
    "swinunetr": ModelKind.SWIN_UNETR,
    "unet": ModelKind.UNET,
}


class Fusion(str, enum.Enum):
    MEAN = "MEAN"


class Mode(str, enum.Enum):
    TRAIN = "TRAIN"
    INFER = "INFER"


@dataclass(frozen=True)
class EnsembleConfig:
    members: Tuple[ModelConfig, ...] = ()
    fusion: Fusion = Fusion.MEAN
    threshold: float = 0.5

    def __post_init__(self):
        members = tuple(self.members)
        if not members:
            raise ConfigError("ensemble needs at least one member")
        if len({m.in_channels for m in members}) != 1:
            raise ConfigError("all ensemble members must take the same number of input channels")
        if not 0 < self.threshold < 1:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")
        object.__setattr__(self, "members", members)
        object.__setattr__(self, "fusion", Fusion(self.fusion))


def default_stage2(preset: WidthPreset = WidthPreset.TOY, seed: int = 0) -> EnsembleConfig:
    return EnsembleConfig(
        tuple(
            ModelConfig(kind, in_channels=3, width_preset=preset, seed=seed + i + 1)
            for i, kind in enumerate(STAGE2_MEMBERS.values())
        )
    )


@dataclass(frozen=True)
class CascadeConfig:
    stage1: ModelConfig = field(default_factory=lambda: ModelConfig(ModelKind.DYNUNET, in_channels=2))
    stage2: EnsembleConfig = field(default_factory=default_stage2)
    stage1_threshold: float = 0.5
    window_overlap: float = 0.5
    blend: BlendMode = BlendMode.GAUSSIAN
    sw_batch_size: int = 4

    def __post_init__(self):
        object.__setattr__(self, "blend", BlendMode(self.blend))
        if not 0 < self.stage1_threshold < 1:
            raise ConfigError(f"stage1_threshold must lie in (0, 1), got {self.stage1_threshold}")
        if not 0 <= self.window_overlap < 1:
            raise ConfigError(f"window_overlap must lie in [0, 1), got {self.window_overlap}")
        if self.stage1.in_channels != len(STAGE1_CHANNELS):
            raise ConfigError("stage-1 model must take 2 input channels (CT, PET)")
        if self.stage2.members[0].in_channels != len(STAGE2_CHANNELS):
            raise ConfigError("stage-2 models must take 3 input channels (CT, PET, STAGE1_MASK)")


# --- sliding window ---------------------------------------------------------


def window_stride(patch: int, overlap: float) -> int:
    # decimal-exact so that e.g. 100 * (1 - 0.7) is 30, not 31
    step = Fraction(patch) * (1 - Fraction(repr(float(overlap))))
    return max(1, math.ceil(step))


def _axis_positions(dim: int, patch: int, stride: int) -> List[int]:
    if dim <= patch:
        return [0]
    out = []
    pos = 0
    while True:
        out.append(min(pos, dim - patch))
        if pos + patch >= dim:
            break
        pos += stride
    return out


def plan_sliding_window(
    vol_shape, patch_size, overlap: float, blend: BlendMode = BlendMode.GAUSSIAN
) -> SlidingWindowPlan:
    """Tile a volume with overlapping patches.

    Starts step by ``ceil(patch * (1 - overlap))`` and the last start is
    clamped so the final window abuts the far boundary. Axes shorter than
    the patch are padded symmetrically (extra voxel after) to the patch size.
    """
    if not 0 <= overlap < 1:
        raise ContractError(f"overlap must lie in [0, 1), got {overlap}")
    vol_shape = as_shape3(vol_shape)
    patch = as_shape3(patch_size)
    if min(patch) < 1:
        raise ContractError(f"patch dims must be >= 1, got {patch}")
    pad = tuple(((p - n) // 2, p - n - (p - n) // 2) if n < p else (0, 0) for n, p in zip(vol_shape, patch))
    padded = [n + b + a for n, (b, a) in zip(vol_shape, pad)]
    axes = [_axis_positions(n, p, window_stride(p, overlap)) for n, p in zip(padded, patch)]
    positions = tuple((x, y, z) for x in axes[0] for y in axes[1] for z in axes[2])
    return SlidingWindowPlan(vol_shape, patch, positions, pad, BlendMode(blend))


def blend_weights(patch_size, blend: BlendMode) -> np.ndarray:
    """Separable Gaussian (sigma = patch / 8, peak 1, floored at 1e-3) or flat weights."""
    patch = as_shape3(patch_size)
    if BlendMode(blend) is BlendMode.UNIFORM:
        return np.ones(patch, dtype=np.float32)
    axes = []
    for p in patch:
        x = np.arange(p, dtype=np.float64) - (p - 1) / 2.0
        sigma = p / 8.0
        axes.append(np.exp(-0.5 * (x / sigma) ** 2))
    w = axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]
    w /= w.max()
    return np.maximum(w, 1e-3).astype(np.float32)


Predictor = Callable[[torch.Tensor], torch.Tensor]


def _in_channels(model) -> Optional[int]:
    cfg = getattr(model, "config", None)
    return getattr(cfg, "in_channels", None)


@torch.no_grad()
def sliding_window_infer(
    model: Predictor,
    inputs: MultiChannelVolume,
    plan: SlidingWindowPlan,
    batch_size: int = 4,
    order: Optional[Sequence[int]] = None,
) -> Volume:
    """Blend per-window sigmoid probabilities into a full-volume map.

    Windows are accumulated in plan order (lexicographic) unless ``order``
    gives a permutation. Accumulation is float32.
    """
    expected = _in_channels(model)
    if expected is not None and expected != len(inputs):
        raise ContractError(f"model takes {expected} channels, input has {len(inputs)}")
    if inputs.shape != plan.vol_shape:
        raise ContractError(f"plan was made for {plan.vol_shape}, input is {inputs.shape}")
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()

    arr = inputs.array()
    if any(b or a for b, a in plan.pad):
        arr = np.pad(arr, ((0, 0),) + tuple(plan.pad), mode="constant")
    x = torch.from_numpy(np.ascontiguousarray(arr))
    weights = torch.from_numpy(blend_weights(plan.patch_size, plan.blend))
    acc = torch.zeros(plan.padded_shape, dtype=torch.float32)
    norm = torch.zeros(plan.padded_shape, dtype=torch.float32)
    px, py, pz = plan.patch_size
    idx = list(range(len(plan.positions))) if order is None else list(order)

    for start in range(0, len(idx), max(1, batch_size)):
        chunk = [plan.positions[i] for i in idx[start : start + batch_size]]
        batch = torch.stack([x[:, i : i + px, j : j + py, k : k + pz] for i, j, k in chunk])
        probs = torch.sigmoid(model(batch).float())[:, 0]
        for (i, j, k), p in zip(chunk, probs):
            acc[i : i + px, j : j + py, k : k + pz] += p * weights
            norm[i : i + px, j : j + py, k : k + pz] += weights

    out = acc / norm
    (bx, _), (by, _), (bz, _) = plan.pad
    nx, ny, nz = plan.vol_shape
    out = out[bx : bx + nx, by : by + ny, bz : bz + nz].clamp_(0.0, 1.0)
    if was_training and hasattr(model, "train"):
        model.train()
    return Volume(out.numpy(), inputs.spacing, VolumeKind.PROBABILITY)


def threshold(prob: Volume, value: float) -> Volume:
    return prob.with_voxels((prob.voxels >= value).astype(np.float32), VolumeKind.MASK)


# --- cascade ------------------------------------------------------------------


def stage1_input(case: Case) -> MultiChannelVolume:
    if not case.ct.same_grid(case.pet):
        raise ContractError(
            f"case {case.id}: CT {case.ct.shape}@{case.ct.spacing} and PET "
            f"{case.pet.shape}@{case.pet.spacing} are not on one grid; preprocess first"
        )
    return MultiChannelVolume((case.ct, case.pet), STAGE1_CHANNELS)


def run_stage1(case: Case, model: Predictor, cfg: CascadeConfig) -> Tuple[Volume, Volume]:
    inputs = stage1_input(case)
    patch = getattr(getattr(model, "config", None), "patch_size", None) or cfg.stage1.patch_size
    plan = plan_sliding_window(inputs.shape, patch, cfg.window_overlap, cfg.blend)
    prob = sliding_window_infer(model, inputs, plan, cfg.sw_batch_size)
    return prob, threshold(prob, cfg.stage1_threshold)


def make_stage2_input(
    case: Case,
    stage1_mask: Volume,
    mode: Mode = Mode.INFER,
    dropout_cfg: Optional[CoarseDropoutConfig] = None,
    rng: Optional[np.random.Generator] = None,
) -> MultiChannelVolume:
    """Stack [CT, PET, stage-1 mask]; in TRAIN mode the mask is coarse-dropped first."""
    if stage1_mask.kind is not VolumeKind.MASK:
        raise ContractError(f"stage-1 conditioning must be a MASK, got {stage1_mask.kind.value}")
    if not stage1_mask.same_grid(case.ct):
        raise ContractError(f"case {case.id}: stage-1 mask grid {stage1_mask.shape} differs from case grid {case.ct.shape}")
    mask = stage1_mask
    if Mode(mode) is Mode.TRAIN:
        if dropout_cfg is None or rng is None:
            raise ContractError("TRAIN mode needs a coarse-dropout config and an rng")
        mask = coarse_dropout(mask, dropout_cfg, rng)
    base = stage1_input(case)
    return MultiChannelVolume(base.channels + (mask,), STAGE2_CHANNELS)


def ensemble_fuse(probs: Sequence[Volume], fusion: Fusion = Fusion.MEAN) -> Volume:
    probs = list(probs)
    if not probs:
        raise ValueError("cannot fuse an empty list of probability maps")
    if Fusion(fusion) is not Fusion.MEAN:
        raise ValueError(f"unsupported fusion {fusion}")
    ref = probs[0]
    for p in probs[1:]:
        if not ref.same_grid(p):
            raise ContractError(f"probability maps do not share a grid: {ref.shape} vs {p.shape}")
    if len(probs) == 1:
        return ref
    stacked = np.stack([p.voxels for p in probs]).astype(np.float64)
    mean = np.clip(stacked.mean(axis=0), 0.0, 1.0).astype(np.float32)
    return Volume(mean, ref.spacing, VolumeKind.PROBABILITY)


@dataclass
class CascadeResult:
    final_mask: Volume
    stage1_prob: Volume
    stage1_mask: Volume
    member_probs: Dict[str, Volume]
    fused_prob: Volume


def _member_name(model, i: int) -> str:
    kind = getattr(getattr(model, "config", None), "kind", None)
    for name, k in STAGE2_MEMBERS.items():
        if kind is k:
            return name
    return f"member{i}"


def run_cascade(case: Case, stage1_model: Predictor, stage2_models, cfg: CascadeConfig) -> CascadeResult:
    """Stage 1 -> stage-2 input (no dropout) -> each member at its own patch size -> mean -> threshold.

    ``stage2_models`` is a mapping name -> model or a sequence; members
    without a ``config.patch_size`` fall back to the matching ensemble config.
    """
    if isinstance(stage2_models, dict):
        named = list(stage2_models.items())
    else:
        named = [(_member_name(m, i), m) for i, m in enumerate(stage2_models)]
    if not named:
        raise ConfigError("cascade needs at least one stage-2 model")
    s1_prob, s1_mask = run_stage1(case, stage1_model, cfg)
    inputs = make_stage2_input(case, s1_mask, Mode.INFER)
    member_probs = {}
    for i, (name, model) in enumerate(named):
        patch = getattr(getattr(model, "config", None), "patch_size", None)
        if patch is None:
            patch = cfg.stage2.members[min(i, len(cfg.stage2.members) - 1)].patch_size
        plan = plan_sliding_window(inputs.shape, patch, cfg.window_overlap, cfg.blend)
        member_probs[name] = sliding_window_infer(model, inputs, plan, cfg.sw_batch_size)
    fused = ensemble_fuse(list(member_probs.values()), cfg.stage2.fusion)
    return CascadeResult(threshold(fused, cfg.stage2.threshold), s1_prob, s1_mask, member_probs, fused)
