"""SGD training for the stage-1 network and the stage-2 ensemble members."""

from __future__ import annotations

import enum
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from .augment import AugmentConfig, CoarseDropoutConfig, apply_augmentations
from .core import STAGE1_CHANNELS, Case, ContractError, MultiChannelVolume, Volume, VolumeKind, as_shape3
from .dataio import EmptyDatasetError, Manifest, atomic_path, load_case
from .models import ModelConfig, SegmentationModel, build_model, save_checkpoint
from .pipeline import (
    CascadeConfig,
    Mode,
    make_stage2_input,
    plan_sliding_window,
    run_stage1,
    sliding_window_infer,
    stage1_input,
    threshold,
)

log = logging.getLogger(__name__)


class Stage(str, enum.Enum):
    STAGE1 = "STAGE1"
    STAGE2_MEMBER = "STAGE2_MEMBER"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 25
    lr0: float = 1e-3
    weight_decay: float = 3e-5
    momentum: float = 0.99
    nesterov: bool = True
    poly_power: float = 0.9
    batch_size: int = 2
    patches_per_volume: int = 3
    foreground_patch_fraction: float = 0.5
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    dropout: CoarseDropoutConfig = field(default_factory=CoarseDropoutConfig)
    seed: int = 0
    val_interval: int = 5
    snapshot_epochs: Tuple[int, ...] = (1,)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not self.lr0 > 0:
            raise ValueError(f"lr0 must be > 0, got {self.lr0}")
        if not 0 <= self.foreground_patch_fraction <= 1:
            raise ValueError("foreground_patch_fraction must lie in [0, 1]")
        if self.batch_size < 1 or self.patches_per_volume < 1 or self.val_interval < 1:
            raise ValueError("batch_size, patches_per_volume and val_interval must be >= 1")
        object.__setattr__(self, "snapshot_epochs", tuple(int(e) for e in self.snapshot_epochs))

    @classmethod
    def paper(cls, **kw) -> "TrainConfig":
        return cls(epochs=774, **kw)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    val_dice: Optional[float]
    seconds: float


@dataclass
class TrainReport:
    epochs: List[EpochRecord] = field(default_factory=list)
    wall_time: float = 0.0
    best_val_dice: Optional[float] = None
    best_epoch: Optional[int] = None

    @property
    def losses(self) -> List[float]:
        return [e.loss for e in self.epochs]

    @property
    def lrs(self) -> List[float]:
        return [e.lr for e in self.epochs]

    def jsonl(self) -> str:
        return "".join(json.dumps(asdict(e)) + "\n" for e in self.epochs)


def poly_lr(epoch: int, total: int, lr0: float, power: float) -> float:
    if total <= 0:
        raise ValueError(f"total epochs must be positive, got {total}")
    if not 0 <= epoch <= total:
        raise ValueError(f"epoch {epoch} outside [0, {total}]")
    return lr0 * (1.0 - epoch / total) ** power


def dice_bce_loss(logits: torch.Tensor, target: torch.Tensor, smooth: float = 1e-5) -> torch.Tensor:
    """Equal-weight soft-Dice + binary cross-entropy.

    Dice is pooled over the whole batch. A batch whose target is entirely
    empty uses the mean predicted probability as its Dice term, so a
    confident empty prediction on an empty target costs ~0.
    """
    if logits.shape != target.shape:
        raise ContractError(f"logits {tuple(logits.shape)} and target {tuple(target.shape)} differ in shape")
    target = target.to(logits.dtype)
    prob = torch.sigmoid(logits)
    bce = F.binary_cross_entropy_with_logits(logits, target)
    t_sum = target.sum()
    if t_sum > 0:
        inter = (prob * target).sum()
        dice_term = 1.0 - (2.0 * inter + smooth) / (prob.sum() + t_sum + smooth)
    else:
        dice_term = prob.mean()
    return 0.5 * dice_term + 0.5 * bce


# --- patch sampling ---------------------------------------------------------


def _crop(arr: np.ndarray, starts, patch) -> np.ndarray:
    """Crop ``patch`` voxels at ``starts`` (may be negative), zero-filling outside."""
    out = np.zeros(arr.shape[:-3] + tuple(patch), dtype=arr.dtype)
    src, dst = [], []
    for s, p, n in zip(starts, patch, arr.shape[-3:]):
        lo, hi = max(s, 0), min(s + p, n)
        src.append(slice(lo, max(hi, lo)))
        dst.append(slice(lo - s, lo - s + max(hi - lo, 0)))
    out[(Ellipsis, *dst)] = arr[(Ellipsis, *src)]
    return out


def patch_start(center: Sequence[int], shape: Sequence[int], patch: Sequence[int]) -> Tuple[int, int, int]:
    """Window start for a patch around ``center``.

    Patches that fit are clamped inside the volume (they still contain the
    center); patches larger than the volume are placed with the volume centered.
    """
    out = []
    for c, n, p in zip(center, shape, patch):
        if p >= n:
            out.append(-((p - n) // 2))
        else:
            out.append(int(np.clip(c - p // 2, 0, n - p)))
    return tuple(out)


def sample_training_patch(
    case: Case,
    stage: Stage,
    patch_size,
    stage1_mask: Optional[Volume],
    config: TrainConfig,
    rng: np.random.Generator,
) -> Tuple[MultiChannelVolume, Volume]:
    """Draw one (input, target) training patch, augmented."""
    stage = Stage(stage)
    patch = as_shape3(patch_size)
    if case.label is None:
        raise ContractError(f"case {case.id} has no label to train on")
    if stage is Stage.STAGE2_MEMBER:
        if stage1_mask is None:
            raise ContractError("stage-2 patches need a stage-1 mask")
        full = make_stage2_input(case, stage1_mask, Mode.TRAIN, config.dropout, rng)
    else:
        full = stage1_input(case)

    label = case.label.voxels
    use_fg = rng.random() < config.foreground_patch_fraction
    fg = np.flatnonzero(label) if use_fg else np.empty(0, dtype=np.int64)
    if fg.size:
        center = np.unravel_index(fg[int(rng.integers(fg.size))], label.shape)
    else:
        center = tuple(int(rng.integers(n)) for n in label.shape)
    starts = patch_start(center, label.shape, patch)

    arr = _crop(full.array(), starts, patch)
    channels = tuple(c.with_voxels(a) for c, a in zip(full.channels, arr))
    sample = MultiChannelVolume(channels, full.channel_names)
    target = case.label.with_voxels(_crop(label, starts, patch))
    return apply_augmentations(sample, target, config.augment, rng)


# --- training loop ----------------------------------------------------------


def _mean_dice(preds: Sequence[Volume], labels: Sequence[Volume]) -> float:
    from .evaluation import dice_score

    return float(np.mean([dice_score(p, g) for p, g in zip(preds, labels)]))


def _load_cases(data: Union[Manifest, Sequence[Case]]) -> List[Case]:
    if isinstance(data, Manifest):
        return [load_case(e) for e in data]
    return list(data)


def train_stage(
    stage: Stage,
    member_cfg: ModelConfig,
    manifest: Union[Manifest, Sequence[Case]],
    frozen_stage1: Optional[SegmentationModel] = None,
    cfg: TrainConfig = TrainConfig(),
    val_data: Union[Manifest, Sequence[Case], None] = None,
    out_dir=None,
    cascade_cfg: Optional[CascadeConfig] = None,
) -> Tuple[SegmentationModel, TrainReport]:
    """Train one network with SGD + polynomial decay.

    Stage-2 conditioning masks are the frozen stage-1 model's predictions,
    computed once per case at the start. With ``out_dir`` set, writes
    ``best.pt`` on every validation improvement, ``epoch_NNN.pt`` for each
    snapshot epoch, ``last.pt`` at the end and ``report.jsonl``.
    """
    stage = Stage(stage)
    cascade_cfg = cascade_cfg or CascadeConfig()
    cases = _load_cases(manifest)
    if not cases:
        raise EmptyDatasetError("training set is empty")
    val_cases = _load_cases(val_data) if val_data is not None else []
    expected_in = len(STAGE1_CHANNELS) if stage is Stage.STAGE1 else 3
    if member_cfg.in_channels != expected_in:
        raise ContractError(f"{stage.value} needs in_channels={expected_in}, got {member_cfg.in_channels}")
    if stage is Stage.STAGE2_MEMBER and frozen_stage1 is None:
        raise ContractError("stage-2 training needs a frozen stage-1 model")

    def conditioning(cs):
        if stage is Stage.STAGE1:
            return {}
        return {c.id: run_stage1(c, frozen_stage1, cascade_cfg)[1] for c in cs}

    s1_masks = conditioning(cases)
    val_masks = conditioning(val_cases)

    out_dir = Path(out_dir) if out_dir is not None else None
    rng = np.random.default_rng(cfg.seed)
    model = build_model(member_cfg)
    opt = torch.optim.SGD(
        model.parameters(),
        lr=cfg.lr0,
        momentum=cfg.momentum,
        nesterov=cfg.nesterov,
        weight_decay=cfg.weight_decay,
    )
    report = TrainReport()
    t_start = time.perf_counter()

    def validate() -> float:
        preds = []
        for c in val_cases:
            if stage is Stage.STAGE1:
                preds.append(run_stage1(c, model, cascade_cfg)[1])
            else:
                inputs = make_stage2_input(c, val_masks[c.id], Mode.INFER)
                plan = plan_sliding_window(inputs.shape, member_cfg.patch_size, cascade_cfg.window_overlap, cascade_cfg.blend)
                prob = sliding_window_infer(model, inputs, plan, cascade_cfg.sw_batch_size)
                preds.append(threshold(prob, cascade_cfg.stage2.threshold))
        return _mean_dice(preds, [c.label for c in val_cases])

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            lr = poly_lr(epoch, cfg.epochs, cfg.lr0, cfg.poly_power)
            for group in opt.param_groups:
                group["lr"] = lr
            model.train()
            draws = [int(i) for i in rng.permutation(len(cases)) for _ in range(cfg.patches_per_volume)]
            losses = []
            for b in range(0, len(draws), cfg.batch_size):
                xs, ys = [], []
                for i in draws[b : b + cfg.batch_size]:
                    c = cases[i]
                    x, y = sample_training_patch(c, stage, member_cfg.patch_size, s1_masks.get(c.id), cfg, rng)
                    xs.append(x.array())
                    ys.append(y.voxels[None])
                x = torch.from_numpy(np.stack(xs))
                y = torch.from_numpy(np.stack(ys))
                loss = dice_bce_loss(model(x), y)
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                losses.append(float(loss.detach()))

            val_dice = None
            if val_cases and ((epoch + 1) % cfg.val_interval == 0 or epoch + 1 == cfg.epochs):
                val_dice = validate()
                if report.best_val_dice is None or val_dice > report.best_val_dice:
                    report.best_val_dice, report.best_epoch = val_dice, epoch + 1
                    if out_dir is not None:
                        save_checkpoint(model, out_dir / "best.pt", {"epoch": epoch + 1, "val_dice": val_dice})
            if out_dir is not None and (epoch + 1) in cfg.snapshot_epochs:
                save_checkpoint(model, out_dir / f"epoch_{epoch + 1:03d}.pt", {"epoch": epoch + 1})

            rec = EpochRecord(epoch, lr, float(np.mean(losses)), val_dice, time.perf_counter() - t0)
            report.epochs.append(rec)
            log.info(
                "%s %s epoch %d/%d lr=%.3g loss=%.4f%s",
                stage.value, member_cfg.kind.value, epoch + 1, cfg.epochs, lr, rec.loss,
                "" if val_dice is None else f" val_dice={val_dice:.4f}",
            )
            if out_dir is not None:
                with atomic_path(out_dir / "report.jsonl") as tmp:
                    tmp.write_text(report.jsonl())

    report.wall_time = time.perf_counter() - t_start
    if out_dir is not None:
        save_checkpoint(model, out_dir / "last.pt", {"epoch": cfg.epochs})
    model.eval()
    return model, report
