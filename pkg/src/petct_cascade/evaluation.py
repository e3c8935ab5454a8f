"""Dice scoring, validation reports and ground-truth/prediction overlays."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
from PIL import Image

from .core import Case, ContractError, Volume, VolumeKind, mask_volume_ml
from .dataio import Manifest, atomic_path, load_case, save_mask, write_json
from .pipeline import CascadeConfig, ensemble_fuse, run_cascade, threshold

GREEN = (0, 255, 0)
RED = (255, 0, 0)
OLIVE = (128, 128, 0)

# display names for the results table
ROW_LABELS = {
    "stage1": ("Stage 1", "DynUNet"),
    "segresnet": ("Stage 2", "SegResNet"),
    "swinunetr": ("", "SwinUNETR"),
    "unet": ("", "UNet"),
    "ensemble": ("Ensemble", "Mean fusion"),
}


def dice_score(pred: Volume, gt: Volume) -> float:
    """2|P & G| / (|P| + |G|), with two empty masks scoring 1.0."""
    if pred.shape != gt.shape:
        raise ContractError(f"dice needs masks on one grid: {pred.shape} vs {gt.shape}")
    for name, v in (("pred", pred), ("gt", gt)):
        if v.kind is not VolumeKind.MASK:
            raise ContractError(f"dice {name} must be a MASK, got {v.kind.value}")
    p = pred.voxels > 0
    g = gt.voxels > 0
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / total


@dataclass
class CaseResult:
    case_id: str
    dice: Dict[str, float]
    predicted_ml: float
    actual_ml: float


@dataclass
class EvalReport:
    cases: List[CaseResult] = field(default_factory=list)

    @property
    def configurations(self) -> List[str]:
        return list(self.cases[0].dice) if self.cases else []

    @property
    def mean_dice(self) -> Dict[str, float]:
        return {k: float(np.mean([c.dice[k] for c in self.cases])) for k in self.configurations}

    def to_json(self) -> dict:
        return {
            "cases": [
                {"case_id": c.case_id, "dice": c.dice, "predicted_ml": c.predicted_ml, "actual_ml": c.actual_ml}
                for c in self.cases
            ],
            "mean_dice": self.mean_dice,
        }

    def table(self) -> str:
        """Aligned plain-text results table, Dice in %."""
        rows = [("Stages", "Models", "Dice Score on Validation Set")]
        for key, dice in self.mean_dice.items():
            stage, name = ROW_LABELS.get(key, ("", key))
            rows.append((stage, name, f"{100 * dice:.2f}"))
        widths = [max(len(r[i]) for r in rows) for i in range(3)]
        lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"

    def save(self, json_path, table_path) -> None:
        write_json(self.to_json(), json_path)
        with atomic_path(table_path) as tmp:
            tmp.write_text(self.table())


def evaluate(
    data: Union[Manifest, Sequence[Case]],
    stage1_model,
    stage2_models: Mapping[str, object],
    cfg: CascadeConfig,
    mask_dir=None,
) -> EvalReport:
    """Score stage 1 alone, every stage-2 member alone and the fused ensemble.

    With ``mask_dir`` set, each case's final cascade mask is also written
    there as ``<case_id>_mask.nii.gz``.
    """
    cases = data if not isinstance(data, Manifest) else (load_case(e) for e in data)
    report = EvalReport()
    for case in cases:
        if case.label is None:
            raise ContractError(f"case {case.id} has no label to evaluate against")
        res = run_cascade(case, stage1_model, dict(stage2_models), cfg)
        dice = {"stage1": dice_score(res.stage1_mask, case.label)}
        for name, prob in res.member_probs.items():
            member_mask = threshold(ensemble_fuse([prob], cfg.stage2.fusion), cfg.stage2.threshold)
            dice[name] = dice_score(member_mask, case.label)
        dice["ensemble"] = dice_score(res.final_mask, case.label)
        if mask_dir is not None:
            save_mask(res.final_mask, case.ct, Path(mask_dir) / f"{case.id}_mask.nii.gz")
        report.cases.append(
            CaseResult(case.id, dice, mask_volume_ml(res.final_mask), mask_volume_ml(case.label))
        )
    return report


# --- overlays ---------------------------------------------------------------


class SliceAxis(str, enum.Enum):
    X = "X"
    Y = "Y"
    Z = "Z"


AUTO = "AUTO"


@dataclass(frozen=True)
class OverlaySpec:
    slice_axis: SliceAxis = SliceAxis.Z
    slice_index: Union[int, str] = AUTO
    gt_color: tuple = GREEN
    pred_color: tuple = RED
    tp_color: tuple = OLIVE
    ct_window: Optional[tuple] = None

    def __post_init__(self):
        axis = self.slice_axis
        object.__setattr__(self, "slice_axis", axis if isinstance(axis, SliceAxis) else SliceAxis(str(axis).upper()))
        idx = self.slice_index
        if isinstance(idx, str):
            if idx.upper() != AUTO:
                idx = int(idx)
            else:
                idx = AUTO
        object.__setattr__(self, "slice_index", idx)


def _axis(spec: OverlaySpec) -> int:
    return "XYZ".index(spec.slice_axis.value)


def resolve_slice(label: Volume, spec: OverlaySpec) -> int:
    axis = _axis(spec)
    n = label.shape[axis]
    if spec.slice_index == AUTO:
        other = tuple(a for a in range(3) if a != axis)
        areas = label.voxels.sum(axis=other)
        return int(np.argmax(areas))
    idx = int(spec.slice_index)
    if not 0 <= idx < n:
        raise IndexError(f"slice index {idx} outside [0, {n}) on axis {spec.slice_axis.value}")
    return idx


def overlay_rgb(case: Case, pred: Volume, spec: OverlaySpec = OverlaySpec()) -> np.ndarray:
    """RGB uint8 slice: grayscale CT with gt-only, pred-only and overlap colored."""
    if case.label is None:
        raise ContractError(f"case {case.id} has no label to overlay")
    if not pred.same_grid(case.label) or not pred.same_grid(case.ct):
        raise ContractError("prediction, label and CT must share a grid")
    axis = _axis(spec)
    idx = resolve_slice(case.label, spec)
    ct = np.take(case.ct.voxels, idx, axis=axis)
    gt = np.take(case.label.voxels, idx, axis=axis) > 0
    pr = np.take(pred.voxels, idx, axis=axis) > 0

    lo, hi = spec.ct_window if spec.ct_window is not None else (float(ct.min()), float(ct.max()))
    gray = np.zeros_like(ct, dtype=np.float64) if hi <= lo else (np.clip(ct, lo, hi) - lo) / (hi - lo)
    rgb = np.repeat(np.rint(gray * 255).astype(np.uint8)[..., None], 3, axis=-1)
    rgb[gt & ~pr] = spec.gt_color
    rgb[pr & ~gt] = spec.pred_color
    rgb[gt & pr] = spec.tp_color
    return rgb


def render_overlay(case: Case, pred: Volume, spec: OverlaySpec, path) -> None:
    rgb = overlay_rgb(case, pred, spec)
    with atomic_path(path, suffix=".png") as tmp:
        Image.fromarray(rgb).save(tmp, format="PNG")
