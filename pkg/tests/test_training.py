import json

import numpy as np
import pytest
import torch

from petct_cascade.augment import AugmentConfig
from petct_cascade.core import Case, ContractError, Volume, VolumeKind
from petct_cascade.dataio import EmptyDatasetError
from petct_cascade.models import ModelConfig, ModelKind, build_model, load_checkpoint
from petct_cascade.training import (
    Stage,
    TrainConfig,
    dice_bce_loss,
    patch_start,
    poly_lr,
    sample_training_patch,
    train_stage,
)

SP = (1.0, 1.0, 1.0)
TINY = ModelConfig(ModelKind.DYNUNET, 2, patch_size=(16, 16, 16), seed=3)


def blob_case(i, shape=(24, 24, 24)):
    rng = np.random.default_rng(i)
    label = np.zeros(shape, dtype=np.float32)
    c = rng.integers(6, 18, size=3)
    label[c[0] - 3 : c[0] + 3, c[1] - 3 : c[1] + 3, c[2] - 3 : c[2] + 3] = 1
    ct = rng.normal(0, 0.1, shape) + 0.2 * label
    pet = rng.normal(0, 0.1, shape) + 2.0 * label
    return Case(
        f"b{i}",
        Volume(ct, SP, VolumeKind.CT),
        Volume(pet, SP, VolumeKind.PET),
        Volume(label, SP, VolumeKind.MASK),
    )


def quick_cfg(**kw):
    base = dict(epochs=3, batch_size=2, patches_per_volume=1, augment=AugmentConfig.disabled(), seed=5)
    base.update(kw)
    return TrainConfig(**base)


def test_poly_lr_examples():
    assert poly_lr(0, 774, 1e-3, 0.9) == 1e-3
    assert poly_lr(774, 774, 1e-3, 0.9) == 0.0
    assert poly_lr(5, 10, 1e-3, 1.0) == pytest.approx(5e-4, abs=0)


def test_poly_lr_bounds():
    with pytest.raises(ValueError):
        poly_lr(11, 10, 1e-3, 0.9)
    with pytest.raises(ValueError):
        poly_lr(-1, 10, 1e-3, 0.9)


def test_loss_saturated_correct():
    target = (torch.rand(2, 1, 6, 6, 6, generator=torch.Generator().manual_seed(0)) < 0.3).float()
    logits = torch.where(target > 0, 20.0, -20.0)
    assert float(dice_bce_loss(logits, target)) < 1e-4


def test_loss_empty_target_confident_negative():
    target = torch.zeros(2, 1, 5, 5, 5)
    assert float(dice_bce_loss(torch.full_like(target, -20.0), target)) < 1e-4


def test_loss_shape_mismatch():
    with pytest.raises(ContractError):
        dice_bce_loss(torch.zeros(1, 1, 4, 4, 4), torch.zeros(1, 1, 4, 4, 5))


def test_loss_nonnegative_and_formula():
    g = torch.Generator().manual_seed(1)
    logits = torch.randn(2, 1, 4, 4, 4, generator=g, dtype=torch.float64)
    target = (torch.rand(2, 1, 4, 4, 4, generator=g) < 0.4).double()
    p = torch.sigmoid(logits)
    dice = (2 * (p * target).sum() + 1e-5) / (p.sum() + target.sum() + 1e-5)
    bce = -(target * torch.log(p) + (1 - target) * torch.log(1 - p)).mean()
    expected = 0.5 * (1 - dice) + 0.5 * bce
    out = dice_bce_loss(logits, target)
    assert float(out) >= 0
    assert float(out) == pytest.approx(float(expected), rel=1e-12)


def test_loss_gradient_finite_differences_4cubed():
    g = torch.Generator().manual_seed(2)
    logits = torch.randn(1, 1, 4, 4, 4, generator=g, dtype=torch.float64, requires_grad=True)
    target = (torch.rand(1, 1, 4, 4, 4, generator=g) < 0.5).double()
    dice_bce_loss(logits, target).backward()
    h = 1e-3
    numeric = torch.zeros_like(logits)
    with torch.no_grad():
        flat = logits.detach().clone().view(-1)
        for i in range(flat.numel()):
            up, down = flat.clone(), flat.clone()
            up[i] += h
            down[i] -= h
            numeric.view(-1)[i] = (
                dice_bce_loss(up.view_as(logits), target) - dice_bce_loss(down.view_as(logits), target)
            ) / (2 * h)
    rel = (logits.grad - numeric).norm() / numeric.norm()
    assert rel < 1e-2


def test_patch_start_clamps_and_centers():
    assert patch_start((0, 10, 23), (24, 24, 24), (8, 8, 8)) == (0, 6, 16)
    # patch larger than the volume: the volume sits in the middle
    assert patch_start((1, 1, 1), (4, 5, 6), (8, 8, 8)) == (-2, -1, -1)


def test_foreground_fraction_one_hits_lesion():
    case = blob_case(0)
    cfg = quick_cfg(foreground_patch_fraction=1.0)
    rng = np.random.default_rng(0)
    for _ in range(50):
        _, target = sample_training_patch(case, Stage.STAGE1, (8, 8, 8), None, cfg, rng)
        assert target.voxels.sum() >= 1


def test_empty_label_falls_back_to_uniform():
    case = blob_case(0)
    empty = Case(case.id, case.ct, case.pet, case.label.with_voxels(np.zeros(case.label.shape)))
    x, target = sample_training_patch(empty, Stage.STAGE1, (8, 8, 8), None, quick_cfg(foreground_patch_fraction=1.0), np.random.default_rng(0))
    assert x.shape == (8, 8, 8) and target.voxels.sum() == 0


def test_oversized_patch_centers_volume():
    case = blob_case(1, shape=(4, 5, 6))
    x, target = sample_training_patch(case, Stage.STAGE1, (8, 8, 8), None, quick_cfg(), np.random.default_rng(0))
    ct = x.channels[0].voxels
    assert np.array_equal(ct[2:6, 1:6, 1:7], case.ct.voxels)
    assert ct.sum() == pytest.approx(case.ct.voxels.sum(), rel=1e-5)
    assert np.array_equal(target.voxels[2:6, 1:6, 1:7], case.label.voxels)


def test_stage2_patch_needs_mask():
    with pytest.raises(ContractError):
        sample_training_patch(blob_case(0), Stage.STAGE2_MEMBER, (8, 8, 8), None, quick_cfg(), np.random.default_rng(0))


def test_stage2_patch_has_three_channels():
    case = blob_case(0)
    x, _ = sample_training_patch(case, Stage.STAGE2_MEMBER, (8, 8, 8), case.label, quick_cfg(), np.random.default_rng(0))
    assert x.channel_names == ("CT", "PET", "STAGE1_MASK")


def test_train_writes_artifacts_and_follows_schedule(tmp_path):
    cases = [blob_case(i) for i in range(4)]
    cfg = quick_cfg(epochs=4, val_interval=2, snapshot_epochs=(1,))
    model, report = train_stage(Stage.STAGE1, TINY, cases[:3], cfg=cfg, val_data=cases[3:], out_dir=tmp_path)
    assert report.lrs == [poly_lr(e, 4, 1e-3, 0.9) for e in range(4)]
    assert [e.val_dice is not None for e in report.epochs] == [False, True, False, True]
    for name in ("best.pt", "epoch_001.pt", "last.pt", "report.jsonl"):
        assert (tmp_path / name).exists()
    lines = (tmp_path / "report.jsonl").read_text().splitlines()
    assert [json.loads(l)["epoch"] for l in lines] == [0, 1, 2, 3]
    assert load_checkpoint(tmp_path / "epoch_001.pt").config == TINY
    assert not model.training


def test_training_reproducible():
    cases = [blob_case(i) for i in range(3)]
    cfg = quick_cfg(epochs=2, augment=AugmentConfig())
    _, a = train_stage(Stage.STAGE1, TINY, cases, cfg=cfg)
    _, b = train_stage(Stage.STAGE1, TINY, cases, cfg=cfg)
    assert a.losses == b.losses


def test_training_leaves_global_rng_alone():
    torch.manual_seed(9)
    expected = torch.rand(2)
    torch.manual_seed(9)
    train_stage(Stage.STAGE1, TINY, [blob_case(0)], cfg=quick_cfg(epochs=1))
    assert torch.equal(torch.rand(2), expected)


def _norm(model):
    return float(torch.sqrt(sum((p.detach().double() ** 2).sum() for p in model.parameters())))


def test_weight_decay_shrinks_parameter_norm():
    cases = [blob_case(i) for i in range(2)]
    with_wd, _ = train_stage(Stage.STAGE1, TINY, cases, cfg=quick_cfg(epochs=5))
    without, _ = train_stage(Stage.STAGE1, TINY, cases, cfg=quick_cfg(epochs=5, weight_decay=0.0))
    assert _norm(with_wd) < _norm(without)


def test_single_batch_overfit_monotone():
    torch.manual_seed(0)
    model = build_model(TINY)
    case = blob_case(0)
    x = torch.from_numpy(np.stack([np.stack([case.ct.voxels, case.pet.voxels])[:, 4:20, 4:20, 4:20]]).copy())
    y = torch.from_numpy(case.label.voxels[None, None, 4:20, 4:20, 4:20].copy())
    opt = torch.optim.SGD(model.parameters(), lr=1e-2)
    losses = []
    for _ in range(50):
        loss = dice_bce_loss(model(x), y)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_empty_training_set():
    with pytest.raises(EmptyDatasetError):
        train_stage(Stage.STAGE1, TINY, [], cfg=quick_cfg())


def test_stage2_requires_frozen_stage1():
    with pytest.raises(ContractError):
        train_stage(Stage.STAGE2_MEMBER, ModelConfig(ModelKind.UNET, 3, patch_size=(16, 16, 16)), [blob_case(0)], cfg=quick_cfg())


def test_channel_count_checked():
    with pytest.raises(ContractError):
        train_stage(Stage.STAGE1, ModelConfig(ModelKind.UNET, 3, patch_size=(16, 16, 16)), [blob_case(0)], cfg=quick_cfg())


def test_stage2_member_trains(tmp_path):
    cases = [blob_case(i) for i in range(3)]
    stage1 = build_model(TINY).eval()
    member = ModelConfig(ModelKind.UNET, 3, patch_size=(16, 16, 16))
    _, report = train_stage(
        Stage.STAGE2_MEMBER, member, cases[:2], frozen_stage1=stage1, cfg=quick_cfg(epochs=1), val_data=cases[2:]
    )
    assert report.best_val_dice is not None and 0 <= report.best_val_dice <= 1


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(lr0=0)
    with pytest.raises(ValueError):
        TrainConfig(foreground_patch_fraction=1.5)
    assert TrainConfig.paper().epochs == 774
