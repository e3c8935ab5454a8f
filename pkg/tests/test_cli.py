import dataclasses
import filecmp
import json
import os

import filelock
import numpy as np
import pytest

from petct_cascade import __version__
from petct_cascade.cli import LOCK_NAME, Layout, main
from petct_cascade.config import (
    AUTO,
    DATA_ROOT_ENV,
    RunConfig,
    dump_config,
    load_config,
    parse_config,
    save_config,
)
from petct_cascade.core import ConfigError, VolumeKind
from petct_cascade.dataio import load_manifest, load_volume
from petct_cascade.models import WidthPreset


# --- config -------------------------------------------------------------------


@pytest.mark.parametrize("preset", ["TOY", "PAPER"])
def test_config_round_trip(preset, tmp_path):
    cfg = RunConfig.for_preset(preset)
    assert parse_config(dump_config(cfg)) == cfg
    frozen = cfg.resolved((2.0, 2.0, 2.1875))
    save_config(frozen, tmp_path / "c.yaml")
    back = load_config(tmp_path / "c.yaml")
    assert back == frozen
    assert back.preprocess.target_spacing == (2.0, 2.0, 2.1875)
    assert back.code_version == __version__


def test_default_config_is_toy_with_auto_spacing():
    cfg = RunConfig()
    assert cfg.preset is WidthPreset.TOY
    assert cfg.preprocess.target_spacing == AUTO and not cfg.spacing_frozen
    assert {t.epochs for t in cfg.train.values()} == {25}
    assert len({t.seed for t in cfg.train.values()}) == 4


def test_paper_preset_trains_774_epochs():
    assert {t.epochs for t in RunConfig.for_preset("PAPER").train.values()} == {774}


def test_config_rejects_unknown_fields():
    text = dump_config(RunConfig()).replace("split:", "split:\n  bogus: 1", 1)
    with pytest.raises(ConfigError, match="bogus"):
        parse_config(text)


def test_config_rejects_wrong_types():
    text = dump_config(RunConfig()).replace("ratio: 0.8", "ratio: lots")
    with pytest.raises(ConfigError):
        parse_config(text)


def test_config_rejects_mixed_presets():
    toy = RunConfig.for_preset("TOY")
    with pytest.raises(ConfigError):
        dataclasses.replace(toy, preset=WidthPreset.PAPER)


def test_data_root_env_override(monkeypatch):
    cfg = RunConfig()
    monkeypatch.delenv(DATA_ROOT_ENV, raising=False)
    assert str(cfg.data_root) == cfg.paths.data_root
    monkeypatch.setenv(DATA_ROOT_ENV, "/elsewhere")
    assert str(cfg.data_root) == "/elsewhere"


# --- subcommands --------------------------------------------------------------


def run(*argv):
    return main([str(a) for a in argv])


def test_init_config_defaults_to_toy(tmp_path, capsys):
    assert run("init-config", "--out", tmp_path / "c.yaml", "--data-root", "d", "--output-dir", "o") == 0
    cfg = load_config(tmp_path / "c.yaml")
    assert cfg.preset is WidthPreset.TOY
    assert (cfg.paths.data_root, cfg.paths.output_dir) == ("d", "o")
    assert "warning" not in capsys.readouterr().err


def test_init_config_paper_warns(tmp_path, capsys):
    assert run("init-config", "--out", tmp_path / "c.yaml", "--preset", "PAPER") == 0
    assert "warning" in capsys.readouterr().err
    assert load_config(tmp_path / "c.yaml").preset is WidthPreset.PAPER


def test_phantoms_twice_is_byte_identical(tmp_path):
    for d in ("a", "b"):
        assert run("phantoms", "--n", 3, "--out", tmp_path / d, "--seed", 7) == 0
    files = {
        side: sorted(str(p.relative_to(tmp_path / side)) for p in (tmp_path / side).rglob("*") if p.is_file())
        for side in ("a", "b")
    }
    assert files["a"] == files["b"]
    names = [n for n in files["a"] if not n.endswith(LOCK_NAME)]
    assert len(names) == 3 * 3 + 1
    _, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", names, shallow=False)
    assert not mismatch and not errors


def make_config(tmp_path, **train_overrides):
    cfg = RunConfig.for_preset("TOY")
    cfg = dataclasses.replace(
        cfg,
        paths=dataclasses.replace(cfg.paths, data_root=str(tmp_path / "data"), output_dir=str(tmp_path / "out")),
        train={k: dataclasses.replace(t, **train_overrides) for k, t in cfg.train.items()},
    )
    path = tmp_path / "cfg.yaml"
    save_config(cfg, path)
    return path


@pytest.fixture(scope="module")
def prepared(tmp_path_factory):
    """Five phantoms (one healthy) preprocessed and split."""
    root = tmp_path_factory.mktemp("cli")
    cfg = make_config(root, epochs=1, patches_per_volume=1, val_interval=1, snapshot_epochs=(1,))
    assert run("phantoms", "--n", 5, "--out", root / "data", "--seed", 3, "--healthy", 1) == 0
    assert run("preprocess", "--config", cfg) == 0
    assert run("split", "--config", cfg) == 0
    return root, cfg


def test_preprocess_freezes_spacing(prepared):
    root, cfg = prepared
    assert load_config(cfg).preprocess.target_spacing == AUTO
    frozen = load_config(root / "out" / "run_config.yaml")
    assert frozen.spacing_frozen and frozen.code_version == __version__
    layout = Layout(root / "out")
    entries = load_manifest(layout.manifest).entries
    assert len(entries) == 5
    for e in entries:
        assert load_volume(e.ct_path, VolumeKind.CT).spacing == pytest.approx(frozen.preprocess.target_spacing)


def test_split_excludes_healthy(prepared):
    root, _ = prepared
    layout = Layout(root / "out")
    train, val = load_manifest(layout.train_split), load_manifest(layout.val_split)
    ids = [e.case_id for e in train.entries + val.entries]
    assert len(ids) == 4 and len(set(ids)) == 4
    assert all(e.lesion_voxels > 0 for e in train.entries + val.entries)


def test_stage2_before_stage1_names_dependency(prepared, capsys):
    _, cfg = prepared
    assert run("train", "stage2", "--member", "unet", "--config", cfg) == 1
    err = capsys.readouterr().err
    assert "missing dependency" in err and "stage1" in err
    assert err.count("\n") == 1


def test_stage2_needs_member(prepared, capsys):
    _, cfg = prepared
    assert run("train", "stage2", "--config", cfg) == 1
    assert "--member" in capsys.readouterr().err


def test_missing_config_is_io_error(tmp_path, capsys):
    assert run("split", "--config", tmp_path / "nope.yaml") == 2
    assert "not found" in capsys.readouterr().err


def test_split_before_preprocess(tmp_path, capsys):
    cfg = make_config(tmp_path)
    assert run("split", "--config", cfg) == 1
    assert "preprocess" in capsys.readouterr().err


def test_corrupt_input_is_io_error(tmp_path, capsys):
    cfg = make_config(tmp_path)
    assert run("phantoms", "--n", 2, "--out", tmp_path / "data", "--seed", 1) == 0
    victim = sorted((tmp_path / "data").rglob("*.nii.gz"))[0]
    victim.write_bytes(b"not a nifti file")
    assert run("preprocess", "--config", cfg) == 2
    assert capsys.readouterr().err.startswith("error:")


def test_concurrent_command_is_rejected(prepared, capsys):
    root, cfg = prepared
    lock = filelock.FileLock(str(root / "out" / LOCK_NAME))
    with lock.acquire(timeout=0):
        assert run("split", "--config", cfg) == 1
    assert "another petct command" in capsys.readouterr().err
    assert run("split", "--config", cfg) == 0


def test_full_sequence_smoke(prepared, capsys):
    """One-epoch training of every model, then infer, evaluate and overlay."""
    root, cfg = prepared
    layout = Layout(root / "out")
    assert run("train", "stage1", "--config", cfg) == 0
    for member in ("segresnet", "swinunetr", "unet"):
        assert run("train", "stage2", "--member", member, "--config", cfg) == 0
    for name in ("stage1", "segresnet", "swinunetr", "unet"):
        d = layout.checkpoint_dir(name)
        assert (d / "epoch_001.pt").exists() and (d / "report.jsonl").exists()
        assert load_config(d / "run_config.yaml").spacing_frozen
    capsys.readouterr()

    assert run("evaluate", "--config", cfg) == 0
    table = capsys.readouterr().out
    assert [l.split()[-2] for l in table.splitlines()[2:]] == ["DynUNet", "SegResNet", "SwinUNETR", "UNet", "fusion"]
    report = json.loads((layout.evaluation / "report.json").read_text())
    assert set(report["mean_dice"]) == {"stage1", "segresnet", "swinunetr", "unet", "ensemble"}
    assert all(0.0 <= v <= 1.0 for v in report["mean_dice"].values())
    val_id = report["cases"][0]["case_id"]
    assert (layout.evaluation / "masks" / f"{val_id}_mask.nii.gz").exists()
    assert load_config(layout.evaluation / "run_config.yaml").spacing_frozen

    assert run("infer", "--config", cfg, "--case", val_id, "--save-probs") == 0
    out = layout.predictions / f"{val_id}_mask.nii.gz"
    assert capsys.readouterr().out.strip() == str(out)
    np.testing.assert_array_equal(
        load_volume(out, VolumeKind.MASK).voxels,
        load_volume(layout.evaluation / "masks" / f"{val_id}_mask.nii.gz", VolumeKind.MASK).voxels,
    )
    assert (layout.predictions / f"{val_id}_prob.nii.gz").exists()

    assert run("overlay", "--config", cfg, "--case", val_id, "--axis", "z", "--slice", "auto") == 0
    assert os.path.exists(capsys.readouterr().out.strip())
    assert run("overlay", "--config", cfg, "--case", val_id, "--slice", 10_000) == 1
    assert "outside" in capsys.readouterr().err
    assert run("infer", "--config", cfg, "--case", "no_such_case") == 1
