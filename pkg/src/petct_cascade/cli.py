"""Command-line entry point: ``petct <subcommand> --config run.yaml``.

Every subcommand after ``phantoms`` reads one run config. ``preprocess``
freezes the AUTO target spacing into ``<output_dir>/run_config.yaml``;
later subcommands pick the frozen spacing up from there.

Exit codes: 0 success, 1 contract/config error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, List, Optional

import filelock

from .config import RunConfig, load_config, save_config
from .core import ConfigError, FormatError
from .dataio import (
    Manifest,
    generate_dataset,
    load_case,
    load_manifest,
    relativize,
    save_case,
    save_manifest,
    save_mask,
    save_volume,
    split_manifest,
)
from .evaluation import OverlaySpec, evaluate, render_overlay
from .models import ModelKind, SegmentationModel, WidthPreset, load_checkpoint
from .pipeline import STAGE2_MEMBERS, run_cascade
from .preprocess import compute_average_spacing, preprocess_case
from .training import Stage, train_stage

log = logging.getLogger("petct_cascade")

RUN_CONFIG_NAME = "run_config.yaml"
LOCK_NAME = ".petct.lock"
PAPER_WARNING = (
    "PAPER preset: full-width networks at full patch size and 774 epochs per model; "
    "expect days of GPU time and tens of GB of memory"
)


class LockedError(RuntimeError):
    pass


# --- run layout ---------------------------------------------------------------


class Layout:
    """Where each subcommand reads and writes inside ``output_dir``."""

    def __init__(self, output_dir: Path):
        self.root = Path(output_dir)
        self.run_config = self.root / RUN_CONFIG_NAME
        self.preprocessed = self.root / "preprocessed"
        self.manifest = self.preprocessed / "manifest.json"
        self.splits = self.root / "splits"
        self.train_split = self.splits / "train.json"
        self.val_split = self.splits / "val.json"
        self.checkpoints = self.root / "checkpoints"
        self.predictions = self.root / "predictions"
        self.evaluation = self.root / "evaluation"
        self.overlays = self.root / "overlays"

    def checkpoint_dir(self, name: str) -> Path:
        return self.checkpoints / name

    def checkpoint(self, name: str) -> Path:
        """Best-validation checkpoint, else the final one."""
        d = self.checkpoint_dir(name)
        for candidate in (d / "best.pt", d / "last.pt"):
            if candidate.exists():
                return candidate
        raise ConfigError(
            f"missing dependency: no {name} checkpoint under {d}; run `train "
            + ("stage1" if name == "stage1" else f"stage2 --member {name}")
            + "` first"
        )


@contextmanager
def run_lock(directory: Path):
    directory.mkdir(parents=True, exist_ok=True)
    lock = filelock.FileLock(str(directory / LOCK_NAME))
    try:
        lock.acquire(timeout=0)
    except filelock.Timeout:
        raise LockedError(f"another petct command is running on {directory}") from None
    try:
        yield
    finally:
        lock.release()


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise ConfigError(f"missing dependency: {path} not found; run `{producer}` first")
    return path


def _frozen_config(cfg: RunConfig) -> RunConfig:
    """Fill an AUTO target spacing from the run's frozen config."""
    if cfg.spacing_frozen:
        return cfg
    layout = Layout(cfg.output_dir)
    frozen = load_config(_require(layout.run_config, "preprocess"))
    if not frozen.spacing_frozen:
        raise ConfigError(f"{layout.run_config} still has an AUTO target spacing")
    return cfg.resolved(frozen.preprocess.target_spacing)


def _warn_if_paper(cfg: RunConfig) -> None:
    if cfg.preset is WidthPreset.PAPER:
        log.warning(PAPER_WARNING)


# --- subcommands --------------------------------------------------------------


def cmd_init_config(args) -> int:
    preset = WidthPreset(args.preset.upper())
    if preset is WidthPreset.PAPER:
        print(f"warning: {PAPER_WARNING}", file=sys.stderr)
    paths = {}
    if args.data_root:
        paths["data_root"] = args.data_root
    if args.output_dir:
        paths["output_dir"] = args.output_dir
    cfg = RunConfig.for_preset(preset)
    if paths:
        cfg = dataclasses.replace(cfg, paths=dataclasses.replace(cfg.paths, **paths))
    save_config(cfg, args.out)
    print(args.out)
    return 0


def cmd_phantoms(args) -> int:
    out = Path(args.out)
    with run_lock(out):
        manifest = generate_dataset(args.n, out, seed=args.seed, n_healthy=args.healthy)
    print(f"wrote {len(manifest)} cases to {out}")
    return 0


def cmd_preprocess(args) -> int:
    cfg = load_config(args.config)
    layout = Layout(cfg.output_dir)
    source = load_manifest(_require(cfg.data_root / "manifest.json", "phantoms"))
    with run_lock(layout.root):
        if cfg.spacing_frozen:
            spacing = cfg.preprocess.target_spacing
        else:
            train, _ = split_manifest(source, cfg.split.ratio, cfg.split.seed)
            spacing = compute_average_spacing(train)
            log.info("average train-split spacing %s", spacing)
        cfg = cfg.resolved(spacing)
        entries = []
        case_dir = layout.preprocessed / "cases"
        for e in source:
            case = preprocess_case(load_case(e), spacing, cfg.preprocess.scheme)
            new = save_case(case, case_dir)
            entries.append(
                dataclasses.replace(new, dataset_version=e.dataset_version, retracted=e.retracted)
            )
            log.info("preprocessed %s -> %s", e.case_id, case.ct.shape)
        manifest = relativize(Manifest(tuple(entries), source.version), layout.preprocessed)
        save_manifest(manifest, layout.manifest)
        save_config(cfg, layout.run_config)
    print(f"target spacing {tuple(spacing)}; frozen config at {layout.run_config}")
    return 0


def cmd_split(args) -> int:
    cfg = _frozen_config(load_config(args.config))
    layout = Layout(cfg.output_dir)
    manifest = load_manifest(_require(layout.manifest, "preprocess"))
    with run_lock(layout.root):
        train, val = split_manifest(manifest, cfg.split.ratio, cfg.split.seed)
        save_manifest(relativize(train, layout.splits), layout.train_split)
        save_manifest(relativize(val, layout.splits), layout.val_split)
    print(f"train {len(train)} / val {len(val)}")
    return 0


def _load_stage1(layout: Layout) -> SegmentationModel:
    return load_checkpoint(layout.checkpoint("stage1"), kind=ModelKind.DYNUNET, in_channels=2)


def _load_member(layout: Layout, name: str) -> SegmentationModel:
    return load_checkpoint(layout.checkpoint(name), kind=STAGE2_MEMBERS[name], in_channels=3)


def cmd_train(args) -> int:
    cfg = _frozen_config(load_config(args.config))
    _warn_if_paper(cfg)
    layout = Layout(cfg.output_dir)
    if args.stage == "stage1":
        name, stage, model_cfg = "stage1", Stage.STAGE1, cfg.cascade.stage1
    else:
        if not args.member:
            raise ConfigError("train stage2 needs --member {" + "|".join(STAGE2_MEMBERS) + "}")
        name, stage, model_cfg = args.member, Stage.STAGE2_MEMBER, cfg.member_config(args.member)
    train = load_manifest(_require(layout.train_split, "split"))
    val = load_manifest(_require(layout.val_split, "split"))
    frozen = _load_stage1(layout) if stage is Stage.STAGE2_MEMBER else None
    out_dir = layout.checkpoint_dir(name)
    with run_lock(layout.root):
        save_config(cfg, out_dir / RUN_CONFIG_NAME)
        _, report = train_stage(
            stage,
            model_cfg,
            train,
            frozen_stage1=frozen,
            cfg=cfg.train[name],
            val_data=val,
            out_dir=out_dir,
            cascade_cfg=cfg.cascade,
        )
    print(f"{name}: best val dice {report.best_val_dice} at epoch {report.best_epoch}; {report.wall_time:.0f}s")
    return 0


def _all_members(layout: Layout, cfg: RunConfig) -> Dict[str, SegmentationModel]:
    names = [n for n, k in STAGE2_MEMBERS.items() if any(m.kind is k for m in cfg.cascade.stage2.members)]
    return {n: _load_member(layout, n) for n in names}


def _find_case(layout: Layout, case_id: str):
    manifest = load_manifest(_require(layout.manifest, "preprocess"))
    try:
        return load_case(manifest.get(case_id))
    except KeyError as e:
        raise ConfigError(str(e.args[0])) from None


def cmd_infer(args) -> int:
    cfg = _frozen_config(load_config(args.config))
    layout = Layout(cfg.output_dir)
    case = _find_case(layout, args.case)
    stage1, members = _load_stage1(layout), _all_members(layout, cfg)
    with run_lock(layout.root):
        res = run_cascade(case, stage1, members, cfg.cascade)
        out = layout.predictions / f"{case.id}_mask.nii.gz"
        save_mask(res.final_mask, case.ct, out)
        if args.save_probs:
            save_volume(res.fused_prob, layout.predictions / f"{case.id}_prob.nii.gz")
            save_volume(res.stage1_prob, layout.predictions / f"{case.id}_stage1_prob.nii.gz")
            for name, prob in res.member_probs.items():
                save_volume(prob, layout.predictions / f"{case.id}_{name}_prob.nii.gz")
    print(out)
    return 0


def cmd_evaluate(args) -> int:
    cfg = _frozen_config(load_config(args.config))
    layout = Layout(cfg.output_dir)
    val = load_manifest(_require(layout.val_split, "split"))
    stage1, members = _load_stage1(layout), _all_members(layout, cfg)
    with run_lock(layout.root):
        report = evaluate(val, stage1, members, cfg.cascade, mask_dir=layout.evaluation / "masks")
        report.save(layout.evaluation / "report.json", layout.evaluation / "report.txt")
        save_config(cfg, layout.evaluation / RUN_CONFIG_NAME)
    print(report.table(), end="")
    return 0


def cmd_overlay(args) -> int:
    cfg = _frozen_config(load_config(args.config))
    layout = Layout(cfg.output_dir)
    case = _find_case(layout, args.case)
    spec = OverlaySpec(slice_axis=args.axis, slice_index=args.slice)
    stage1, members = _load_stage1(layout), _all_members(layout, cfg)
    with run_lock(layout.root):
        res = run_cascade(case, stage1, members, cfg.cascade)
        out = layout.overlays / f"{case.id}_{spec.slice_axis.value.lower()}_{str(args.slice).lower()}.png"
        render_overlay(case, res.final_mask, spec, out)
    print(out)
    return 0


# --- argument parsing ---------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="petct", description="Cascaded PET/CT lesion segmentation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-config", help="write a default run config")
    p.add_argument("--out", required=True)
    p.add_argument("--preset", default="TOY", choices=["TOY", "PAPER", "toy", "paper"])
    p.add_argument("--data-root")
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_init_config)

    p = sub.add_parser("phantoms", help="generate a synthetic phantom dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--healthy", type=int, default=0, help="number of lesion-free cases")
    p.set_defaults(func=cmd_phantoms)

    def with_config(name, func, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", required=True)
        p.set_defaults(func=func)
        return p

    with_config("preprocess", cmd_preprocess, "resample + normalize, freeze the target spacing")
    with_config("split", cmd_split, "write train/val manifests")
    p = with_config("train", cmd_train, "train stage 1 or one stage-2 member")
    p.add_argument("stage", choices=["stage1", "stage2"])
    p.add_argument("--member", choices=sorted(STAGE2_MEMBERS))
    p = with_config("infer", cmd_infer, "run the cascade on one case")
    p.add_argument("--case", required=True)
    p.add_argument("--save-probs", action="store_true")
    with_config("evaluate", cmd_evaluate, "score the validation split")
    p = with_config("overlay", cmd_overlay, "render a ground-truth/prediction overlay")
    p.add_argument("--case", required=True)
    p.add_argument("--axis", default="z", choices=["x", "y", "z", "X", "Y", "Z"])
    p.add_argument("--slice", default="auto")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(message)s",
    )
    try:
        return args.func(args)
    except (FormatError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ValueError, IndexError, RuntimeError) as e:
        # ContractError, ConfigError, EmptyDatasetError, GenerationError, LockedError
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
