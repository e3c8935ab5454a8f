"""Manifests, NIfTI volume I/O, train/val splitting and synthetic phantoms."""

from __future__ import annotations

import contextlib
import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterator, List, Optional, Tuple

import nibabel as nib
from nibabel.openers import ImageOpener
import numpy as np

from .core import (
    Case,
    ContractError,
    FormatError,
    Spacing3,
    Tracer,
    Volume,
    VolumeKind,
    as_shape3,
)


class EmptyDatasetError(ValueError):
    """Every manifest entry was excluded."""


class GenerationError(RuntimeError):
    """Phantom lesions could not be placed inside the body."""


@dataclass(frozen=True)
class ManifestEntry:
    case_id: str
    ct_path: str
    pet_path: str
    label_path: Optional[str] = None
    tracer: Tracer = Tracer.SYNTHETIC
    dataset_version: str = "1.1"
    retracted: bool = False
    # cached so splitting and spacing statistics never need to open volumes
    lesion_voxels: Optional[int] = None
    spacing: Optional[Spacing3] = None

    def __post_init__(self):
        object.__setattr__(self, "tracer", Tracer(self.tracer))
        if self.spacing is not None:
            object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    def to_json(self) -> dict:
        d = asdict(self)
        d["tracer"] = self.tracer.value
        d["spacing"] = list(self.spacing) if self.spacing is not None else None
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ManifestEntry":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass(frozen=True)
class Manifest:
    entries: Tuple[ManifestEntry, ...]
    version: str = "1.1"

    def __post_init__(self):
        entries = tuple(self.entries)
        ids = [e.case_id for e in entries]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise FormatError(f"duplicate case ids in manifest: {dupes}")
        object.__setattr__(self, "entries", entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[ManifestEntry]:
        return iter(self.entries)

    def get(self, case_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.case_id == case_id:
                return e
        raise KeyError(f"case {case_id!r} not in manifest")

    def to_json(self) -> dict:
        return {"version": self.version, "entries": [e.to_json() for e in self.entries]}

    @classmethod
    def from_json(cls, d: dict) -> "Manifest":
        return cls(
            entries=tuple(ManifestEntry.from_json(e) for e in d.get("entries", [])),
            version=str(d.get("version", "1.1")),
        )


@contextlib.contextmanager
def atomic_path(path, suffix: str = "") -> Iterator[Path]:
    """Yield a temp path in the target directory; rename over ``path`` on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=suffix)
    os.close(fd)
    try:
        yield Path(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def write_json(obj, path) -> None:
    with atomic_path(path) as tmp:
        tmp.write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n")


def save_manifest(manifest: Manifest, path) -> None:
    write_json(manifest.to_json(), path)


def load_manifest(path) -> Manifest:
    """Load a manifest; relative volume paths resolve against the manifest's directory."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: not valid JSON ({e})") from e
    manifest = Manifest.from_json(data)
    base = path.parent
    resolved = []
    for e in manifest.entries:
        resolved.append(
            replace(
                e,
                ct_path=str(base / e.ct_path),
                pet_path=str(base / e.pet_path),
                label_path=None if e.label_path is None else str(base / e.label_path),
            )
        )
    return Manifest(tuple(resolved), manifest.version)


def relativize(manifest: Manifest, base) -> Manifest:
    base = Path(base).resolve()

    def rel(p):
        return None if p is None else os.path.relpath(Path(p).resolve(), base)

    return Manifest(
        tuple(
            replace(e, ct_path=rel(e.ct_path), pet_path=rel(e.pet_path), label_path=rel(e.label_path))
            for e in manifest.entries
        ),
        manifest.version,
    )


# --- volume files ---------------------------------------------------------


def save_volume(volume: Volume, path) -> None:
    sx, sy, sz = volume.spacing
    affine = np.diag([sx, sy, sz, 1.0])
    img = nib.Nifti1Image(np.asarray(volume.voxels, dtype=np.float32), affine)
    img.header.set_xyzt_units("mm")
    with atomic_path(path, suffix=".nii.gz") as tmp:
        nib.save(img, str(tmp))


def load_volume(path, kind: VolumeKind) -> Volume:
    """Read a NIfTI file, reorient to the canonical (RAS) axis order."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"volume file not found: {path}")
    try:
        img = nib.load(str(path))
    except Exception as e:  # nibabel raises a zoo of exception types
        raise FormatError(f"{path}: cannot parse volume ({e})") from e
    if len(img.shape) != 3:
        raise FormatError(f"{path}: expected a 3D image, got shape {img.shape}")
    # nibabel silently replaces zero pixdims with 1 on load; check the raw header
    with ImageOpener(str(path)) as f:
        raw = img.header_class.from_fileobj(f, check=False)
    if "pixdim" in raw and not np.all(raw["pixdim"][1:4] > 0):
        raise FormatError(f"{path}: nonpositive spacing {tuple(float(z) for z in raw['pixdim'][1:4])}")
    img = nib.as_closest_canonical(img)
    zooms = tuple(float(z) for z in img.header.get_zooms()[:3])
    if not all(z > 0 for z in zooms):
        raise FormatError(f"{path}: nonpositive spacing {zooms}")
    data = np.asarray(img.dataobj, dtype=np.float32)
    if kind is VolumeKind.MASK and not np.all((data == 0) | (data == 1)):
        bad = np.unique(data[(data != 0) & (data != 1)])[:5]
        raise FormatError(f"{path}: label values outside {{0, 1}}: {bad.tolist()}")
    return Volume(data, zooms, kind)


def load_case(entry: ManifestEntry) -> Case:
    ct = load_volume(entry.ct_path, VolumeKind.CT)
    pet = load_volume(entry.pet_path, VolumeKind.PET)
    label = None if entry.label_path is None else load_volume(entry.label_path, VolumeKind.MASK)
    return Case(entry.case_id, ct, pet, label, entry.tracer)


def save_mask(mask: Volume, grid_reference: Volume, path) -> None:
    if mask.kind is not VolumeKind.MASK:
        raise ContractError(f"save_mask needs a MASK volume, got {mask.kind.value}")
    if not mask.same_grid(grid_reference):
        raise ContractError(
            f"mask grid {mask.shape}@{mask.spacing} does not match reference "
            f"{grid_reference.shape}@{grid_reference.spacing}"
        )
    save_volume(mask, path)


def save_case(case: Case, directory) -> ManifestEntry:
    """Write a case as three NIfTI files and return its manifest entry."""
    directory = Path(directory)
    ct_path = directory / f"{case.id}_ct.nii.gz"
    pet_path = directory / f"{case.id}_pet.nii.gz"
    save_volume(case.ct, ct_path)
    save_volume(case.pet, pet_path)
    label_path = None
    lesion_voxels = None
    if case.label is not None:
        label_path = directory / f"{case.id}_label.nii.gz"
        save_volume(case.label, label_path)
        lesion_voxels = int(np.count_nonzero(case.label.voxels))
    return ManifestEntry(
        case_id=case.id,
        ct_path=str(ct_path),
        pet_path=str(pet_path),
        label_path=None if label_path is None else str(label_path),
        tracer=case.tracer,
        lesion_voxels=lesion_voxels,
        spacing=case.ct.spacing,
    )


# --- splitting --------------------------------------------------------------


def lesion_voxels(entry: ManifestEntry) -> int:
    if entry.label_path is None:
        return 0
    if entry.lesion_voxels is not None:
        return int(entry.lesion_voxels)
    return int(np.count_nonzero(load_volume(entry.label_path, VolumeKind.MASK).voxels))


def eligible_entries(manifest: Manifest) -> List[ManifestEntry]:
    """Entries kept for training/validation: not retracted and with a non-empty label."""
    return [e for e in manifest if not e.retracted and lesion_voxels(e) > 0]


def split_manifest(manifest: Manifest, ratio: float, seed: int) -> Tuple[Manifest, Manifest]:
    """Random train/val split after dropping retracted and healthy cases.

    The train share is ``floor(ratio * n)``. Eligible entries are ordered by
    case id before shuffling, so the partition depends only on the eligible
    set and the seed.
    """
    if not 0 < ratio < 1:
        raise ValueError(f"split ratio must lie in (0, 1), got {ratio}")
    keep = sorted(eligible_entries(manifest), key=lambda e: e.case_id)
    if not keep:
        raise EmptyDatasetError("no eligible cases: all entries are retracted or healthy")
    order = np.random.default_rng(seed).permutation(len(keep))
    n_train = math.floor(ratio * len(keep))
    train = tuple(keep[i] for i in order[:n_train])
    val = tuple(keep[i] for i in order[n_train:])
    return Manifest(train, manifest.version), Manifest(val, manifest.version)


# --- phantoms ---------------------------------------------------------------


@dataclass(frozen=True)
class PhantomSpec:
    shape: Tuple[int, int, int] = (64, 64, 64)
    spacing: Spacing3 = (2.0, 2.0, 2.0)
    n_lesions: int = 2
    n_hot_organs: int = 2
    lesion_radius_range: Tuple[float, float] = (5.0, 10.0)
    lesion_uptake_range: Tuple[float, float] = (4.0, 8.0)
    organ_radius_range: Tuple[float, float] = (12.0, 20.0)
    organ_uptake_range: Tuple[float, float] = (6.0, 10.0)
    seed: int = 0
    case_id: str = "phantom"
    tracer: Tracer = Tracer.SYNTHETIC

    def __post_init__(self):
        object.__setattr__(self, "shape", as_shape3(self.shape))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if self.n_lesions < 0 or self.n_hot_organs < 0:
            raise ValueError("lesion and organ counts must be >= 0")
        for name in ("lesion_radius_range", "organ_radius_range", "lesion_uptake_range", "organ_uptake_range"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise ValueError(f"{name} must satisfy 0 < min <= max, got {(lo, hi)}")
        if not all(s > 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")


BODY_HU = 40.0
AIR_HU = -1000.0
BONE_HU = 700.0
MAX_PLACEMENT_TRIES = 2000


def _ellipsoid(coords, center, radii) -> np.ndarray:
    x, y, z = coords
    return (
        ((x - center[0]) / radii[0]) ** 2
        + ((y - center[1]) / radii[1]) ** 2
        + ((z - center[2]) / radii[2]) ** 2
    ) <= 1.0


def generate_phantom(spec: PhantomSpec) -> Case:
    """Deterministic synthetic PET/CT case.

    The body is an ellipsoid of soft tissue with a dense rod standing in for
    the spine. PET carries a body background of 1.0, hot organs that are
    larger and brighter than lesions but unlabeled, and the labeled lesions.
    """
    rng = np.random.default_rng(spec.seed)
    nx, ny, nz = spec.shape
    sx, sy, sz = spec.spacing
    # physical coordinates (mm) of voxel centers, origin at the volume center
    ax = [(np.arange(n) - (n - 1) / 2.0) * s for n, s in zip(spec.shape, spec.spacing)]
    coords = np.meshgrid(*ax, indexing="ij", sparse=True)
    extent = [n * s for n, s in zip(spec.shape, spec.spacing)]

    body_radii = (0.42 * extent[0], 0.34 * extent[1], 0.46 * extent[2])
    body = _ellipsoid(coords, (0.0, 0.0, 0.0), body_radii)
    spine_center = (0.0, -0.55 * body_radii[1])
    spine_r = max(0.06 * extent[0], 1.5 * sx)
    spine = ((coords[0] - spine_center[0]) ** 2 + (coords[1] - spine_center[1]) ** 2 <= spine_r**2) & body

    ct = np.full(spec.shape, AIR_HU, dtype=np.float32)
    ct[body] = BODY_HU
    ct[spine] = BONE_HU
    ct += rng.normal(0.0, 10.0, spec.shape).astype(np.float32)

    pet = np.zeros(spec.shape, dtype=np.float32)
    pet[body] = 1.0
    pet[spine] = 0.6

    occupied: List[Tuple[np.ndarray, float]] = []

    def place(radius_range, margin_mm):
        for _ in range(MAX_PLACEMENT_TRIES):
            r = rng.uniform(*radius_range)
            radii = r * rng.uniform(0.8, 1.2, size=3)
            # center must be inside the body shrunk by the largest radius
            center = rng.uniform(-1, 1, size=3) * np.array(body_radii)
            shrunk = np.array(body_radii) - radii.max() - margin_mm
            if np.any(shrunk <= 0) or np.sum((center / shrunk) ** 2) > 1.0:
                continue
            # keep clear of the spine rod along x/y
            if np.hypot(center[0] - spine_center[0], center[1] - spine_center[1]) < spine_r + radii.max() + margin_mm:
                continue
            if any(np.linalg.norm(center - c) < radii.max() + rc + margin_mm for c, rc in occupied):
                continue
            occupied.append((center, radii.max()))
            return center, radii
        raise GenerationError(
            f"could not place a blob of radius {radius_range} inside the body after {MAX_PLACEMENT_TRIES} tries"
        )

    margin = 2.0 * max(spec.spacing)
    organ_mask = np.zeros(spec.shape, dtype=bool)
    for _ in range(spec.n_hot_organs):
        center, radii = place(spec.organ_radius_range, margin)
        region = _ellipsoid(coords, center, radii)
        pet[region] = rng.uniform(*spec.organ_uptake_range)
        ct[region] = BODY_HU + 15.0
        organ_mask |= region

    label = np.zeros(spec.shape, dtype=bool)
    for _ in range(spec.n_lesions):
        center, radii = place(spec.lesion_radius_range, margin)
        region = _ellipsoid(coords, center, radii)
        if not region.any():
            # sub-voxel lesion: mark the voxel nearest its center
            idx = tuple(
                int(np.clip(round(c / s + (n - 1) / 2.0), 0, n - 1))
                for c, s, n in zip(center, spec.spacing, spec.shape)
            )
            region = np.zeros(spec.shape, dtype=bool)
            region[idx] = True
        pet[region] = rng.uniform(*spec.lesion_uptake_range)
        label |= region
    assert not (label & organ_mask).any()

    pet *= rng.normal(1.0, 0.1, spec.shape).astype(np.float32)
    np.clip(pet, 0.0, None, out=pet)

    return Case(
        id=spec.case_id,
        ct=Volume(ct, spec.spacing, VolumeKind.CT),
        pet=Volume(pet, spec.spacing, VolumeKind.PET),
        label=Volume(label.astype(np.float32), spec.spacing, VolumeKind.MASK),
        tracer=spec.tracer,
    )


def generate_dataset(
    n: int,
    out_dir,
    seed: int,
    n_healthy: int = 0,
    shape: Tuple[int, int, int] = (64, 64, 64),
    spacings: Tuple[Spacing3, ...] = ((2.0, 2.0, 2.0), (2.0, 2.0, 2.5)),
) -> Manifest:
    """Write ``n`` phantom cases plus ``manifest.json`` into ``out_dir``.

    The last ``n_healthy`` cases carry no lesions. Per-case parameters come
    from independent child streams of ``seed``.
    """
    out_dir = Path(out_dir)
    case_dir = out_dir / "cases"
    case_dir.mkdir(parents=True, exist_ok=True)
    children = np.random.SeedSequence(seed).spawn(n)
    entries = []
    for i, child in enumerate(children):
        r = np.random.default_rng(child)
        spacing = spacings[int(r.integers(len(spacings)))]
        case_shape = tuple(int(round(n_ * 2.0 / s)) for n_, s in zip(shape, spacing))
        spec = PhantomSpec(
            shape=case_shape,
            spacing=spacing,
            n_lesions=0 if i >= n - n_healthy else int(r.integers(1, 4)),
            n_hot_organs=int(r.integers(1, 4)),
            seed=int(r.integers(2**63 - 1)),
            case_id=f"case_{i:04d}",
        )
        entries.append(save_case(generate_phantom(spec), case_dir))
    manifest = relativize(Manifest(tuple(entries), "1.1"), out_dir)
    save_manifest(manifest, out_dir / "manifest.json")
    return load_manifest(out_dir / "manifest.json")
