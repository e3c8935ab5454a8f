import json
from collections import deque

import nibabel as nib
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from petct_cascade.core import ContractError, FormatError, Volume, VolumeKind
from petct_cascade.dataio import (
    EmptyDatasetError,
    GenerationError,
    Manifest,
    ManifestEntry,
    PhantomSpec,
    generate_phantom,
    load_case,
    load_manifest,
    load_volume,
    save_case,
    save_manifest,
    save_mask,
    split_manifest,
)


def flood_fill_components(mask: np.ndarray) -> int:
    """Count 6-connected components by breadth-first search."""
    seen = np.zeros(mask.shape, dtype=bool)
    count = 0
    for start in zip(*np.nonzero(mask)):
        if seen[start]:
            continue
        count += 1
        seen[start] = True
        queue = deque([start])
        while queue:
            x, y, z = queue.popleft()
            for dx, dy, dz in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                n = (x + dx, y + dy, z + dz)
                if all(0 <= n[i] < mask.shape[i] for i in range(3)) and mask[n] and not seen[n]:
                    seen[n] = True
                    queue.append(n)
    return count


@pytest.fixture(scope="module")
def phantom():
    return generate_phantom(PhantomSpec(shape=(64, 64, 48), n_lesions=2, seed=3, case_id="p0"))


def test_phantom_round_trip_bit_exact(phantom, tmp_path):
    entry = save_case(phantom, tmp_path)
    back = load_case(entry)
    for a, b in ((phantom.ct, back.ct), (phantom.pet, back.pet), (phantom.label, back.label)):
        assert np.array_equal(a.voxels, b.voxels)
        assert a.spacing == b.spacing
    assert back.id == phantom.id


def test_entry_without_label_loads_none(phantom, tmp_path):
    entry = save_case(phantom, tmp_path)
    from dataclasses import replace

    assert load_case(replace(entry, label_path=None)).label is None


def test_label_with_value_two_is_format_error(tmp_path):
    arr = np.zeros((4, 4, 4), dtype=np.float32)
    arr[1, 1, 1] = 2
    path = tmp_path / "bad.nii.gz"
    nib.save(nib.Nifti1Image(arr, np.eye(4)), str(path))
    with pytest.raises(FormatError):
        load_volume(path, VolumeKind.MASK)


def test_missing_file_is_io_error(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_volume(tmp_path / "nope.nii.gz", VolumeKind.CT)


def test_nonpositive_spacing_is_format_error(tmp_path):
    img = nib.Nifti1Image(np.zeros((3, 3, 3), dtype=np.float32), np.eye(4))
    img.header.set_zooms((1.0, 0.0, 1.0))
    path = tmp_path / "flat.nii.gz"
    nib.save(img, str(path))
    with pytest.raises(FormatError):
        load_volume(path, VolumeKind.CT)


def test_garbage_file_is_format_error(tmp_path):
    path = tmp_path / "junk.nii.gz"
    path.write_bytes(b"not an image")
    with pytest.raises(FormatError):
        load_volume(path, VolumeKind.CT)


def test_load_reorients_to_canonical(tmp_path):
    arr = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    flipped = np.diag([-1.0, 1.0, 1.0, 1.0])
    path = tmp_path / "lps.nii.gz"
    nib.save(nib.Nifti1Image(arr, flipped), str(path))
    v = load_volume(path, VolumeKind.CT)
    assert np.array_equal(v.voxels, arr[::-1])


@pytest.mark.parametrize("fill", [0, 1])
def test_save_mask_round_trip(tmp_path, fill):
    ref = Volume(np.zeros((5, 6, 7)), (1.5, 2.0, 2.5), VolumeKind.CT)
    arr = np.full((5, 6, 7), fill, dtype=np.float32)
    arr[0, 0, 0] = 1 - fill
    mask = Volume(arr, ref.spacing, VolumeKind.MASK)
    save_mask(mask, ref, tmp_path / "m.nii.gz")
    back = load_volume(tmp_path / "m.nii.gz", VolumeKind.MASK)
    assert np.array_equal(back.voxels, mask.voxels)
    assert back.spacing == ref.spacing


def test_save_mask_grid_mismatch(tmp_path):
    ref = Volume(np.zeros((5, 6, 7)), (1, 1, 1), VolumeKind.CT)
    mask = Volume(np.zeros((5, 6, 8)), (1, 1, 1), VolumeKind.MASK)
    with pytest.raises(ContractError):
        save_mask(mask, ref, tmp_path / "m.nii.gz")


def test_phantom_deterministic():
    spec = PhantomSpec(shape=(64, 64, 64), seed=11)
    a, b = generate_phantom(spec), generate_phantom(spec)
    for x, y in ((a.ct, b.ct), (a.pet, b.pet), (a.label, b.label)):
        assert np.array_equal(x.voxels, y.voxels)


def test_healthy_phantom_has_empty_label():
    case = generate_phantom(PhantomSpec(shape=(64, 64, 64), n_lesions=0, seed=1))
    assert case.label is not None
    assert case.label.voxels.sum() == 0


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_three_lesions_are_three_components(seed):
    spec = PhantomSpec(shape=(64, 64, 64), n_lesions=3, seed=seed)
    label = generate_phantom(spec).label.voxels > 0
    r_min, s = spec.lesion_radius_range[0], spec.spacing[0]
    assert label.sum() >= 3 * (4 / 3) * np.pi * (r_min / s) ** 3 * 0.5
    assert flood_fill_components(label) == 3


def test_lesions_inside_body(phantom):
    body = phantom.ct.voxels > -500
    assert np.all(body[phantom.label.voxels > 0])


def test_hot_organs_outside_label():
    case = generate_phantom(PhantomSpec(shape=(64, 64, 64), n_lesions=2, n_hot_organs=2, seed=5))
    # organ voxels carry uptake >= 6 * 0.6 even after noise; some must lie outside the label
    hot = case.pet.voxels > 3.0
    assert (hot & (case.label.voxels == 0)).sum() > 100


def test_unplaceable_lesions_raise():
    spec = PhantomSpec(shape=(16, 16, 16), n_lesions=5, lesion_radius_range=(9.0, 10.0), seed=0)
    with pytest.raises(GenerationError):
        generate_phantom(spec)


@pytest.mark.parametrize("kw", [dict(lesion_radius_range=(5, 2)), dict(n_lesions=-1), dict(lesion_radius_range=(0, 2))])
def test_phantom_spec_validation(kw):
    with pytest.raises(ValueError):
        PhantomSpec(**kw)


def _entries(n, healthy=(), retracted=()):
    return Manifest(
        tuple(
            ManifestEntry(
                f"c{i:02d}",
                "ct",
                "pet",
                "lab",
                lesion_voxels=0 if i in healthy else 10,
                retracted=i in retracted,
            )
            for i in range(n)
        )
    )


def test_split_ten_eligible():
    train, val = split_manifest(_entries(10), 0.8, 0)
    assert (len(train), len(val)) == (8, 2)


def test_split_excludes_healthy():
    train, val = split_manifest(_entries(10, healthy={1, 3, 5, 7}), 0.8, 0)
    assert (len(train), len(val)) == (4, 2)


def test_split_same_seed_same_partition():
    m = _entries(12)
    assert split_manifest(m, 0.7, 4) == split_manifest(m, 0.7, 4)


def test_split_all_excluded():
    with pytest.raises(EmptyDatasetError):
        split_manifest(_entries(3, healthy={0, 1}, retracted={2}), 0.8, 0)


@pytest.mark.parametrize("ratio", [0, 1, 1.5])
def test_split_ratio_bounds(ratio):
    with pytest.raises(ValueError):
        split_manifest(_entries(4), ratio, 0)


@settings(max_examples=100, deadline=None)
@given(
    flags=st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=30),
    ratio=st.floats(0.05, 0.95),
    seed=st.integers(0, 2**32 - 1),
)
def test_split_properties(flags, ratio, seed):
    healthy = {i for i, (h, _) in enumerate(flags) if h}
    retracted = {i for i, (_, r) in enumerate(flags) if r}
    m = _entries(len(flags), healthy, retracted)
    eligible = {e.case_id for e in m if e.lesion_voxels and not e.retracted}
    if not eligible:
        with pytest.raises(EmptyDatasetError):
            split_manifest(m, ratio, seed)
        return
    train, val = split_manifest(m, ratio, seed)
    t, v = {e.case_id for e in train}, {e.case_id for e in val}
    assert not t & v
    assert t | v == eligible
    assert len(t) == int(np.floor(ratio * len(eligible)))
    assert not any(e.retracted for e in (*train, *val))


def test_duplicate_ids_rejected():
    e = ManifestEntry("a", "ct", "pet")
    with pytest.raises(FormatError):
        Manifest((e, e))


def test_manifest_ignores_unknown_fields_and_resolves_paths(tmp_path):
    doc = {
        "version": "1.1",
        "entries": [{"case_id": "x", "ct_path": "cases/x_ct.nii.gz", "pet_path": "cases/x_pet.nii.gz", "extra": 1}],
    }
    (tmp_path / "manifest.json").write_text(json.dumps(doc))
    m = load_manifest(tmp_path / "manifest.json")
    assert m.get("x").ct_path == str(tmp_path / "cases/x_ct.nii.gz")
    assert m.get("x").label_path is None


def test_manifest_json_round_trip(tmp_path):
    m = Manifest((ManifestEntry("a", "/a_ct", "/a_pet", "/a_lab", lesion_voxels=4, spacing=(1, 2, 3)),))
    save_manifest(m, tmp_path / "m.json")
    assert load_manifest(tmp_path / "m.json") == m
