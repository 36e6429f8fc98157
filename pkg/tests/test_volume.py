import json

import numpy as np
import pytest

from lungood.volume import (
    CohortManifest,
    LungMask,
    ManifestEntry,
    Patch,
    Volume,
    emphysema_fraction,
    extract_patch_grid,
    label_patch_normality,
    load_manifest,
    load_mask,
    load_volume,
    read_patch_store,
    subsample_patches,
    write_manifest,
    write_mask,
    write_patch_store,
    write_volume,
)


def full_mask(dims):
    return LungMask(data=np.ones(dims, dtype=np.uint8))


def make_volume(fill=-1000, dims=(8, 8, 8), channels=1):
    data = np.full((channels, *dims), fill, dtype=np.int16)
    return Volume(data=data, spacing=(1.0, 1.0, 1.0))


# -- VOL1 I/O ---------------------------------------------------------------


def test_load_constant_volume(tmp_path):
    payload = np.full(64, -1000, dtype="<i2").tobytes()
    assert len(payload) == 128
    (tmp_path / "v.vol1.raw").write_bytes(payload)
    sidecar = {
        "dims": [4, 4, 4],
        "spacing": [1.0, 1.0, 1.5],
        "channels": 1,
        "dtype": "i16le",
        "payload": "v.vol1.raw",
    }
    (tmp_path / "v.vol1.json").write_text(json.dumps(sidecar))
    vol = load_volume(tmp_path / "v.vol1.json")
    assert vol.dims == (4, 4, 4)
    assert vol.spacing == (1.0, 1.0, 1.5)
    assert np.all(vol.data == -1000)


def test_load_volume_payload_size_mismatch(tmp_path):
    (tmp_path / "v.vol1.raw").write_bytes(b"\x00" * 100)
    sidecar = {
        "dims": [4, 4, 4],
        "spacing": [1, 1, 1],
        "channels": 1,
        "dtype": "i16le",
        "payload": "v.vol1.raw",
    }
    (tmp_path / "v.vol1.json").write_text(json.dumps(sidecar))
    with pytest.raises(ValueError, match="payload size mismatch"):
        load_volume(tmp_path / "v.vol1.json")


def test_load_volume_clamps_out_of_range(tmp_path):
    vals = np.full(64, -1000, dtype="<i2")
    vals[0] = -2000
    vals[1] = 3200
    (tmp_path / "v.vol1.raw").write_bytes(vals.tobytes())
    sidecar = {
        "dims": [4, 4, 4],
        "spacing": [1, 1, 1],
        "channels": 1,
        "dtype": "i16le",
        "payload": "v.vol1.raw",
    }
    (tmp_path / "v.vol1.json").write_text(json.dumps(sidecar))
    vol = load_volume(tmp_path / "v.vol1.json")
    assert vol.data.min() == -1024
    assert vol.data.max() == 3071


def test_load_volume_missing_and_corrupt_sidecar(tmp_path):
    with pytest.raises(FileNotFoundError, match="missing sidecar"):
        load_volume(tmp_path / "nope.vol1.json")
    (tmp_path / "bad.vol1.json").write_text("{not json")
    with pytest.raises(ValueError, match="corrupt sidecar"):
        load_volume(tmp_path / "bad.vol1.json")


def test_load_volume_rejects_nonpositive_spacing(tmp_path):
    (tmp_path / "v.vol1.raw").write_bytes(np.zeros(8, dtype="<i2").tobytes())
    sidecar = {
        "dims": [2, 2, 2],
        "spacing": [1, 0, 1],
        "channels": 1,
        "dtype": "i16le",
        "payload": "v.vol1.raw",
    }
    (tmp_path / "v.vol1.json").write_text(json.dumps(sidecar))
    with pytest.raises(ValueError, match="spacing"):
        load_volume(tmp_path / "v.vol1.json")


def test_volume_round_trip_preserves_layout(tmp_path):
    rng = np.random.default_rng(0)
    data = rng.integers(-1024, 3072, size=(2, 5, 4, 3)).astype(np.int16)
    vol = Volume(data=data, spacing=(0.7, 0.7, 1.2))
    write_volume(vol, tmp_path / "x")
    back = load_volume(tmp_path / "x.vol1.json")
    assert back.spacing == vol.spacing
    assert np.array_equal(back.data, vol.data)
    # payload is channel-major then z, y, x: the first voxel row on disk
    # walks the x axis of channel 0 at y=z=0
    raw = np.frombuffer((tmp_path / "x.vol1.raw").read_bytes(), dtype="<i2")
    assert np.array_equal(raw[:5], vol.data[0, :, 0, 0])


def test_mask_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    mask = LungMask(data=(rng.random((4, 6, 5)) < 0.5).astype(np.uint8))
    write_mask(mask, tmp_path / "m")
    back = load_mask(tmp_path / "m.vol1.json")
    assert np.array_equal(back.data, mask.data)


# -- emphysema quantification ------------------------------------------------


def test_emphysema_all_below_threshold():
    vol = make_volume(-1000)
    assert emphysema_fraction(vol, full_mask(vol.dims)) == 1.0


def test_emphysema_none_below_threshold():
    vol = make_volume(-800)
    assert emphysema_fraction(vol, full_mask(vol.dims)) == 0.0


def test_emphysema_counting_oracle():
    # 10 lung voxels: 3 at -960 and 7 at -900; direct count gives 0.3
    values = np.array([-960] * 3 + [-900] * 7, dtype=np.int16)
    data = np.full((1, 10, 1, 1), 0, dtype=np.int16)
    data[0, :, 0, 0] = values
    vol = Volume(data=data, spacing=(1, 1, 1))
    mask = full_mask((10, 1, 1))
    oracle = sum(1 for v in values if v < -950) / len(values)
    assert emphysema_fraction(vol, mask) == oracle == 0.3


def test_emphysema_empty_mask_errors():
    vol = make_volume(-1000)
    empty = LungMask(data=np.zeros(vol.dims, dtype=np.uint8))
    with pytest.raises(ValueError, match="no lung voxels"):
        emphysema_fraction(vol, empty)


def test_emphysema_invariant_under_storage_order():
    rng = np.random.default_rng(7)
    flat = rng.integers(-1024, 0, size=216).astype(np.int16)
    shuffled = rng.permutation(flat)
    v1 = Volume(data=flat.reshape(1, 6, 6, 6), spacing=(1, 1, 1))
    v2 = Volume(data=shuffled.reshape(1, 6, 6, 6), spacing=(1, 1, 1))
    m = full_mask((6, 6, 6))
    assert emphysema_fraction(v1, m) == emphysema_fraction(v2, m)


# -- patch grid ---------------------------------------------------------------


def oracle_starts(dim, patch, overlap):
    """Enumerate grid starts by the stated stride/clamp/dedup rule."""
    stride = max(1, int(np.floor(patch * (1 - overlap))))
    starts = []
    k = 0
    while True:
        s = min(k * stride, dim - patch)
        starts.append(s)
        if s == dim - patch:
            break
        k += 1
    return sorted(set(starts))


def test_grid_64_cube_no_overlap():
    vol = make_volume(-800, dims=(64, 64, 64))
    patches = extract_patch_grid(vol, full_mask(vol.dims), 32, 0.0, 0.0)
    assert len(patches) == 8
    assert sorted({p.origin[0] for p in patches}) == [0, 32]


def test_grid_64_cube_20_percent_overlap():
    vol = make_volume(-800, dims=(64, 64, 64))
    patches = extract_patch_grid(vol, full_mask(vol.dims), 32, 0.2, 0.0)
    expected = oracle_starts(64, 32, 0.2)
    assert expected == [0, 25, 32]
    assert len(patches) == len(expected) ** 3 == 27
    assert sorted({p.origin[2] for p in patches}) == expected


@pytest.mark.parametrize("dims", [(40, 50, 33), (32, 64, 100)])
@pytest.mark.parametrize("overlap", [0.0, 0.2, 0.5])
def test_grid_matches_oracle_enumeration(dims, overlap):
    vol = make_volume(-800, dims=dims)
    patches = extract_patch_grid(vol, full_mask(dims), 32, overlap, 0.0)
    origins = {p.origin for p in patches}
    expected = {
        (x, y, z)
        for x in oracle_starts(dims[0], 32, overlap)
        for y in oracle_starts(dims[1], 32, overlap)
        for z in oracle_starts(dims[2], 32, overlap)
    }
    assert origins == expected


def test_grid_empty_mask_yields_nothing():
    vol = make_volume(-800, dims=(64, 64, 64))
    empty = LungMask(data=np.zeros(vol.dims, dtype=np.uint8))
    assert extract_patch_grid(vol, empty, 32, 0.0, 0.5) == []


def test_grid_rejects_oversized_patch():
    vol = make_volume(-800, dims=(16, 16, 16))
    with pytest.raises(ValueError, match="patch_size"):
        extract_patch_grid(vol, full_mask(vol.dims), 32, 0.0, 0.5)


def test_grid_covers_every_voxel_with_zero_min_coverage():
    rng = np.random.default_rng(3)
    for _ in range(5):
        dims = tuple(int(rng.integers(12, 40)) for _ in range(3))
        p = int(rng.integers(4, min(dims) + 1))
        overlap = float(rng.choice([0.0, 0.2]))
        vol = make_volume(-800, dims=dims)
        patches = extract_patch_grid(vol, full_mask(dims), p, overlap, 0.0)
        covered = np.zeros(dims, dtype=int)
        for patch in patches:
            x, y, z = patch.origin
            covered[x : x + p, y : y + p, z : z + p] += 1
        assert covered.min() >= 1


def test_grid_overlap_monotonicity():
    rng = np.random.default_rng(5)
    dims = (48, 40, 36)
    mask = LungMask(data=(rng.random(dims) < 0.6).astype(np.uint8))
    vol = make_volume(-800, dims=dims)
    n0 = len(extract_patch_grid(vol, mask, 16, 0.0, 0.3))
    n2 = len(extract_patch_grid(vol, mask, 16, 0.2, 0.3))
    assert n2 >= n0


def test_grid_populates_patch_emphysema():
    dims = (16, 16, 16)
    data = np.full((1, *dims), -800, dtype=np.int16)
    data[0, :8, :8, :8] = -1000  # one octant is all low attenuation
    vol = Volume(data=data, spacing=(1, 1, 1))
    patches = extract_patch_grid(vol, full_mask(dims), 8, 0.0, 0.0)
    by_origin = {p.origin: p for p in patches}
    assert by_origin[(0, 0, 0)].emphysema_fraction == 1.0
    assert by_origin[(8, 8, 8)].emphysema_fraction == 0.0


# -- normality and subsampling -----------------------------------------------


def make_patch(frac):
    return Patch(
        data=np.zeros((1, 2, 2, 2), dtype=np.int16),
        origin=(0, 0, 0),
        mask_coverage=1.0,
        emphysema_fraction=frac,
    )


def test_label_patch_normality_threshold():
    assert label_patch_normality(make_patch(0.005), "healthy") is True
    assert label_patch_normality(make_patch(0.02), "healthy") is False
    assert label_patch_normality(make_patch(0.01), "healthy") is False  # strict <


def test_label_patch_normality_diseased_always_false():
    for frac in (0.0, 0.005, 0.5):
        assert label_patch_normality(make_patch(frac), "diseased") is False


def test_subsample_under_cap_identity():
    patches = [make_patch(i / 100) for i in range(80)]
    out = subsample_patches(patches, max_n=100, seed=1)
    assert out == patches


def test_subsample_caps_and_preserves_order():
    patches = [make_patch(i / 1000) for i in range(319)]
    out = subsample_patches(patches, max_n=100, seed=9)
    assert len(out) == 100
    fracs = [p.emphysema_fraction for p in out]
    assert fracs == sorted(fracs)  # original relative order kept


def test_subsample_deterministic():
    patches = [make_patch(i / 1000) for i in range(319)]
    a = subsample_patches(patches, max_n=100, seed=42)
    b = subsample_patches(patches, max_n=100, seed=42)
    assert [p.emphysema_fraction for p in a] == [p.emphysema_fraction for p in b]
    c = subsample_patches(patches, max_n=100, seed=43)
    assert [p.emphysema_fraction for p in c] != [p.emphysema_fraction for p in a]


# -- manifest and patch stores -----------------------------------------------


def test_manifest_round_trip_and_validation(tmp_path):
    vol = make_volume(-900, dims=(4, 4, 4))
    mask = full_mask((4, 4, 4))
    write_volume(vol, tmp_path / "p0")
    write_mask(mask, tmp_path / "p0_mask")
    entries = [ManifestEntry("p0", "p0.vol1.json", "p0_mask.vol1.json", "healthy", "train")]
    write_manifest(CohortManifest(entries=entries, root=tmp_path), tmp_path / "manifest.json")
    manifest = load_manifest(tmp_path / "manifest.json")
    assert manifest.entries[0].patient_id == "p0"

    bad = {"patients": [{"patient_id": "p9", "volume": "nope.vol1.json", "mask": "nah.vol1.json", "label": "healthy", "split": "train"}]}
    (tmp_path / "bad.json").write_text(json.dumps(bad))
    with pytest.raises(FileNotFoundError, match="missing file"):
        load_manifest(tmp_path / "bad.json")


def test_manifest_rejects_duplicate_ids():
    e = ManifestEntry("p0", "a", "b", "healthy", "train")
    with pytest.raises(ValueError, match="unique"):
        CohortManifest(entries=[e, e])


def test_patch_store_round_trip(tmp_path):
    rng = np.random.default_rng(11)
    patches = []
    for i in range(3):
        patches.append(
            Patch(
                data=rng.integers(-1024, 500, size=(2, 4, 4, 4)).astype(np.int16),
                origin=(i, 2 * i, 0),
                mask_coverage=0.5 + 0.1 * i,
                emphysema_fraction=0.005 * i,
                patient_id="p7",
            )
        )
    write_patch_store(patches, "p7", "healthy", "train", tmp_path)
    meta, back = read_patch_store(tmp_path / "p7.patches.json")
    assert meta["split"] == "train"
    assert meta["normal"] == [True, True, False]  # 0.01 is not < 1%
    for orig, rt in zip(patches, back):
        assert np.array_equal(orig.data, rt.data)
        assert orig.origin == rt.origin
        assert orig.mask_coverage == rt.mask_coverage
