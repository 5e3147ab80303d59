import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from segcyclegan.dataset import (RANGE_NORMALIZED, DatasetError, DatasetManifest, ImageSample, ManifestEntry,
                                 ManifestError, SegMask, SplitSpec, augment_rotations, build_manifest,
                                 crop_tiles, denormalize, filter_min_target_pixels, normalize, parse_angles,
                                 preprocess_directory, rotate_pair, save_image, save_mask, tile_origins)

from oracles import tile_count_formula


def sample(h, w=None, c=3, seed=0):
    rng = np.random.default_rng(seed)
    return ImageSample(rng.integers(0, 256, size=(c, h, w or h)).astype(np.float32), source_id="s")


def test_crop_800_gives_16_tiles():
    tiles = crop_tiles(sample(800))
    assert len(tiles) == 16
    assert sorted({t.tile_origin[0] for t in tiles}) == [0, 205, 410, 544]
    assert all(t.pixels.shape == (3, 256, 256) for t in tiles)


def test_crop_window_equals_image():
    tiles = crop_tiles(sample(256))
    assert len(tiles) == 1 and tiles[0].tile_origin == (0, 0)


def test_crop_461_dedups_clamped_origin():
    assert tile_origins(461) == [0, 205]
    assert len(crop_tiles(sample(461))) == 4


def test_crop_too_small():
    with pytest.raises(DatasetError):
        crop_tiles(sample(200))


def test_crop_masks_share_origins():
    img = sample(600, 500)
    labels = np.zeros((600, 500), dtype=np.int64)
    labels[300:310, 250:260] = 1
    pairs = crop_tiles(img, mask=SegMask(labels))
    for tile, m in pairs:
        r, c = tile.tile_origin
        np.testing.assert_array_equal(m.labels, labels[r:r + 256, c:c + 256])
        np.testing.assert_array_equal(tile.pixels, img.pixels[:, r:r + 256, c:c + 256])


def test_tile_count_formula_all_dims():
    for dim in range(256, 1025):
        assert len(tile_origins(dim)) == tile_count_formula(dim), dim


@settings(max_examples=40, deadline=None)
@given(st.integers(256, 700), st.integers(256, 700))
def test_tiles_cover_image(h, w):
    covered = np.zeros((h, w), dtype=bool)
    for r in tile_origins(h):
        for c in tile_origins(w):
            covered[r:r + 256, c:c + 256] = True
    assert covered.all()


@pytest.mark.parametrize("count,keep", [(95, True), (94, False), (0, False)])
def test_filter_boundary(count, keep):
    labels = np.zeros((256, 256), dtype=np.int64)
    labels.ravel()[:count] = 1
    assert sum(int(v == 1) for v in labels.ravel()) == count
    assert filter_min_target_pixels(sample(256), SegMask(labels)) is keep


def test_filter_misaligned():
    with pytest.raises(DatasetError):
        filter_min_target_pixels(sample(256), SegMask(np.zeros((128, 128), dtype=np.int64)))


def test_augment_ten_pairs_and_mask_closure():
    img = sample(64)
    labels = np.zeros((64, 64), dtype=np.int64)
    labels[20:40, 25:35] = 1
    out = augment_rotations(img, SegMask(labels))
    assert len(out) == 10
    assert [o.rotation_deg for o, _ in out] == [0, 10, 30, 50, 70, 90, 110, 130, 150, 170]
    for o, m in out:
        assert set(np.unique(m.labels)) <= {0, 1}
        assert o.pixels.shape == img.pixels.shape
        assert np.isfinite(o.pixels).all()


def test_rotation_zero_is_identity():
    img = sample(32)
    m = SegMask(np.eye(32, dtype=np.int64))
    r, rm = rotate_pair(img, m, 0)
    assert np.array_equal(r.pixels, img.pixels)
    assert np.array_equal(rm.labels, m.labels)


def test_rotation_90_moves_single_pixel():
    n = 16
    labels = np.zeros((n, n), dtype=np.int64)
    labels[0, 0] = 1
    _, rm = rotate_pair(sample(n), SegMask(labels), 90)
    # counter-clockwise quarter turn: (r, c) -> (n - 1 - c, r)
    expected = np.zeros_like(labels)
    for r in range(n):
        for c in range(n):
            if labels[r, c]:
                expected[n - 1 - c, r] = 1
    assert np.array_equal(rm.labels, expected)
    assert rm.labels.sum() == 1


def test_rotation_non_square_rejected():
    with pytest.raises(DatasetError):
        augment_rotations(sample(32, 48), None)


def test_parse_angles():
    assert parse_angles("10:170:20") == [10, 30, 50, 70, 90, 110, 130, 150, 170]
    assert parse_angles("none") == []
    assert parse_angles("45,90") == [45, 90]


@pytest.mark.parametrize("v,expected", [(0, -1.0), (255, 1.0), (127.5, 0.0)])
def test_normalize_values(v, expected):
    s = ImageSample(np.full((1, 2, 2), v, dtype=np.float32))
    out = normalize(s)
    assert out.range_tag == RANGE_NORMALIZED
    assert np.all(out.pixels == np.float32(expected))


def test_normalize_twice_rejected():
    with pytest.raises(DatasetError):
        normalize(normalize(sample(4)))


def test_normalize_roundtrip_within_quantum():
    s = ImageSample(np.arange(256, dtype=np.float32).reshape(1, 16, 16))
    back = denormalize(normalize(s))
    assert np.max(np.abs(back.pixels - s.pixels)) <= 1.0
    assert np.array_equal(back.pixels, s.pixels)


def _write_corpus(root, n, paired=True, masks=("SAR", "OPT")):
    rng = np.random.default_rng(0)
    for domain in ("SAR", "OPT"):
        (root / domain / "images").mkdir(parents=True)
        if domain in masks:
            (root / domain / "masks").mkdir(parents=True)
        for i in range(n):
            name = f"{i:03d}.png" if paired else f"{domain}{i:03d}.png"
            save_image(ImageSample(rng.integers(0, 256, (3, 8, 8)).astype(np.float32)),
                       root / domain / "images" / name)
            if domain in masks:
                save_mask(SegMask(rng.integers(0, 2, (8, 8))), root / domain / "masks" / name)


def test_manifest_deterministic(tmp_path):
    _write_corpus(tmp_path, 12)
    a = build_manifest(tmp_path, seed=3).dumps()
    b = build_manifest(tmp_path, seed=3).dumps()
    assert a == b
    assert DatasetManifest.loads(a).dumps() == a


def test_manifest_unpaired_shuffles(tmp_path):
    _write_corpus(tmp_path, 12)
    m = build_manifest(tmp_path, SplitSpec(test_fraction=0.0), seed=5)
    sar = [e.image_path.split("/")[-1] for e in m.entries if e.domain == "SAR"]
    opt = [e.image_path.split("/")[-1] for e in m.entries if e.domain == "OPT"]
    assert sorted(sar) == sorted(opt)
    assert sar != opt


def test_manifest_paired_keeps_order(tmp_path):
    _write_corpus(tmp_path, 12)
    m = build_manifest(tmp_path, SplitSpec(unpaired=False), seed=5)
    sar = [(e.image_path.split("/")[-1], e.split) for e in m.entries if e.domain == "SAR"]
    opt = [(e.image_path.split("/")[-1], e.split) for e in m.entries if e.domain == "OPT"]
    assert sar == opt


def test_manifest_empty_root(tmp_path):
    with pytest.raises(ManifestError):
        build_manifest(tmp_path)


def test_manifest_missing_masks_listed(tmp_path):
    _write_corpus(tmp_path, 3, masks=("OPT",))
    with pytest.raises(ManifestError, match="SAR/images/000.png"):
        build_manifest(tmp_path, SplitSpec(require_masks=("SAR",)))


def test_manifest_duplicate_entries_rejected():
    e = ManifestEntry("a.png", None, "train", "SAR")
    with pytest.raises(ManifestError):
        DatasetManifest([e, e], seed=0)


def test_manifest_file_format(tmp_path):
    _write_corpus(tmp_path, 4, masks=("OPT",))
    text = build_manifest(tmp_path, seed=1).dumps()
    lines = text.splitlines()
    assert lines[0] == "# seed: 1" and lines[1].startswith("# preprocessing:")
    fields = lines[2].split("\t")
    assert len(fields) == 4 and fields[1] == "-" and fields[3] == "SAR"


def test_preprocess_directory(tmp_path):
    src = tmp_path / "in"
    (src / "images").mkdir(parents=True)
    (src / "masks").mkdir()
    labels = np.zeros((461, 461), dtype=np.int64)
    labels[10:30, 10:30] = 1  # 400 pixels, only in the (0, 0) tile
    save_image(sample(461), src / "images" / "a.png")
    save_mask(SegMask(labels), src / "masks" / "a.png")
    rec = preprocess_directory(src, tmp_path / "out", angles=[90])
    assert rec["counts"] == {"source_images": 1, "tiles": 4, "dropped": 3, "written": 2}
    assert sorted(p.name for p in (tmp_path / "out" / "images").iterdir()) == \
        ["a_r0_c0_rot000.png", "a_r0_c0_rot090.png"]
