import struct
import warnings

import numpy as np
import pytest

from protodiff.data import (ATTRIBUTE_GROUPS, AttributeTable, Dataset,
                            IdxBadMagic, IdxCountMismatch, IdxTruncated,
                            ShapesSpec, gen_shapes, image_grid, load_idx,
                            load_image, save_image)


def test_gen_shapes_deterministic():
    spec = ShapesSpec(n=64, seed=5)
    a = gen_shapes(spec)
    b = gen_shapes(spec)
    assert np.array_equal(a.images, b.images)
    assert np.array_equal(a.attrs.values, b.attrs.values)
    for k in a.splits:
        assert np.array_equal(a.splits[k], b.splits[k])


def test_gen_shapes_ranges_and_shapes():
    ds = gen_shapes(ShapesSpec(n=32, image_size=16))
    assert ds.images.shape == (32, 3, 16, 16)
    assert ds.images.dtype == np.float32
    assert ds.images.min() >= -1.0 and ds.images.max() <= 1.0
    assert ds.attrs.values.shape[0] == 32


def test_gen_shapes_attribute_columns():
    ds = gen_shapes(ShapesSpec(n=200, seed=1))
    names = list(ds.attrs.names)
    assert "shape=square" in names and "color=blue" in names
    assert "size=large" in names and "background=light" in names
    # one-hot groups sum to one
    shape_cols = np.stack([ds.attrs.column(f"shape={v}")
                           for v in ATTRIBUTE_GROUPS["shape"]], axis=1)
    assert (shape_cols.sum(axis=1) == 1).all()


def test_labels_match_rendered_colors():
    # the dominant shape pixels must carry the labeled color channel
    ds = gen_shapes(ShapesSpec(n=60, seed=2, varying=("shape", "color")))
    for i in range(60):
        img = ds.images[i]
        color = ds.attrs.group_label("color")[i]
        bright = img.max(axis=(1, 2))
        assert bright.argmax() == color  # red/green/blue channel order


def test_injection_rho_zero_keeps_attributes_independent():
    ds = gen_shapes(ShapesSpec(n=600, seed=3, varying=("shape", "color"),
                               injections=(("color", "shape", 0.0),)))
    corr = ds.provenance["empirical_correlations"]["color=>shape"]
    assert abs(corr) < 0.05


def test_injection_rho_one_determines_attribute():
    ds = gen_shapes(ShapesSpec(n=400, seed=4, varying=("shape", "color"),
                               injections=(("color", "shape", 1.0),)))
    color = ds.attrs.group_label("color")
    shape = ds.attrs.group_label("shape")
    assert np.array_equal(shape, color)  # aligned cyclic mapping
    assert ds.provenance["empirical_correlations"]["color=>shape"] == pytest.approx(1.0)


def test_injection_intermediate_rho_hits_target():
    ds = gen_shapes(ShapesSpec(n=1000, seed=5, varying=("shape", "color"),
                               injections=(("color", "shape", 0.5),)))
    corr = ds.provenance["empirical_correlations"]["color=>shape"]
    assert abs(corr - 0.5) <= 0.05


def test_injection_unsatisfiable_domains():
    with pytest.raises(ValueError):
        ShapesSpec(varying=("quadrant", "shape"),
                   injections=(("quadrant", "shape", 1.0),))
    with pytest.raises(ValueError):
        ShapesSpec(varying=("shape", "color"),
                   injections=(("color", "shape", 1.5),))
    with pytest.raises(ValueError):  # non-varying attribute
        ShapesSpec(varying=("shape",), injections=(("color", "shape", 1.0),))


def test_splits_disjoint_exhaustive_and_seed_pure():
    spec = ShapesSpec(n=100, seed=6)
    ds = gen_shapes(spec)
    joined = np.concatenate([ds.splits["train"], ds.splits["val"], ds.splits["test"]])
    assert sorted(joined.tolist()) == list(range(100))
    # same seed, different spec content: membership only depends on (n, seed)
    ds2 = gen_shapes(ShapesSpec(n=100, seed=6, varying=("shape",)))
    for k in ds.splits:
        assert np.array_equal(ds.splits[k], ds2.splits[k])


def test_dataset_rejects_overlapping_splits():
    with pytest.raises(ValueError):
        Dataset(images=np.zeros((4, 3, 2, 2), dtype=np.float32),
                attrs=AttributeTable(("a",), np.zeros((4, 1), dtype=np.uint8)),
                splits={"train": np.array([0, 1]), "test": np.array([1, 2, 3])})


def make_idx_bytes(images: np.ndarray, labels: np.ndarray,
                   image_magic=0x803, label_magic=0x801):
    n, h, w = images.shape
    img = struct.pack(">IIII", image_magic, n, h, w) + images.astype(np.uint8).tobytes()
    lab = struct.pack(">II", label_magic, len(labels)) + labels.astype(np.uint8).tobytes()
    return img, lab


def test_load_idx_roundtrips_fixture(tmp_path):
    # 2 images of 2x2, built byte-by-byte
    images = np.array([[[0, 255], [128, 64]],
                       [[10, 20], [30, 40]]], dtype=np.uint8)
    labels = np.array([7, 2], dtype=np.uint8)
    img_b, lab_b = make_idx_bytes(images, labels)
    (tmp_path / "imgs.idx").write_bytes(img_b)
    (tmp_path / "labs.idx").write_bytes(lab_b)
    ds = load_idx(tmp_path / "imgs.idx", tmp_path / "labs.idx",
                  split_fractions=(0.5, 0.0, 0.5))
    assert ds.images.shape == (2, 1, 2, 2)
    assert ds.images[0, 0, 0, 0] == -1.0          # byte 0
    assert ds.images[0, 0, 0, 1] == 1.0           # byte 255
    assert ds.images[0, 0, 1, 0] == pytest.approx(128 / 127.5 - 1, abs=1e-6)
    assert ds.attrs.column("class=7")[0] == 1
    assert ds.attrs.column("class=2")[1] == 1


def test_load_idx_error_taxonomy(tmp_path):
    images = np.zeros((2, 2, 2), dtype=np.uint8)
    labels = np.array([0, 1], dtype=np.uint8)
    img_b, lab_b = make_idx_bytes(images, labels)

    bad_magic, _ = make_idx_bytes(images, labels, image_magic=0x807)
    (tmp_path / "bad.idx").write_bytes(bad_magic)
    (tmp_path / "labs.idx").write_bytes(lab_b)
    with pytest.raises(IdxBadMagic):
        load_idx(tmp_path / "bad.idx", tmp_path / "labs.idx")

    (tmp_path / "trunc.idx").write_bytes(img_b[:-3])
    with pytest.raises(IdxTruncated):
        load_idx(tmp_path / "trunc.idx", tmp_path / "labs.idx")

    _, lab3 = make_idx_bytes(images, np.array([0, 1, 2], dtype=np.uint8))
    (tmp_path / "imgs.idx").write_bytes(img_b)
    (tmp_path / "labs3.idx").write_bytes(lab3)
    with pytest.raises(IdxCountMismatch):
        load_idx(tmp_path / "imgs.idx", tmp_path / "labs3.idx")


def test_save_image_all_black_is_zero_bytes(tmp_path):
    img = np.full((3, 2, 2), -1.0, dtype=np.float32)
    save_image(img, tmp_path / "black.ppm")
    data = (tmp_path / "black.ppm").read_bytes()
    header = b"P6\n2 2\n255\n"
    assert data == header + b"\x00" * 12


def test_save_image_golden_bytes(tmp_path):
    # hand-assembled 2x2 grayscale fixture: values map via round((v+1)*127.5)
    img = np.array([[[-1.0, 0.0], [1.0, -0.5]]], dtype=np.float32)
    save_image(img, tmp_path / "g.pgm")
    expected = b"P5\n2 2\n255\n" + bytes([0, 128, 255, 64])
    assert (tmp_path / "g.pgm").read_bytes() == expected


def test_image_roundtrip_within_quantization(tmp_path):
    gen = np.random.default_rng(0)
    img = gen.uniform(-1, 1, (3, 5, 4)).astype(np.float32)
    save_image(img, tmp_path / "x.ppm")
    back = load_image(tmp_path / "x.ppm")
    assert back.shape == img.shape
    assert np.abs(back - img).max() <= 2.0 / 255


def test_save_image_clips_with_notice(tmp_path):
    img = np.full((1, 2, 2), 1.7, dtype=np.float32)
    with pytest.warns(UserWarning):
        save_image(img, tmp_path / "c.pgm")
    back = load_image(tmp_path / "c.pgm")
    assert back.max() <= 1.0


def test_load_image_parses_comments_and_rejects_junk(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# a comment\n1 1\n255\n\x80")
    img = load_image(tmp_path / "c.pgm")
    assert img.shape == (1, 1, 1)
    (tmp_path / "bad.pgm").write_bytes(b"P7\n1 1\n255\n\x00")
    with pytest.raises(ValueError):
        load_image(tmp_path / "bad.pgm")
    (tmp_path / "short.pgm").write_bytes(b"P5\n2 2\n255\n\x00\x00")
    with pytest.raises(ValueError):
        load_image(tmp_path / "short.pgm")


def test_image_grid_layout():
    imgs = np.stack([np.full((1, 2, 2), -1.0), np.full((1, 2, 2), 1.0)])
    grid = image_grid(imgs, n_cols=2, sep=2, sep_value=0.0)
    assert grid.shape == (1, 2, 6)
    assert (grid[0, :, :2] == -1).all()
    assert (grid[0, :, 2:4] == 0).all()   # separator
    assert (grid[0, :, 4:] == 1).all()


def test_attribute_table_validation():
    with pytest.raises(ValueError):
        AttributeTable(("a",), np.array([[2]], dtype=np.uint8))
    with pytest.raises(ValueError):
        AttributeTable(("a", "b"), np.zeros((3, 1), dtype=np.uint8))
