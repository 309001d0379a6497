import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from betternet.data import (
    DatasetSpec,
    binarize,
    disk,
    list_folder,
    load_dataset,
    load_folder,
    load_gray,
    load_image,
    load_mask,
    morphological,
    parse_morph,
    read_netpbm,
    resize_bilinear,
    resize_mask,
    save_image,
    split_shuffle,
    write_folder,
    write_netpbm,
)
from betternet.errors import ConfigError, FormatError, IntegrityError
from betternet.synth import SynthParams, image_rng, raster_ellipse, synth_generate, synth_one


# ---------------------------------------------------------------- netpbm


def test_white_pixel_ppm(tmp_path):
    p = tmp_path / "w.ppm"
    p.write_bytes(b"P6\n1 1\n255\n\xff\xff\xff")
    np.testing.assert_array_equal(load_image(p)[:, 0, 0], [1.0, 1.0, 1.0])


def test_mask_threshold(tmp_path):
    p = tmp_path / "m.pgm"
    write_netpbm(p, np.array([[200, 128, 127, 0]], dtype=np.uint8))
    np.testing.assert_array_equal(load_mask(p), [[1, 1, 0, 0]])


def test_header_comments(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# made by hand\n2 1 # width height\n255\n\x00\x80")
    np.testing.assert_array_equal(read_netpbm(p), [[0, 128]])


@pytest.mark.parametrize(
    "payload,error,where",
    [
        (b"P3\n1 1\n255\n\x00\x00\x00", FormatError, "byte 0"),
        (b"P5\n1 1\n65535\n\x00\x00", FormatError, "byte"),
        (b"P6\n2 2\n255\n\x00\x00\x00", IntegrityError, "byte"),
        (b"P5\n2", IntegrityError, "byte"),
    ],
)
def test_netpbm_errors(tmp_path, payload, error, where):
    p = tmp_path / "bad.pgm"
    p.write_bytes(payload)
    with pytest.raises(error, match=where):
        read_netpbm(p)


@settings(max_examples=25, deadline=None)
@given(h=st.integers(1, 6), w=st.integers(1, 6), seed=st.integers(0, 1000), colour=st.booleans())
def test_netpbm_round_trip_bytes(tmp_path_factory, h, w, seed, colour):
    d = tmp_path_factory.mktemp("rt")
    shape = (h, w, 3) if colour else (h, w)
    pix = np.random.default_rng(seed).integers(0, 256, size=shape, dtype=np.uint8)
    a, b = d / "a.pnm", d / "b.pnm"
    write_netpbm(a, pix)
    if colour:
        save_image(b, load_image(a))
    else:
        write_netpbm(b, np.rint(load_gray(a) * 255).astype(np.uint8))
    assert a.read_bytes() == b.read_bytes()


# ---------------------------------------------------------------- resize / binarize


def test_resize_identity_and_constant(rng):
    x = rng.uniform(size=(3, 5, 7))
    np.testing.assert_array_equal(resize_bilinear(x, 5, 7), x)
    np.testing.assert_allclose(resize_bilinear(np.full((4, 6), 0.3), 9, 2), 0.3, rtol=1e-14)


def test_resize_2x2_to_4x4_hand_weights():
    x = np.array([[0.0, 1.0], [2.0, 3.0]])
    # output centres map to input coordinates -0.25, 0.25, 0.75, 1.25 (clamped to [0, 1])
    w = np.array([[1, 0], [0.75, 0.25], [0.25, 0.75], [0, 1]])
    np.testing.assert_allclose(resize_bilinear(x, 4, 4), w @ x @ w.T, atol=1e-15)


def test_resize_mask_stays_binary(rng):
    m = (rng.uniform(size=(10, 10)) > 0.5).astype(float)
    r = resize_mask(m, 7, 13)
    assert set(np.unique(r)) <= {0.0, 1.0}


def test_binarize_examples(rng):
    x = np.array([0.0, 0.2, 0.5, 1.0])
    np.testing.assert_array_equal(binarize(x, 0.0), [0, 1, 1, 1])
    np.testing.assert_array_equal(binarize(x, 0.5), [0, 0, 0, 1])
    y = rng.uniform(size=20)
    np.testing.assert_array_equal(binarize(binarize(y, 0.3), 0.5), binarize(y, 0.3))
    with pytest.raises(ValueError):
        binarize(x, 1.5)


# ---------------------------------------------------------------- split


def test_split_examples():
    items = list(range(10))
    s = split_shuffle(items, (0.8, 0.0, 0.2), seed=3)
    assert [len(s[k]) for k in ("train", "val", "test")] == [8, 0, 2]
    assert split_shuffle(items, (1, 0, 0))["train"] == split_shuffle(items, (1, 0, 0))["train"]
    assert len(split_shuffle(items, (1, 0, 0))["train"]) == 10
    with pytest.raises(ValueError):
        split_shuffle([], (1, 0, 0))
    with pytest.raises(ConfigError):
        split_shuffle(items, (0.5, 0.2, 0.2))


@settings(max_examples=60, deadline=None)
@given(
    n=st.integers(1, 60),
    seed=st.integers(0, 10**6),
    val=st.floats(0, 0.5),
    test=st.floats(0, 0.5),
)
def test_split_partition_property(n, seed, val, test):
    items = list(range(n))
    s = split_shuffle(items, (1 - val - test, val, test), seed)
    parts = s["train"] + s["val"] + s["test"]
    assert sorted(parts) == items
    assert len(s["val"]) == math.floor(val * n + 1e-9)
    assert len(s["test"]) == math.floor(test * n + 1e-9)
    assert s == split_shuffle(items, (1 - val - test, val, test), seed)


# ---------------------------------------------------------------- morphology


def test_disk_radius_one():
    np.testing.assert_array_equal(disk(1), [[0, 1, 0], [1, 1, 1], [0, 1, 0]])


def test_open_removes_speck_close_fills_hole():
    x = np.zeros((7, 7))
    x[3, 3] = 1
    assert morphological(x, "open", 1).sum() == 0
    sq = np.zeros((9, 9))
    sq[2:7, 2:7] = 1
    holed = sq.copy()
    holed[4, 4] = 0
    np.testing.assert_array_equal(morphological(holed, "close", 1), sq)
    z = np.zeros((5, 5))
    np.testing.assert_array_equal(morphological(z, "open", 2), z)
    np.testing.assert_array_equal(morphological(z, "close", 2), z)


def test_morph_errors():
    with pytest.raises(ValueError):
        morphological(np.zeros((3, 3)), "open", 0)
    with pytest.raises(ValueError):
        morphological(np.full((3, 3), 0.5), "open", 1)
    with pytest.raises(ValueError):
        morphological(np.zeros((3, 3)), "erode", 1)
    assert parse_morph("close:3") == ("close", 3)
    assert parse_morph(None) is None
    with pytest.raises(ConfigError):
        parse_morph("open")


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10**6), radius=st.integers(1, 3), density=st.floats(0.1, 0.9))
def test_morph_idempotent_and_ordered(seed, radius, density):
    x = (np.random.default_rng(seed).uniform(size=(12, 14)) < density).astype(float)
    op = morphological(x, "open", radius)
    cl = morphological(x, "close", radius)
    np.testing.assert_array_equal(morphological(op, "open", radius), op)
    np.testing.assert_array_equal(morphological(cl, "close", radius), cl)
    assert np.all(op <= x) and np.all(x <= cl)


# ---------------------------------------------------------------- synthetic data


def test_synth_deterministic_and_order_free():
    p = SynthParams(size=32, count=4, seed=9)
    a, b = synth_generate(p), synth_generate(p)
    for x, y in zip(a, b):
        assert x.image.tobytes() == y.image.tobytes() and x.mask.tobytes() == y.mask.tobytes()
    # any single image regenerates without the others
    assert synth_one(p, 2).image.tobytes() == a[2].image.tobytes()
    assert synth_generate(SynthParams(size=32, count=1, seed=10))[0].image.tobytes() != a[0].image.tobytes()


def test_synth_masks_binary_and_nonempty():
    for s in synth_generate(SynthParams(size=48, count=12, seed=2)):
        assert set(np.unique(s.mask)) <= {0.0, 1.0}
        assert s.mask.sum() > 0
        assert s.image.shape == (3, 48, 48) and 0 <= s.image.min() and s.image.max() <= 1


def test_synth_zero_polyps():
    s = synth_generate(SynthParams(size=32, count=3, polyps_min=0, polyps_max=0))
    assert all(x.mask.sum() == 0 for x in s)


def test_synth_degenerate_axes():
    with pytest.raises(ConfigError, match="degenerate"):
        SynthParams(size=16, axis_min=0.01).validate()
    with pytest.raises(ConfigError):
        raster_ellipse(8, 4, 4, 0.0, 1.0)


def test_full_canvas_circle_area():
    n = 200
    m = raster_ellipse(n, n / 2, n / 2, n / 2, n / 2)
    # raster error is bounded by the boundary length over the area, ~ 4 / n
    assert abs(m.mean() - math.pi / 4) < 4.0 / n


def test_image_rng_is_keyed():
    a = image_rng(1, 2).random(3)
    np.testing.assert_array_equal(a, image_rng(1, 2).random(3))
    assert not np.array_equal(a, image_rng(2, 1).random(3))


# ---------------------------------------------------------------- folders


def test_folder_round_trip_and_dataset(tmp_path):
    pairs = synth_generate(SynthParams(size=32, count=5, seed=4))
    write_folder(tmp_path, pairs)
    assert len(list_folder(tmp_path)) == 5
    loaded = load_folder(tmp_path)
    for a, b in zip(pairs, loaded):
        np.testing.assert_array_equal(a.mask, b.mask)
        np.testing.assert_allclose(a.image, b.image, atol=0.5 / 255 + 1e-12)
    resized = load_folder(tmp_path, resize_to=16)
    assert resized[0].image.shape == (3, 16, 16) and resized[0].mask.shape == (16, 16)
    splits = load_dataset(DatasetSpec(source="folder", root=str(tmp_path), resize_to=32, split=(0.6, 0.2, 0.2)))
    assert [len(splits[k]) for k in ("train", "val", "test")] == [3, 1, 1]


def test_folder_unmatched_names(tmp_path):
    write_folder(tmp_path, synth_generate(SynthParams(size=16, count=2, axis_min=0.1)))
    next((tmp_path / "masks").iterdir()).unlink()
    with pytest.raises(FileNotFoundError, match="unmatched"):
        list_folder(tmp_path)
    with pytest.raises(FileNotFoundError):
        list_folder(tmp_path / "nowhere")
