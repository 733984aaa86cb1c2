import gzip
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.distance import cdist

from jnosr.data import (IMAGES_MAGIC, LABELS_MAGIC, IdxCountMismatchError, IdxMagicError,
                        IdxTruncatedError, LabeledSet, blob_centers, encode_idx, gen_blobs,
                        load_idx, load_idx_raw, parse_idx, rotate90, rotate_batch, row_hashes,
                        simplex_centers, split_known_unknown)

MNIST = Path(__file__).resolve().parents[1] / "data" / "mnist"


def test_gen_blobs_counts_and_balance():
    raw = gen_blobs(6, 8, 100, seed=0)
    assert raw.x.shape == (600, 8)
    assert np.bincount(raw.y).tolist() == [100] * 6
    assert raw.x.min() >= -1 and raw.x.max() <= 1


@pytest.mark.parametrize("layout", ["simplex", "random"])
def test_gen_blobs_inter_class_distance(layout):
    sep, r = 0.5, 0.08
    raw = gen_blobs(9, 8, 60, sep, r, seed=3, layout=layout)
    c = blob_centers(raw)
    d = cdist(c, c)[~np.eye(9, dtype=bool)]
    assert d.min() >= sep - 2 * r  # centers estimated from samples
    worst = min(cdist(raw.x[raw.y == a], raw.x[raw.y == b]).min()
                for a in range(9) for b in range(a + 1, 9))
    assert worst >= sep - 2 * r


def test_simplex_layout_is_equidistant():
    c = simplex_centers(9, 8, 0.5, np.random.default_rng(0))
    d = cdist(c, c)[~np.eye(9, dtype=bool)]
    np.testing.assert_allclose(d, 0.5, atol=1e-12)
    with pytest.raises(ValueError):
        simplex_centers(10, 8, 0.5, np.random.default_rng(0))


def test_midpoints_lie_outside_every_ball():
    raw = gen_blobs(9, 8, 200, 0.5, 0.08, seed=1)
    c = blob_centers(raw)
    for a in range(9):
        for b in range(a + 1, 9):
            mid = (c[a] + c[b]) / 2
            # every sample is at least one radius short of the midpoint
            assert np.linalg.norm(raw.x - mid, axis=1).min() > 0.5 / 2 - 0.08 - 0.03


def test_gen_blobs_seeded_and_validated():
    a, b = gen_blobs(4, 3, 10, seed=5), gen_blobs(4, 3, 10, seed=5)
    assert a.x.tobytes() == b.x.tobytes()
    with pytest.raises(ValueError):
        gen_blobs(4, 3, 10, separation=0.1, radius=0.08)
    with pytest.raises(ValueError):
        gen_blobs(200, 2, 5, separation=0.9, radius=0.1, layout="random", max_tries=500)
    with pytest.raises(ValueError):
        gen_blobs(1, 3, 10)


def test_split_remaps_and_pools_unknowns():
    raw = gen_blobs(9, 8, 50, seed=0)
    ds = split_known_unknown(raw, [4, 1, 7], 0.7, seed=0)
    assert ds.num_classes == 3
    assert set(ds.train.y.tolist()) == {0, 1, 2}
    assert len(ds.train) == 3 * 35 and len(ds.test) == 3 * 15
    assert len(ds.unknown) == 6 * 50
    assert ds.meta["unknown_ids"] == [0, 2, 3, 5, 6, 8]
    assert not row_hashes(ds.train.x) & row_hashes(ds.unknown.x)
    assert not row_hashes(ds.test.x) & row_hashes(ds.unknown.x)
    # label 0 is original class 4
    orig = raw.x[raw.y == 4]
    assert row_hashes(ds.train.x[ds.train.y == 0]) <= row_hashes(orig)


def test_split_errors():
    raw = gen_blobs(4, 3, 10, seed=0)
    for bad in ([], [0, 0], [0, 1, 2, 3], [9]):
        with pytest.raises(ValueError):
            split_known_unknown(raw, bad)
    with pytest.warns(UserWarning):
        ds = split_known_unknown(raw, [0, 1], train_fraction=1.0)
    assert len(ds.test) == 0


def idx_pair(tmp_path, images, labels, gz=False):
    ip, lp = tmp_path / "img", tmp_path / "lab"
    for p, arr in ((ip, images), (lp, labels)):
        data = encode_idx(arr)
        p.write_bytes(gzip.compress(data) if gz else data)
    return ip, lp


@pytest.mark.parametrize("gz", [False, True])
def test_idx_round_trip(tmp_path, gz):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, (5, 3, 4), dtype=np.uint8)
    labels = rng.integers(0, 10, 5, dtype=np.uint8)
    ip, lp = idx_pair(tmp_path, images, labels, gz)
    im, lb = load_idx_raw(ip, lp)
    np.testing.assert_array_equal(im, images)
    raw_bytes = gzip.decompress(ip.read_bytes()) if gz else ip.read_bytes()
    assert encode_idx(im) == raw_bytes
    assert encode_idx(lb) == encode_idx(labels)


def test_idx_pixel_scaling(tmp_path):
    images = np.array([[[0, 255], [128, 0]]], dtype=np.uint8)
    ip, lp = idx_pair(tmp_path, images, np.array([3], np.uint8))
    raw = load_idx(ip, lp)
    assert raw.x[0, 0] == -1.0 and raw.x[0, 1] == 1.0
    assert raw.image_shape == (2, 2) and raw.x.shape == (1, 4)


def test_idx_errors_are_distinct(tmp_path):
    good = encode_idx(np.zeros((2, 2, 2), np.uint8))
    with pytest.raises(IdxMagicError) as e:
        parse_idx(b"\x00\x00\x08\x01" + good[4:], IMAGES_MAGIC)
    assert e.value.code == "bad_magic"
    with pytest.raises(IdxTruncatedError):
        parse_idx(good[:-1], IMAGES_MAGIC)
    with pytest.raises(IdxTruncatedError):
        parse_idx(good[:6], IMAGES_MAGIC)
    ip, lp = idx_pair(tmp_path, np.zeros((2, 2, 2), np.uint8), np.zeros(3, np.uint8))
    with pytest.raises(IdxCountMismatchError) as e:
        load_idx(ip, lp)
    assert len({IdxMagicError.code, IdxTruncatedError.code, e.value.code}) == 3


@pytest.mark.skipif(not (MNIST / "images-idx3-ubyte.gz").exists(), reason="MNIST subset not built")
def test_bundled_mnist_subset():
    raw = load_idx(MNIST / "images-idx3-ubyte.gz", MNIST / "labels-idx1-ubyte.gz")
    assert raw.image_shape == (28, 28) and raw.x.shape[1] == 784
    assert len(raw.y) == 10000 and sorted(np.unique(raw.y)) == list(range(10))
    ds = split_known_unknown(raw, range(6), 0.7, seed=0)
    assert ds.num_classes == 6
    assert len(ds.unknown) == int(np.sum(raw.y >= 6))


def test_rotate90_examples():
    img = np.arange(9).reshape(3, 3)
    np.testing.assert_array_equal(rotate90(img, 0), img)
    r1 = rotate90(img, 1)
    for r in range(3):
        for c in range(3):
            assert r1[2 - c, r] == img[r, c]
    np.testing.assert_array_equal(rotate90(r1, 1), rotate90(img, 2))
    four = img
    for _ in range(4):
        four = rotate90(four, 1)
    np.testing.assert_array_equal(four, img)
    with pytest.raises(ValueError):
        rotate90(img, 4)
    with pytest.raises(ValueError):
        rotate90(np.zeros((2, 3)), 1)
    assert rotate90(np.zeros((2, 3)), 2).shape == (2, 3)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=1, max_size=6))
def test_rotate_batch_matches_per_image(ks):
    rng = np.random.default_rng(len(ks))
    x = rng.uniform(-1, 1, (len(ks), 16))
    out = rotate_batch(x, (4, 4), np.array(ks))
    for i, k in enumerate(ks):
        np.testing.assert_array_equal(out[i].reshape(4, 4), rotate90(x[i].reshape(4, 4), k))
