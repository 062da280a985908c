"""Dataset container and binary format tests.

IDX and CIFAR fixtures are built byte-by-byte in the tests so the parsers
are checked against the format definition, not against the writer.
"""

import hashlib
import struct

import numpy as np
import pytest

from s2slab.data import (
    Dataset,
    DataError,
    load_cifar_bin,
    load_idx,
    save_idx,
    synthetic_digits,
)


def idx_bytes(images: np.ndarray, labels: np.ndarray) -> tuple[bytes, bytes]:
    n, h, w = images.shape
    img = struct.pack(">IIII", 0x803, n, h, w) + images.astype(np.uint8).tobytes()
    lab = struct.pack(">II", 0x801, n) + labels.astype(np.uint8).tobytes()
    return img, lab


# ---------------------------------------------------------------------------
# container
# ---------------------------------------------------------------------------


def test_dataset_validation():
    images = np.zeros((4, 1, 2, 2), dtype=np.float32)
    labels = np.array([0, 1, 2, 3])
    ds = Dataset(images, labels, split="test", checksum="x", num_classes=4)
    assert len(ds) == 4
    with pytest.raises(DataError):
        Dataset(images, labels[:3], split="test", checksum="x", num_classes=4)
    with pytest.raises(DataError):
        Dataset(images + 300.0, labels, split="test", checksum="x", num_classes=4)
    with pytest.raises(DataError):
        Dataset(images, labels + 4, split="test", checksum="x", num_classes=4)
    poisoned = images.copy()
    poisoned[0, 0, 0, 0] = np.nan
    with pytest.raises(DataError, match="non-finite"):
        Dataset(poisoned, labels, split="test", checksum="x", num_classes=4)


def test_dataset_subset_is_prefix():
    ds = synthetic_digits(40, seed=5)
    sub = ds.subset(10)
    assert len(sub) == 10
    np.testing.assert_array_equal(sub.images, ds.images[:10])
    np.testing.assert_array_equal(sub.labels, ds.labels[:10])
    assert len(ds.subset(10_000)) == 40  # limit beyond length keeps everything


# ---------------------------------------------------------------------------
# idx parsing
# ---------------------------------------------------------------------------


def test_load_idx_parses_hand_built_bytes(tmp_path):
    images = np.arange(12, dtype=np.uint8).reshape(3, 2, 2)
    labels = np.array([7, 0, 3], dtype=np.uint8)
    img_b, lab_b = idx_bytes(images, labels)
    (tmp_path / "im.idx").write_bytes(img_b)
    (tmp_path / "lb.idx").write_bytes(lab_b)
    ds = load_idx(tmp_path / "im.idx", tmp_path / "lb.idx", split="test")
    assert ds.images.shape == (3, 1, 2, 2)
    assert ds.images.dtype == np.float32
    np.testing.assert_array_equal(ds.images[0, 0], [[0.0, 1.0], [2.0, 3.0]])
    np.testing.assert_array_equal(ds.labels, [7, 0, 3])
    assert ds.checksum == hashlib.sha256(img_b + lab_b).hexdigest()


def test_load_idx_rejects_bad_magic(tmp_path):
    images = np.zeros((1, 2, 2), dtype=np.uint8)
    labels = np.zeros(1, dtype=np.uint8)
    img_b, lab_b = idx_bytes(images, labels)
    (tmp_path / "im.idx").write_bytes(b"\x00\x00\x09\x03" + img_b[4:])
    (tmp_path / "lb.idx").write_bytes(lab_b)
    with pytest.raises(DataError, match="magic"):
        load_idx(tmp_path / "im.idx", tmp_path / "lb.idx")


def test_load_idx_rejects_truncation_and_count_mismatch(tmp_path):
    images = np.zeros((3, 2, 2), dtype=np.uint8)
    labels = np.zeros(3, dtype=np.uint8)
    img_b, lab_b = idx_bytes(images, labels)

    (tmp_path / "im.idx").write_bytes(img_b[:-3])
    (tmp_path / "lb.idx").write_bytes(lab_b)
    with pytest.raises(DataError, match="truncat|short"):
        load_idx(tmp_path / "im.idx", tmp_path / "lb.idx")

    (tmp_path / "im.idx").write_bytes(img_b)
    lab2 = struct.pack(">II", 0x801, 2) + bytes(2)
    (tmp_path / "lb.idx").write_bytes(lab2)
    with pytest.raises(DataError, match="count|mismatch"):
        load_idx(tmp_path / "im.idx", tmp_path / "lb.idx")


def test_idx_round_trip_is_bit_identical(tmp_path):
    ds = synthetic_digits(30, seed=9, split="train")
    save_idx(ds, tmp_path / "im.idx", tmp_path / "lb.idx")
    back = load_idx(tmp_path / "im.idx", tmp_path / "lb.idx", split="train")
    np.testing.assert_array_equal(back.images, ds.images)
    np.testing.assert_array_equal(back.labels, ds.labels)

    # writing the reloaded dataset again reproduces the files byte for byte
    save_idx(back, tmp_path / "im2.idx", tmp_path / "lb2.idx")
    assert (tmp_path / "im2.idx").read_bytes() == (tmp_path / "im.idx").read_bytes()
    assert (tmp_path / "lb2.idx").read_bytes() == (tmp_path / "lb.idx").read_bytes()


def test_save_idx_rejects_non_integer_pixels(tmp_path):
    images = np.full((2, 1, 2, 2), 0.5, dtype=np.float32)
    ds = Dataset(images, np.zeros(2, dtype=np.int64), split="t", checksum="", num_classes=10)
    with pytest.raises(DataError, match="integer"):
        save_idx(ds, tmp_path / "a.idx", tmp_path / "b.idx")


# ---------------------------------------------------------------------------
# cifar binary
# ---------------------------------------------------------------------------


def test_load_cifar_bin_channel_layout(tmp_path):
    # one record: label 5, R plane all 10, G plane all 20, B plane all 30
    rec = bytes([5]) + bytes([10] * 1024) + bytes([20] * 1024) + bytes([30] * 1024)
    (tmp_path / "batch.bin").write_bytes(rec * 2)
    ds = load_cifar_bin([tmp_path / "batch.bin"], split="train")
    assert ds.images.shape == (2, 3, 32, 32)
    assert (ds.images[0, 0] == 10.0).all()
    assert (ds.images[0, 1] == 20.0).all()
    assert (ds.images[0, 2] == 30.0).all()
    np.testing.assert_array_equal(ds.labels, [5, 5])


def test_load_cifar_bin_rejects_ragged_file(tmp_path):
    (tmp_path / "bad.bin").write_bytes(bytes(3073 * 2 + 17))
    with pytest.raises(DataError, match="3073"):
        load_cifar_bin([tmp_path / "bad.bin"])


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------


def test_synthetic_digits_deterministic():
    a = synthetic_digits(50, seed=3)
    b = synthetic_digits(50, seed=3)
    c = synthetic_digits(50, seed=4)
    assert a.images.tobytes() == b.images.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()
    assert a.checksum == b.checksum
    assert a.images.tobytes() != c.images.tobytes()


def test_synthetic_digits_shape_range_and_balance():
    ds = synthetic_digits(200, seed=1)
    assert ds.images.shape == (200, 1, 28, 28)
    assert ds.images.dtype == np.float32
    assert ds.images.min() >= 0.0 and ds.images.max() <= 255.0
    # integer-valued pixels so idx round trips exactly
    np.testing.assert_array_equal(ds.images, np.round(ds.images))
    counts = np.bincount(ds.labels, minlength=10)
    assert (counts == 20).all()
    assert ds.num_classes == 10


def test_synthetic_digits_classes_are_separated():
    ds = synthetic_digits(400, seed=2)
    means = np.stack([ds.images[ds.labels == k].mean(axis=0)[0] for k in range(10)])
    # class templates must be visibly distinct from one another
    for a in range(10):
        for b in range(a + 1, 10):
            gap = np.linalg.norm(means[a] - means[b])
            assert gap > 50.0, (a, b, gap)


def test_synthetic_digits_split_tags_and_distinct_streams():
    tr = synthetic_digits(30, seed=8, split="train")
    te = synthetic_digits(30, seed=9, split="test")
    assert tr.split == "train" and te.split == "test"
    assert tr.images.tobytes() != te.images.tobytes()
