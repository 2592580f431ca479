import struct
from pathlib import Path

import numpy as np
import pytest

from mebqat.data import (
    IdxFormatError,
    LabeledDataset,
    batch_iter,
    load_idx,
    make_synthetic_glyphs,
    sample_episode,
    split_classes,
    synthetic_dataset,
    synthetic_train_test,
    write_idx,
)

FIXTURES = Path(__file__).parent / "fixtures"


def test_fixture_loads_with_expected_contents():
    ds = load_idx(FIXTURES / "mini-images.idx", FIXTURES / "mini-labels.idx")
    assert ds.images.shape == (4, 1, 28, 28)
    np.testing.assert_array_equal(ds.labels, [0, 1, 2, 3])
    # stripe phase from the fixture script: pixel (0, 0) of sample 0 lights up
    assert ds.images[0, 0, 0, 0] == 1.0
    assert ds.images[0, 0, 0, 1] == 0.0
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0


def test_roundtrip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(7, 1, 9, 9), dtype=np.uint8)
    labels = rng.integers(0, 5, size=7).astype(np.uint8)
    write_idx(images, labels, tmp_path / "im.idx", tmp_path / "lb.idx")
    ds = load_idx(tmp_path / "im.idx", tmp_path / "lb.idx")
    np.testing.assert_array_equal(ds.images, images.astype(np.float32) / 255.0)
    np.testing.assert_array_equal(ds.labels, labels)


def test_count_mismatch_is_reported(tmp_path):
    images = np.zeros((3, 1, 4, 4), dtype=np.uint8)
    write_idx(images, np.zeros(3, dtype=np.uint8), tmp_path / "im.idx", tmp_path / "lb.idx")
    with open(tmp_path / "lb.idx", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, 2))
        f.write(bytes([0, 1]))
    with pytest.raises(IdxFormatError, match="count mismatch"):
        load_idx(tmp_path / "im.idx", tmp_path / "lb.idx")


def test_empty_file_is_truncated(tmp_path):
    (tmp_path / "im.idx").write_bytes(b"")
    (tmp_path / "lb.idx").write_bytes(b"")
    with pytest.raises(IdxFormatError, match="truncated"):
        load_idx(tmp_path / "im.idx", tmp_path / "lb.idx")


def test_bad_magic_is_reported(tmp_path):
    (tmp_path / "im.idx").write_bytes(struct.pack(">IIII", 0xDEADBEEF, 1, 2, 2) + b"\x00" * 4)
    (tmp_path / "lb.idx").write_bytes(struct.pack(">II", 0x00000801, 1) + b"\x00")
    with pytest.raises(IdxFormatError, match="bad magic"):
        load_idx(tmp_path / "im.idx", tmp_path / "lb.idx")


def test_short_payload_is_truncated(tmp_path):
    (tmp_path / "im.idx").write_bytes(struct.pack(">IIII", 0x00000803, 2, 4, 4) + b"\x00" * 10)
    (tmp_path / "lb.idx").write_bytes(struct.pack(">II", 0x00000801, 2) + b"\x00\x01")
    with pytest.raises(IdxFormatError, match="truncated"):
        load_idx(tmp_path / "im.idx", tmp_path / "lb.idx")


@pytest.fixture(scope="module")
def pool():
    return synthetic_dataset(num_classes=25, samples_per_class=8, image_size=16, seed=1)


def test_episode_shapes_twenty_way(pool):
    rng = np.random.default_rng(0)
    ep = sample_episode(pool, pool.classes, ways=20, shots=1, query_shots=5, rng=rng)
    assert ep.support_x.shape == (20, 1, 16, 16)
    assert ep.query_x.shape == (100, 1, 16, 16)
    assert sorted(np.unique(ep.support_y)) == list(range(20))


def test_episode_shapes_five_way_five_shot(pool):
    rng = np.random.default_rng(1)
    ep = sample_episode(pool, pool.classes, ways=5, shots=5, query_shots=3, rng=rng)
    assert len(ep.support_y) == 25
    assert np.bincount(ep.support_y).tolist() == [5] * 5


def test_episode_support_query_disjoint(pool):
    rng = np.random.default_rng(2)
    for _ in range(1000):
        ep = sample_episode(pool, pool.classes, ways=5, shots=2, query_shots=3, rng=rng)
        assert not set(ep.support_indices) & set(ep.query_indices)


def test_episode_label_remap_is_bijection(pool):
    rng = np.random.default_rng(3)
    ep = sample_episode(pool, pool.classes, ways=7, shots=2, query_shots=2, rng=rng)
    assert len(ep.class_ids) == 7
    for local, original in enumerate(ep.class_ids):
        rows = ep.support_indices[ep.support_y == local]
        assert set(pool.labels[rows]) == {original}


def test_episode_insufficient_samples_rejected(pool):
    rng = np.random.default_rng(4)
    with pytest.raises(ValueError, match="samples"):
        sample_episode(pool, pool.classes, ways=3, shots=5, query_shots=5, rng=rng)
    with pytest.raises(ValueError, match="classes"):
        sample_episode(pool, pool.classes, ways=26, shots=1, query_shots=1, rng=rng)


def test_batch_iter_single_batch(pool):
    batches = list(batch_iter(pool, batch_size=len(pool), shuffle=False))
    assert len(batches) == 1
    assert batches[0][0].shape[0] == len(pool)


def test_batch_iter_seeded_order_is_reproducible(pool):
    a = [y for _, y in batch_iter(pool, 16, shuffle=True, rng=np.random.default_rng(5))]
    b = [y for _, y in batch_iter(pool, 16, shuffle=True, rng=np.random.default_rng(5))]
    for ya, yb in zip(a, b):
        np.testing.assert_array_equal(ya, yb)


def test_batch_iter_covers_every_index_once(pool):
    seen = np.zeros(len(pool), dtype=int)
    rows = []
    for x, y in batch_iter(pool, 7, shuffle=True, rng=np.random.default_rng(6)):
        rows.append(len(y))
    assert sum(rows) == len(pool)
    # multiset check via label counts
    counted = np.zeros(len(pool.classes), dtype=int)
    for _, y in batch_iter(pool, 7, shuffle=True, rng=np.random.default_rng(6)):
        counted += np.bincount(y, minlength=len(pool.classes))
    np.testing.assert_array_equal(counted, np.bincount(pool.labels))


def test_batch_iter_drop_last(pool):
    sizes = [len(y) for _, y in batch_iter(pool, 16, shuffle=False, drop_last=True)]
    assert all(s == 16 for s in sizes)


def test_synthetic_is_deterministic_and_distinct():
    a_img, a_lab = make_synthetic_glyphs(50, 4, image_size=20, seed=9)
    b_img, b_lab = make_synthetic_glyphs(50, 4, image_size=20, seed=9)
    assert np.array_equal(a_img, b_img)
    assert np.array_equal(a_lab, b_lab)
    assert len(np.unique(a_lab)) == 50
    # per-class mean images should differ class to class
    means = a_img.reshape(50, 4, -1).mean(axis=1)
    dists = np.abs(means[:, None, :] - means[None, :, :]).sum(-1)
    off_diagonal = dists[~np.eye(50, dtype=bool)]
    assert off_diagonal.min() > 100


def test_synthetic_train_test_share_classes_with_fresh_samples():
    train, test = synthetic_train_test(6, 10, 4, image_size=16, seed=2)
    assert train.classes == test.classes
    assert len(train) == 60 and len(test) == 24
    # same class, different draws
    assert not np.array_equal(train.images[:4], test.images[:4])


def test_split_classes_disjoint():
    split = split_classes(range(20), holdout=6, rng=np.random.default_rng(0))
    assert len(split.meta_test_classes) == 6
    assert len(split.meta_train_classes) == 14
    assert not set(split.meta_train_classes) & set(split.meta_test_classes)
    with pytest.raises(ValueError):
        split_classes(range(5), holdout=5, rng=np.random.default_rng(0))


def test_dataset_validates_counts():
    with pytest.raises(ValueError):
        LabeledDataset(np.zeros((3, 1, 2, 2), dtype=np.float32), np.zeros(2, dtype=np.int64))
