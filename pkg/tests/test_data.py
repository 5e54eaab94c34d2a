import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from fedsemcom.data import (
    Dataset,
    batch_iter,
    class_histogram,
    dirichlet_partition,
    heterogeneity,
    holdout_split,
    load_dataset,
    synthetic_dataset,
    write_packed,
)
from fedsemcom.errors import ConfigError, IngestionError

LABELS = np.repeat(np.arange(10), 200)


class TestPacked:
    def test_four_records_in_order(self, tmp_path):
        rng = np.random.default_rng(0)
        pixels = rng.integers(0, 256, size=(4, 3, 5, 6), dtype=np.uint8)
        pixels[0, 0, 0, 0] = 255
        labels = [3, 1, 0, 2]
        path = tmp_path / "set.bin"
        write_packed(path, pixels, labels)
        ds = load_dataset(path, "packed-binary")
        assert len(ds) == 4
        assert ds.image_shape == (3, 5, 6)
        np.testing.assert_array_equal(ds.labels, labels)
        np.testing.assert_array_equal(ds.images, pixels / 255.0)
        assert ds.images[0, 0, 0, 0] == 1.0
        assert ds.class_count == 4

    def test_truncated(self, tmp_path):
        path = tmp_path / "set.bin"
        write_packed(path, np.zeros((2, 1, 2, 2), dtype=np.uint8), [0, 1])
        blob = path.read_bytes()
        path.write_bytes(blob[:-3])
        with pytest.raises(IngestionError, match="record"):
            load_dataset(path, "packed-binary")

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "set.bin"
        path.write_bytes(b"NOPE" + bytes(16))
        with pytest.raises(IngestionError, match="magic"):
            load_dataset(path, "packed-binary")

    def test_missing_path(self, tmp_path):
        with pytest.raises(IngestionError):
            load_dataset(tmp_path / "absent.bin", "packed-binary")

    def test_unknown_format(self, tmp_path):
        with pytest.raises(IngestionError):
            load_dataset(tmp_path, "hdf5")


class TestRawDir:
    def write(self, path, array):
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(array).save(path)

    def test_empty_directory(self, tmp_path):
        with pytest.raises(IngestionError):
            load_dataset(tmp_path, "raw-dir")

    def test_loads_sorted_and_normalized(self, tmp_path):
        white = np.full((4, 4, 3), 255, dtype=np.uint8)
        black = np.zeros((4, 4, 3), dtype=np.uint8)
        self.write(tmp_path / "cat" / "b.png", black)
        self.write(tmp_path / "cat" / "a.png", white)
        self.write(tmp_path / "dog" / "a.png", black)
        ds = load_dataset(tmp_path, "raw-dir")
        assert len(ds) == 3
        assert ds.image_shape == (3, 4, 4)
        np.testing.assert_array_equal(ds.labels, [0, 0, 1])
        assert np.all(ds.images[0] == 1.0)
        assert np.all(ds.images[1] == 0.0)

    def test_inconsistent_shapes_named(self, tmp_path):
        self.write(tmp_path / "a" / "x.png", np.zeros((4, 4, 3), dtype=np.uint8))
        self.write(tmp_path / "a" / "y.png", np.zeros((5, 4, 3), dtype=np.uint8))
        with pytest.raises(IngestionError, match="y.png"):
            load_dataset(tmp_path, "raw-dir")

    def test_unreadable_named(self, tmp_path):
        (tmp_path / "a").mkdir()
        (tmp_path / "a" / "bad.png").write_bytes(b"not an image")
        with pytest.raises(IngestionError, match="bad.png"):
            load_dataset(tmp_path, "raw-dir")


class TestSynthetic:
    def test_shape_and_range(self):
        ds = synthetic_dataset(4, 5, (3, 8, 8), seed=1)
        assert ds.images.shape == (20, 3, 8, 8)
        assert ds.images.min() >= 0 and ds.images.max() <= 1
        np.testing.assert_array_equal(np.bincount(ds.labels), [5, 5, 5, 5])
        # 8-bit quantized
        np.testing.assert_allclose(ds.images * 255, np.round(ds.images * 255), atol=1e-9)

    def test_deterministic(self):
        a = synthetic_dataset(3, 4, (3, 8, 8), seed=2)
        b = synthetic_dataset(3, 4, (3, 8, 8), seed=2)
        np.testing.assert_array_equal(a.images, b.images)

    def test_packed_round_trip(self, tmp_path):
        ds = synthetic_dataset(3, 4, (3, 8, 8), seed=2)
        path = tmp_path / "s.bin"
        write_packed(path, np.round(ds.images * 255).astype(np.uint8), ds.labels)
        np.testing.assert_array_equal(load_dataset(path, "packed-binary").images, ds.images)

    def test_label_range_checked(self):
        with pytest.raises(IngestionError):
            Dataset(np.zeros((2, 1, 2, 2)), np.array([0, 5]), 3)


class TestHoldout:
    def test_disjoint_stratified(self):
        ds = synthetic_dataset(5, 20, (1, 4, 4), seed=0)
        train, held = holdout_split(ds, 0.1, seed=3)
        assert len(train) + len(held) == len(ds)
        np.testing.assert_array_equal(np.bincount(held.labels), [2] * 5)


class TestPartition:
    def test_golden_histogram(self, golden):
        part = dirichlet_partition(LABELS, 10, 0.5, np.random.default_rng(0))
        np.testing.assert_array_equal(class_histogram(part, LABELS, 10), golden["partition_alpha05_seed0"])

    def test_same_seed_same_partition(self):
        a = dirichlet_partition(LABELS, 7, 0.3, np.random.default_rng(12))
        b = dirichlet_partition(LABELS, 7, 0.3, np.random.default_rng(12))
        assert a == b

    def test_near_uniform_limit(self):
        for seed in range(20):
            part = dirichlet_partition(LABELS, 10, 1e6, np.random.default_rng(seed))
            hist = class_histogram(part, LABELS, 10)
            assert np.all(np.abs(hist - 20) <= 2), seed

    def test_errors(self):
        with pytest.raises(ConfigError):
            dirichlet_partition(LABELS, 1, 0.5, np.random.default_rng(0))
        with pytest.raises(ConfigError):
            dirichlet_partition(LABELS, 3, 0.0, np.random.default_rng(0))
        with pytest.raises(ConfigError):
            dirichlet_partition(np.arange(3), 4, 0.5, np.random.default_rng(0))

    def test_empty_client_refilled(self):
        # a tiny alpha concentrates every class on one client
        labels = np.zeros(12, dtype=int)
        part = dirichlet_partition(labels, 6, 1e-3, np.random.default_rng(1))
        assert all(len(v) >= 1 for v in part.values())
        assert sorted(i for v in part.values() for i in v) == list(range(12))

    def test_heterogeneity_increases_as_alpha_drops(self):
        low = np.mean([heterogeneity(dirichlet_partition(LABELS, 10, 0.1, np.random.default_rng(s)), LABELS, 10) for s in range(10)])
        high = np.mean([heterogeneity(dirichlet_partition(LABELS, 10, 100.0, np.random.default_rng(s)), LABELS, 10) for s in range(10)])
        assert low > high


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.integers(0, 5), min_size=2, max_size=80),
    st.integers(2, 8),
    st.floats(0.05, 50.0),
    st.integers(0, 2**16),
)
def test_partition_conservation(labels, k, alpha, seed):
    labels = np.array(labels)
    if k > len(labels):
        return
    part = dirichlet_partition(labels, k, alpha, np.random.default_rng(seed))
    flat = [i for v in part.values() for i in v]
    assert len(flat) == len(set(flat)) == len(labels)
    assert all(len(v) >= 1 for v in part.values())
    hist = class_histogram(part, labels, 6)
    np.testing.assert_array_equal(hist.sum(axis=0), np.bincount(labels, minlength=6))


class TestBatches:
    def test_single_short_batch(self):
        ds = synthetic_dataset(2, 5, (1, 4, 4), seed=0)
        batches = list(batch_iter(ds, range(10), 16, np.random.default_rng(0)))
        assert len(batches) == 1
        assert sorted(batches[0]) == list(range(10))

    def test_epoch_covers_once(self):
        ds = synthetic_dataset(2, 20, (1, 4, 4), seed=0)
        idx = np.arange(3, 40, 2)
        batches = list(batch_iter(ds, idx, 4, np.random.default_rng(1)))
        assert [len(b) for b in batches] == [4, 4, 4, 4, 3]
        assert sorted(np.concatenate(batches)) == sorted(idx)

    def test_seeded_order(self):
        ds = synthetic_dataset(2, 20, (1, 4, 4), seed=0)
        a = list(batch_iter(ds, range(40), 8, np.random.default_rng(5)))
        b = list(batch_iter(ds, range(40), 8, np.random.default_rng(5)))
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    def test_bad_batch_size(self):
        ds = synthetic_dataset(2, 2, (1, 4, 4), seed=0)
        with pytest.raises(ConfigError):
            list(batch_iter(ds, range(4), 0, np.random.default_rng(0)))
