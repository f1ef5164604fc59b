"""Loader and split contracts: IDX/CSV parsing, synthetic generation,
stratified splitting and the initial per-class draw."""

import gzip
import struct

import numpy as np
import pytest

from activepool.core import DataFormatError, Dataset
from activepool.data import (
    DatasetDescriptor,
    SyntheticSpec,
    generate_synthetic,
    initial_seed_set,
    load_csv,
    load_idx,
    stratified_split,
)


def idx_images_bytes(images: np.ndarray) -> bytes:
    n, rows, cols = images.shape
    return struct.pack(">iiii", 0x00000803, n, rows, cols) + images.astype(np.uint8).tobytes()


def idx_labels_bytes(labels: np.ndarray) -> bytes:
    return struct.pack(">ii", 0x00000801, len(labels)) + labels.astype(np.uint8).tobytes()


@pytest.fixture
def idx_pair(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(12, 4, 5)).astype(np.uint8)
    labels = rng.integers(0, 3, size=12).astype(np.uint8)
    img_path = tmp_path / "images.idx"
    lab_path = tmp_path / "labels.idx"
    img_path.write_bytes(idx_images_bytes(images))
    lab_path.write_bytes(idx_labels_bytes(labels))
    return img_path, lab_path, images, labels


class TestLoadIdx:
    def test_loads_and_scales_to_unit_interval(self, idx_pair):
        img_path, lab_path, images, labels = idx_pair
        dataset = load_idx(img_path, lab_path)
        assert dataset.features.shape == (12, 20)
        np.testing.assert_allclose(
            dataset.features, images.reshape(12, -1) / 255.0, atol=1e-7
        )
        np.testing.assert_array_equal(dataset.labels, labels)
        assert 0.0 <= dataset.features.min() and dataset.features.max() <= 1.0

    def test_gzip_transparent(self, idx_pair, tmp_path):
        img_path, lab_path, *_ = idx_pair
        gz_img = tmp_path / "images.idx.gz"
        gz_lab = tmp_path / "labels.idx.gz"
        gz_img.write_bytes(gzip.compress(img_path.read_bytes()))
        gz_lab.write_bytes(gzip.compress(lab_path.read_bytes()))
        plain = load_idx(img_path, lab_path)
        zipped = load_idx(gz_img, gz_lab)
        np.testing.assert_array_equal(plain.features, zipped.features)

    def test_truncated_file_fails_with_offset(self, idx_pair, tmp_path):
        img_path, lab_path, *_ = idx_pair
        cut = tmp_path / "cut.idx"
        cut.write_bytes(img_path.read_bytes()[:50])
        with pytest.raises(DataFormatError, match="offset"):
            load_idx(cut, lab_path)

    def test_bad_magic_reports_both_values(self, idx_pair, tmp_path):
        img_path, lab_path, *_ = idx_pair
        bad = tmp_path / "bad.idx"
        bad.write_bytes(b"\x00\x00\x09\x99" + img_path.read_bytes()[4:])
        with pytest.raises(DataFormatError, match="magic"):
            load_idx(bad, lab_path)

    def test_count_mismatch_names_both_counts(self, idx_pair, tmp_path):
        img_path, _, _, labels = idx_pair
        short = tmp_path / "short.idx"
        short.write_bytes(idx_labels_bytes(labels[:7]))
        with pytest.raises(DataFormatError, match="12.*7"):
            load_idx(img_path, short)


class TestLoadCsv:
    def write(self, tmp_path, text):
        path = tmp_path / "data.csv"
        path.write_text(text)
        return path

    def test_label_mapping_by_first_appearance(self, tmp_path):
        path = self.write(tmp_path, "x,y,label\n1,2,a\n3,4,b\n5,6,a\n")
        dataset = load_csv(path, "label", normalize=False)
        assert dataset.class_count == 2
        np.testing.assert_array_equal(dataset.labels, [0, 1, 0])
        assert dataset.label_names == ["a", "b"]
        np.testing.assert_allclose(dataset.features, [[1, 2], [3, 4], [5, 6]])

    def test_normalization_bounds(self, tmp_path):
        path = self.write(tmp_path, "x,y,label\n1,20,a\n3,40,b\n5,60,a\n")
        dataset = load_csv(path, "label")
        assert dataset.features.min() >= 0.0 and dataset.features.max() <= 1.0

    def test_empty_file_rejected(self, tmp_path):
        path = self.write(tmp_path, "")
        with pytest.raises(DataFormatError, match="empty"):
            load_csv(path, "label")

    def test_ragged_row_reports_row_number(self, tmp_path):
        path = self.write(tmp_path, "x,y,label\n1,2,a\n3,b\n")
        with pytest.raises(DataFormatError, match="row 3"):
            load_csv(path, "label")

    def test_non_numeric_feature_reports_row(self, tmp_path):
        path = self.write(tmp_path, "x,y,label\n1,2,a\noops,4,b\n")
        with pytest.raises(DataFormatError, match="row 3"):
            load_csv(path, "label")

    def test_round_trip_preserves_features(self, tmp_path):
        rng = np.random.default_rng(1)
        features = rng.random((8, 3)).astype(np.float32)
        labels = rng.integers(0, 2, 8)
        lines = ["f0,f1,f2,label"]
        for row, label in zip(features, labels):
            lines.append(",".join(repr(float(v)) for v in row) + f",c{label}")
        path = self.write(tmp_path, "\n".join(lines) + "\n")
        dataset = load_csv(path, "label", normalize=False)
        np.testing.assert_array_equal(dataset.features, features)


class TestSynthetic:
    def test_deterministic_per_seed(self):
        spec = SyntheticSpec(class_count=3, clusters_per_class=2,
                             samples_per_cluster=20, feature_dim=4, seed=5)
        a, b = generate_synthetic(spec), generate_synthetic(spec)
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_sample_counts(self):
        spec = SyntheticSpec(class_count=2, clusters_per_class=5,
                             samples_per_cluster=200, feature_dim=3)
        dataset = generate_synthetic(spec)
        np.testing.assert_array_equal(np.bincount(dataset.labels), [1000, 1000])

    def test_high_separation_is_linearly_solvable(self):
        spec = SyntheticSpec(class_count=2, samples_per_cluster=300,
                             feature_dim=3, cluster_std=1.0,
                             class_separation=10.0, seed=2)
        dataset = generate_synthetic(spec)
        # Independent linear classifier: least-squares onto one-hot targets.
        X = np.column_stack([dataset.features, np.ones(len(dataset))])
        onehot = np.eye(2)[dataset.labels]
        coef, *_ = np.linalg.lstsq(X, onehot, rcond=None)
        accuracy = np.mean(np.argmax(X @ coef, axis=1) == dataset.labels)
        assert accuracy >= 0.99

    def test_features_normalized(self):
        dataset = generate_synthetic(SyntheticSpec(class_count=4, feature_dim=6))
        assert dataset.features.min() >= 0.0 and dataset.features.max() <= 1.0


class TestStratifiedSplit:
    def make(self, per_class=100, classes=10):
        rng = np.random.default_rng(3)
        labels = np.repeat(np.arange(classes), per_class)
        return Dataset("s", rng.random((len(labels), 2)), labels, classes)

    def test_exact_per_class_counts(self):
        part_a, part_b = stratified_split(self.make(), 0.1, seed=0)
        dataset = self.make()
        counts = np.bincount(dataset.labels[part_a], minlength=10)
        np.testing.assert_array_equal(counts, np.full(10, 10))
        assert len(part_a) + len(part_b) == 1000

    def test_parts_are_disjoint_and_exhaustive(self):
        dataset = self.make(per_class=33, classes=3)
        part_a, part_b = stratified_split(dataset, 0.25, seed=1)
        union = np.sort(np.concatenate([part_a, part_b]))
        np.testing.assert_array_equal(union, np.arange(len(dataset)))

    def test_proportionality_within_one_sample(self):
        rng = np.random.default_rng(4)
        labels = np.concatenate([np.full(17, 0), np.full(23, 1), np.full(5, 2)])
        dataset = Dataset("odd", rng.random((45, 2)), labels, 3)
        part_a, _ = stratified_split(dataset, 0.3, seed=2)
        for cls, total in ((0, 17), (1, 23), (2, 5)):
            got = np.sum(labels[part_a] == cls)
            assert abs(got - 0.3 * total) < 1.0

    def test_deterministic(self):
        dataset = self.make()
        a1, _ = stratified_split(dataset, 0.1, seed=7)
        a2, _ = stratified_split(dataset, 0.1, seed=7)
        np.testing.assert_array_equal(a1, a2)

    def test_singleton_class_rejected_by_name(self):
        rng = np.random.default_rng(5)
        labels = np.array([0, 0, 0, 1])
        dataset = Dataset("tiny", rng.random((4, 2)), labels, 2)
        with pytest.raises(ValueError, match="class 1"):
            stratified_split(dataset, 0.5, seed=0)


class TestInitialSeedSet:
    def make(self, per_class=120, classes=10):
        rng = np.random.default_rng(6)
        labels = rng.permutation(np.repeat(np.arange(classes), per_class))
        return Dataset("p", rng.random((len(labels), 2)), labels, classes)

    def test_hundred_per_class(self):
        dataset = self.make()
        ids = initial_seed_set(dataset, per_class=100, seed=0)
        assert len(ids) == 1000
        np.testing.assert_array_equal(
            np.bincount(dataset.labels[ids], minlength=10), np.full(10, 100)
        )

    def test_whole_class_when_population_matches(self):
        dataset = self.make(per_class=15, classes=2)
        ids = initial_seed_set(dataset, per_class=15, seed=1)
        np.testing.assert_array_equal(np.sort(dataset.labels[ids]),
                                      np.repeat([0, 1], 15))

    def test_short_class_reports_name_and_shortfall(self):
        dataset = self.make(per_class=10, classes=3)
        with pytest.raises(ValueError, match="class 0 has 10"):
            initial_seed_set(dataset, per_class=11, seed=0)

    def test_deterministic(self):
        dataset = self.make()
        np.testing.assert_array_equal(
            initial_seed_set(dataset, 50, seed=3), initial_seed_set(dataset, 50, seed=3)
        )


class TestDescriptor:
    def test_synthetic_resolution_splits_pool_and_test(self):
        desc = DatasetDescriptor(
            format="synthetic",
            synthetic=SyntheticSpec(class_count=3, samples_per_cluster=100,
                                    feature_dim=3, seed=1),
            test_fraction=0.2,
        )
        pool, test = desc.resolve()
        assert len(pool) == 240 and len(test) == 60
        assert pool.class_count == test.class_count == 3

    def test_declared_class_count_checked(self):
        desc = DatasetDescriptor(
            format="synthetic",
            synthetic=SyntheticSpec(class_count=3, samples_per_cluster=50),
            class_count=5,
        )
        with pytest.raises(Exception, match="class_count"):
            desc.resolve()

    def test_unknown_format_rejected(self):
        with pytest.raises(Exception, match="format"):
            DatasetDescriptor(format="parquet").resolve()
