import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relex.dataset import (
    BlobConfig,
    Dataset,
    DatasetError,
    Instance,
    from_instances,
    generate_blobs,
    load_csv,
    make_superclass_dataset,
    split,
    standardize,
    write_csv,
)


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


class TestDatasetType:
    def test_instance_view(self):
        ds = Dataset(np.arange(6.0).reshape(3, 2), [0, 1, 0], 2)
        z = ds[1]
        assert isinstance(z, Instance)
        np.testing.assert_array_equal(z.features, [2.0, 3.0])
        assert z.label == 1 and z.subclass is None
        assert len(list(ds)) == 3

    def test_rejects_out_of_range_label(self):
        with pytest.raises(DatasetError):
            Dataset(np.zeros((2, 2)), [0, 2], 2)

    def test_arrays_are_read_only(self):
        ds = Dataset(np.zeros((2, 2)), [0, 1], 2)
        with pytest.raises(ValueError):
            ds.X[0, 0] = 1.0

    def test_from_instances_keeps_subclass(self):
        ds = from_instances([Instance(np.zeros(2), 0, 3), Instance(np.ones(2), 1, 1)])
        assert ds.class_count == 2
        np.testing.assert_array_equal(ds.subclass, [3, 1])


class TestLoadCsv:
    def test_dense_reindexing(self, tmp_path):
        p = _write(tmp_path / "a.csv", "f0,label\n1.0,a\n2.0,b\n3.0,a\n")
        ds = load_csv(p)
        assert ds.class_count == 2
        np.testing.assert_array_equal(ds.y, [0, 1, 0])
        np.testing.assert_array_equal(ds.X[:, 0], [1.0, 2.0, 3.0])

    def test_non_numeric_cell_names_line(self, tmp_path):
        rows = "f0,f1,label\n" + "".join(f"{i},{i},x\n" for i in range(3)) + "1,oops,y\n"
        p = _write(tmp_path / "b.csv", rows)
        with pytest.raises(DatasetError, match="line 5"):
            load_csv(p)

    def test_wrong_arity_names_line(self, tmp_path):
        p = _write(tmp_path / "c.csv", "f0,label\n1,a\n1,2,a\n")
        with pytest.raises(DatasetError, match="line 3"):
            load_csv(p)

    def test_empty_file(self, tmp_path):
        with pytest.raises(DatasetError, match="empty"):
            load_csv(_write(tmp_path / "d.csv", ""))

    def test_header_only(self, tmp_path):
        with pytest.raises(DatasetError, match="no data"):
            load_csv(_write(tmp_path / "e.csv", "f0,label\n"))

    def test_bad_header(self, tmp_path):
        with pytest.raises(DatasetError, match="header"):
            load_csv(_write(tmp_path / "f.csv", "f0,klass\n1,a\n"))

    def test_segment_shaped_file(self, tmp_path, rng):
        header = ",".join(f"f{j}" for j in range(19)) + ",label\n"
        body = "".join(
            ",".join(repr(float(v)) for v in rng.normal(size=19)) + f",c{i % 7}\n" for i in range(70)
        )
        ds = load_csv(_write(tmp_path / "seg.csv", header + body))
        assert (ds.dim, ds.class_count) == (19, 7)

    def test_subclass_column(self, tmp_path):
        p = _write(tmp_path / "s.csv", "f0,label,subclass\n1,A,x\n2,B,y\n3,A,z\n")
        ds = load_csv(p, has_subclass=True)
        np.testing.assert_array_equal(ds.subclass, [0, 1, 2])
        assert ds.original_class_count == 3

    def test_round_trip(self, tmp_path):
        ds = generate_blobs(BlobConfig(3, 2, 3, 7), seed=4)
        sup = make_superclass_dataset(ds, seed=1)
        write_csv(sup, tmp_path / "r.csv")
        back = load_csv(tmp_path / "r.csv", has_subclass=True)
        np.testing.assert_array_equal(back.X, sup.X)
        assert back.digest() == load_csv(tmp_path / "r.csv", has_subclass=True).digest()


class TestBlobs:
    def test_counts(self):
        ds = generate_blobs(BlobConfig(2, 1, 2, 10), seed=1)
        assert len(ds) == 20
        np.testing.assert_array_equal(np.bincount(ds.y), [10, 10])

    def test_deterministic(self):
        cfg = BlobConfig(4, 2, 5, 30)
        a, b = generate_blobs(cfg, 9), generate_blobs(cfg, 9)
        np.testing.assert_array_equal(a.X, b.X)
        assert a.digest() == b.digest()
        assert generate_blobs(cfg, 10).digest() != a.digest()

    @pytest.mark.parametrize("kwargs", [
        dict(original_class_count=1), dict(subclusters_per_class=0), dict(dim=1),
        dict(per_class_count=0), dict(center_spread=1.0, noise_sigma=1.0),
        dict(noise_sigma=0.0),
    ])
    def test_invalid_config(self, kwargs):
        with pytest.raises(DatasetError):
            BlobConfig(**kwargs)

    def test_wide_spread_is_nearest_neighbor_separable(self):
        cfg = BlobConfig(4, 1, 3, 50, center_spread=100.0, noise_sigma=0.1)
        ref = generate_blobs(cfg, seed=5)
        # a held-out draw around the same centers: same seed, fresh noise
        rng = np.random.default_rng(99)
        centers = np.array([ref.X[ref.y == c].mean(0) for c in range(4)])
        X = centers[np.repeat(np.arange(4), 25)] + rng.normal(0, 0.1, size=(100, 3))
        y = np.repeat(np.arange(4), 25)
        d = ((X[:, None, :] - ref.X[None]) ** 2).sum(-1)
        np.testing.assert_array_equal(ref.y[d.argmin(1)], y)


class TestSuperclass:
    def test_two_classes_forced(self):
        ds = generate_blobs(BlobConfig(2, 1, 2, 5), 0)
        for seed in range(5):
            sup = make_superclass_dataset(ds, seed)
            assert sorted(np.unique(sup.y[ds.y == 0]).tolist() + np.unique(sup.y[ds.y == 1]).tolist()) == [0, 1]

    def test_ten_classes_reproducible_and_nonempty(self):
        ds = generate_blobs(BlobConfig(10, 1, 2, 3), 0)
        a, b = make_superclass_dataset(ds, 7), make_superclass_dataset(ds, 7)
        np.testing.assert_array_equal(a.y, b.y)
        assert set(np.unique(a.y)) == {0, 1}
        assert a.original_class_count == 10 and a.class_count == 2

    def test_subclass_is_original_label(self):
        ds = generate_blobs(BlobConfig(5, 1, 2, 4), 0)
        sup = make_superclass_dataset(ds, 3)
        np.testing.assert_array_equal(sup.subclass, ds.y)
        # the class -> superclass map is a function
        for c in range(5):
            assert len(np.unique(sup.y[ds.y == c])) == 1

    def test_errors(self):
        with pytest.raises(DatasetError):
            make_superclass_dataset(Dataset(np.zeros((2, 2)), [0, 0], 1), 0)
        sup = make_superclass_dataset(generate_blobs(BlobConfig(3, 1, 2, 3), 0), 0)
        with pytest.raises(DatasetError):
            make_superclass_dataset(sup, 0)


class TestSplit:
    def test_balanced_halves(self):
        ds = generate_blobs(BlobConfig(2, 1, 2, 50), 0)
        tr, te = split(ds, 0.5, 1)
        assert len(tr) == len(te) == 50
        np.testing.assert_array_equal(np.bincount(tr.y), [25, 25])

    def test_vehicle_scale(self):
        counts = [212, 217, 218, 199]  # an 846-row, 4-class table
        y = np.repeat(np.arange(4), counts)
        ds = Dataset(np.zeros((846, 2)), y, 4)
        tr, te = split(ds, 0.5, 0)
        assert len(tr) == sum(c // 2 for c in counts) == 422
        assert abs(len(tr) - 423) <= 2

    def test_singleton_class_rejected(self):
        ds = Dataset(np.zeros((3, 2)), [0, 0, 1], 2)
        with pytest.raises(DatasetError):
            split(ds, 0.5, 0)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(2, 12), min_size=2, max_size=5),
           st.floats(0.1, 0.9), st.integers(0, 2**31))
    def test_partition_property(self, counts, frac, seed):
        y = np.repeat(np.arange(len(counts)), counts)
        X = np.arange(len(y), dtype=float)[:, None] * np.ones((1, 2))
        ds = Dataset(X, y, len(counts))
        try:
            tr, te = split(ds, frac, seed)
        except DatasetError:
            assert all(int(np.floor(frac * c)) == 0 for c in counts)
            return
        merged = np.sort(np.concatenate([tr.X[:, 0], te.X[:, 0]]))
        np.testing.assert_array_equal(merged, X[:, 0])
        for c, n in enumerate(counts):
            assert (tr.y == c).sum() == int(np.floor(frac * n))
        again = split(ds, frac, seed)[0]
        np.testing.assert_array_equal(again.X, tr.X)


class TestStandardize:
    def test_moments_and_constant_column(self, rng):
        X = np.column_stack([rng.normal(3, 2, 50), np.full(50, 7.0), rng.uniform(size=50)])
        ds = Dataset(X, np.zeros(50, int), 1)
        tr, te, stats = standardize(ds, ds)
        np.testing.assert_allclose(tr.X.mean(0), 0.0, atol=1e-12)
        np.testing.assert_allclose(tr.X[:, [0, 2]].std(0), 1.0, atol=1e-9)
        np.testing.assert_array_equal(tr.X[:, 1], 0.0)

    def test_inverse_round_trip(self, rng):
        X = rng.normal(5, 3, size=(40, 3))
        ds = Dataset(X, np.zeros(40, int), 1)
        tr, _, stats = standardize(ds, ds)
        np.testing.assert_allclose(stats.inverse(tr.X), X, atol=1e-9)
        assert not np.allclose(stats.apply(tr.X), X)

    def test_test_uses_train_stats(self, rng):
        a = Dataset(rng.normal(size=(30, 2)), np.zeros(30, int), 1)
        b = Dataset(rng.normal(4, 1, size=(10, 2)), np.zeros(10, int), 1)
        _, te, stats = standardize(a, b)
        np.testing.assert_allclose(te.X, (b.X - a.X.mean(0)) / a.X.std(0))
