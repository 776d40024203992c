import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedobp.data import (
    ClientDataset,
    Dataset,
    IdxFormatError,
    PartitionPlan,
    client_arrays,
    dirichlet_partition,
    load_idx,
    read_plan,
    split_train_test,
    synth_dataset,
    write_idx,
    write_plan,
)


def balanced(num_classes, per_class):
    labels = np.repeat(np.arange(num_classes), per_class)
    return Dataset(np.zeros((labels.size, 1, 1, 1)), labels, num_classes)


def all_indices(plan):
    return np.concatenate([c.all_indices for c in plan.assignments])


class TestDataset:
    def test_rejects_out_of_range_pixels(self):
        with pytest.raises(ValueError):
            Dataset(np.full((1, 1, 2, 2), 1.5), [0], 2)

    def test_rejects_bad_labels(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((1, 1, 2, 2)), [2], 2)

    def test_rejects_count_mismatch(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((2, 1, 2, 2)), [0], 2)


class TestIdx:
    def test_round_trip_and_scaling(self, tmp_path):
        rng = np.random.default_rng(0)
        imgs = rng.integers(0, 256, (2, 28, 28), dtype=np.uint8)
        imgs[0, 0, 0] = 255
        imgs[0, 0, 1] = 0
        write_idx(imgs, np.array([3, 7], dtype=np.uint8), tmp_path / "i", tmp_path / "l")
        ds = load_idx(tmp_path / "i", tmp_path / "l", 10)
        assert len(ds) == 2 and ds.input_shape == (1, 28, 28)
        assert ds.images[0, 0, 0, 0] == 1.0 and ds.images[0, 0, 0, 1] == 0.0
        np.testing.assert_array_equal(ds.images[:, 0] * 255.0, imgs.astype(np.float64))
        assert ds.labels.tolist() == [3, 7]

    def test_header_is_big_endian(self, tmp_path):
        write_idx(np.zeros((2, 3, 4), np.uint8), np.zeros(2, np.uint8), tmp_path / "i", tmp_path / "l")
        raw = (tmp_path / "i").read_bytes()
        assert raw[:16] == bytes.fromhex("00000803") + struct.pack(">III", 2, 3, 4)
        assert (tmp_path / "l").read_bytes()[:8] == bytes.fromhex("00000801") + struct.pack(">I", 2)

    def test_count_mismatch(self, tmp_path):
        write_idx(np.zeros((2, 4, 4), np.uint8), np.zeros(3, np.uint8), tmp_path / "i", tmp_path / "l")
        with pytest.raises(IdxFormatError):
            load_idx(tmp_path / "i", tmp_path / "l")

    def test_bad_magic(self, tmp_path):
        write_idx(np.zeros((2, 4, 4), np.uint8), np.zeros(2, np.uint8), tmp_path / "i", tmp_path / "l")
        with pytest.raises(IdxFormatError, match="magic"):
            load_idx(tmp_path / "l", tmp_path / "i")

    def test_truncated(self, tmp_path):
        write_idx(np.zeros((2, 4, 4), np.uint8), np.zeros(2, np.uint8), tmp_path / "i", tmp_path / "l")
        raw = (tmp_path / "i").read_bytes()
        (tmp_path / "i").write_bytes(raw[:-1])
        with pytest.raises(IdxFormatError, match="truncated"):
            load_idx(tmp_path / "i", tmp_path / "l")
        (tmp_path / "i").write_bytes(raw[:6])
        with pytest.raises(IdxFormatError, match="truncated"):
            load_idx(tmp_path / "i", tmp_path / "l")


class TestDirichletPartition:
    def test_single_client_gets_everything(self):
        ds = balanced(3, 7)
        plan = dirichlet_partition(ds, 1, 0.37, 5)
        assert plan.assignments[0].train_indices.tolist() == list(range(21))

    @settings(max_examples=40, deadline=None)
    @given(n_clients=st.integers(1, 15), alpha=st.floats(0.01, 100.0), seed=st.integers(0, 2**31),
           per_class=st.integers(2, 40))
    def test_conservation_and_disjointness(self, n_clients, alpha, seed, per_class):
        ds = balanced(5, per_class)
        if len(ds) < n_clients:
            return
        plan = dirichlet_partition(ds, n_clients, alpha, seed)
        idx = all_indices(plan)
        assert sorted(idx.tolist()) == list(range(len(ds)))
        assert all(c.sample_count >= 1 for c in plan.assignments)
        for c in range(5):
            per_client = [np.sum(ds.labels[a.train_indices] == c) for a in plan.assignments]
            assert sum(per_client) == per_class

    def test_min_samples_repair(self):
        ds = balanced(10, 10)
        for seed in range(20):
            plan = dirichlet_partition(ds, 20, 0.05, seed, min_per_client=4)
            assert min(c.sample_count for c in plan.assignments) >= 4
            assert sorted(all_indices(plan).tolist()) == list(range(100))

    def test_deterministic(self):
        ds = balanced(10, 30)
        assert dirichlet_partition(ds, 7, 0.3, 11) == dirichlet_partition(ds, 7, 0.3, 11)
        assert dirichlet_partition(ds, 7, 0.3, 11) != dirichlet_partition(ds, 7, 0.3, 12)

    def test_errors(self):
        ds = balanced(2, 2)
        with pytest.raises(ValueError):
            dirichlet_partition(ds, 5, 0.5, 0)
        with pytest.raises(ValueError):
            dirichlet_partition(ds, 2, 0.0, 0)

    def test_large_alpha_is_near_uniform(self):
        ds = balanced(10, 1000)
        good = 0
        for seed in range(100):
            plan = dirichlet_partition(ds, 10, 1000.0, seed)
            hist = np.stack([np.bincount(ds.labels[c.train_indices], minlength=10) for c in plan.assignments])
            good += bool(np.all(np.abs(hist - 100) <= 20))
        assert good >= 95

    def test_smaller_alpha_lowers_label_entropy(self):
        ds = balanced(10, 100)

        def mean_entropy(alpha):
            vals = []
            for seed in range(30):
                for c in dirichlet_partition(ds, 20, alpha, seed).assignments:
                    p = np.bincount(ds.labels[c.train_indices], minlength=10) / c.sample_count
                    p = p[p > 0]
                    vals.append(-(p * np.log(p)).sum())
            return np.mean(vals)

        assert mean_entropy(0.1) < mean_entropy(0.5)


class TestSplit:
    def test_even_split_of_ten(self):
        plan = PartitionPlan([ClientDataset(0, np.arange(10))], 1.0, 0)
        out = split_train_test(plan, 0.5, 3).assignments[0]
        assert out.sample_count == 5 and out.test_indices.size == 5

    @pytest.mark.parametrize("labels", [None, np.repeat(np.arange(4), 25)])
    def test_disjoint_and_complete(self, labels):
        ds = balanced(4, 25)
        plan = dirichlet_partition(ds, 6, 0.5, 2, min_per_client=2)
        out = split_train_test(plan, 0.3, 2, labels=labels)
        for before, after in zip(plan.assignments, out.assignments):
            assert np.intersect1d(after.train_indices, after.test_indices).size == 0
            assert sorted(after.all_indices.tolist()) == sorted(before.all_indices.tolist())
            assert after.sample_count >= 1 and after.test_indices.size >= 1

    def test_stratified(self):
        labels = np.array([0] * 6 + [1] * 4)
        plan = PartitionPlan([ClientDataset(0, np.arange(10))], 1.0, 0)
        out = split_train_test(plan, 0.5, 9, labels=labels).assignments[0]
        assert np.bincount(labels[out.test_indices]).tolist() == [3, 2]

    def test_deterministic(self):
        ds = balanced(4, 25)
        plan = dirichlet_partition(ds, 6, 0.5, 2, min_per_client=2)
        assert split_train_test(plan, 0.5, 4, ds.labels) == split_train_test(plan, 0.5, 4, ds.labels)

    def test_errors(self):
        plan = PartitionPlan([ClientDataset(0, np.arange(1))], 1.0, 0)
        with pytest.raises(ValueError):
            split_train_test(plan, 0.5, 0)
        with pytest.raises(ValueError):
            split_train_test(PartitionPlan([ClientDataset(0, np.arange(4))], 1.0, 0), 1.0, 0)


def test_plan_file_round_trip(tmp_path):
    ds = balanced(5, 20)
    plan = split_train_test(dirichlet_partition(ds, 4, 0.2, 8), 0.5, 8, ds.labels)
    write_plan(plan, tmp_path / "p.csv")
    assert read_plan(tmp_path / "p.csv") == plan
    rows = [l for l in (tmp_path / "p.csv").read_text().splitlines() if l and not l.startswith("#")]
    assert rows[0] == "client_id,split,index" and len(rows) - 1 == len(ds)


def test_plan_file_malformed_row(tmp_path):
    (tmp_path / "p.csv").write_text("client_id,split,index\n0,validation,3\n")
    with pytest.raises(ValueError, match=":2:"):
        read_plan(tmp_path / "p.csv")


class TestSynth:
    def test_counts_and_range(self):
        ds = synth_dataset(4, 9, (1, 6, 6), 0.7, 1)
        assert len(ds) == 36 and np.bincount(ds.labels).tolist() == [9] * 4
        assert ds.images.min() >= 0 and ds.images.max() <= 1

    def test_zero_noise_classes_identical(self):
        ds = synth_dataset(3, 5, (1, 4, 4), 0.0, 2)
        for c in range(3):
            imgs = ds.images[ds.labels == c]
            assert np.all(imgs == imgs[0])
        assert not np.array_equal(ds.images[0], ds.images[5])

    def test_deterministic(self):
        a = synth_dataset(3, 5, (1, 4, 4), 0.3, 2)
        b = synth_dataset(3, 5, (1, 4, 4), 0.3, 2)
        assert a.images.tobytes() == b.images.tobytes()

    @pytest.mark.parametrize("block", [1, 4])
    def test_nearest_template_oracle(self, block):
        shape = (1, 16, 16)
        templates = synth_dataset(10, 1, shape, 0.0, 4, template_block=block).images  # same seed, same templates
        ds = synth_dataset(10, 50, shape, 0.05, 4, template_block=block)
        d = ((ds.images[:, None] - templates[None]) ** 2).sum(axis=(2, 3, 4))
        assert np.mean(d.argmin(axis=1) == ds.labels) == 1.0

    def test_block_templates_constant_on_blocks(self):
        ds = synth_dataset(3, 1, (2, 10, 10), 0.0, 6, template_block=4)
        for img in ds.images:
            for ch in img:
                for r0 in (0, 4, 8):
                    for c0 in (0, 4, 8):
                        patch = ch[r0:r0 + 4, c0:c0 + 4]
                        assert np.all(patch == patch[0, 0])
        assert np.unique(ds.images[0, 0]).size == 9  # 3 x 3 coarse grid, cropped edge blocks

    def test_errors(self):
        with pytest.raises(ValueError):
            synth_dataset(2, 5, (1, 4, 4), 0.1, 0, template_block=0)
        with pytest.raises(ValueError):
            synth_dataset(1, 5, (1, 4, 4), 0.1, 0)
        with pytest.raises(ValueError):
            synth_dataset(2, 0, (1, 4, 4), 0.1, 0)


def test_client_arrays():
    ds = synth_dataset(2, 3, (1, 2, 2), 0.1, 0)
    x, y, xt, yt = client_arrays(ds, ClientDataset(0, [0, 4], [5]))
    assert x.shape == (2, 1, 2, 2) and y.tolist() == [0, 1] and yt.tolist() == [1]
    np.testing.assert_array_equal(xt[0], ds.images[5])
