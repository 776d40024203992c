import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from fedobp.decouple import (
    MaskPartition,
    apply_downlink,
    fixed_layer_mask,
    merge,
    partition,
    quantile_rank,
    quantile_threshold,
    read_masks,
    select_mask,
    write_masks,
)
from fedobp.importance import ScoreVector
from fedobp.nn import Layer, LayerLayout, ModelSpec, ParamVector


def flat(n):
    return LayerLayout((Layer("classifier", 0, n, "fc", True),))


def sv(values):
    values = np.asarray(values, dtype=np.float64)
    return ScoreVector(values, flat(values.size))


def oracle_rank(q, n):
    # integer ceiling on q written as billionths (every quantile used here is a short decimal)
    return max(1, -(-round(q * 10**9) * n // 10**9))


def sort_oracle_count(values, q):
    """|K(u)| by brute force: sort, take the k-th smallest, count strictly larger."""
    ordered = sorted(values.tolist())
    k = oracle_rank(q, len(ordered))
    tau = ordered[k - 1]
    return sum(v > tau for v in values.tolist())


quantiles = st.sampled_from([0.01, 0.1, 0.25, 0.3, 0.5, 0.7, 0.75, 0.9, 0.99, 0.999, 0.9999, 1.0])


class TestThreshold:
    def test_median_of_four(self):
        assert quantile_threshold(sv([1, 2, 3, 4]), 0.5) == 2.0

    def test_q_one_gives_max(self):
        assert quantile_threshold(sv([0.3, 7.0, 2.0]), 1.0) == 7.0

    def test_ties_below(self):
        assert quantile_threshold(sv([0, 0, 0, 5]), 0.75) == 0.0

    def test_unsorted_input(self):
        assert quantile_threshold(sv([4, 1, 3, 2]), 0.5) == 2.0

    @pytest.mark.parametrize("q", [0.0, -0.1, 1.01, float("nan")])
    def test_bad_q(self, q):
        with pytest.raises(ValueError):
            quantile_threshold(sv([1, 2]), q)

    @pytest.mark.parametrize("q,n,k", [(0.1, 30, 3), (0.7, 10, 7), (0.9999, 878_538, 878_451),
                                       (0.3, 10, 3), (1e-9, 5, 1), (1.0, 5, 5)])
    def test_rank_on_decimal_value(self, q, n, k):
        assert quantile_rank(q, n) == k


class TestPartition:
    def test_example(self):
        m = partition(sv([0.1, 0.9, 0.5]), 0.5)
        assert m.personalized.tolist() == [1] and m.shared.tolist() == [0, 2]

    def test_all_equal_at_tau_is_empty(self):
        assert partition(sv([2.0] * 5), 2.0).n_personalized == 0

    def test_tau_below_min_is_everything(self):
        assert partition(sv([0.0, 1.0, 2.0]), -0.5).personalized.tolist() == [0, 1, 2]

    @settings(max_examples=80)
    @given(arrays(np.float64, st.integers(1, 60), elements=st.floats(0, 10)), quantiles)
    def test_complete_and_disjoint(self, values, q):
        m = select_mask(sv(values), q)
        union = np.union1d(m.personalized, m.shared)
        assert union.tolist() == list(range(values.size))
        assert np.intersect1d(m.personalized, m.shared).size == 0
        assert m.n_personalized + m.n_shared == values.size

    @settings(max_examples=80)
    @given(arrays(np.float64, st.integers(1, 60), elements=st.floats(0, 10)), quantiles, quantiles)
    def test_monotone_in_q(self, values, q1, q2):
        lo, hi = sorted((q1, q2))
        assert set(select_mask(sv(values), hi).personalized) <= set(select_mask(sv(values), lo).personalized)

    @given(arrays(np.float64, st.integers(1, 60), elements=st.floats(0, 10)))
    def test_q_one_empty(self, values):
        assert select_mask(sv(values), 1.0).n_personalized == 0

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 100_000), quantiles, st.integers(0, 2**32 - 1))
    def test_count_law_against_sort_oracle(self, n, q, seed):
        values = np.random.default_rng(seed).permutation(n).astype(np.float64)  # all distinct
        got = select_mask(sv(values), q).n_personalized
        assert got == sort_oracle_count(values, q) == n - oracle_rank(q, n)

    def test_heavy_ties_below_count_law(self):
        values = np.array([0.0] * 8 + [1.0, 2.0])
        assert select_mask(sv(values), 0.5).n_personalized == 2 < 10 - 5


class TestMerge:
    def test_empty_mask_is_global(self):
        lay = flat(3)
        g = ParamVector([9.0, 9.0, 9.0], lay)
        assert merge(ParamVector([1.0, 2.0, 3.0], lay), g, MaskPartition.none(3)).values.tolist() == [9.0] * 3

    def test_full_mask_is_local(self):
        lay = flat(3)
        loc = ParamVector([1.0, 2.0, 3.0], lay)
        out = merge(loc, ParamVector([9.0, 9.0, 9.0], lay), MaskPartition.everything(3))
        assert out.values.tolist() == [1.0, 2.0, 3.0]

    def test_example(self):
        lay = flat(3)
        out = merge(ParamVector([1.0, 2.0, 3.0], lay), ParamVector([9.0, 9.0, 9.0], lay), MaskPartition([1], 3))
        assert out.values.tolist() == [9.0, 2.0, 9.0]

    @given(arrays(np.float64, 12, elements=st.floats(-5, 5)), arrays(np.float64, 12, elements=st.floats(-5, 5)),
           arrays(bool, 12))
    def test_downlink_equals_merge(self, a, b, flags):
        lay = flat(12)
        loc, glob = ParamVector(a, lay), ParamVector(b, lay)
        mask = MaskPartition.from_bool(flags)
        via_wire = apply_downlink(loc, mask, glob.values[mask.shared])
        assert np.array_equal(via_wire.values, merge(loc, glob, mask).values)

    def test_size_mismatch(self):
        lay = flat(3)
        p = ParamVector([1.0, 2.0, 3.0], lay)
        with pytest.raises(ValueError):
            merge(p, p, MaskPartition.none(4))
        with pytest.raises(ValueError):
            apply_downlink(p, MaskPartition([0], 3), np.zeros(3))

    def test_mask_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            MaskPartition([0, 3], 3)

    def test_mask_is_read_only(self):
        m = MaskPartition([0, 2], 3)
        with pytest.raises(ValueError):
            m.personalized[0] = 1


class TestFixedLayerMask:
    layout = ModelSpec().layout

    def test_classifier_only(self):
        m = fixed_layer_mask(self.layout, {"classifier"})
        cls = self.layout.classifier
        assert m.personalized.tolist() == list(range(cls.start, cls.end))

    def test_body_only_is_complement(self):
        m = fixed_layer_mask(self.layout, {"conv1", "conv2", "fc1"})
        assert m == MaskPartition(fixed_layer_mask(self.layout, {"classifier"}).shared, self.layout.total_params)

    def test_empty(self):
        assert fixed_layer_mask(self.layout, set()).n_personalized == 0

    def test_unknown_layer(self):
        with pytest.raises(KeyError):
            fixed_layer_mask(self.layout, {"fc9"})


def test_mask_csv_round_trip(tmp_path):
    rows = [(1, 0, MaskPartition([3, 5], 10)), (1, 4, MaskPartition([0], 10)), (2, 0, MaskPartition([9], 10))]
    write_masks(rows, tmp_path / "m.csv")
    text = (tmp_path / "m.csv").read_text().splitlines()
    assert text[0] == "round,client_id,index" and text[1:3] == ["1,0,3", "1,0,5"]
    back = read_masks(tmp_path / "m.csv", 10)
    assert back == {(r, c, ): m for r, c, m in rows}


def test_mask_csv_bad_header(tmp_path):
    (tmp_path / "m.csv").write_text("r,c,i\n")
    with pytest.raises(ValueError):
        read_masks(tmp_path / "m.csv", 10)
