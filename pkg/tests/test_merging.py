import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from svcmerge.checkpoint import TensorStore, compute_deltas
from svcmerge.errors import (
    ConfigError,
    EmptyTaskListError,
    InvalidDropRateError,
    InvalidTrimFractionError,
    ParameterSetMismatchError,
    ShapeMismatchError,
)
from svcmerge.merging import (
    MergedDelta,
    MergeMethod,
    MergeTag,
    assemble_weights,
    dare_generator,
    merge_average,
    merge_dare,
    merge_store,
    merge_sum,
    merge_ties,
    ties_keep_count,
)


def _ties_oracle(deltas, trim_fraction):
    """Element-by-element TIES written as plain loops."""
    flat = [np.asarray(d, dtype=np.float64).reshape(-1) for d in deltas]
    size = flat[0].size
    keep = math.ceil(trim_fraction * size - 1e-9)
    keep = max(1, min(size, keep))
    trimmed = []
    for f in flat:
        threshold = sorted(abs(x) for x in f)[size - keep]
        trimmed.append([x if abs(x) >= threshold else 0.0 for x in f])
    out = []
    for j in range(size):
        col = [t[j] for t in trimmed]
        total = sum(col)
        sign = int(total > 0) - int(total < 0)
        agree = [x for x in col if sign != 0 and (int(x > 0) - int(x < 0)) == sign]
        out.append(sum(agree) / len(agree) if agree else 0.0)
    return np.array(out).reshape(np.shape(deltas[0]))


class TestSumAverage:
    def test_single_task_sum(self):
        a = np.random.default_rng(0).normal(size=(3, 4))
        np.testing.assert_array_equal(merge_sum([a]), a)

    def test_cancellation(self):
        np.testing.assert_array_equal(merge_sum([np.array([[1.0]]), np.array([[-1.0]])]), [[0.0]])

    def test_single_task_average(self):
        a = np.random.default_rng(1).normal(size=(2, 2))
        np.testing.assert_array_equal(merge_average([a]), a)

    def test_average_of_two(self):
        np.testing.assert_array_equal(merge_average([np.array([[2.0]]), np.array([[4.0]])]), [[3.0]])

    @pytest.mark.parametrize("k", [2, 3, 5, 6, 7])
    def test_copies_of_one_delta_are_exact(self, k):
        a = np.random.default_rng(2).normal(size=(50, 50))
        a[0, 0] = 0.1
        np.testing.assert_array_equal(merge_average([a] * k), a)
        np.testing.assert_array_equal(merge_sum([a] * k), k * a)

    def test_partly_shared_entries_stay_exact(self):
        rng = np.random.default_rng(12)
        shared = rng.normal(size=(4, 4))
        deltas = [shared.copy() for _ in range(3)]
        for d in deltas:
            d[0] = rng.normal(size=4)
        np.testing.assert_array_equal(merge_average(deltas)[1:], shared[1:])
        np.testing.assert_array_equal(merge_sum(deltas)[1:], 3 * shared[1:])

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(13)
        deltas = [rng.normal(size=(4, 4)) for _ in range(3)]
        expected = np.zeros((4, 4))
        for i in range(4):
            for j in range(4):
                acc = 0.0
                for x in sorted(float(d[i, j]) for d in deltas):
                    acc += x
                expected[i, j] = acc
        np.testing.assert_array_equal(merge_sum(deltas), expected)
        np.testing.assert_array_equal(merge_average(deltas), merge_sum(deltas) / 3)

    def test_empty_list(self):
        with pytest.raises(EmptyTaskListError):
            merge_sum([])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            merge_sum([np.zeros((2, 2)), np.zeros((2, 3))])


class TestTies:
    def test_single_task_full_keep(self):
        a = np.random.default_rng(3).normal(size=(4, 4))
        np.testing.assert_array_equal(merge_ties([a], trim_fraction=1.0), a)

    def test_sign_tie_gives_zero(self):
        np.testing.assert_array_equal(merge_ties([np.array([[2.0]]), np.array([[-2.0]])], 1.0), [[0.0]])

    def test_disjoint_mean(self):
        a = np.array([3.0, -1.0])
        b = np.array([1.0, -5.0])
        c = np.array([-1.0, 2.0])
        # entry 0: sum 3 > 0, mean of (3, 1) = 2; entry 1: sum -4 < 0, mean of (-1, -5) = -3
        np.testing.assert_array_equal(merge_ties([a, b, c], 1.0), [2.0, -3.0])

    def test_trim_keeps_top_magnitudes(self):
        a = np.array([5.0, 0.1, -4.0, 0.2, 0.3])
        np.testing.assert_array_equal(merge_ties([a], 0.4), [5.0, 0.0, -4.0, 0.0, 0.0])

    def test_ties_at_threshold_are_kept(self):
        a = np.array([1.0, -1.0, 1.0, 0.5])
        # keep count is 1 but all three magnitude-1 entries tie at the threshold
        np.testing.assert_array_equal(merge_ties([a], 0.25), [1.0, -1.0, 1.0, 0.0])

    def test_keep_count(self):
        assert ties_keep_count(30, 0.1) == 3
        assert ties_keep_count(10, 0.2) == 2
        assert ties_keep_count(7, 0.2) == 2
        assert ties_keep_count(3, 0.01) == 1
        assert ties_keep_count(4, 1.0) == 4

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            k = int(rng.integers(1, 5))
            shape = (int(rng.integers(1, 6)), int(rng.integers(1, 6)))
            trim = float(rng.choice([0.1, 0.2, 0.5, 1.0]))
            deltas = [rng.normal(size=shape) for _ in range(k)]
            np.testing.assert_allclose(merge_ties(deltas, trim), _ties_oracle(deltas, trim), rtol=1e-12, atol=1e-15)

    @pytest.mark.parametrize("trim", [0.0, -0.1, 1.5])
    def test_invalid_trim(self, trim):
        with pytest.raises(InvalidTrimFractionError):
            merge_ties([np.ones((2, 2))], trim)


class TestDare:
    def test_zero_drop_equals_base(self):
        rng = np.random.default_rng(5)
        deltas = [rng.normal(size=(3, 3)) for _ in range(3)]
        np.testing.assert_array_equal(merge_dare(deltas, 0.0, MergeTag.SUM, seed=9), merge_sum(deltas))
        np.testing.assert_array_equal(merge_dare(deltas, 0.0, MergeTag.AVERAGE, seed=9), merge_average(deltas))

    def test_same_seed_is_bitwise_reproducible(self):
        rng = np.random.default_rng(6)
        deltas = [rng.normal(size=(4, 5)) for _ in range(2)]
        first = merge_dare(deltas, 0.7, seed=123, parameter="w", task_ids=["a", "b"])
        second = merge_dare(deltas, 0.7, seed=123, parameter="w", task_ids=["a", "b"])
        assert first.tobytes() == second.tobytes()

    def test_streams_depend_on_parameter_and_task(self):
        draw = lambda *key: dare_generator(*key).random(8)
        assert not np.array_equal(draw(0, "w", "a"), draw(0, "w", "b"))
        assert not np.array_equal(draw(0, "w", "a"), draw(0, "v", "a"))
        assert not np.array_equal(draw(0, "w", "a"), draw(1, "w", "a"))
        np.testing.assert_array_equal(draw(0, "w", "a"), draw(0, "w", "a"))

    def test_survivors_are_rescaled(self):
        delta = np.full((10, 10), 2.0)
        out = merge_dare([delta], 0.75, seed=1, parameter="p")
        assert set(np.unique(out)) <= {0.0, 8.0}

    def test_expectation_over_seeds(self):
        delta = np.array([[0.5, -0.25], [0.1, 0.4]])
        total = np.zeros_like(delta)
        n = 10_000
        for seed in range(n):
            total += merge_dare([delta], 0.5, seed=seed, parameter="w")
        np.testing.assert_allclose(total / n, delta, atol=0.02)

    @pytest.mark.parametrize("rate", [1.0, -0.1])
    def test_invalid_rate(self, rate):
        with pytest.raises(InvalidDropRateError):
            merge_dare([np.ones(2)], rate)


class TestMergeMethod:
    def test_defaults(self):
        method = MergeMethod()
        assert method.tag is MergeTag.SUM
        assert method.describe() == {"method": "sum"}

    def test_describe_dare(self):
        method = MergeMethod("dare", dare_drop_rate=0.5, dare_base="average", seed=3)
        assert method.describe() == {"method": "dare", "dare_drop_rate": 0.5, "dare_base": "average", "seed": 3}

    def test_rejects_ties_as_dare_base(self):
        with pytest.raises(ConfigError):
            MergeMethod("dare", dare_base="ties")

    def test_rejects_negative_seed(self):
        with pytest.raises(ConfigError):
            MergeMethod(seed=-1)


class TestStoreLevel:
    def _deltas(self, rng, k=3):
        pre = TensorStore({"w": rng.normal(size=(3, 4)), "b": rng.normal(size=4).astype(np.float32)})
        stores = []
        for _ in range(k):
            ft = TensorStore({n: (pre[n] + rng.normal(scale=0.1, size=pre[n].shape)).astype(pre[n].dtype) for n in pre.names()})
            stores.append(compute_deltas(pre, ft))
        return pre, stores

    def test_merge_store_per_parameter(self):
        pre, deltas = self._deltas(np.random.default_rng(7))
        merged = merge_store(deltas, MergeMethod("average"), task_ids=["a", "b", "c"])
        assert merged.k == 3
        for name in pre.names():
            np.testing.assert_array_equal(merged[name], merge_average([d[name] for d in deltas]))

    def test_dare_store_matches_direct_call(self):
        pre, deltas = self._deltas(np.random.default_rng(8), k=2)
        method = MergeMethod("dare", dare_drop_rate=0.5, seed=11)
        merged = merge_store(deltas, method, task_ids=["x", "y"])
        direct = merge_dare([d["w"] for d in deltas], 0.5, seed=11, parameter="w", task_ids=["x", "y"])
        assert merged["w"].tobytes() == direct.tobytes()

    def test_parameter_set_mismatch(self):
        a = compute_deltas(TensorStore({"w": np.ones(2)}), TensorStore({"w": np.ones(2)}))
        b = compute_deltas(TensorStore({"v": np.ones(2)}), TensorStore({"v": np.ones(2)}))
        with pytest.raises(ParameterSetMismatchError):
            merge_store([a, b], MergeMethod())

    def test_errors_carry_parameter(self):
        a = compute_deltas(TensorStore({"w": np.ones(2)}), TensorStore({"w": np.ones(2)}))
        b = compute_deltas(TensorStore({"w": np.ones(3)}), TensorStore({"w": np.ones(3)}))
        with pytest.raises(ShapeMismatchError) as info:
            merge_store([a, b], MergeMethod())
        assert info.value.parameter == "w"


class TestAssemble:
    def test_lambda_zero_returns_pretrained(self):
        rng = np.random.default_rng(9)
        pre = TensorStore({"w": rng.normal(size=(2, 3)).astype(np.float32), "b": rng.normal(size=3)})
        merged = MergedDelta({n: rng.normal(size=pre[n].shape) for n in pre.names()}, MergeMethod(), 1)
        out = assemble_weights(pre, merged, lam=0.0)
        assert out.same_as(pre)

    def test_zero_delta_returns_pretrained(self):
        pre = TensorStore({"w": np.array([[1.5, -2.0]], dtype=np.float32)}, {"k": "v"})
        out = assemble_weights(pre, MergedDelta({"w": np.zeros((1, 2))}, MergeMethod(), 1))
        assert out.same_as(pre)
        assert dict(out.metadata) == {"k": "v"}

    def test_scaled_delta_and_dtype(self):
        pre = TensorStore({"w": np.array([1.0, 2.0], dtype=np.float32)})
        out = assemble_weights(pre, MergedDelta({"w": np.array([1.0, -1.0])}, MergeMethod(), 2), lam=0.5)
        assert out["w"].dtype == np.float32
        np.testing.assert_array_equal(out["w"], [1.5, 1.5])

    def test_missing_parameter(self):
        pre = TensorStore({"w": np.ones(2), "b": np.ones(1)})
        with pytest.raises(ParameterSetMismatchError):
            assemble_weights(pre, MergedDelta({"w": np.zeros(2)}, MergeMethod(), 1))

    def test_non_finite_lambda(self):
        pre = TensorStore({"w": np.ones(2)})
        with pytest.raises(ConfigError):
            assemble_weights(pre, MergedDelta({"w": np.zeros(2)}, MergeMethod(), 1), lam=float("nan"))


@settings(max_examples=100, deadline=None)
@given(
    k=st.integers(1, 5),
    rows=st.integers(1, 6),
    cols=st.integers(1, 6),
    seed=st.integers(0, 2**32 - 1),
    data=st.data(),
)
def test_task_order_does_not_change_the_merge(k, rows, cols, seed, data):
    rng = np.random.default_rng(seed)
    deltas = [rng.normal(size=(rows, cols)) for _ in range(k)]
    ids = [f"task{i}" for i in range(k)]
    order = data.draw(st.permutations(range(k)))
    shuffled = [deltas[i] for i in order]
    shuffled_ids = [ids[i] for i in order]

    assert merge_sum(shuffled).tobytes() == merge_sum(deltas).tobytes()
    assert merge_average(shuffled).tobytes() == merge_average(deltas).tobytes()
    assert merge_ties(shuffled, 0.5).tobytes() == merge_ties(deltas, 0.5).tobytes()
    first = merge_dare(deltas, 0.5, seed=seed, parameter="w", task_ids=ids)
    second = merge_dare(shuffled, 0.5, seed=seed, parameter="w", task_ids=shuffled_ids)
    assert first.tobytes() == second.tobytes()
