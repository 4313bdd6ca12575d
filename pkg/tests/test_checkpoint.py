import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from svcmerge.checkpoint import (
    DeltaStore,
    TensorStore,
    compute_deltas,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    write_checkpoint,
)
from svcmerge.errors import (
    MalformedHeaderError,
    NonFiniteInputError,
    ParameterSetMismatchError,
    ShapeDataMismatchError,
    ShapeMismatchError,
    UnsupportedDtypeError,
)


def _container(header: dict, payload: bytes = b"") -> bytes:
    raw = json.dumps(header).encode("utf-8")
    return len(raw).to_bytes(8, "little") + raw + payload


def _random_store(rng, count: int) -> TensorStore:
    entries = {}
    for i in range(count):
        ndim = int(rng.integers(0, 4))
        shape = tuple(int(d) for d in rng.integers(0, 5, size=ndim))
        dtype = np.float32 if rng.random() < 0.5 else np.float64
        entries[f"layer{i}.w"] = rng.normal(size=shape).astype(dtype)
    return TensorStore(entries)


class TestDecode:
    def test_hand_written_f32_fixture(self, tmp_path):
        payload = np.array([1, 2, 3, 4], dtype="<f4").tobytes()
        path = tmp_path / "w.safetensors"
        path.write_bytes(_container({"w": {"dtype": "F32", "shape": [2, 2], "data_offsets": [0, 16]}}, payload))

        store = load_checkpoint(path)

        assert store.names() == ("w",)
        assert store["w"].dtype == np.float32
        np.testing.assert_array_equal(store["w"], [[1.0, 2.0], [3.0, 4.0]])

    def test_empty_header(self):
        store = decode_checkpoint(_container({}))
        assert len(store) == 0

    def test_iteration_follows_header_order(self):
        payload = np.array([1.0, 2.0], dtype="<f8").tobytes()
        header = {
            "zeta": {"dtype": "F64", "shape": [1], "data_offsets": [0, 8]},
            "alpha": {"dtype": "F64", "shape": [1], "data_offsets": [8, 16]},
        }
        store = decode_checkpoint(_container(header, payload))
        assert store.names() == ("zeta", "alpha")
        assert store["alpha"][0] == 2.0

    def test_metadata_is_kept(self):
        header = {"__metadata__": {"format": "pt"}, "b": {"dtype": "F64", "shape": [], "data_offsets": [0, 8]}}
        store = decode_checkpoint(_container(header, np.array(3.5, dtype="<f8").tobytes()))
        assert dict(store.metadata) == {"format": "pt"}
        assert store["b"].shape == ()
        assert store["b"][()] == 3.5

    def test_tensors_are_read_only(self):
        store = decode_checkpoint(_container({"b": {"dtype": "F64", "shape": [1], "data_offsets": [0, 8]}}, bytes(8)))
        with pytest.raises(ValueError):
            store["b"][0] = 1.0


class TestDecodeErrors:
    def test_short_file(self):
        with pytest.raises(MalformedHeaderError):
            decode_checkpoint(b"\x01\x00")

    def test_length_prefix_past_end(self):
        with pytest.raises(MalformedHeaderError):
            decode_checkpoint((100).to_bytes(8, "little") + b"{}")

    def test_invalid_utf8(self):
        raw = b"\xff\xfe"
        with pytest.raises(MalformedHeaderError):
            decode_checkpoint(len(raw).to_bytes(8, "little") + raw)

    def test_invalid_json(self):
        raw = b"{not json"
        with pytest.raises(MalformedHeaderError):
            decode_checkpoint(len(raw).to_bytes(8, "little") + raw)

    def test_unsupported_dtype(self):
        buf = _container({"w": {"dtype": "I8", "shape": [1], "data_offsets": [0, 1]}}, b"\x00")
        with pytest.raises(UnsupportedDtypeError) as info:
            decode_checkpoint(buf)
        assert info.value.parameter == "w"

    def test_offsets_disagree_with_shape(self):
        buf = _container({"w": {"dtype": "F32", "shape": [3], "data_offsets": [0, 8]}}, bytes(8))
        with pytest.raises(ShapeDataMismatchError):
            decode_checkpoint(buf)

    def test_offsets_past_payload(self):
        buf = _container({"w": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]}}, bytes(4))
        with pytest.raises(ShapeDataMismatchError):
            decode_checkpoint(buf)

    def test_trailing_payload(self):
        buf = _container({"w": {"dtype": "F32", "shape": [1], "data_offsets": [0, 4]}}, bytes(12))
        with pytest.raises(ShapeDataMismatchError):
            decode_checkpoint(buf)


class TestEncode:
    def test_empty_store_round_trip(self, tmp_path):
        path = tmp_path / "empty.safetensors"
        write_checkpoint(TensorStore({}), path)
        assert len(load_checkpoint(path)) == 0

    def test_f64_zero_round_trip(self, tmp_path):
        path = tmp_path / "z.safetensors"
        store = TensorStore({"z": np.array([0.0])})
        write_checkpoint(store, path)
        assert load_checkpoint(path).same_as(store)

    def test_header_sorted_and_padded(self):
        buf = encode_checkpoint(TensorStore({"b": np.ones(2), "a": np.ones(3, dtype=np.float32)}, {"k": "v"}))
        n = int.from_bytes(buf[:8], "little")
        assert n % 8 == 0
        header = json.loads(buf[8:8 + n])
        assert list(header) == ["__metadata__", "a", "b"]
        assert header["a"]["data_offsets"] == [0, 12]
        assert header["b"]["data_offsets"] == [12, 28]

    def test_three_tensor_file_rewrites_byte_identically(self, tmp_path):
        rng = np.random.default_rng(3)
        store = TensorStore(
            {
                "enc.weight": rng.normal(size=(4, 3)).astype(np.float32),
                "enc.bias": rng.normal(size=(4,)),
                "scale": np.array(1.5, dtype=np.float32),
            },
            {"note": "fixture"},
        )
        first = tmp_path / "a.safetensors"
        second = tmp_path / "b.safetensors"
        write_checkpoint(store, first)
        write_checkpoint(load_checkpoint(first), second)
        assert first.read_bytes() == second.read_bytes()

    def test_hundred_random_tensors_bit_exact(self, tmp_path):
        store = _random_store(np.random.default_rng(7), 100)
        path = tmp_path / "many.safetensors"
        write_checkpoint(store, path)
        loaded = load_checkpoint(path)
        assert set(loaded.names()) == set(store.names())
        for name in store.names():
            assert loaded[name].dtype == store[name].dtype
            assert loaded[name].shape == store[name].shape
            assert loaded[name].tobytes() == store[name].tobytes()

    def test_rejects_integer_tensors(self):
        with pytest.raises(UnsupportedDtypeError):
            TensorStore({"i": np.arange(3)})

    def test_no_temp_files_left(self, tmp_path):
        write_checkpoint(TensorStore({"a": np.ones(1)}), tmp_path / "out.safetensors")
        assert [p.name for p in tmp_path.iterdir()] == ["out.safetensors"]


@settings(max_examples=50, deadline=None)
@given(
    tensors=st.dictionaries(
        keys=st.text(min_size=1, max_size=12).filter(lambda s: s != "__metadata__"),
        values=st.one_of(
            arrays(np.float32, st.tuples(st.integers(0, 3), st.integers(0, 3))),
            arrays(np.float64, st.tuples(st.integers(0, 4))),
        ),
        max_size=6,
    )
)
def test_encode_decode_is_bit_exact(tensors):
    store = TensorStore(tensors)
    loaded = decode_checkpoint(encode_checkpoint(store))
    assert loaded.names() == tuple(sorted(store.names()))
    for name in store.names():
        assert loaded[name].dtype == store[name].dtype
        assert loaded[name].tobytes() == store[name].tobytes()


class TestReferenceInterop:
    """Files must be readable by, and read files from, the reference safetensors codec."""

    def test_reference_reads_our_files(self, tmp_path):
        st_numpy = pytest.importorskip("safetensors.numpy")
        store = _random_store(np.random.default_rng(11), 8)
        path = tmp_path / "ours.safetensors"
        write_checkpoint(store, path)
        ref = st_numpy.load_file(str(path))
        for name in store.names():
            np.testing.assert_array_equal(ref[name], store[name])
            assert ref[name].dtype == store[name].dtype

    def test_we_read_reference_files(self, tmp_path):
        st_numpy = pytest.importorskip("safetensors.numpy")
        rng = np.random.default_rng(12)
        tensors = {"w": rng.normal(size=(3, 5)).astype(np.float32), "b": rng.normal(size=(5,))}
        path = tmp_path / "ref.safetensors"
        st_numpy.save_file(tensors, str(path), metadata={"source": "reference"})
        store = load_checkpoint(path)
        assert dict(store.metadata) == {"source": "reference"}
        for name, arr in tensors.items():
            assert store[name].tobytes() == arr.tobytes()


class TestComputeDeltas:
    def test_identical_stores_give_zero(self):
        rng = np.random.default_rng(0)
        pre = TensorStore({"w": rng.normal(size=(3, 2)).astype(np.float32), "b": rng.normal(size=3)})
        deltas = compute_deltas(pre, pre)
        assert isinstance(deltas, DeltaStore)
        for name in pre.names():
            assert deltas[name].dtype == np.float64
            assert not np.any(deltas[name])

    def test_elementwise_difference(self):
        deltas = compute_deltas(TensorStore({"w": np.array([1.0, 2.0])}), TensorStore({"w": np.array([3.0, 5.0])}))
        np.testing.assert_array_equal(deltas["w"], [2.0, 3.0])

    def test_f32_inputs_promoted(self):
        deltas = compute_deltas(
            TensorStore({"w": np.array([1.0], dtype=np.float32)}), TensorStore({"w": np.array([1.5], dtype=np.float32)})
        )
        assert deltas["w"].dtype == np.float64
        assert deltas["w"][0] == 0.5

    def test_reconstruction_is_exact_within_a_binade(self):
        # Sterbenz: x - y is exact when y/2 <= x <= 2y, so pre + delta == ft holds bitwise.
        rng = np.random.default_rng(5)
        pre = rng.uniform(1.0, 2.0, size=(6, 7))
        ft = rng.uniform(1.0, 2.0, size=(6, 7))
        deltas = compute_deltas(TensorStore({"w": pre}), TensorStore({"w": ft}))
        np.testing.assert_array_equal(deltas["w"] + pre, ft)

    def test_extra_finetuned_parameter_is_an_error(self):
        with pytest.raises(ParameterSetMismatchError):
            compute_deltas(TensorStore({"w": np.ones(2)}), TensorStore({"w": np.ones(2), "extra": np.ones(1)}))

    def test_missing_parameter_is_an_error(self):
        with pytest.raises(ParameterSetMismatchError):
            compute_deltas(TensorStore({"w": np.ones(2), "b": np.ones(1)}), TensorStore({"w": np.ones(2)}))

    def test_shape_mismatch_names_parameter(self):
        with pytest.raises(ShapeMismatchError) as info:
            compute_deltas(TensorStore({"w": np.ones((2, 2))}), TensorStore({"w": np.ones((2, 3))}))
        assert info.value.parameter == "w"
        assert "parameter=w" in str(info.value)

    def test_non_finite_delta_rejected(self):
        with pytest.raises(NonFiniteInputError):
            compute_deltas(TensorStore({"w": np.ones(2)}), TensorStore({"w": np.array([1.0, np.inf])}))
