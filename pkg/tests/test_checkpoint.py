import json
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mergelab import Checkpoint, DtypeError, FormatError, MismatchError, ValidationError, check_compatible
from mergelab.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint

from conftest import random_checkpoint


def container(header: dict, data: bytes, pad: bool = True) -> bytes:
    """Hand-built container bytes, independent of the library writer."""
    h = json.dumps(header).encode()
    if pad:
        h += b" " * (-len(h) % 8)
    return struct.pack("<Q", len(h)) + h + data


finite_f32 = st.floats(allow_nan=False, allow_infinity=False, width=32)
tensor = hnp.arrays(np.float32, hnp.array_shapes(min_dims=1, max_dims=3, min_side=1, max_side=5), elements=finite_f32)
names = st.text(alphabet="abcdefghij._0123456789", min_size=1, max_size=12).filter(lambda s: s != "__metadata__")
checkpoints = st.dictionaries(names, tensor, max_size=5).map(Checkpoint)


# -- load / save ----------------------------------------------------------------

def test_load_hand_built_single_tensor():
    blob = container({"w": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]}}, struct.pack("<2f", 1.0, 2.0))
    ck = decode_checkpoint(blob)
    assert ck.names() == ["w"]
    assert ck["w"].dtype == np.float32
    assert ck["w"].tolist() == [1.0, 2.0]


def test_unpadded_header_is_accepted():
    blob = container({"w": {"dtype": "F32", "shape": [1], "data_offsets": [0, 4]}}, struct.pack("<f", 3.0), pad=False)
    assert decode_checkpoint(blob)["w"].tolist() == [3.0]


def test_float16_half_on_disk_loads_exactly():
    blob = container({"w": {"dtype": "F16", "shape": [1], "data_offsets": [0, 2]}}, bytes.fromhex("0038"))
    assert decode_checkpoint(blob)["w"].tolist() == [0.5]


def test_bfloat16_on_disk_loads_exactly():
    # 0x3FC0 is 1.5 in bfloat16
    blob = container({"w": {"dtype": "BF16", "shape": [1], "data_offsets": [0, 2]}}, bytes.fromhex("c03f"))
    assert decode_checkpoint(blob)["w"].tolist() == [1.5]


def test_metadata_preserved(tmp_path):
    ck = random_checkpoint(0, metadata={"id": "expert-a", "note": "x"})
    save_checkpoint(ck, tmp_path / "a.safetensors")
    back = load_checkpoint(tmp_path / "a.safetensors")
    assert back.metadata == {"id": "expert-a", "note": "x"}
    assert back == ck


@given(checkpoints)
def test_float32_round_trip_is_bit_exact(ck):
    back = decode_checkpoint(encode_checkpoint(ck))
    assert back.equals(ck)
    assert back.names() == ck.names()
    for n in ck:
        assert back[n].tobytes() == ck[n].tobytes()


def test_empty_checkpoint_round_trips():
    blob = encode_checkpoint(Checkpoint({}))
    (n,) = struct.unpack("<Q", blob[:8])
    assert json.loads(blob[8 : 8 + n]) == {}
    assert len(blob) == 8 + n
    assert len(decode_checkpoint(blob)) == 0


def test_header_is_eight_byte_aligned():
    blob = encode_checkpoint(random_checkpoint(1))
    (n,) = struct.unpack("<Q", blob[:8])
    assert n % 8 == 0


def test_loading_twice_is_identical(tmp_path):
    path = tmp_path / "c.safetensors"
    save_checkpoint(random_checkpoint(2), path)
    a, b = load_checkpoint(path), load_checkpoint(path)
    assert a == b and a.names() == b.names()


def test_iteration_order_is_lexicographic():
    ck = Checkpoint({"b": np.ones(1), "a": np.ones(1), "c.0": np.ones(1)})
    assert list(ck) == ["a", "b", "c.0"]


# Reference round-to-nearest-even float16 values for hand-picked inputs.
F16_TABLE = [
    (0.1, 0.0999755859375),
    (1 / 3, 0.333251953125),
    (1.0001, 1.0),
    (2049.0, 2048.0),
    (2051.0, 2052.0),
    (65504.0, 65504.0),
    (3e-8, 5.9604644775390625e-08),
    (1e-8, 0.0),
    (-1.5, -1.5),
]


def test_float16_save_matches_rounding_table(tmp_path):
    xs = np.array([x for x, _ in F16_TABLE], dtype=np.float32)
    path = tmp_path / "h.safetensors"
    save_checkpoint(Checkpoint({"w": xs}), path, dtype="float16")
    got = load_checkpoint(path)["w"].tolist()
    assert got == [y for _, y in F16_TABLE]


def test_float16_overflow_is_rejected():
    with pytest.raises(ValidationError):
        encode_checkpoint(Checkpoint({"w": np.array([70000.0])}), "float16")


def test_bfloat16_matches_ml_dtypes():
    ml_dtypes = pytest.importorskip("ml_dtypes")
    rng = np.random.default_rng(0)
    xs = np.concatenate([rng.standard_normal(2000) * 10.0 ** rng.integers(-20, 20, 2000), [0.0, -0.0, 1.0, 3.0e38]]).astype(np.float32)
    ours = decode_checkpoint(encode_checkpoint(Checkpoint({"w": xs}), "bfloat16"))["w"]
    ref = xs.astype(ml_dtypes.bfloat16).astype(np.float32)
    assert ours.tobytes() == ref.tobytes()


def test_interop_with_safetensors_package(tmp_path):
    st_numpy = pytest.importorskip("safetensors.numpy")
    ck = random_checkpoint(3, metadata={"k": "v"})
    ours = tmp_path / "ours.safetensors"
    save_checkpoint(ck, ours)
    loaded = st_numpy.load_file(str(ours))
    assert sorted(loaded) == ck.names()
    for n in ck:
        assert loaded[n].tobytes() == ck[n].tobytes()
    theirs = tmp_path / "theirs.safetensors"
    st_numpy.save_file({n: np.array(ck[n]) for n in ck}, str(theirs), metadata={"k": "v"})
    assert load_checkpoint(theirs) == ck


# -- malformed input ------------------------------------------------------------

def test_truncated_data_is_a_format_error():
    blob = encode_checkpoint(random_checkpoint(4))
    with pytest.raises(FormatError):
        decode_checkpoint(blob[:-1])


@pytest.mark.parametrize(
    "blob",
    [
        b"\x01\x00",
        struct.pack("<Q", 1000) + b"{}",
        struct.pack("<Q", 8) + b"not json",
        container([], b""),
        container({"w": {"dtype": "F32", "shape": [2]}}, b"\0" * 8),
        container({"w": {"dtype": "F32", "shape": [2], "data_offsets": [0, 4]}}, b"\0" * 4),
        container({"w": {"dtype": "F32", "shape": [1], "data_offsets": [4, 8]}}, b"\0" * 8),
        container({"w": {"dtype": "F32", "shape": [1], "data_offsets": [0, 4]}}, b"\0" * 8),
        container({"w": {"dtype": "F32", "shape": [-1], "data_offsets": [0, 4]}}, b"\0" * 4),
        container({"__metadata__": {"a": 1}}, b""),
    ],
    ids=["short", "header-too-long", "bad-json", "not-object", "missing-offsets", "span-vs-shape",
         "gap", "trailing-bytes", "negative-dim", "bad-metadata"],
)
def test_malformed_containers(blob):
    with pytest.raises(FormatError):
        decode_checkpoint(blob)


def test_overlapping_spans_rejected():
    header = {
        "a": {"dtype": "F32", "shape": [1], "data_offsets": [0, 4]},
        "b": {"dtype": "F32", "shape": [1], "data_offsets": [0, 4]},
    }
    with pytest.raises(FormatError):
        decode_checkpoint(container(header, b"\0" * 4))


def test_unsupported_dtype():
    with pytest.raises(DtypeError):
        decode_checkpoint(container({"w": {"dtype": "I32", "shape": [1], "data_offsets": [0, 4]}}, b"\0" * 4))


@pytest.mark.parametrize("value", [float("nan"), float("inf"), float("-inf")])
def test_non_finite_values_rejected_at_load(value):
    blob = container({"w": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]}}, struct.pack("<2f", 1.0, value))
    with pytest.raises(ValidationError):
        decode_checkpoint(blob)


def test_constructor_validation():
    with pytest.raises(ValidationError):
        Checkpoint({"w": np.array([np.nan])})
    with pytest.raises(ValidationError):
        Checkpoint({"__metadata__": np.ones(1)})
    with pytest.raises(ValidationError):
        Checkpoint({"w": np.ones((0, 2))})


def test_tensors_are_read_only():
    ck = random_checkpoint(5)
    with pytest.raises(ValueError):
        ck["layer_0.b"][0] = 1.0


def test_unwritable_path_raises_os_error(tmp_path):
    with pytest.raises(OSError):
        save_checkpoint(random_checkpoint(0), tmp_path / "missing-dir" / "x.safetensors")


# -- compatibility --------------------------------------------------------------

def test_check_compatible_reflexive():
    ck = random_checkpoint(6)
    assert check_compatible(ck, ck) == ck.signature()


def test_extra_tensor_is_named():
    a = Checkpoint({"w": np.ones(2), "lm_head": np.ones(2)})
    b = Checkpoint({"w": np.ones(2)})
    with pytest.raises(MismatchError) as info:
        check_compatible(a, b)
    assert "lm_head" in str(info.value)
    assert any("lm_head" in m for m in info.value.mismatches)


def test_transposed_shape_mismatch():
    with pytest.raises(MismatchError):
        check_compatible(Checkpoint({"w": np.ones((2, 3))}), Checkpoint({"w": np.ones((3, 2))}))


def test_mismatch_list_capped_at_ten():
    a = Checkpoint({f"t{i:02d}": np.ones(1) for i in range(15)})
    b = Checkpoint({f"t{i:02d}": np.ones(2) for i in range(15)})
    with pytest.raises(MismatchError) as info:
        check_compatible(a, b)
    assert len(info.value.mismatches) == 10


@given(checkpoints, checkpoints)
def test_check_compatible_symmetric(a, b):
    def outcome(x, y):
        try:
            return check_compatible(x, y)
        except MismatchError:
            return None

    assert outcome(a, b) == outcome(b, a)
