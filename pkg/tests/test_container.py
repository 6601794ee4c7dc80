import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from invvc import container
from invvc.container import (
    BadMagicError,
    IntegrityError,
    TruncatedFileError,
    UnsupportedVersionError,
    decode,
    encode,
)


def test_layout_by_hand():
    blob = encode({"b": 1, "a": [2]}, {"x": np.array([[1.0, 2.0]], dtype=np.float32)})
    meta = b'{"a":[2],"b":1}'
    expected = (
        b"IVVC"
        + struct.pack("<II", 1, len(meta))
        + meta
        + struct.pack("<I", 1)
        + struct.pack("<H", 1)
        + b"x"
        + struct.pack("<B", 2)
        + struct.pack("<II", 1, 2)
        + struct.pack("<2f", 1.0, 2.0)
    )
    assert blob == expected


def test_scalar_and_empty_tensors():
    meta, tensors = decode(encode({}, {"s": np.float32(3.5), "e": np.zeros((0, 4))}))
    assert meta == {}
    assert tensors["s"].shape == () and tensors["s"] == 3.5
    assert tensors["e"].shape == (0, 4)


@settings(max_examples=40, deadline=None)
@given(
    hnp.arrays(
        np.float32,
        hnp.array_shapes(min_dims=1, max_dims=3, max_side=5),
        elements=st.floats(-1e6, 1e6, width=32),
    ),
    st.text(min_size=1, max_size=12),
)
def test_round_trip_is_bit_exact(arr, name):
    blob = encode({"k": name}, {name: arr})
    meta, tensors = decode(blob)
    assert meta == {"k": name}
    np.testing.assert_array_equal(tensors[name], arr)
    assert encode(meta, tensors) == blob


def test_save_load(tmp_path):
    path = tmp_path / "f.ivvc"
    container.save(path, {"v": 1}, {"mel": np.ones((3, 2))})
    meta, t = container.load(path)
    assert meta == {"v": 1} and t["mel"].dtype == np.float32


@pytest.fixture
def blob():
    return encode({"a": 1}, {"w": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.ones(2)})


def test_bad_magic(blob):
    with pytest.raises(BadMagicError):
        decode(b"XVVC" + blob[4:])


def test_unsupported_version(blob):
    with pytest.raises(UnsupportedVersionError):
        decode(blob[:4] + struct.pack("<I", 2) + blob[8:])


def test_truncation_everywhere(blob):
    # every cut that does not land on the final tensor boundary is caught
    for cut in range(len(blob)):
        with pytest.raises((TruncatedFileError, IntegrityError)):
            decode(blob[:cut])


def test_truncated_mid_tensor(blob):
    with pytest.raises(TruncatedFileError):
        decode(blob[:-3])


def test_tensor_count_tampered(blob):
    meta_len = struct.unpack("<I", blob[8:12])[0]
    at = 12 + meta_len
    more = blob[:at] + struct.pack("<I", 3) + blob[at + 4 :]
    with pytest.raises(IntegrityError, match="declares 3"):
        decode(more)
    fewer = blob[:at] + struct.pack("<I", 1) + blob[at + 4 :]
    with pytest.raises(IntegrityError, match="trailing"):
        decode(fewer)


def test_bad_json(blob):
    meta_len = struct.unpack("<I", blob[8:12])[0]
    broken = blob[:12] + b"{" * meta_len + blob[12 + meta_len :]
    with pytest.raises(IntegrityError, match="JSON"):
        decode(broken)


def test_distinct_error_types():
    kinds = {BadMagicError, UnsupportedVersionError, TruncatedFileError, IntegrityError,
             container.ShapeMismatchError}
    assert len(kinds) == 5
    assert all(issubclass(k, container.ContainerError) for k in kinds)
    for a in kinds:
        for b in kinds - {a}:
            assert not issubclass(a, b)
