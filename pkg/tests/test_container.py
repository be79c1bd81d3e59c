import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from jcdp.container import (
    MAGIC,
    ContainerError,
    decode_tensor,
    encode_tensor,
    read_tensor,
    write_tensor,
)


def test_scalar_round_trip(tmp_path):
    arr = np.array(3.5, dtype=np.float32)
    write_tensor(tmp_path / "s.jcdp", arr)
    out = read_tensor(tmp_path / "s.jcdp")
    assert out.shape == () and out.dtype == np.float32 and out == arr


def test_image_round_trip_bitwise(tmp_path, rng):
    arr = rng.standard_normal((3, 32, 32)).astype(np.float32)
    arr[0, 0, 0] = np.nan
    arr[0, 0, 1] = -0.0
    write_tensor(tmp_path / "x.jcdp", arr)
    out = read_tensor(tmp_path / "x.jcdp")
    assert out.tobytes() == arr.tobytes()


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(st.sampled_from([np.float32, np.uint8, np.int64]),
                  hnp.array_shapes(min_dims=0, max_dims=4, min_side=0, max_side=5)))
def test_round_trip_all_dtypes(arr):
    out = decode_tensor(encode_tensor(arr))
    assert out.dtype == arr.dtype and out.shape == arr.shape
    assert out.tobytes() == np.ascontiguousarray(arr).tobytes()


def test_header_layout():
    data = encode_tensor(np.zeros((2, 3), dtype=np.int64))
    assert data[:4] == MAGIC
    version, code, ndim = struct.unpack_from("<IBB", data, 4)
    assert (version, code, ndim) == (1, 2, 2)
    assert struct.unpack_from("<2Q", data, 10) == (2, 3)
    assert len(data) == 10 + 16 + 6 * 8


def test_truncated_payload_rejected(tmp_path):
    write_tensor(tmp_path / "x.jcdp", np.ones((3, 4, 4), np.float32))
    raw = (tmp_path / "x.jcdp").read_bytes()
    (tmp_path / "x.jcdp").write_bytes(raw[:-1])
    with pytest.raises(ContainerError) as info:
        read_tensor(tmp_path / "x.jcdp")
    assert info.value.invariant == "payload_length"


@pytest.mark.parametrize("mutate, invariant", [
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:4] + struct.pack("<I", 9) + b[8:], "version"),
    (lambda b: b[:8] + bytes([7]) + b[9:], "dtype"),
    (lambda b: b[:12], "shape"),
    (lambda b: b + b"\0", "payload_length"),
])
def test_corruptions_name_invariant(mutate, invariant):
    data = encode_tensor(np.ones((2, 2), np.float32))
    with pytest.raises(ContainerError) as info:
        decode_tensor(mutate(data))
    assert info.value.invariant == invariant


def test_unsupported_dtype():
    with pytest.raises(ContainerError):
        encode_tensor(np.zeros(3, np.float16))


def test_write_is_atomic_on_failure(tmp_path, monkeypatch):
    path = tmp_path / "x.jcdp"
    write_tensor(path, np.zeros(4, np.float32))
    before = path.read_bytes()

    def boom(*a, **k):
        raise OSError("disk full")

    monkeypatch.setattr("jcdp.container.os.replace", boom)
    with pytest.raises(OSError):
        write_tensor(path, np.ones(4, np.float32))
    assert path.read_bytes() == before
    assert [p.name for p in tmp_path.iterdir()] == ["x.jcdp"]
