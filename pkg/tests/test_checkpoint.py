import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from ctrlu import checkpoint as ck


def sample_arrays():
    rng = np.random.default_rng(0)
    return {"w": rng.normal(size=(3, 4)), "b": rng.normal(size=4), "s": np.array(2.5)}


@pytest.mark.parametrize("dtype", ["float32", "float64"])
def test_roundtrip_bit_exact(tmp_path, dtype):
    arrays = sample_arrays()
    ck.save(tmp_path / "m.ckpt", arrays, dtype)
    back = ck.load(tmp_path / "m.ckpt")
    for k, a in arrays.items():
        expect = a.astype(dtype)
        assert back[k].dtype == np.dtype(dtype) and back[k].shape == a.shape
        assert back[k].tobytes() == expect.tobytes()


def test_layout():
    buf = ck.dumps({"ab": np.array([1.0, 2.0])}, "float64")
    assert buf[:6] == b"CTRLU\0"
    assert struct.unpack_from("<II", buf, 6) == (1, 1)
    assert struct.unpack_from("<I", buf, 14) == (2,)
    assert buf[18:20] == b"ab"
    assert struct.unpack_from("<BIQ", buf, 20) == (2, 1, 2)
    assert np.frombuffer(buf[33:49], "<f8").tolist() == [1.0, 2.0]
    assert len(buf) == 49 + 8


def test_deterministic_bytes():
    assert ck.dumps(sample_arrays()) == ck.dumps(dict(reversed(list(sample_arrays().items()))))


@pytest.mark.parametrize("where", ["payload", "checksum"])
def test_tamper_refused(where):
    buf = bytearray(ck.dumps(sample_arrays()))
    buf[40 if where == "payload" else -1] ^= 0x01
    with pytest.raises(ck.CheckpointError, match="checksum"):
        ck.loads(bytes(buf))


def test_structural_errors():
    buf = ck.dumps(sample_arrays())
    with pytest.raises(ck.CheckpointError, match="magic"):
        ck.loads(b"XXXXXX" + buf[6:])
    with pytest.raises(ck.CheckpointError, match="version"):
        ck.loads(buf[:6] + struct.pack("<I", 9) + buf[10:])
    with pytest.raises(ck.CheckpointError):
        ck.loads(buf[:30])
    with pytest.raises(ck.CheckpointError):
        ck.loads(buf[:10])
    with pytest.raises(ck.CheckpointError, match="trailing"):
        ck.loads(buf + b"\0")


@settings(max_examples=40, deadline=None)
@given(st.dictionaries(st.text("abcxyz/_", min_size=1, max_size=8),
                       arrays(np.float64, array_shapes(min_dims=0, max_dims=3, max_side=4),
                              elements=st.floats(allow_nan=False, width=64)),
                       max_size=4))
def test_roundtrip_property(arrs):
    back = ck.loads(ck.dumps(arrs, "float64"))
    assert set(back) == set(arrs)
    for k in arrs:
        assert back[k].shape == arrs[k].shape and back[k].tobytes() == arrs[k].tobytes()
