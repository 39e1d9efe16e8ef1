import struct

import numpy as np
import pytest

from flowsr.errors import BadMagicError, FLDError, TruncatedPayloadError, UnknownDtypeError
from flowsr.fld import decode, encode, fld_read, fld_write


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("shape", [(), (5,), (3, 4), (2, 3, 4), (1, 3, 5, 7), (0, 3)])
def test_roundtrip_bit_exact(tmp_path, dtype, shape):
    a = np.random.default_rng(0).standard_normal(shape).astype(dtype)
    fld_write(a, tmp_path / "t.fld")
    b = fld_read(tmp_path / "t.fld")
    assert b.dtype == a.dtype and b.shape == a.shape
    assert b.tobytes() == a.tobytes()


def test_special_values_survive():
    a = np.array([np.inf, -np.inf, np.nan, -0.0, 5e-324])
    b = decode(encode(a))
    assert b.tobytes() == a.tobytes()


def test_header_layout():
    blob = encode(np.zeros((2, 3), dtype=np.float32))
    assert blob[:4] == b"FLD1"
    assert blob[4] == 2
    assert struct.unpack("<2I", blob[5:13]) == (2, 3)
    assert blob[13] == 1
    assert len(blob) == 14 + 24


def test_bad_magic():
    blob = encode(np.zeros(3))
    with pytest.raises(BadMagicError):
        decode(b"FLD2" + blob[4:])
    with pytest.raises(BadMagicError):
        decode(b"")


def test_truncated():
    blob = encode(np.arange(6.0))
    for cut in (5, 8, len(blob) - 1):
        with pytest.raises(TruncatedPayloadError):
            decode(blob[:cut])


def test_unknown_dtype():
    blob = bytearray(encode(np.zeros(2)))
    blob[4 + 1 + 4] = 9
    with pytest.raises(UnknownDtypeError):
        decode(bytes(blob))
    with pytest.raises(UnknownDtypeError):
        encode(np.zeros(2, dtype=np.int32))


def test_trailing_bytes_and_rank_limit():
    with pytest.raises(FLDError):
        decode(encode(np.zeros(2)) + b"\x00")
    with pytest.raises(FLDError):
        encode(np.zeros((1, 1, 1, 1, 1)))
    with pytest.raises(FLDError):
        decode(b"FLD1" + bytes([5]) + b"\x00" * 30)


def test_error_classes_share_base():
    for cls in (BadMagicError, TruncatedPayloadError, UnknownDtypeError):
        assert issubclass(cls, FLDError)


def test_failed_write_leaves_no_partial_file(tmp_path):
    with pytest.raises(FLDError):
        fld_write(np.zeros((1,) * 5), tmp_path / "x.fld")
    assert list(tmp_path.iterdir()) == []
