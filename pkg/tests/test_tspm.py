import io
import struct

import numpy as np
import pytest

from tailspace import tspm


def test_layout():
    raw = tspm.to_bytes(np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]))
    assert raw[:4] == b"TSPM"
    assert struct.unpack("<IQQ", raw[4:24]) == (1, 2, 3)
    assert struct.unpack("<6d", raw[24:]) == (1.0, 2.0, 3.0, 4.0, 5.0, 6.0)


def test_round_trip_bit_exact(tmp_path, rng):
    m = rng.standard_normal((7, 3))
    m[0, 0] = -0.0
    m[1, 1] = 5e-324
    path = tmp_path / "m.tspm"
    tspm.save(path, m)
    back = tspm.load(path)
    assert back.shape == (7, 3)
    assert back.tobytes() == m.tobytes()


def test_vector_stored_as_column():
    assert tspm.from_bytes(tspm.to_bytes(np.arange(4.0))).shape == (4, 1)


def test_concatenated_blobs():
    buf = io.BytesIO()
    tspm.write_matrix(buf, np.eye(2))
    tspm.write_matrix(buf, np.ones((1, 3)))
    buf.seek(0)
    np.testing.assert_array_equal(tspm.read_matrix(buf), np.eye(2))
    np.testing.assert_array_equal(tspm.read_matrix(buf), np.ones((1, 3)))


@pytest.mark.parametrize("raw", [b"XXXX" + bytes(20), b"TSPM" + struct.pack("<IQQ", 2, 1, 1) + bytes(8),
                                 b"TSPM" + struct.pack("<IQQ", 1, 2, 2) + bytes(8), b"TSP"])
def test_rejects_bad_input(raw):
    with pytest.raises(tspm.FormatError):
        tspm.from_bytes(raw)
