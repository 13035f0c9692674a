import struct

import numpy as np
import pytest

from depthart import checkpoint


def test_round_trip(tmp_path):
    path = str(tmp_path / "model.dart")
    entries = {
        "enc/w1": np.arange(24, dtype=np.float32).reshape(2, 3, 4),
        "hp/codebook_size": np.float32(64.0),
        "schedule": np.array([[1, 1], [2, 2], [4, 4], [8, 8]], dtype=np.float32),
    }
    checkpoint.save(path, entries)
    back = checkpoint.load(path)
    assert set(back) == set(entries)
    for k in entries:
        assert back[k].dtype == np.float32
        assert np.array_equal(back[k], np.asarray(entries[k], dtype=np.float32))
    assert back["hp/codebook_size"].shape == ()


def test_header_layout(tmp_path):
    path = str(tmp_path / "one.dart")
    checkpoint.save(path, {"x": np.zeros((2, 2), dtype=np.float32)})
    raw = open(path, "rb").read()
    assert raw[:4] == b"DART"
    version, count = struct.unpack_from("<II", raw, 4)
    assert version == checkpoint.VERSION and count == 1
    (nlen,) = struct.unpack_from("<H", raw, 12)
    assert raw[14:14 + nlen] == b"x"
    assert raw[14 + nlen] == 2  # rank
    assert struct.unpack_from("<II", raw, 15 + nlen) == (2, 2)
    assert len(raw) == 15 + nlen + 8 + 16


def test_bad_magic(tmp_path):
    p = tmp_path / "bad.dart"
    p.write_bytes(b"NOPE" + b"\x00" * 8)
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load(str(p))


def test_save_is_atomic_on_overwrite(tmp_path):
    path = str(tmp_path / "m.dart")
    checkpoint.save(path, {"a": np.ones(3, dtype=np.float32)})
    checkpoint.save(path, {"a": np.full(3, 2.0, dtype=np.float32)})
    assert np.array_equal(checkpoint.load(path)["a"], np.full(3, 2.0, np.float32))
    leftovers = [p for p in tmp_path.iterdir() if p.suffix == ".tmp"]
    assert not leftovers
