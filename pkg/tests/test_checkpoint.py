import json
import struct

import numpy as np
import pytest

from nac import checkpoint
from nac.attention import NACConfig, NACParams
from nac.checkpoint import CheckpointError


def test_byte_layout():
    buf = checkpoint.encode([("a", np.array([1.0, 2.0])), ("s", np.float64(3.5))])
    (hlen,) = struct.unpack_from("<Q", buf, 0)
    assert (8 + hlen) % 8 == 0
    header = json.loads(buf[8:8 + hlen].decode())
    assert header == [{"name": "a", "shape": [2], "dtype": "f64", "byte_offset": 0},
                      {"name": "s", "shape": [], "dtype": "f64", "byte_offset": 16}]
    blob = buf[8 + hlen:]
    assert len(blob) == 24
    assert struct.unpack("<3d", blob) == (1.0, 2.0, 3.5)


def test_round_trip_is_bit_exact(tmp_path):
    params = NACParams(NACConfig(d_model=8, heads=2, seed=4))
    path = tmp_path / "m.ckpt"
    checkpoint.save(path, params.named_parameters())
    loaded = checkpoint.load(path)
    for name, p in params.named_parameters():
        assert loaded[name].tobytes() == p.data.tobytes()
    assert not (tmp_path / "m.ckpt.tmp").exists()


def test_restore_into_fresh_params(tmp_path):
    src = NACParams(NACConfig(d_model=8, heads=2, seed=1))
    dst = NACParams(NACConfig(d_model=8, heads=2, seed=1))
    for _, p in dst.named_parameters():
        p.data = p.data + 1.0
    checkpoint.restore(dst.named_parameters(), checkpoint.decode(checkpoint.encode(src.named_parameters())))
    for (_, a), (_, b) in zip(src.named_parameters(), dst.named_parameters()):
        assert np.array_equal(a.data, b.data)


def test_same_params_same_bytes():
    a = checkpoint.encode(NACParams(NACConfig(seed=2)).named_parameters())
    b = checkpoint.encode(NACParams(NACConfig(seed=2)).named_parameters())
    assert a == b


def test_restore_mismatch_rejected():
    params = NACParams(NACConfig(d_model=8, heads=2))
    arrays = checkpoint.decode(checkpoint.encode(params.named_parameters()))
    arrays.pop("W_o")
    with pytest.raises(CheckpointError):
        checkpoint.restore(params.named_parameters(), arrays)
    arrays = checkpoint.decode(checkpoint.encode(params.named_parameters()))
    arrays["b_o"] = np.zeros(3)
    with pytest.raises(CheckpointError):
        checkpoint.restore(params.named_parameters(), arrays)


@pytest.mark.parametrize("mangle", [
    lambda b: b[:4],
    lambda b: struct.pack("<Q", 10**6) + b[8:],
    lambda b: b + b"\0" * 8,
    lambda b: b[:-8],
])
def test_corrupt_files_rejected(mangle):
    buf = checkpoint.encode([("x", np.arange(4.0))])
    with pytest.raises(CheckpointError):
        checkpoint.decode(mangle(buf))


def test_duplicate_names_rejected():
    with pytest.raises(CheckpointError):
        checkpoint.encode([("x", np.ones(1)), ("x", np.ones(1))])
