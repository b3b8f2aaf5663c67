import numpy as np
import pytest

from routesae import tensorio
from routesae.errors import CheckpointError


def sample():
    return tensorio.TensorFile("tag", {"a": 1, "b": [1, 2]}, {
        "f8": np.random.default_rng(0).standard_normal((3, 2)),
        "f4": np.arange(4, dtype=np.float32),
        "i8": np.array([-1, 5], dtype=np.int64),
        "scalar": np.array(2.5),
    })


def test_roundtrip_bit_exact(tmp_path):
    tf = sample()
    tensorio.save(tf, tmp_path / "x.rste")
    got = tensorio.load(tmp_path / "x.rste", expect_tag="tag")
    assert got.meta == tf.meta
    for k, v in tf.tensors.items():
        assert got.tensors[k].dtype == v.dtype and got.tensors[k].tobytes() == v.tobytes()
        assert got.tensors[k].shape == v.shape


def test_corruption_detected():
    buf = bytearray(tensorio.dumps(sample()))
    buf[len(buf) // 2] ^= 0xFF
    with pytest.raises(CheckpointError):
        tensorio.loads(bytes(buf))


def test_truncation_and_wrong_tag(tmp_path):
    buf = tensorio.dumps(sample())
    with pytest.raises(CheckpointError):
        tensorio.loads(buf[:-7])
    tensorio.save(sample(), tmp_path / "y.rste")
    with pytest.raises(CheckpointError):
        tensorio.load(tmp_path / "y.rste", expect_tag="other")
