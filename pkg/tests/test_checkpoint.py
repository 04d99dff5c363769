import struct

import numpy as np
import pytest

from onereward import checkpoint, flowgen
from onereward import rewardmodel as rm
from onereward.numcore import RngStream


def test_generator_roundtrip(tmp_path):
    theta = flowgen.init_generator(24, (8, 6), RngStream(0))
    path = tmp_path / "g.ckpt"
    digest = checkpoint.save_generator(path, theta, "tanh", note="x")
    back, meta = checkpoint.load_generator(path)
    assert np.array_equal(back.values, theta.values) and back.shape_spec == theta.shape_spec
    assert meta["note"] == "x" and digest == checkpoint.file_hash(path)
    # same parameters, same bytes
    assert checkpoint.save_generator(tmp_path / "h.ckpt", theta, "tanh", note="x") == digest


def test_layout_is_little_endian(tmp_path):
    theta = flowgen.init_generator(24, (4,), RngStream(1))
    blob = checkpoint.encode(theta, {"kind": "generator"})
    assert blob[:4] == b"ORWD"
    version, n = struct.unpack("<II", blob[4:12])
    assert version == checkpoint.FORMAT_VERSION
    payload = np.frombuffer(blob[12 + n:], dtype="<f8")
    assert np.array_equal(payload, theta.values)


@pytest.mark.parametrize("scalar", [False, True])
def test_reward_model_roundtrip(tmp_path, scalar):
    spec = rm.NetSpec(window=1, encoder=(6,), pooled=3, head=(5,))
    net = (rm.init_bt_model if scalar else rm.init_reward_model)(24, spec, RngStream(2))
    checkpoint.save_reward_model(tmp_path / "r.ckpt", net)
    back = checkpoint.load_reward_model(tmp_path / "r.ckpt")
    assert back.spec == net.spec and back.n_signals == net.n_signals
    assert np.array_equal(back.params.values, net.params.values)


def test_corrupt_files_are_refused(tmp_path):
    theta = flowgen.init_generator(24, (4,), RngStream(3))
    blob = checkpoint.encode(theta, {"kind": "generator"})
    with pytest.raises(checkpoint.CheckpointError, match="magic"):
        checkpoint.decode(b"XXXX" + blob[4:])
    with pytest.raises(checkpoint.CheckpointError, match="payload"):
        checkpoint.decode(blob[:-8])
    with pytest.raises(checkpoint.CheckpointError, match="version"):
        checkpoint.decode(blob[:4] + struct.pack("<I", 99) + blob[8:])
    with pytest.raises(checkpoint.CheckpointError, match="does not exist"):
        checkpoint.load_generator(tmp_path / "missing.ckpt")
    net = rm.init_reward_model(24, rm.NetSpec(window=1, encoder=(4,), pooled=2, head=(3,)), RngStream(0))
    checkpoint.save_reward_model(tmp_path / "r.ckpt", net)
    with pytest.raises(checkpoint.CheckpointError, match="not a generator"):
        checkpoint.load_generator(tmp_path / "r.ckpt")
