import struct

import numpy as np
import pytest

from cscae.checkpoint import MAGIC, CheckpointError, load_checkpoint, load_tensors, save_checkpoint, save_tensors
from cscae.model import CaeConfig, build_cae
from cscae.tensor import Tensor, parameters_checksum


def _trained_state_model(seed=0):
    m = build_cae(CaeConfig.desk(), seed)
    m.train()
    # one forward in training mode moves BN statistics and seeds the threshold
    m(Tensor(np.random.default_rng(seed).random((4, 3, 40, 40))))
    return m


def test_tensor_file_layout(tmp_path):
    path = tmp_path / "t.bin"
    save_tensors(path, {"ab": np.array([[1.0, 2.0]])})
    raw = path.read_bytes()
    expected = MAGIC + struct.pack("<I", 1) + struct.pack("<H", 2) + b"ab" + struct.pack("<B2I", 2, 1, 2)
    expected += np.array([1.0, 2.0], dtype="<f4").tobytes()
    assert raw == expected


def test_tensor_round_trip_including_scalars(tmp_path):
    tensors = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "s": np.float32(3.5), "e": np.zeros((0, 4))}
    path = tmp_path / "t.bin"
    save_tensors(path, tensors)
    back = load_tensors(path)
    assert list(back) == ["a", "s", "e"]
    np.testing.assert_array_equal(back["a"], tensors["a"])
    assert back["s"].shape == () and back["s"] == 3.5
    assert back["e"].shape == (0, 4)


def test_model_round_trip_restores_everything(tmp_path):
    src = _trained_state_model(1)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, src, {"optim.velocity.x": np.ones(3), "train.epoch": np.array(4.0)})
    dst = build_cae(CaeConfig.desk(), 99)
    extras = load_checkpoint(path, dst)
    assert parameters_checksum(dst.parameters().values()) == parameters_checksum(src.parameters().values())
    assert dst.threshold_state() == src.threshold_state()
    for (name, a), (_, b) in zip(sorted(src.state_dict().items()), sorted(dst.state_dict().items())):
        assert a.tobytes() == b.tobytes(), name
    assert set(extras) == {"optim.velocity.x", "train.epoch"}
    # eval-mode outputs agree bit for bit
    x = Tensor(np.random.default_rng(2).random((2, 3, 40, 40)))
    src.eval(), dst.eval()
    assert src(x).reconstruction.data.tobytes() == dst(x).reconstruction.data.tobytes()


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTACKPT" + bytes(20))
    with pytest.raises(CheckpointError, match="bad magic"):
        load_tensors(path)


@pytest.mark.parametrize("cut", [3, 8, 12, 40, -1])
def test_truncated_file(tmp_path, cut):
    path = tmp_path / "t.ckpt"
    save_checkpoint(path, build_cae(CaeConfig.desk(), 0))
    raw = path.read_bytes()
    path.write_bytes(raw[:cut])
    with pytest.raises(CheckpointError):
        load_tensors(path)


def test_shape_mismatch_rejected(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, build_cae(CaeConfig.desk(), 0))
    other = build_cae(CaeConfig.desk(foreground_channels=7), 0)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, other)


def test_missing_tensor_rejected(tmp_path):
    m = build_cae(CaeConfig.desk(), 0)
    state = dict(m.state_dict())
    state.pop(next(iter(state)))
    path = tmp_path / "m.ckpt"
    save_tensors(path, state)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, m)


def test_extras_need_a_known_prefix(tmp_path):
    with pytest.raises(CheckpointError, match="prefix"):
        save_checkpoint(tmp_path / "m.ckpt", build_cae(CaeConfig.desk(), 0), {"junk": np.ones(1)})


def test_save_is_atomic_replace(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, build_cae(CaeConfig.desk(), 0))
    save_checkpoint(path, build_cae(CaeConfig.desk(), 1))
    assert [p.name for p in tmp_path.iterdir()] == ["m.ckpt"]
