import dataclasses

import numpy as np
import pytest

from tomoseg.checkpoint import MAGIC, load_checkpoint, load_into, read_header, save_checkpoint
from tomoseg.models import CombinedModel


@pytest.mark.parametrize("mode", ["c3d+rnn", "c2d", "rnn"])
def test_round_trip_is_bit_exact(tmp_path, tiny_config, mode):
    model = CombinedModel(dataclasses.replace(tiny_config, dtype="float32"), mode)
    for p in model.parameters():
        p.data = p.data + np.float32(0.125)
    save_checkpoint(tmp_path / "m.ckpt", model, {"pixel_mean": 0.1})
    back, extra = load_checkpoint(tmp_path / "m.ckpt")
    assert extra == {"pixel_mean": 0.1} and back.mode == mode
    for (na, a), (nb, b) in zip(model.named_parameters(), back.named_parameters()):
        assert na == nb and a.dtype == b.dtype
        assert a.data.tobytes() == b.data.tobytes()


def test_header_layout(tmp_path, tiny_config):
    save_checkpoint(tmp_path / "m.ckpt", CombinedModel(tiny_config, "c3d"))
    assert (tmp_path / "m.ckpt").read_bytes()[:8] == MAGIC
    header = read_header(tmp_path / "m.ckpt")
    assert header["mode"] == "c3d" and header["config"]["height"] == 16
    assert header["tensors"][0]["offset"] == 0


def test_architecture_mismatch_is_rejected(tmp_path, tiny_config):
    save_checkpoint(tmp_path / "m.ckpt", CombinedModel(tiny_config, "c3d+rnn"))
    with pytest.raises(ValueError, match="does not match"):
        load_into(CombinedModel(tiny_config, "c3d"), tmp_path / "m.ckpt")
    with pytest.raises(ValueError, match="does not match"):
        load_into(CombinedModel(dataclasses.replace(tiny_config, hidden_size=4), "c3d+rnn"), tmp_path / "m.ckpt")


def test_not_a_checkpoint(tmp_path):
    (tmp_path / "x").write_bytes(b"garbage!" * 4)
    with pytest.raises(ValueError, match="not a checkpoint"):
        read_header(tmp_path / "x")
