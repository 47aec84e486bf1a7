import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fabseg.checkpoint import (Checkpoint, load_checkpoint, read_checkpoint, save_checkpoint,
                               write_checkpoint)
from fabseg.exceptions import CorruptCheckpoint, SchemaError
from fabseg.prompter import PrompterConfig, PrompterNet
from fabseg.trainer import build_prompter, prompter_from_checkpoint


def random_checkpoint(seed):
    rng = np.random.default_rng(seed)
    arrays = {
        "a.weight": rng.normal(size=(3, 4)).astype(np.float32),
        "a.bias": rng.normal(size=4),
        "b.count": np.array(7, dtype=np.int64),
        "c.empty": np.zeros((0, 2), dtype=np.float32),
    }
    return Checkpoint(arrays, ["a."], {"kind": "test", "n": [1, 2]}, {"seed": seed})


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_round_trip_is_bitwise(seed):
    ckpt = random_checkpoint(seed)
    back = load_checkpoint(save_checkpoint(ckpt))
    assert back.frozen_manifest == ckpt.frozen_manifest and back.config == ckpt.config
    assert back.rng_state == ckpt.rng_state
    for name, arr in ckpt.arrays.items():
        assert back.arrays[name].dtype == arr.dtype and back.arrays[name].shape == arr.shape
        assert back.arrays[name].tobytes() == arr.tobytes()


def test_serialization_is_deterministic(tmp_path):
    ckpt = random_checkpoint(1)
    write_checkpoint(tmp_path / "a.ckpt", ckpt)
    write_checkpoint(tmp_path / "b.ckpt", load_checkpoint(save_checkpoint(ckpt)))
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert read_checkpoint(tmp_path / "a.ckpt").names("a.") == ["a.bias", "a.weight"]


@pytest.mark.parametrize("cut", [3, 8, 20, -1, -17])
def test_truncated_file(cut):
    data = save_checkpoint(random_checkpoint(0))
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(data[:cut])


def test_bad_magic_and_trailing_bytes():
    data = save_checkpoint(random_checkpoint(0))
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(b"NOTFAB01" + data[8:])
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(data + b"\0")


def test_load_into_smaller_model_is_schema_error():
    cfg = PrompterConfig(backbone_channels=(8, 8, 16, 16), aspp_channels=16, decoder_channels=16,
                         low_level_channels=8, input_size=(32, 32))
    ckpt = Checkpoint.from_module(build_prompter(cfg), "prompter.",
                                  config={"prompter": dataclasses.asdict(cfg)})
    smaller = dataclasses.replace(cfg, backbone_channels=(8, 8, 16, 8))
    with pytest.raises(SchemaError):
        ckpt.load_into(PrompterNet(smaller), "prompter.")
    fewer = dataclasses.replace(cfg, blocks_per_stage=2)
    with pytest.raises(SchemaError):
        ckpt.load_into(PrompterNet(fewer), "prompter.")
    net = prompter_from_checkpoint(load_checkpoint(save_checkpoint(ckpt)))
    assert all(np.array_equal(v.numpy(), ckpt.arrays[f"prompter.{k}"]) for k, v in net.state_dict().items())


def test_validate_rejects_non_finite_and_dangling_manifest():
    ckpt = random_checkpoint(0)
    ckpt.arrays["a.bias"][0] = np.inf
    with pytest.raises(SchemaError):
        save_checkpoint(ckpt)
    with pytest.raises(SchemaError):
        Checkpoint({"x": np.zeros(1)}, ["missing."]).validate()
