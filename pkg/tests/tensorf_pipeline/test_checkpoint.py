import struct

import numpy as np
import pytest

from few_tensorf.errors import CheckpointError, CheckpointVersionError
from few_tensorf.tensorf_pipeline.checkpoint import (
    MAGIC,
    checkpoint_bytes,
    load_checkpoint,
    parse_checkpoint,
    save_checkpoint,
)
from few_tensorf.training.state import TrainState
from helpers import tiny_config


def _trained_state(config):
    state = TrainState.initial(config)
    params = state.field.parameters()
    rng = np.random.default_rng(0)
    grads = {name: rng.normal(size=value.shape) for name, value in params.items()}
    state.optimizer.step(params, grads, 1e-2)
    state.t = 1
    return state


@pytest.mark.parametrize("decomposition", ["vm", "cp"])
def test_save_and_load_restore_state(tmp_path, decomposition):
    config = tiny_config(model={"decomposition": decomposition})
    state = _trained_state(config)
    path = tmp_path / "ckpt.fewt"
    save_checkpoint(path, state)
    loaded = load_checkpoint(path)

    assert loaded.t == 1
    assert loaded.config == config
    assert loaded.field.geometry == state.field.geometry
    original, restored = state.field.parameters(), loaded.field.parameters()
    assert list(original) == list(restored)
    for name in original:
        assert restored[name].dtype == np.float64
        np.testing.assert_allclose(restored[name], original[name], rtol=1e-6, atol=1e-7, err_msg=name)
        np.testing.assert_allclose(loaded.optimizer.moments[name].m, state.optimizer.moments[name].m,
                                   rtol=1e-6, atol=1e-7)
        assert loaded.optimizer.moments[name].step == 1
    loaded.check_moments()


def test_serialization_is_stable(config):
    state = _trained_state(config)
    data = checkpoint_bytes(state)
    assert data.startswith(MAGIC)
    assert checkpoint_bytes(parse_checkpoint(data)) == data


def test_fresh_state_has_no_moments(config):
    loaded = parse_checkpoint(checkpoint_bytes(TrainState.initial(config)))
    assert loaded.optimizer.moments == {}
    assert loaded.t == 0


def test_version_mismatch_is_reported(config):
    data = bytearray(checkpoint_bytes(TrainState.initial(config)))
    data[4:8] = struct.pack("<I", 2)
    with pytest.raises(CheckpointVersionError) as info:
        parse_checkpoint(bytes(data))
    assert info.value.expected == 1
    assert info.value.actual == 2


def test_truncated_checkpoint_is_rejected(config):
    data = checkpoint_bytes(TrainState.initial(config))
    for cut in (6, 40, len(data) // 2, len(data) - 10):
        with pytest.raises(CheckpointError):
            parse_checkpoint(data[:cut])


def test_trailing_bytes_and_bad_magic_are_rejected(config):
    data = checkpoint_bytes(TrainState.initial(config))
    with pytest.raises(CheckpointError):
        parse_checkpoint(data + b"\x00")
    with pytest.raises(CheckpointError):
        parse_checkpoint(b"NOPE" + data[4:])


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "absent.fewt")
