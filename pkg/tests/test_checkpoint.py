import struct

import numpy as np
import pytest

from lrfdet.checkpoint import CheckpointError, decode, encode, load_checkpoint, save_checkpoint
from lrfdet.detector import DetectorConfig, build_detector
from lrfdet.train import TrainState, load_state, save_state


def test_round_trip(tmp_path):
    r = np.random.default_rng(0)
    tensors = {"a.weight": r.standard_normal((2, 3, 1, 1)).astype(np.float32), "b": np.zeros(0, np.float32),
               "scalar": np.float32(2.5).reshape(())}
    save_checkpoint(tmp_path / "c.rfdn", tensors, {"k": [1, 2]})
    back, meta = load_checkpoint(tmp_path / "c.rfdn")
    assert meta == {"k": [1, 2]}
    for k in tensors:
        np.testing.assert_array_equal(back[k], tensors[k])


def test_header_layout():
    blob = encode({"w": np.ones((2,), np.float32)})
    assert blob[:4] == b"RFDN"
    assert struct.unpack_from("<HI", blob, 4) == (1, 1)
    assert struct.unpack_from("<H", blob, 10) == (1,)


def test_corrupt_inputs():
    blob = encode({"w": np.ones((4,), np.float32)})
    with pytest.raises(CheckpointError, match="magic"):
        decode(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError, match="truncated"):
        decode(blob[:-4])


def test_training_state_round_trip(tmp_path):
    params = build_detector(DetectorConfig.desk(16), seed=1)
    state = TrainState(params, {"conv1.weight": np.ones_like(params["conv1.weight"])}, 17)
    save_state(tmp_path / "s.rfdn", state)
    back = load_state(tmp_path / "s.rfdn")
    assert back.iteration == 17 and back.params.config == params.config
    assert set(back.params.tensors) == set(params.tensors)
    np.testing.assert_array_equal(back.velocity["conv1.weight"], 1)
