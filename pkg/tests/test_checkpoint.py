"""Tests for checkpoint files."""

import os
import struct
import tempfile
import zlib

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from checkpoint import (
    MAGIC,
    _tensor_bytes,
    checkpoint_bytes,
    load_checkpoint,
    parse_checkpoint,
    save_checkpoint,
)
from dataset import Manifest
from errors import CheckpointError, DatasetIOError
from imaging import PreprocessParams
from neuralnet import default_spec, init_parameters, parameter_count
from training import OptimizerState, TrainConfig, TrainedModel, init_optimizer, predict, train

from test_training import QUICK, SMALL, make_images


class TestRoundTrip:
    def setup_method(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.d = self.tmp.name
        self.data = make_images(self.d, 8)
        self.model, _ = train(SMALL, self.data, Manifest(), QUICK)

    def teardown_method(self):
        self.tmp.cleanup()

    def test_everything_restored(self):
        path = os.path.join(self.d, "model.bin")
        save_checkpoint(self.model, path)
        loaded = load_checkpoint(path)
        assert loaded.spec == self.model.spec
        assert loaded.pipeline == "cnn"
        assert loaded.preprocess_params == self.model.preprocess_params
        assert loaded.config == QUICK
        assert loaded.target_mean == self.model.target_mean
        assert loaded.target_std == self.model.target_std
        for name, value in self.model.params.items():
            assert loaded.params[name].tobytes() == value.tobytes(), name
        state, restored = self.model.optimizer_state, loaded.optimizer_state
        assert (restored.kind, restored.step) == (state.kind, state.step)
        for slot, values in state.slots.items():
            for name, value in values.items():
                assert_array_equal(restored.slots[slot][name], value)

    def test_predictions_identical(self):
        loaded = parse_checkpoint(checkpoint_bytes(self.model))
        images = np.random.default_rng(0).random((4, 8, 8, 3)).astype(np.float32)
        assert predict(loaded, images).tobytes() == predict(self.model, images).tobytes()

    def test_bytes_are_stable(self):
        data = checkpoint_bytes(self.model)
        assert checkpoint_bytes(parse_checkpoint(data)) == data

    def test_without_optimizer_or_config(self):
        model = TrainedModel(
            SMALL, init_parameters(SMALL, 0), "cnn", PreprocessParams(threshold=99),
            target_mean=3.5, target_std=2.0,
        )
        loaded = parse_checkpoint(checkpoint_bytes(model))
        assert loaded.optimizer_state is None
        assert loaded.config is None
        assert loaded.preprocess_params.threshold == 99
        assert loaded.target_mean == 3.5

    def test_default_model_parameter_count(self):
        spec = default_spec()
        model = TrainedModel(spec, init_parameters(spec, 0), config=TrainConfig())
        loaded = parse_checkpoint(checkpoint_bytes(model))
        assert parameter_count(loaded.spec) == parameter_count(spec)
        assert sum(v.size for v in loaded.params.values()) == sum(v.size for v in model.params.values())


class TestCorruption:
    def setup_method(self):
        model = TrainedModel(SMALL, init_parameters(SMALL, 1), config=QUICK)
        self.data = checkpoint_bytes(model)

    def test_bad_magic(self):
        with pytest.raises(CheckpointError, match="bad magic"):
            parse_checkpoint(b"PK\x03\x04" + self.data[4:])

    def test_empty(self):
        with pytest.raises(CheckpointError):
            parse_checkpoint(b"")

    def test_unknown_version(self):
        data = MAGIC + struct.pack("<I", 2) + self.data[8:]
        with pytest.raises(CheckpointError, match="version 2"):
            parse_checkpoint(data)

    def test_flipped_byte(self):
        data = bytearray(self.data)
        data[len(data) // 2] ^= 0xFF
        with pytest.raises(CheckpointError, match="checksum"):
            parse_checkpoint(bytes(data))

    def test_truncated(self):
        with pytest.raises(CheckpointError):
            parse_checkpoint(self.data[:-100])

    def test_valid_checksum_but_short_tensor(self):
        body = self.data[:-4 - 8]
        data = body + struct.pack("<I", zlib.crc32(body))
        with pytest.raises(CheckpointError, match="truncated while reading"):
            parse_checkpoint(data)

    def test_error_names_file(self):
        with tempfile.TemporaryDirectory() as d:
            path = os.path.join(d, "broken.bin")
            with open(path, "wb") as f:
                f.write(b"nope")
            with pytest.raises(CheckpointError) as info:
                load_checkpoint(path)
        assert info.value.path == path
        assert path in str(info.value)

    def test_missing_file(self):
        with pytest.raises(DatasetIOError):
            load_checkpoint(os.path.join(tempfile.gettempdir(), "no-such-checkpoint.bin"))

    def test_unknown_pipeline(self):
        model = TrainedModel(SMALL, init_parameters(SMALL, 1), pipeline="sobel")
        with pytest.raises(CheckpointError, match="unknown pipeline 'sobel'"):
            parse_checkpoint(checkpoint_bytes(model))

    def test_unknown_optimizer(self):
        params = init_parameters(SMALL, 1)
        model = TrainedModel(SMALL, params, optimizer_state=OptimizerState("rmsprop", 3, {}))
        with pytest.raises(CheckpointError, match="unknown optimizer 'rmsprop'"):
            parse_checkpoint(checkpoint_bytes(model))

    def test_optimizer_tensor_without_parameter_name(self):
        params = init_parameters(SMALL, 1)
        model = TrainedModel(SMALL, params, optimizer_state=init_optimizer("adam", params))
        body = checkpoint_bytes(model)[:-4] + _tensor_bytes("opt.m", np.zeros(2, dtype=np.float32))
        data = body + struct.pack("<I", zlib.crc32(body))
        with pytest.raises(CheckpointError, match="malformed optimizer tensor name 'opt.m'"):
            parse_checkpoint(data)
