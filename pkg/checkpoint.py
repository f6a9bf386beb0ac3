"""
Binary checkpoint files for trained models.

Layout (all integers little-endian):

    b"LAWN" | u32 version | u32 header length | JSON header
    then per tensor: u16 name length | UTF-8 name | u8 rank | u32 dims... | f32 data
    u32 CRC-32 of everything before it

The JSON header carries the model description, pipeline, preprocessing
settings, target scaling, training config and optimizer kind/step.
Optimizer slots are stored as tensors named ``opt.<slot>.<parameter>``.
"""

import json
import logging
import struct
import zlib
from dataclasses import asdict

import numpy as np

from errors import CheckpointError, DatasetIOError, InvalidArgument
from imaging import PreprocessParams
from neuralnet import parameter_shapes, spec_from_dict, spec_to_dict
from training import OPTIMIZERS, PIPELINES, OptimizerState, TrainConfig, TrainedModel

logger = logging.getLogger("lawnarea")

MAGIC = b"LAWN"
VERSION = 1
OPT_PREFIX = "opt."


def _tensor_bytes(name, array):
    encoded = name.encode("utf-8")
    data = np.ascontiguousarray(array, dtype="<f4")
    return b"".join((
        struct.pack("<H", len(encoded)),
        encoded,
        struct.pack("<B", data.ndim),
        struct.pack(f"<{data.ndim}I", *data.shape),
        data.tobytes(),
    ))


def _tensors(model):
    for name in parameter_shapes(model.spec):
        yield name, model.params[name]
    state = model.optimizer_state
    if state is not None:
        for slot in sorted(state.slots):
            for name in sorted(state.slots[slot]):
                yield f"{OPT_PREFIX}{slot}.{name}", state.slots[slot][name]


def _header(model):
    state = model.optimizer_state
    return {
        "model": spec_to_dict(model.spec),
        "pipeline": model.pipeline,
        "preprocess": model.preprocess_params.to_dict(),
        "target_mean": model.target_mean,
        "target_std": model.target_std,
        "optimizer": None if state is None else {"kind": state.kind, "step": state.step},
        "config": None if model.config is None else asdict(model.config),
    }


def checkpoint_bytes(model):
    header = json.dumps(_header(model), sort_keys=True).encode("utf-8")
    body = b"".join([
        MAGIC,
        struct.pack("<II", VERSION, len(header)),
        header,
        *(_tensor_bytes(name, array) for name, array in _tensors(model)),
    ])
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(model, path):
    data = checkpoint_bytes(model)
    try:
        with open(path, "wb") as f:
            f.write(data)
    except OSError as e:
        raise DatasetIOError(f"cannot write checkpoint: {e.strerror or e}", path) from e
    logger.debug("Wrote checkpoint %s (%d bytes)", path, len(data))


class _Reader:
    def __init__(self, data, path):
        self.data = data
        self.path = path
        self.offset = 0

    def take(self, size, what):
        end = self.offset + size
        if end > len(self.data):
            raise CheckpointError(f"truncated while reading {what}", self.path)
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def at_end(self):
        return self.offset >= len(self.data)


def _read_tensors(reader):
    tensors = {}
    while not reader.at_end():
        (name_length,) = reader.unpack("<H", "tensor name length")
        try:
            name = reader.take(name_length, "tensor name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError("tensor name is not UTF-8", reader.path) from e
        (rank,) = reader.unpack("<B", f"rank of {name}")
        shape = reader.unpack(f"<{rank}I", f"shape of {name}")
        size = int(np.prod(shape, dtype=np.int64))
        raw = reader.take(4 * size, f"data of {name}")
        if name in tensors:
            raise CheckpointError(f"duplicate tensor {name!r}", reader.path)
        tensors[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)
    return tensors


def parse_checkpoint(data, path="<checkpoint>"):
    """Rebuild a TrainedModel from checkpoint bytes, or raise CheckpointError."""
    if len(data) < 4 or data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)", path)
    if len(data) < 16:
        raise CheckpointError("truncated header", path)
    (version,) = struct.unpack("<I", data[4:8])
    if version != VERSION:
        raise CheckpointError(f"unsupported format version {version}", path)
    (stored_crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != stored_crc:
        raise CheckpointError("checksum mismatch (corrupt or truncated file)", path)

    reader = _Reader(data[:-4], path)
    reader.offset = 8
    (header_length,) = reader.unpack("<I", "header length")
    try:
        header = json.loads(reader.take(header_length, "header").decode("utf-8"))
        spec = spec_from_dict(header["model"])
        preprocess_params = PreprocessParams.from_dict(header["preprocess"])
        config = None if header["config"] is None else TrainConfig(**header["config"])
        optimizer = header["optimizer"]
        if optimizer is not None:
            kind = optimizer["kind"]
            step = int(optimizer["step"])
        pipeline = header["pipeline"]
        target_mean = float(header["target_mean"])
        target_std = float(header["target_std"])
    except (ValueError, KeyError, TypeError, InvalidArgument) as e:
        raise CheckpointError(f"malformed header: {e}", path) from e
    if not isinstance(pipeline, str) or pipeline not in PIPELINES:
        raise CheckpointError(f"unknown pipeline {pipeline!r}", path)
    if optimizer is not None and kind not in OPTIMIZERS:
        raise CheckpointError(f"unknown optimizer {kind!r}", path)
    tensors = _read_tensors(reader)

    params = {}
    for name, shape in parameter_shapes(spec).items():
        if name not in tensors:
            raise CheckpointError(f"missing tensor {name!r}", path)
        if tensors[name].shape != tuple(shape):
            raise CheckpointError(
                f"tensor {name!r} has shape {tensors[name].shape}, expected {tuple(shape)}", path
            )
        params[name] = tensors.pop(name)

    state = None
    if optimizer is not None:
        slots = {}
        for key in sorted(tensors):
            if not key.startswith(OPT_PREFIX):
                raise CheckpointError(f"unexpected tensor {key!r}", path)
            slot, _, name = key[len(OPT_PREFIX):].partition(".")
            if not slot or not name:
                raise CheckpointError(f"malformed optimizer tensor name {key!r}", path)
            slots.setdefault(slot, {})[name] = tensors[key]
        state = OptimizerState(kind, step, slots)
    elif tensors:
        raise CheckpointError(f"unexpected tensor {sorted(tensors)[0]!r}", path)

    return TrainedModel(
        spec, params, pipeline, preprocess_params, target_mean, target_std, state, config
    )


def load_checkpoint(path):
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise DatasetIOError(f"cannot read checkpoint: {e.strerror or e}", path) from e
    return parse_checkpoint(data, path)
