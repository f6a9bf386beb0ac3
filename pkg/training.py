"""
Optimizers, the training loop and prediction helpers.

Training is deterministic in TrainConfig.seed: the shuffle order, parameter
initialization and dropout masks all come from seeded generators, and the
optional loader thread pool only decodes images; it never changes which
images form a batch or in what order.
"""

import copy
import csv
import logging
import math
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from errors import DatasetIOError, DivergedError, InvalidArgument, InvalidState, ShapeError
from imaging import PreprocessParams, preprocess, read_pixmap
from neuralnet import (
    init_parameters,
    is_trainable,
    l2_penalty,
    model_backward,
    model_forward,
    mse_loss,
)

logger = logging.getLogger("lawnarea")

# pipeline tag -> preprocessing method
PIPELINES = {
    "cnn": "none",
    "threshold": "threshold",
    "contour": "contour",
    "edges": "canny",
}
OPTIMIZERS = ("adam", "sgd")
HISTORY_COLUMNS = ("epoch", "train_mse", "val_mse")


def pipeline_channels(pipeline):
    if pipeline not in PIPELINES:
        raise InvalidArgument(
            f"unknown pipeline {pipeline!r}; expected one of {', '.join(PIPELINES)}"
        )
    return 3 if PIPELINES[pipeline] == "none" else 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    seed: int = 0
    shuffle: bool = True
    target_standardize: bool = False
    early_stop_patience: Optional[int] = 15
    momentum: float = 0.9
    threads: int = 1

    def validate(self):
        if self.epochs < 0:
            raise InvalidArgument(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 2:
            raise InvalidArgument(
                f"batch_size must be >= 2 for batch normalization, got {self.batch_size}"
            )
        if self.optimizer not in OPTIMIZERS:
            raise InvalidArgument(
                f"unknown optimizer {self.optimizer!r}; expected one of {', '.join(OPTIMIZERS)}"
            )
        if not self.learning_rate > 0:
            raise InvalidArgument(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.seed < 0:
            raise InvalidArgument(f"seed must be >= 0, got {self.seed}")
        if self.early_stop_patience is not None and self.early_stop_patience < 1:
            raise InvalidArgument(
                f"early_stop_patience must be >= 1 or None, got {self.early_stop_patience}"
            )
        if not 0 <= self.momentum < 1:
            raise InvalidArgument(f"momentum must be within [0, 1), got {self.momentum}")
        if self.threads < 1:
            raise InvalidArgument(f"threads must be >= 1, got {self.threads}")
        return self


# -------- Optimizers --------

@dataclass
class OptimizerState:
    """Per-parameter slots (``m``/``v`` for adam, ``velocity`` for sgd)."""

    kind: str
    step: int = 0
    slots: dict = field(default_factory=dict)


def init_optimizer(kind, params):
    if kind not in OPTIMIZERS:
        raise InvalidArgument(f"unknown optimizer {kind!r}")
    names = sorted(n for n in params if is_trainable(n))
    slot_names = ("m", "v") if kind == "adam" else ("velocity",)
    slots = {
        slot: {name: np.zeros_like(params[name]) for name in names}
        for slot in slot_names
    }
    return OptimizerState(kind, 0, slots)


def _trainable_names(params, grads, state):
    names = sorted(n for n in params if is_trainable(n))
    missing = [n for n in names if n not in grads]
    if missing:
        raise InvalidState(f"no gradient for parameter(s): {', '.join(missing)}")
    for slot, values in state.slots.items():
        if sorted(values) != names:
            raise InvalidState(f"optimizer slot {slot!r} does not match the parameters")
    return names


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update; params and state are updated and returned."""
    names = _trainable_names(params, grads, state)
    state.step += 1
    m, v = state.slots["m"], state.slots["v"]
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for name in names:
        g = grads[name]
        m[name] = (beta1 * m[name] + (1.0 - beta1) * g).astype(params[name].dtype)
        v[name] = (beta2 * v[name] + (1.0 - beta2) * g * g).astype(params[name].dtype)
        update = lr * (m[name] / correction1) / (np.sqrt(v[name] / correction2) + eps)
        params[name] = (params[name] - update).astype(params[name].dtype)
    return params, state


def sgd_step(params, grads, state, lr, momentum=0.9):
    """velocity = momentum * velocity + grad; param -= lr * velocity."""
    names = _trainable_names(params, grads, state)
    state.step += 1
    velocity = state.slots["velocity"]
    for name in names:
        velocity[name] = (momentum * velocity[name] + grads[name]).astype(params[name].dtype)
        params[name] = (params[name] - lr * velocity[name]).astype(params[name].dtype)
    return params, state


def _apply_optimizer(params, grads, state, cfg):
    if state.kind == "adam":
        return adam_step(params, grads, state, cfg.learning_rate)
    return sgd_step(params, grads, state, cfg.learning_rate, cfg.momentum)


# -------- Data loading --------

class ImageLoader:
    """Turns manifest records into network input batches.

    Images are read, preprocessed for the pipeline and kept as uint8 in a
    cache keyed by path, then scaled to [0, 1] float32 per batch. With
    ``threads`` > 1 a batch's images are decoded on a thread pool.
    """

    def __init__(self, pipeline="cnn", params=None, threads=1, cache=True):
        self.method = PIPELINES[pipeline] if pipeline in PIPELINES else None
        if self.method is None:
            raise InvalidArgument(f"unknown pipeline {pipeline!r}")
        self.pipeline = pipeline
        self.params = (params or PreprocessParams()).validate()
        self.threads = threads
        self._cache = {} if cache else None
        self._pool = None
        self._lock = threading.Lock()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self):
        if self._pool is not None:
            self._pool.shutdown(wait=True)
            self._pool = None

    def load(self, path):
        if self._cache is not None:
            cached = self._cache.get(path)
            if cached is not None:
                return cached
        image = preprocess(read_pixmap(path), self.method, self.params)
        if self._cache is not None:
            self._cache[path] = image
        return image

    def image_shape(self, manifest):
        """(H, W, C) of the first record after preprocessing."""
        if not len(manifest):
            raise InvalidArgument("manifest is empty")
        return self.load(manifest.resolve(manifest.records[0])).shape

    def batch(self, manifest, records):
        paths = [manifest.resolve(r) for r in records]
        if self.threads > 1 and len(paths) > 1:
            with self._lock:
                if self._pool is None:
                    self._pool = ThreadPoolExecutor(max_workers=self.threads)
            images = list(self._pool.map(self.load, paths))
        else:
            images = [self.load(p) for p in paths]
        first = images[0].shape
        for path, image in zip(paths, images):
            if image.shape != first:
                raise ShapeError(f"{path}: image shape {image.shape} differs from {first}")
        return np.stack(images).astype(np.float32) / np.float32(255.0)


# -------- Models and history --------

@dataclass
class TrainedModel:
    """Everything needed to predict with, resume, or checkpoint a network."""

    spec: object
    params: dict
    pipeline: str = "cnn"
    preprocess_params: PreprocessParams = field(default_factory=PreprocessParams)
    target_mean: float = 0.0
    target_std: float = 1.0
    optimizer_state: Optional[OptimizerState] = None
    config: Optional[TrainConfig] = None


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_mse: float
    val_mse: Optional[float]
    seconds: float


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    best_epoch: Optional[int] = None
    stopped_early: bool = False

    def __len__(self):
        return len(self.epochs)


def write_history(history, path):
    """Write ``epoch,train_mse,val_mse``; wall time stays in the log."""
    try:
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(HISTORY_COLUMNS)
            for record in history.epochs:
                val = "" if record.val_mse is None else repr(record.val_mse)
                writer.writerow((record.epoch, repr(record.train_mse), val))
    except OSError as e:
        raise DatasetIOError(f"cannot write history: {e.strerror or e}", path) from e


# -------- Prediction --------

def predict(model, images, batch_size=64):
    """Infer-mode predictions in square meters for an (N, H, W, C) batch."""
    outputs = []
    for start in range(0, images.shape[0], batch_size):
        pred, _ = model_forward(model.spec, model.params, images[start:start + batch_size], "infer")
        outputs.append(pred[:, 0].astype(np.float64))
    if not outputs:
        return np.zeros(0, dtype=np.float64)
    return np.concatenate(outputs) * model.target_std + model.target_mean


def predict_manifest(model, manifest, loader=None, batch_size=64):
    """Predict every record of a manifest, in manifest order."""
    owned = loader is None
    if owned:
        loader = ImageLoader(model.pipeline, model.preprocess_params)
    try:
        outputs = []
        records = manifest.records
        for start in range(0, len(records), batch_size):
            images = loader.batch(manifest, records[start:start + batch_size])
            outputs.append(predict(model, images, batch_size))
    finally:
        if owned:
            loader.close()
    if not outputs:
        return np.zeros(0, dtype=np.float64)
    return np.concatenate(outputs)


# -------- Training loop --------

def train(spec, train_manifest, val_manifest, cfg, pipeline="cnn",
          preprocess_params=None, loader=None):
    """Fit a model; returns (TrainedModel, TrainHistory).

    Each epoch shuffles with the seeded generator, drops a trailing batch of
    one sample (batch normalization needs two), and measures validation MSE
    in infer mode. With early stopping the parameters of the best validation
    epoch are returned.
    """
    cfg.validate()
    spec.validate()
    channels = pipeline_channels(pipeline)
    if spec.input_shape[2] != channels:
        raise ShapeError(
            f"pipeline {pipeline!r} produces {channels}-channel input, "
            f"model expects {spec.input_shape[2]}"
        )
    if not len(train_manifest):
        raise InvalidArgument("training manifest is empty")
    if cfg.epochs > 0 and len(train_manifest) < 2:
        raise InvalidArgument("training needs at least 2 samples per batch")
    preprocess_params = preprocess_params or PreprocessParams()
    owned = loader is None
    if owned:
        loader = ImageLoader(pipeline, preprocess_params, threads=cfg.threads)

    targets = train_manifest.areas()
    mean, std = 0.0, 1.0
    if cfg.target_standardize:
        mean = float(targets.mean())
        std = float(targets.std()) or 1.0

    params = init_parameters(spec, cfg.seed)
    model = TrainedModel(
        spec, params, pipeline, preprocess_params, mean, std,
        init_optimizer(cfg.optimizer, params), cfg,
    )
    history = TrainHistory()
    rng = np.random.default_rng(cfg.seed)
    early_stop = cfg.early_stop_patience is not None and len(val_manifest) > 0
    best_val = math.inf
    best = None
    step = 0
    count = len(train_manifest)

    try:
        for epoch in range(1, cfg.epochs + 1):
            started = time.perf_counter()
            order = rng.permutation(count) if cfg.shuffle else np.arange(count)
            loss_sum = 0.0
            seen = 0
            for batch_index, start in enumerate(range(0, count, cfg.batch_size)):
                indices = order[start:start + cfg.batch_size]
                if len(indices) < 2:
                    logger.debug("Dropping trailing batch of %d sample(s)", len(indices))
                    continue
                records = [train_manifest.records[i] for i in indices]
                x = loader.batch(train_manifest, records)
                y = ((targets[indices] - mean) / std).astype(np.float32)[:, None]
                pred, cache = model_forward(spec, params, x, "train", seed=cfg.seed, step=step)
                loss, dpred = mse_loss(pred, y)
                total = loss + l2_penalty(params, spec.l2_lambda)
                if not math.isfinite(total):
                    raise DivergedError(epoch, batch_index, total)
                grads = model_backward(spec, params, cache, dpred)
                params.update(cache.stat_updates)
                _apply_optimizer(params, grads, model.optimizer_state, cfg)
                step += 1
                loss_sum += loss * len(indices)
                seen += len(indices)

            train_mse = loss_sum / seen * std * std
            val_mse = None
            if len(val_manifest):
                preds = predict_manifest(model, val_manifest, loader, cfg.batch_size)
                val_mse = float(np.mean((preds - val_manifest.areas()) ** 2))
                if not math.isfinite(val_mse):
                    raise DivergedError(epoch, "validation", val_mse)
            seconds = time.perf_counter() - started
            history.epochs.append(EpochRecord(epoch, train_mse, val_mse, seconds))
            logger.info(
                "Epoch %d/%d: train MSE %.4f, val MSE %s (%.1fs)",
                epoch, cfg.epochs, train_mse,
                "-" if val_mse is None else f"{val_mse:.4f}", seconds,
            )

            if early_stop:
                if val_mse < best_val:
                    best_val = val_mse
                    history.best_epoch = epoch
                    best = (copy.deepcopy(params), copy.deepcopy(model.optimizer_state))
                elif epoch - history.best_epoch >= cfg.early_stop_patience:
                    history.stopped_early = True
                    logger.info(
                        "Stopping early at epoch %d; best validation epoch was %d",
                        epoch, history.best_epoch,
                    )
                    break
    finally:
        if owned:
            loader.close()

    if best is not None:
        model.params, model.optimizer_state = best
    return model, history
