"""Tests for optimizers, the training loop and prediction."""

import os
import tempfile
from dataclasses import replace
from unittest.mock import patch

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from dataset import Manifest, ManifestRecord, SceneConfig, generate_synthetic_dataset
from errors import DivergedError, InvalidArgument, InvalidState, ShapeError
from imaging import read_pixmap, write_pixmap
from neuralnet import (
    BatchNorm,
    Conv,
    Dense,
    Elu,
    Flatten,
    MaxPool,
    ModelSpec,
    default_spec,
    init_parameters,
    model_backward,
    model_forward,
    mse_loss,
)
from training import (
    EpochRecord,
    ImageLoader,
    TrainConfig,
    TrainedModel,
    TrainHistory,
    adam_step,
    init_optimizer,
    pipeline_channels,
    predict,
    predict_manifest,
    sgd_step,
    train,
    write_history,
)

SMALL = ModelSpec(
    (8, 8, 3), (Conv(2), BatchNorm(), Elu(), MaxPool(), Flatten(), Dense(1))
).validate()
QUICK = TrainConfig(epochs=3, batch_size=4, seed=11, early_stop_patience=None)


def make_images(d, count, size=8, seed=0, prefix="img"):
    """Random pictures whose label grows with their brightness."""
    rng = np.random.default_rng(seed)
    records = []
    for i in range(count):
        img = rng.integers(0, 256, (size, size, 3), dtype=np.uint8)
        name = f"{prefix}{i:03d}.ppm"
        write_pixmap(os.path.join(d, name), img)
        records.append(ManifestRecord(name, float(img.mean()) / 255.0 * 100.0, f"{prefix}{i}"))
    return Manifest(records, d)


def params_equal(a, b):
    assert a.keys() == b.keys()
    for name in a:
        assert a[name].tobytes() == b[name].tobytes(), name


class TestAdam:
    def test_zero_gradient_leaves_parameters(self):
        params = {"L0.kernel": np.array([1.0, -2.0])}
        state = init_optimizer("adam", params)
        adam_step(params, {"L0.kernel": np.zeros(2)}, state, 0.1)
        assert_array_equal(params["L0.kernel"], [1.0, -2.0])
        assert state.step == 1

    def test_first_step_moves_by_learning_rate(self):
        params = {"L0.kernel": np.array([1.0, -2.0])}
        state = init_optimizer("adam", params)
        adam_step(params, {"L0.kernel": np.array([0.5, -3.0])}, state, 0.01)
        assert params["L0.kernel"][0] == pytest.approx(0.99, abs=1e-9)
        assert params["L0.kernel"][1] == pytest.approx(-1.99, abs=1e-9)

    def test_three_steps_match_closed_form(self):
        lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
        gradients = [0.3, -1.2, 0.7]
        params = {"L0.kernel": np.array([0.25])}
        state = init_optimizer("adam", params)
        p, m, v = 0.25, 0.0, 0.0
        for t, g in enumerate(gradients, start=1):
            adam_step(params, {"L0.kernel": np.array([g])}, state, lr)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            p -= lr * (m / (1 - b1 ** t)) / ((v / (1 - b2 ** t)) ** 0.5 + eps)
        assert params["L0.kernel"][0] == pytest.approx(p, rel=1e-12)
        assert state.step == 3

    def test_missing_gradient(self):
        params = {"L0.kernel": np.ones(2), "L0.bias": np.zeros(1)}
        state = init_optimizer("adam", params)
        with pytest.raises(InvalidState, match="L0.bias"):
            adam_step(params, {"L0.kernel": np.ones(2)}, state, 0.1)

    def test_running_statistics_have_no_slots(self):
        params = {"L1.gamma": np.ones(2), "L1.running_mean": np.zeros(2)}
        state = init_optimizer("adam", params)
        assert list(state.slots["m"]) == ["L1.gamma"]

    def test_unknown_optimizer(self):
        with pytest.raises(InvalidArgument):
            init_optimizer("rmsprop", {})


class TestSgd:
    def test_plain_step(self):
        params = {"L0.kernel": np.array([1.0])}
        state = init_optimizer("sgd", params)
        sgd_step(params, {"L0.kernel": np.array([2.0])}, state, 0.1, momentum=0.0)
        assert params["L0.kernel"][0] == pytest.approx(0.8)

    def test_momentum_accumulates(self):
        params = {"L0.kernel": np.array([1.0])}
        state = init_optimizer("sgd", params)
        for _ in range(2):
            sgd_step(params, {"L0.kernel": np.array([2.0])}, state, 0.1, momentum=0.9)
        assert params["L0.kernel"][0] == pytest.approx(1.0 - 0.1 * 2.0 - 0.1 * (0.9 * 2.0 + 2.0))

    def test_small_step_lowers_loss(self):
        spec = ModelSpec((2, 2, 1), (Flatten(), Dense(1))).validate()
        params = {k: v.astype(np.float64) for k, v in init_parameters(spec, 0).items()}
        rng = np.random.default_rng(0)
        x = rng.standard_normal((6, 2, 2, 1))
        y = rng.standard_normal((6, 1))
        pred, cache = model_forward(spec, params, x, "train")
        before, dpred = mse_loss(pred, y)
        grads = model_backward(spec, params, cache, dpred)
        sgd_step(params, grads, init_optimizer("sgd", params), 1e-3, momentum=0.0)
        after, _ = mse_loss(model_forward(spec, params, x)[0], y)
        assert after < before


class TestTrainConfig:
    def test_defaults_valid(self):
        TrainConfig().validate()

    @pytest.mark.parametrize("change", [
        {"batch_size": 1},
        {"early_stop_patience": 0},
        {"optimizer": "rmsprop"},
        {"learning_rate": 0.0},
        {"epochs": -1},
        {"momentum": 1.0},
        {"threads": 0},
        {"seed": -1},
    ])
    def test_rejected(self, change):
        with pytest.raises(InvalidArgument):
            replace(TrainConfig(), **change).validate()

    def test_pipeline_channels(self):
        assert pipeline_channels("cnn") == 3
        assert pipeline_channels("edges") == 1
        with pytest.raises(InvalidArgument):
            pipeline_channels("svm")


class TestTrain:
    def setup_method(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.d = self.tmp.name
        self.data = make_images(self.d, 10)
        self.val = make_images(self.d, 4, seed=1, prefix="val")

    def teardown_method(self):
        self.tmp.cleanup()

    def test_zero_epochs_returns_initial_parameters(self):
        model, history = train(SMALL, self.data, Manifest(), replace(QUICK, epochs=0))
        params_equal(model.params, init_parameters(SMALL, QUICK.seed))
        assert len(history) == 0
        assert model.optimizer_state.step == 0

    def test_deterministic(self):
        a, ha = train(SMALL, self.data, self.val, QUICK)
        b, hb = train(SMALL, self.data, self.val, QUICK)
        params_equal(a.params, b.params)
        assert [r.train_mse for r in ha.epochs] == [r.train_mse for r in hb.epochs]
        assert [r.val_mse for r in ha.epochs] == [r.val_mse for r in hb.epochs]

    def test_thread_count_does_not_change_result(self):
        a, _ = train(SMALL, self.data, Manifest(), QUICK)
        b, _ = train(SMALL, self.data, Manifest(), replace(QUICK, threads=3))
        params_equal(a.params, b.params)

    def test_history_without_validation(self):
        _, history = train(SMALL, self.data, Manifest(), QUICK)
        assert [r.epoch for r in history.epochs] == [1, 2, 3]
        assert all(r.val_mse is None for r in history.epochs)
        assert all(r.train_mse >= 0 for r in history.epochs)
        assert history.best_epoch is None

    def test_batch_of_one_is_skipped(self):
        five = self.data.subset(self.data.records[:5])
        model, _ = train(SMALL, five, Manifest(), QUICK)
        assert model.optimizer_state.step == QUICK.epochs

    def test_running_statistics_move(self):
        model, _ = train(SMALL, self.data, Manifest(), QUICK)
        assert model.params["L1.running_mean"].any()

    def test_sgd(self):
        model, _ = train(SMALL, self.data, Manifest(), replace(QUICK, optimizer="sgd"))
        assert model.optimizer_state.kind == "sgd"
        assert set(model.optimizer_state.slots) == {"velocity"}

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError, match="1-channel"):
            train(SMALL, self.data, Manifest(), QUICK, pipeline="threshold")

    def test_empty_manifest(self):
        with pytest.raises(InvalidArgument, match="empty"):
            train(SMALL, Manifest(), Manifest(), QUICK)

    def test_single_sample(self):
        with pytest.raises(InvalidArgument):
            train(SMALL, self.data.subset(self.data.records[:1]), Manifest(), QUICK)

    def test_non_finite_loss_raises(self):
        def broken(pred, target):
            return float("nan"), np.zeros_like(pred)

        with patch("training.mse_loss", side_effect=broken):
            with pytest.raises(DivergedError) as info:
                train(SMALL, self.data, Manifest(), QUICK)
        assert info.value.epoch == 1
        assert info.value.batch == 0

    def test_non_finite_validation_raises(self):
        def broken(model, manifest, loader=None, batch_size=16):
            return np.full(len(manifest), np.nan)

        cfg = replace(QUICK, epochs=2, early_stop_patience=1)
        with patch("training.predict_manifest", side_effect=broken):
            with pytest.raises(DivergedError, match="epoch 1, validation") as info:
                train(SMALL, self.data, self.val, cfg)
        assert info.value.batch == "validation"

    def test_early_stopping_returns_best_epoch(self):
        cfg = replace(QUICK, epochs=8, early_stop_patience=1, learning_rate=0.05)
        model, history = train(SMALL, self.data, self.val, cfg)
        assert history.best_epoch is not None
        if history.stopped_early:
            assert len(history) == history.best_epoch + 1
        best_val = min(r.val_mse for r in history.epochs)
        assert history.epochs[history.best_epoch - 1].val_mse == best_val

        rerun, _ = train(
            SMALL, self.data, self.val,
            replace(cfg, epochs=history.best_epoch, early_stop_patience=None),
        )
        params_equal(model.params, rerun.params)
        assert model.optimizer_state.step == rerun.optimizer_state.step

    def test_standardized_targets(self):
        cfg = replace(QUICK, target_standardize=True)
        model, _ = train(SMALL, self.data, Manifest(), cfg)
        areas = self.data.areas()
        assert model.target_mean == pytest.approx(areas.mean())
        assert model.target_std == pytest.approx(areas.std())

    def test_standardized_and_raw_targets_agree(self):
        # a single dense layer on exactly linear targets has one least-squares optimum
        spec = ModelSpec((2, 2, 3), (Flatten(), Dense(1)), l2_lambda=0.0).validate()
        rng = np.random.default_rng(8)
        weights = rng.uniform(0, 50, 12)
        records = []
        for i in range(60):
            img = rng.integers(0, 256, (2, 2, 3), dtype=np.uint8)
            write_pixmap(os.path.join(self.d, f"lin{i:02d}.ppm"), img)
            x = img.reshape(-1).astype(np.float64) / 255.0
            records.append(ManifestRecord(f"lin{i:02d}.ppm", float(x @ weights + 20.0), f"lin{i}"))
        data = Manifest(records, self.d)
        cfg = TrainConfig(
            epochs=3000, batch_size=60, optimizer="sgd", learning_rate=0.1, momentum=0.9,
            seed=2, shuffle=False, early_stop_patience=None,
        )
        raw, _ = train(spec, data, Manifest(), cfg)
        scaled, _ = train(spec, data, Manifest(), replace(cfg, target_standardize=True))
        assert scaled.target_std > 1.0
        raw_preds = predict_manifest(raw, data)
        assert_allclose(predict_manifest(scaled, data), raw_preds, rtol=1e-3)
        assert_allclose(raw_preds, data.areas(), rtol=1e-3)

    @pytest.mark.slow
    def test_memorizes_a_small_set(self):
        data = generate_synthetic_dataset(SceneConfig(size=64, seed=5), 10, self.d)
        cfg = TrainConfig(
            epochs=500, batch_size=10, seed=3, target_standardize=True,
            early_stop_patience=None,
        )
        model, history = train(default_spec(64, 64, 3), data, Manifest(), cfg)
        assert len(history) == 500
        areas = data.areas()
        assert areas.var() > 0
        train_mse = float(np.mean((predict_manifest(model, data) - areas) ** 2))
        assert train_mse < 0.01 * areas.var()


class TestPredict:
    def _model(self):
        spec = ModelSpec((2, 2, 1), (Flatten(), Dense(1))).validate()
        params = {"L1.kernel": np.zeros((4, 1), dtype=np.float32),
                  "L1.bias": np.array([0.5], dtype=np.float32)}
        return TrainedModel(spec, params, "threshold", target_mean=100.0, target_std=10.0)

    def test_predictions_are_destandardized(self):
        preds = predict(self._model(), np.zeros((5, 2, 2, 1), dtype=np.float32), batch_size=2)
        assert preds.dtype == np.float64
        assert_array_equal(preds, np.full(5, 105.0))

    def test_empty_batch(self):
        assert predict(self._model(), np.zeros((0, 2, 2, 1), dtype=np.float32)).shape == (0,)

    def test_manifest_order(self):
        with tempfile.TemporaryDirectory() as d:
            data = make_images(d, 6)
            model, _ = train(SMALL, data, Manifest(), QUICK)
            with ImageLoader() as loader:
                images = loader.batch(data, data.records)
            expected = predict(model, images)
            assert_allclose(predict_manifest(model, data), expected, rtol=1e-6)


class TestImageLoader:
    def test_threshold_pipeline_is_binary(self):
        with tempfile.TemporaryDirectory() as d:
            data = make_images(d, 3)
            with ImageLoader("threshold") as loader:
                assert loader.image_shape(data) == (8, 8, 1)
                batch = loader.batch(data, data.records)
            assert batch.shape == (3, 8, 8, 1)
            assert batch.dtype == np.float32
            assert set(np.unique(batch)) <= {0.0, 1.0}

    def test_images_are_cached(self):
        with tempfile.TemporaryDirectory() as d:
            data = make_images(d, 2)
            with patch("training.read_pixmap", wraps=read_pixmap) as reader:
                loader = ImageLoader()
                loader.batch(data, data.records)
                loader.batch(data, data.records)
            assert reader.call_count == 2

    def test_threads_give_same_batch(self):
        with tempfile.TemporaryDirectory() as d:
            data = make_images(d, 5)
            with ImageLoader(threads=1) as one, ImageLoader(threads=4) as many:
                assert_array_equal(one.batch(data, data.records), many.batch(data, data.records))

    def test_mixed_shapes_rejected(self):
        with tempfile.TemporaryDirectory() as d:
            data = make_images(d, 1)
            other = make_images(d, 1, size=16, prefix="big")
            mixed = Manifest(data.records + other.records, d)
            with pytest.raises(ShapeError):
                ImageLoader().batch(mixed, mixed.records)

    def test_unknown_pipeline(self):
        with pytest.raises(InvalidArgument):
            ImageLoader("svm")


class TestHistory:
    def test_write(self):
        history = TrainHistory([
            EpochRecord(1, 0.5, None, 1.0),
            EpochRecord(2, 0.25, 0.125, 1.0),
        ])
        with tempfile.TemporaryDirectory() as d:
            path = os.path.join(d, "history.csv")
            write_history(history, path)
            with open(path, encoding="utf-8") as f:
                assert f.read() == "epoch,train_mse,val_mse\n1,0.5,\n2,0.25,0.125\n"
