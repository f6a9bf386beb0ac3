"""Tests for error metrics, evaluation and the report."""

import os
import tempfile
from unittest.mock import patch

import numpy as np
import pytest

from dataset import Manifest, ManifestRecord
from errors import ConfigError, InvalidArgument, ShapeError
from metrics import (
    RESULT_COLUMNS,
    EvalResult,
    accuracy,
    build_report,
    canonical_split,
    evaluate_pipeline,
    margin,
    mse_of,
    read_results,
    report_label,
    summarize,
    write_residuals,
    write_results,
)
from training import TrainedModel


def result(pipeline="cnn", split="testing", acc=0.97, predicted=262.65, actual=254.17):
    return EvalResult(pipeline, split, 10, 1.0, 1.0, acc, acc, predicted, actual)


class TestErrorMetrics:
    def test_mse(self):
        assert mse_of([1, 2, 3], [1, 2, 3]) == 0.0
        assert mse_of([0, 0], [3, 4]) == 12.5

    def test_mse_length_mismatch(self):
        with pytest.raises(ShapeError):
            mse_of([1, 2], [1, 2, 3])

    def test_mse_empty(self):
        with pytest.raises(InvalidArgument):
            mse_of([], [])

    def test_margin(self):
        assert margin(0) == 0.0
        assert margin(100) == 10.0
        assert margin(1437) == pytest.approx(37.91, abs=0.005)
        assert margin(2366) == pytest.approx(48.64, abs=0.005)

    def test_negative_mse(self):
        with pytest.raises(InvalidArgument):
            margin(-1)

    def test_accuracy(self):
        assert accuracy(0, 100) == 1.0
        assert accuracy(1437, 294) == pytest.approx(0.871, abs=0.0005)
        assert accuracy(1437, 276) == pytest.approx(0.863, abs=0.0005)
        assert 0.830 <= accuracy(2366, 294) <= 0.840

    def test_accuracy_not_clamped(self):
        assert accuracy(400, 10) == pytest.approx(-1.0)

    def test_accuracy_center_must_be_positive(self):
        with pytest.raises(InvalidArgument):
            accuracy(1, 0)

    def test_split_aliases(self):
        assert canonical_split("val") == "validation"
        assert canonical_split("testing") == "testing"
        with pytest.raises(InvalidArgument):
            canonical_split("holdout")


class TestSummarize:
    def test_two_records(self):
        r = summarize("cnn", "test", [210, 290], [200, 300])
        assert r.split == "testing"
        assert r.n == 2
        assert r.mse == 100.0
        assert r.margin_m == 10.0
        assert r.accuracy_mean == pytest.approx(0.96)
        assert r.accuracy_median == pytest.approx(0.96)
        assert r.mean_predicted_m2 == 250.0
        assert r.mean_actual_m2 == 250.0

    def test_median_center(self):
        r = summarize("cnn", "test", [1, 2, 3], [1, 2, 9])
        assert r.accuracy_median == pytest.approx(1 - (12 / 3) ** 0.5 / 2)


class TestEvaluatePipeline:
    def test_uses_predictions(self):
        manifest = Manifest([
            ManifestRecord("a.ppm", 200.0, "a"),
            ManifestRecord("b.ppm", 300.0, "b"),
        ])
        model = TrainedModel(spec=None, params={}, pipeline="edges")
        with patch("metrics.predict_manifest", return_value=np.array([210.0, 290.0])) as fake:
            r = evaluate_pipeline(model, manifest, "val")
        fake.assert_called_once()
        assert (r.pipeline, r.split, r.mse) == ("edges", "validation", 100.0)

    def test_writes_residuals(self):
        manifest = Manifest([ManifestRecord("imgs/a.ppm", 200.0, "a")])
        model = TrainedModel(spec=None, params={})
        with tempfile.TemporaryDirectory() as d:
            path = os.path.join(d, "residuals.csv")
            with patch("metrics.predict_manifest", return_value=np.array([212.5])):
                evaluate_pipeline(model, manifest, residuals_path=path)
            with open(path, encoding="utf-8") as f:
                assert f.read() == (
                    "image_path,actual_m2,predicted_m2,residual_m2\n"
                    "imgs/a.ppm,200.0,212.5,12.5\n"
                )

    def test_empty_manifest(self):
        with pytest.raises(InvalidArgument):
            evaluate_pipeline(TrainedModel(spec=None, params={}), Manifest())


class TestResultFiles:
    def test_round_trip(self):
        results = [result(), result("contour", "training", 0.5, None, 12.0)]
        with tempfile.TemporaryDirectory() as d:
            path = os.path.join(d, "results.csv")
            write_results(results, path)
            with open(path, encoding="utf-8") as f:
                assert f.readline().rstrip("\n") == ",".join(RESULT_COLUMNS)
            assert read_results(path) == results

    def test_bad_header(self):
        with tempfile.TemporaryDirectory() as d:
            path = os.path.join(d, "results.csv")
            with open(path, "w", encoding="utf-8") as f:
                f.write("pipeline,split\n")
            with pytest.raises(ConfigError, match=":1:"):
                read_results(path)

    def test_bad_value_names_line(self):
        with tempfile.TemporaryDirectory() as d:
            path = os.path.join(d, "results.csv")
            write_results([result()], path)
            with open(path, "a", encoding="utf-8") as f:
                f.write("cnn,testing,3,abc,1,1,1,1,1\n")
            with pytest.raises(ConfigError, match=":3:"):
                read_results(path)

    def test_residual_rows_follow_manifest(self):
        manifest = Manifest([
            ManifestRecord("x.ppm", 1.0, "x"),
            ManifestRecord("y.ppm", 4.0, "y"),
        ])
        with tempfile.TemporaryDirectory() as d:
            path = os.path.join(d, "r.csv")
            write_residuals(manifest, np.array([2.0, 3.0]), path)
            with open(path, encoding="utf-8") as f:
                lines = f.read().splitlines()
        assert lines[1:] == ["x.ppm,1.0,2.0,1.0", "y.ppm,4.0,3.0,-1.0"]


class TestReport:
    def test_cnn_testing_row(self):
        _, md = build_report([result()])
        assert "| CNN Testing | ~97% | 262.65 | 254.17 |" in md

    def test_empty(self):
        csv_text, md = build_report([])
        assert csv_text == ",".join(RESULT_COLUMNS) + "\n"
        assert len(md.splitlines()) == 2

    def test_training_rows_have_no_prediction(self):
        _, md = build_report([result(split="training", acc=0.94)])
        assert "| CNN Training | ~94% | - | 254.17 |" in md

    def test_rounding(self):
        _, md = build_report([result(acc=0.875), result(split="validation", acc=-0.125)])
        assert "~88%" in md
        assert "~-13%" in md

    def test_twelve_rows_in_order(self):
        results = [
            result(pipeline, split)
            for split in ("testing", "validation", "training")
            for pipeline in ("edges", "contour", "threshold", "cnn")
        ]
        csv_text, md = build_report(results)
        rows = md.splitlines()[2:]
        assert len(rows) == 12
        assert len(csv_text.splitlines()) == 13
        labels = [row.split(" | ")[0].lstrip("| ") for row in rows]
        assert labels[:3] == ["CNN Training", "CNN Validation", "CNN Testing"]
        assert labels[-1] == "Edges Model Testing"

    def test_label(self):
        assert report_label(result("threshold", "validation")) == "Threshold Model Validation"
