"""
Error metrics, per-pipeline evaluation and the comparison report.
"""

import csv
import io
import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from errors import ConfigError, DatasetIOError, InvalidArgument, ShapeError
from training import PIPELINES, predict_manifest

logger = logging.getLogger("lawnarea")

SPLITS = ("training", "validation", "testing")
SPLIT_ALIASES = {
    "train": "training",
    "val": "validation",
    "test": "testing",
    **{name: name for name in SPLITS},
}
PIPELINE_ORDER = tuple(PIPELINES)
PIPELINE_LABELS = {
    "cnn": "CNN",
    "threshold": "Threshold Model",
    "contour": "Contour Model",
    "edges": "Edges Model",
}
RESULT_COLUMNS = (
    "pipeline", "split", "n", "mse", "margin_m",
    "accuracy_mean", "accuracy_median", "mean_predicted_m2", "mean_actual_m2",
)
RESIDUAL_COLUMNS = ("image_path", "actual_m2", "predicted_m2", "residual_m2")
REPORT_HEADER = (
    "Model Used",
    "Highest Accuracy (1- (error/Average of Original Data))",
    "Model Results (Average Predicted Lawn Area)",
    "Average Lawn Area of Used Data",
)


def canonical_split(name):
    if name not in SPLIT_ALIASES:
        raise InvalidArgument(
            f"unknown split {name!r}; expected one of {', '.join(SPLIT_ALIASES)}"
        )
    return SPLIT_ALIASES[name]


def mse_of(preds, targets):
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape:
        raise ShapeError(f"{preds.shape[0] if preds.ndim else 0} predictions for "
                         f"{targets.shape[0] if targets.ndim else 0} targets")
    if preds.size == 0:
        raise InvalidArgument("cannot compute MSE of zero samples")
    return float(np.mean((preds - targets) ** 2))


def margin(mse):
    """Error margin in meters: the square root of an MSE in square meters."""
    if mse < 0:
        raise InvalidArgument(f"MSE must be >= 0, got {mse}")
    return math.sqrt(mse)


def accuracy(mse, center):
    """1 - margin/center; not clamped, so large errors go negative."""
    if not center > 0:
        raise InvalidArgument(f"accuracy center must be > 0, got {center}")
    return 1.0 - margin(mse) / center


def median_of(values):
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise InvalidArgument("median of no values")
    return float(np.median(values))


@dataclass(frozen=True)
class EvalResult:
    pipeline: str
    split: str
    n: int
    mse: float
    margin_m: float
    accuracy_mean: float
    accuracy_median: float
    mean_predicted_m2: Optional[float]
    mean_actual_m2: float


def summarize(pipeline, split, preds, targets):
    """EvalResult for predictions against the split's own actual areas."""
    mse = mse_of(preds, targets)
    targets = np.asarray(targets, dtype=np.float64)
    return EvalResult(
        pipeline=pipeline,
        split=canonical_split(split),
        n=int(targets.size),
        mse=mse,
        margin_m=margin(mse),
        accuracy_mean=accuracy(mse, float(targets.mean())),
        accuracy_median=accuracy(mse, median_of(targets)),
        mean_predicted_m2=float(np.mean(preds)),
        mean_actual_m2=float(targets.mean()),
    )


def evaluate_pipeline(model, manifest, split="testing", pipeline=None, loader=None,
                      batch_size=64, residuals_path=None):
    if not len(manifest):
        raise InvalidArgument("cannot evaluate an empty manifest")
    preds = predict_manifest(model, manifest, loader, batch_size)
    result = summarize(pipeline or model.pipeline, split, preds, manifest.areas())
    if residuals_path is not None:
        write_residuals(manifest, preds, residuals_path)
    logger.info(
        "%s %s: MSE %.4f, margin %.3f m, accuracy %.4f (n=%d)",
        result.pipeline, result.split, result.mse, result.margin_m,
        result.accuracy_mean, result.n,
    )
    return result


# -------- Result files --------

def _result_row(result):
    predicted = "" if result.mean_predicted_m2 is None else repr(result.mean_predicted_m2)
    return (
        result.pipeline, result.split, result.n, repr(result.mse), repr(result.margin_m),
        repr(result.accuracy_mean), repr(result.accuracy_median), predicted,
        repr(result.mean_actual_m2),
    )


def results_csv(results):
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(RESULT_COLUMNS)
    for result in results:
        writer.writerow(_result_row(result))
    return out.getvalue()


def _write_text(path, text, what):
    try:
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(text)
    except OSError as e:
        raise DatasetIOError(f"cannot write {what}: {e.strerror or e}", path) from e


def write_results(results, path):
    _write_text(path, results_csv(results), "results")


def read_results(path):
    try:
        with open(path, encoding="utf-8", newline="") as f:
            rows = list(csv.reader(f))
    except OSError as e:
        raise DatasetIOError(f"cannot read results: {e.strerror or e}", path) from e
    if not rows or tuple(rows[0]) != RESULT_COLUMNS:
        raise ConfigError(f"header must be {','.join(RESULT_COLUMNS)}", path, 1)
    results = []
    for line, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(RESULT_COLUMNS):
            raise ConfigError(f"expected {len(RESULT_COLUMNS)} fields, got {len(row)}", path, line)
        try:
            results.append(EvalResult(
                pipeline=row[0],
                split=canonical_split(row[1]),
                n=int(row[2]),
                mse=float(row[3]),
                margin_m=float(row[4]),
                accuracy_mean=float(row[5]),
                accuracy_median=float(row[6]),
                mean_predicted_m2=float(row[7]) if row[7] else None,
                mean_actual_m2=float(row[8]),
            ))
        except ValueError as e:
            raise ConfigError(str(e), path, line) from e
    return results


def write_residuals(manifest, preds, path):
    """Per-image ``image_path,actual_m2,predicted_m2,residual_m2`` rows."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(RESIDUAL_COLUMNS)
    for record, pred in zip(manifest.records, preds):
        pred = float(pred)
        writer.writerow((
            record.image_path, repr(record.area_sq_m), repr(pred), repr(pred - record.area_sq_m),
        ))
    _write_text(path, out.getvalue(), "residuals")


# -------- Report --------

def _percent(value):
    scaled = abs(value) * 100.0
    return int(math.copysign(math.floor(scaled + 0.5), value))


def _order_key(result):
    pipeline = (
        PIPELINE_ORDER.index(result.pipeline) if result.pipeline in PIPELINE_ORDER
        else len(PIPELINE_ORDER)
    )
    return pipeline, SPLITS.index(result.split)


def report_label(result):
    name = PIPELINE_LABELS.get(result.pipeline, result.pipeline)
    return f"{name} {result.split.capitalize()}"


def report_markdown(results):
    lines = [
        "| " + " | ".join(REPORT_HEADER) + " |",
        "|" + "|".join("---" for _ in REPORT_HEADER) + "|",
    ]
    for result in results:
        predicted = "-"
        if result.split != "training" and result.mean_predicted_m2 is not None:
            predicted = f"{result.mean_predicted_m2:.2f}"
        cells = (
            report_label(result),
            f"~{_percent(result.accuracy_mean)}%",
            predicted,
            f"{result.mean_actual_m2:.2f}",
        )
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def build_report(results):
    """(csv_text, markdown_text), rows ordered by pipeline then split."""
    ordered = sorted(results, key=_order_key)
    return results_csv(ordered), report_markdown(ordered)
