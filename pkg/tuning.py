"""
k-fold cross-validation and exhaustive grid search.

Grid files use one axis per line::

    # comments and blank lines are ignored
    learning_rate=1e-3,1e-4
    base_filters=8,16

Axes left out keep their single default value.
"""

import csv
import io
import itertools
import logging
from dataclasses import dataclass, fields, replace

import numpy as np

from dataset import derive_seed
from errors import ConfigError, DatasetIOError, InvalidArgument, LawnAreaError
from neuralnet import default_spec
from training import ImageLoader, TrainConfig, pipeline_channels, predict_manifest, train

logger = logging.getLogger("lawnarea")

CV_COLUMNS = ("point", "learning_rate", "dropout_rate", "l2_lambda", "base_filters", "fold", "mse")


@dataclass(frozen=True)
class ParamGrid:
    learning_rate: tuple = (1e-3,)
    dropout_rate: tuple = (0.3,)
    l2_lambda: tuple = (1e-4,)
    base_filters: tuple = (32,)

    @classmethod
    def axes(cls):
        return tuple(f.name for f in fields(cls))

    def validate(self):
        for axis in self.axes():
            values = getattr(self, axis)
            if not values:
                raise InvalidArgument(f"grid axis {axis!r} is empty")
        if any(not v > 0 for v in self.learning_rate):
            raise InvalidArgument("learning rates must be > 0")
        if any(not 0 <= v < 1 for v in self.dropout_rate):
            raise InvalidArgument("dropout rates must be within [0, 1)")
        if any(v < 0 for v in self.l2_lambda):
            raise InvalidArgument("l2 weights must be >= 0")
        if any(v < 1 for v in self.base_filters):
            raise InvalidArgument("base filter counts must be >= 1")
        return self

    def __len__(self):
        size = 1
        for axis in self.axes():
            size *= len(getattr(self, axis))
        return size

    def points(self):
        """Every grid coordinate, last axis varying fastest."""
        axes = self.axes()
        return [
            dict(zip(axes, combo))
            for combo in itertools.product(*(getattr(self, a) for a in axes))
        ]


def parse_grid(text, path="<grid>"):
    axes = ParamGrid.axes()
    values = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"expected key=value, got {line!r}", path, line_no)
        if key not in axes:
            raise ConfigError(
                f"unknown grid axis {key!r}; expected one of {', '.join(axes)}", path, line_no
            )
        if key in values:
            raise ConfigError(f"grid axis {key!r} given twice", path, line_no)
        convert = int if key == "base_filters" else float
        try:
            items = tuple(convert(v.strip()) for v in raw.split(","))
        except ValueError as e:
            raise ConfigError(f"bad value for {key}: {e}", path, line_no) from e
        values[key] = items
    grid = ParamGrid(**values)
    try:
        return grid.validate()
    except InvalidArgument as e:
        raise ConfigError(str(e), path) from e


def load_grid(path):
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise DatasetIOError(f"cannot read grid file: {e.strerror or e}", path) from e
    return parse_grid(text, path)


@dataclass(frozen=True)
class CvResult:
    index: int
    point: dict
    fold_mses: tuple
    mean_mse: float


def kfold_split(n, k, seed):
    """k disjoint index folds covering range(n), sizes differing by at most one."""
    if not 2 <= k <= n:
        raise InvalidArgument(f"k-fold needs 2 <= k <= n, got k={k} n={n}")
    if seed < 0:
        raise InvalidArgument(f"seed must be >= 0, got {seed}")
    order = np.random.default_rng(seed).permutation(n)
    return [np.sort(fold) for fold in np.array_split(order, k)]


def _fold_manifests(manifest, k, seed, by_origin):
    """(train, held-out) manifest pairs, one per fold."""
    if by_origin:
        origins = manifest.origins()
        if len(origins) < k:
            raise InvalidArgument(f"{k}-fold split needs at least {k} originals, got {len(origins)}")
        pairs = []
        for fold in kfold_split(len(origins), k, seed):
            held = {origins[i] for i in fold}
            pairs.append((
                manifest.subset(r for r in manifest if r.origin_id not in held),
                manifest.subset(r for r in manifest if r.origin_id in held),
            ))
        return pairs
    if len(manifest) < k:
        raise InvalidArgument(f"{k}-fold split needs at least {k} records, got {len(manifest)}")
    pairs = []
    for fold in kfold_split(len(manifest), k, seed):
        held = set(fold.tolist())
        pairs.append((
            manifest.subset(r for i, r in enumerate(manifest) if i not in held),
            manifest.subset(r for i, r in enumerate(manifest) if i in held),
        ))
    return pairs


def _point_seed(seed, point, fold):
    # depends on the point's values only, never its position in the grid
    return derive_seed(seed, *(f"{a}={point[a]!r}" for a in ParamGrid.axes()), fold)


def grid_search(grid, manifest, k=5, seed=0, epochs=20, base_config=None,
                pipeline="cnn", preprocess_params=None, by_origin=True):
    """Cross-validate every grid point; returns (best point, [CvResult]).

    The best point has the lowest mean held-out MSE; ties go to the point
    enumerated first.
    """
    grid.validate()
    base_config = base_config or TrainConfig()
    folds = _fold_manifests(manifest, k, seed, by_origin)
    loader = ImageLoader(pipeline, preprocess_params, threads=base_config.threads)
    height, width, _ = loader.image_shape(manifest)
    channels = pipeline_channels(pipeline)

    results = []
    try:
        for index, point in enumerate(grid.points()):
            spec = default_spec(
                height, width, channels,
                base_filters=point["base_filters"],
                dropout_rate=point["dropout_rate"],
                l2_lambda=point["l2_lambda"],
            )
            scores = []
            for fold, (fit_on, held_out) in enumerate(folds):
                cfg = replace(
                    base_config,
                    epochs=epochs,
                    learning_rate=point["learning_rate"],
                    seed=_point_seed(seed, point, fold),
                    early_stop_patience=None,
                )
                try:
                    model, _ = train(spec, fit_on, held_out, cfg, pipeline,
                                     loader.params, loader)
                    preds = predict_manifest(model, held_out, loader, cfg.batch_size)
                except LawnAreaError as e:
                    e.grid_point = index
                    e.fold = fold
                    e.args = (f"grid point {index}, fold {fold}: {e.args[0]}",) + e.args[1:]
                    raise
                scores.append(float(np.mean((preds - held_out.areas()) ** 2)))
                logger.debug("Grid point %d fold %d: MSE %.4f", index, fold, scores[-1])
            result = CvResult(index, point, tuple(scores), float(np.mean(scores)))
            logger.info("Grid point %d %s: mean MSE %.4f", index, point, result.mean_mse)
            results.append(result)
    finally:
        loader.close()

    best = min(results, key=lambda r: (r.mean_mse, r.index))
    return best.point, results


def cv_results_csv(results):
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(CV_COLUMNS)
    for result in results:
        coords = [repr(result.point[a]) for a in ParamGrid.axes()]
        for fold, mse in enumerate(result.fold_mses):
            writer.writerow([result.index, *coords, fold, repr(mse)])
        writer.writerow([result.index, *coords, "mean", repr(result.mean_mse)])
    return out.getvalue()


def write_cv_results(results, path):
    try:
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(cv_results_csv(results))
    except OSError as e:
        raise DatasetIOError(f"cannot write CV results: {e.strerror or e}", path) from e
