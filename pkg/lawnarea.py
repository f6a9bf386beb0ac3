"""
lawnarea - lawn-area regression benchmark.

Usage:
    python lawnarea.py synth --count 65 --seed 7 --out data/
    python lawnarea.py augment --data data/manifest.csv --out aug/
    python lawnarea.py split --data aug/manifest.csv --out splits/
    python lawnarea.py train --pipeline cnn --data splits/train.csv --val splits/val.csv
    python lawnarea.py eval --checkpoint checkpoint.bin --data splits/test.csv --split test
    python lawnarea.py report --results cnn.csv edges.csv
    python lawnarea.py benchmark --out run/          # everything above in one go
    python lawnarea.py -c config.json train ...      # defaults from a config file

Exit status: 0 success, 1 training diverged, 2 usage, config or I/O failure.
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from checkpoint import load_checkpoint, save_checkpoint
from dataset import (
    SPLIT_NAMES,
    AugmentParams,
    Manifest,
    SceneConfig,
    SplitSpec,
    generate_augmented_dataset,
    generate_synthetic_dataset,
    load_manifest,
    make_panels,
    preprocess_dataset,
    save_manifest,
    split_dataset,
)
from errors import ConfigError, DatasetIOError, DivergedError, LawnAreaError
from imaging import METHODS, CannyParams, PreprocessParams, preprocess, read_pixmap, write_pixmap
from metrics import SPLITS, build_report, evaluate_pipeline, read_results, results_csv, write_results
from neuralnet import activation_name, conv_layer_indices, default_spec, model_forward, tile_activations
from training import PIPELINES, ImageLoader, TrainConfig, train, write_history
from tuning import ParamGrid, grid_search, load_grid, write_cv_results

__version__ = "1.0.0"

logger = logging.getLogger("lawnarea")

CONFIG_ENV = "LAWNAREA_CONFIG"
MANIFEST_NAME = "manifest.csv"
# record-level split sizes for a 65 x (1 + 50) augmented set
FIXED_COUNTS = (1849, 150, 250)


# -------- Config file --------

def load_config(config_path):
    """Load a JSON run configuration."""
    try:
        with open(config_path, "r", encoding="utf-8") as f:
            config = json.load(f)
    except OSError as e:
        raise DatasetIOError(f"cannot read config: {e.strerror or e}", config_path) from e
    except json.JSONDecodeError as e:
        raise ConfigError(e.msg, config_path, e.lineno) from e
    if not isinstance(config, dict):
        raise ConfigError("top level must be a JSON object", config_path)
    return config


def _dests(parser):
    return {
        action.dest for action in parser._actions
        if action.dest not in ("help", "version", "config", "command", argparse.SUPPRESS)
    }


def apply_config(parser, subparsers, config, command, path):
    """Install config values as parser defaults so argv still wins.

    Top-level keys apply to every subcommand that has the flag; an object
    under a subcommand's name applies to that subcommand only.
    """
    global_dests = _dests(parser)
    known = set(global_dests)
    for sub in subparsers.values():
        known |= _dests(sub)
    command_dests = _dests(subparsers[command])

    shared = {}
    scoped = {}
    for key, value in config.items():
        if key in subparsers:
            if not isinstance(value, dict):
                raise ConfigError(f"section {key!r} must be an object", path)
            unknown = sorted(set(value) - _dests(subparsers[key]))
            if unknown:
                raise ConfigError(f"unknown key(s) for {key}: {', '.join(unknown)}", path)
            if key == command:
                scoped = value
        elif key not in known:
            raise ConfigError(f"unknown key {key!r}", path)
        else:
            shared[key] = value

    merged = {**shared, **scoped}
    parser.set_defaults(**{k: v for k, v in merged.items() if k in global_dests})
    subparsers[command].set_defaults(
        **{k: v for k, v in merged.items() if k in command_dests}
    )


def _require(args, *names):
    for name in names:
        if getattr(args, name, None) in (None, ""):
            raise ConfigError(f"missing required option --{name.replace('_', '-')}")


# -------- Shared option groups --------

def _preprocess_options():
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("preprocessing")
    g.add_argument("--threshold", type=int, default=None,
                   help="Fixed binarization level 0-255 (default: Otsu per image)")
    g.add_argument("--blur-sigma", type=float, default=1.0,
                   help="Gaussian sigma before contour tracing (default: 1.0)")
    g.add_argument("--canny-sigma", type=float, default=1.4)
    g.add_argument("--canny-low", type=int, default=50)
    g.add_argument("--canny-high", type=int, default=150)
    return p


def _augment_options():
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("augmentation")
    g.add_argument("--copies", type=int, default=50,
                   help="Augmented copies per original (default: 50)")
    g.add_argument("--rotation", type=float, default=20.0,
                   help="Maximum rotation in degrees (default: 20)")
    g.add_argument("--no-flip-h", dest="flip_horizontal", action="store_false")
    g.add_argument("--no-flip-v", dest="flip_vertical", action="store_false")
    g.add_argument("--brightness", type=float, nargs=2, default=[0.8, 1.2],
                   metavar=("LO", "HI"))
    return p


def _scene_options():
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("synthetic scenes")
    g.add_argument("--count", type=int, default=65, help="Number of scenes (default: 65)")
    g.add_argument("--size", type=int, default=128, help="Scene edge in pixels (default: 128)")
    g.add_argument("--meters-per-pixel", type=float, default=0.25)
    g.add_argument("--house-fraction", type=float, nargs=2, default=[0.15, 0.35],
                   metavar=("LO", "HI"))
    g.add_argument("--trees", type=int, nargs=2, default=[0, 4], metavar=("LO", "HI"))
    return p


def _model_options():
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("model")
    g.add_argument("--base-filters", type=int, default=32)
    g.add_argument("--dropout", type=float, default=0.3)
    g.add_argument("--l2", type=float, default=1e-4)
    return p


def _train_options():
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("training")
    g.add_argument("--pipeline", choices=tuple(PIPELINES), default="cnn")
    g.add_argument("--epochs", type=int, default=100)
    g.add_argument("--batch-size", type=int, default=16)
    g.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    g.add_argument("--learning-rate", type=float, default=1e-3)
    g.add_argument("--momentum", type=float, default=0.9)
    g.add_argument("--patience", type=int, default=15,
                   help="Early-stopping patience in epochs; 0 disables (default: 15)")
    g.add_argument("--no-shuffle", dest="shuffle", action="store_false")
    g.add_argument("--standardize", dest="target_standardize", action="store_true",
                   help="Train on standardized targets")
    return p


def _preprocess_params(args):
    return PreprocessParams(
        threshold=args.threshold,
        blur_sigma=args.blur_sigma,
        canny=CannyParams(args.canny_sigma, args.canny_low, args.canny_high),
    ).validate()


def _augment_params(args):
    return AugmentParams(
        rotation_max_deg=args.rotation,
        flip_horizontal=args.flip_horizontal,
        flip_vertical=args.flip_vertical,
        brightness_range=tuple(args.brightness),
        copies=args.copies,
    ).validate()


def _scene_config(args):
    return SceneConfig(
        size=args.size,
        meters_per_pixel=args.meters_per_pixel,
        house_fraction_range=tuple(args.house_fraction),
        tree_count_range=tuple(args.trees),
        seed=args.seed,
    ).validate()


def _train_config(args):
    return TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        optimizer=args.optimizer,
        learning_rate=args.learning_rate,
        seed=args.seed,
        shuffle=args.shuffle,
        target_standardize=args.target_standardize,
        early_stop_patience=args.patience or None,
        momentum=args.momentum,
        threads=args.threads,
    ).validate()


def _fit(args, train_manifest, val_manifest, pipeline, params, loader):
    height, width, channels = loader.image_shape(train_manifest)
    spec = default_spec(height, width, channels, args.base_filters, args.dropout, args.l2)
    return train(spec, train_manifest, val_manifest, _train_config(args), pipeline, params, loader)


def _history_path(checkpoint_path):
    return os.path.splitext(checkpoint_path)[0] + "_history.csv"


def _write_text(path, text):
    try:
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(text)
    except OSError as e:
        raise DatasetIOError(f"cannot write: {e.strerror or e}", path) from e


def _makedirs(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as e:
        raise DatasetIOError(f"cannot create directory: {e.strerror or e}", path) from e


# -------- Subcommands --------

def cmd_synth(args):
    _require(args, "out")
    manifest = generate_synthetic_dataset(_scene_config(args), args.count, args.out, args.threads)
    save_manifest(manifest, os.path.join(args.out, MANIFEST_NAME))


def cmd_augment(args):
    _require(args, "data", "out")
    manifest = generate_augmented_dataset(
        load_manifest(args.data), _augment_params(args), args.seed, args.out, args.threads
    )
    save_manifest(manifest, os.path.join(args.out, MANIFEST_NAME))


def cmd_preprocess(args):
    _require(args, "data", "out")
    manifest = preprocess_dataset(
        load_manifest(args.data), args.method, _preprocess_params(args), args.out, args.threads
    )
    save_manifest(manifest, os.path.join(args.out, MANIFEST_NAME))


def cmd_split(args):
    _require(args, "data", "out")
    counts = FIXED_COUNTS if args.fixed_split else args.counts
    spec = SplitSpec(
        ratios=tuple(args.ratios),
        by_original=not (args.by_record or args.fixed_split),
        seed=args.seed,
        counts=None if counts is None else tuple(counts),
    )
    parts = split_dataset(load_manifest(args.data), spec)
    for name, part in zip(SPLIT_NAMES, parts):
        save_manifest(part, os.path.join(args.out, f"{name}.csv"))
    logger.info(
        "Split into %s records under %s",
        "/".join(str(len(p)) for p in parts), args.out,
    )


def cmd_train(args):
    _require(args, "data", "out")
    train_manifest = load_manifest(args.data)
    val_manifest = load_manifest(args.val) if args.val else Manifest()
    params = _preprocess_params(args)
    with ImageLoader(args.pipeline, params, threads=args.threads) as loader:
        model, history = _fit(args, train_manifest, val_manifest, args.pipeline, params, loader)
    save_checkpoint(model, args.out)
    write_history(history, args.history or _history_path(args.out))
    logger.info("Saved %s checkpoint to %s", args.pipeline, args.out)


def cmd_eval(args):
    _require(args, "checkpoint", "data")
    model = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.data)
    with ImageLoader(model.pipeline, model.preprocess_params, threads=args.threads) as loader:
        result = evaluate_pipeline(
            model, manifest, args.split, loader=loader, residuals_path=args.residuals
        )
    if args.out:
        write_results([result], args.out)
    sys.stdout.write(results_csv([result]))


def cmd_report(args):
    _require(args, "results")
    results = []
    for path in args.results:
        results.extend(read_results(path))
    csv_text, markdown = build_report(results)
    if args.out_csv:
        _write_text(args.out_csv, csv_text)
    if args.out_md:
        _write_text(args.out_md, markdown)
    sys.stdout.write(markdown)


def cmd_gridsearch(args):
    _require(args, "data")
    grid = load_grid(args.grid) if args.grid else ParamGrid()
    best, results = grid_search(
        grid,
        load_manifest(args.data),
        k=args.k,
        seed=args.seed,
        epochs=args.epochs,
        base_config=_train_config(args),
        pipeline=args.pipeline,
        preprocess_params=_preprocess_params(args),
        by_origin=not args.by_record,
    )
    if args.out:
        write_cv_results(results, args.out)
    print(json.dumps(best, sort_keys=True))


def cmd_activations(args):
    _require(args, "checkpoint", "image", "out")
    model = load_checkpoint(args.checkpoint)
    img = read_pixmap(args.image)
    if args.preprocess:
        img = preprocess(img, PIPELINES[model.pipeline], model.preprocess_params)
    x = img[None].astype(np.float32) / np.float32(255.0)
    _, cache = model_forward(model.spec, model.params, x, "infer", keep_activations=True)
    _makedirs(args.out)
    indices = conv_layer_indices(model.spec)
    for index in indices:
        path = os.path.join(args.out, activation_name(model.spec, index))
        write_pixmap(path, tile_activations(cache.activations[index][0]))
    logger.info("Wrote %d activation grid(s) to %s", len(indices), args.out)


def cmd_panels(args):
    _require(args, "image", "out")
    strip = make_panels(
        read_pixmap(args.image), args.method, _preprocess_params(args),
        _augment_params(args), args.seed,
    )
    write_pixmap(args.out, strip)


def cmd_benchmark(args):
    _require(args, "out")
    params = _preprocess_params(args)
    scenes = generate_synthetic_dataset(
        _scene_config(args), args.count, os.path.join(args.out, "scenes"), args.threads
    )
    save_manifest(scenes, os.path.join(args.out, "scenes", MANIFEST_NAME))
    augmented = generate_augmented_dataset(
        scenes, _augment_params(args), args.seed, os.path.join(args.out, "augmented"), args.threads
    )
    augmented = save_manifest(augmented, os.path.join(args.out, "augmented", MANIFEST_NAME))
    parts = split_dataset(augmented, SplitSpec(ratios=tuple(args.ratios), seed=args.seed))
    for name, part in zip(SPLIT_NAMES, parts):
        save_manifest(part, os.path.join(args.out, "splits", f"{name}.csv"))

    results = []
    for pipeline in args.pipelines:
        run_dir = os.path.join(args.out, pipeline)
        _makedirs(run_dir)
        logger.info("Training %s pipeline", pipeline)
        with ImageLoader(pipeline, params, threads=args.threads) as loader:
            model, history = _fit(args, parts[0], parts[1], pipeline, params, loader)
            save_checkpoint(model, os.path.join(run_dir, "checkpoint.bin"))
            write_history(history, os.path.join(run_dir, "history.csv"))
            for split, part in zip(SPLITS, parts):
                if len(part):
                    results.append(evaluate_pipeline(model, part, split, loader=loader))

    write_results(results, os.path.join(args.out, "results.csv"))
    csv_text, markdown = build_report(results)
    _write_text(os.path.join(args.out, "report.csv"), csv_text)
    _write_text(os.path.join(args.out, "report.md"), markdown)
    sys.stdout.write(markdown)


# -------- Parser --------

def build_parser():
    """Return (parser, {subcommand: subparser})."""
    parser = argparse.ArgumentParser(
        prog="lawnarea", description="Lawn-area regression benchmark"
    )
    parser.add_argument("-c", "--config", default=None,
                        help=f"JSON config file (default: ${CONFIG_ENV} if set)")
    parser.add_argument("--threads", type=int, default=1,
                        help="Worker threads for image I/O and preprocessing (default: 1)")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true")
    verbosity.add_argument("-q", "--quiet", action="store_true")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    # parents share action objects, so every subcommand gets fresh option groups
    preprocessing = _preprocess_options
    augmentation = _augment_options
    scenes = _scene_options
    model = _model_options
    training = _train_options
    subparsers = {}

    def add(name, handler, help_text, parents=()):
        p = sub.add_parser(name, help=help_text, parents=[make() for make in parents])
        p.set_defaults(handler=handler)
        subparsers[name] = p
        return p

    p = add("synth", cmd_synth, "Generate synthetic aerial scenes", [scenes])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="Output directory")

    p = add("augment", cmd_augment, "Write augmented copies of a dataset", [augmentation])
    p.add_argument("--data", help="Input manifest")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="Output directory")

    p = add("preprocess", cmd_preprocess, "Preprocess every image of a dataset", [preprocessing])
    p.add_argument("--data", help="Input manifest")
    p.add_argument("--method", choices=METHODS, default="canny")
    p.add_argument("--out", help="Output directory")

    p = add("split", cmd_split, "Split a manifest into train/val/test")
    p.add_argument("--data", help="Input manifest")
    p.add_argument("--ratios", type=float, nargs=3, default=[0.70, 0.15, 0.15],
                   metavar=("TRAIN", "VAL", "TEST"))
    p.add_argument("--counts", type=int, nargs=3, default=None,
                   metavar=("TRAIN", "VAL", "TEST"), help="Explicit split sizes")
    p.add_argument("--by-record", action="store_true",
                   help="Split augmented records directly (lets twins straddle splits)")
    p.add_argument("--fixed-split", action="store_true",
                   help="Record-level split of 1849/150/250 records")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="Output directory for train.csv, val.csv, test.csv")

    p = add("train", cmd_train, "Train one pipeline", [training, model, preprocessing])
    p.add_argument("--data", help="Training manifest")
    p.add_argument("--val", default=None, help="Validation manifest")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="checkpoint.bin", help="Checkpoint path")
    p.add_argument("--history", default=None,
                   help="History CSV (default: <checkpoint>_history.csv)")

    p = add("eval", cmd_eval, "Evaluate a checkpoint on one split")
    p.add_argument("--checkpoint")
    p.add_argument("--data", help="Manifest of the split")
    p.add_argument("--split", choices=("train", "val", "test") + SPLITS, default="testing")
    p.add_argument("--out", default=None, help="Results CSV")
    p.add_argument("--residuals", default=None, help="Per-image residual CSV")

    p = add("report", cmd_report, "Combine result files into the comparison table")
    p.add_argument("--results", nargs="+", help="Results CSV files")
    p.add_argument("--out-csv", default=None)
    p.add_argument("--out-md", default=None)

    p = add("gridsearch", cmd_gridsearch, "Cross-validated grid search",
            [training, preprocessing])
    p.add_argument("--data", help="Manifest to cross-validate on")
    p.add_argument("--grid", default=None, help="Grid file (key=v1,v2 per line)")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--by-record", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="CV results CSV")
    p.set_defaults(epochs=20)

    p = add("activations", cmd_activations, "Dump convolution activations for one image")
    p.add_argument("--checkpoint")
    p.add_argument("--image")
    p.add_argument("--preprocess", action="store_true",
                   help="Apply the checkpoint's preprocessing to the image first")
    p.add_argument("--out", help="Output directory")

    p = add("panels", cmd_panels, "Original / preprocessed / augmented strip",
            [preprocessing, augmentation])
    p.add_argument("--image")
    p.add_argument("--method", choices=METHODS, default="canny")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="Output pixmap")

    p = add("benchmark", cmd_benchmark, "Synthesize, train every pipeline and report",
            [scenes, augmentation, training, model, preprocessing])
    p.add_argument("--pipelines", nargs="+", choices=tuple(PIPELINES), default=list(PIPELINES))
    p.add_argument("--ratios", type=float, nargs=3, default=[0.70, 0.15, 0.15],
                   metavar=("TRAIN", "VAL", "TEST"))
    p.add_argument("--raw-targets", dest="target_standardize", action="store_false",
                   help="Train on raw square meters instead of standardized targets")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", help="Output directory")
    p.set_defaults(target_standardize=True)

    return parser, subparsers


def parse_args(argv=None):
    parser, subparsers = build_parser()
    args = parser.parse_args(argv)
    config_path = args.config or os.environ.get(CONFIG_ENV)
    if config_path:
        apply_config(parser, subparsers, load_config(config_path), args.command, config_path)
        args = parser.parse_args(argv)
    return args


def main(argv=None):
    try:
        args = parse_args(argv)
    except LawnAreaError as e:
        logging.basicConfig(level=logging.INFO)
        logger.error("%s", e)
        return 2

    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(
        level=level,
        format="%(asctime)s [%(levelname)s] %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )
    logger.setLevel(level)

    try:
        args.handler(args)
    except DivergedError as e:
        logger.error("%s", e)
        return 1
    except (LawnAreaError, OSError) as e:
        logger.error("%s", e)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
