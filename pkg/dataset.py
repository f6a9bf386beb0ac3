"""
Dataset manifests, seeded augmentation, splitting and synthetic lawn scenes.

A manifest is a CSV file listing ``image_path,area_sq_m,origin_id`` rows.
Image paths are relative to the directory holding the manifest. Every
augmented copy keeps the area label and origin id of the picture it was made
from, so splits can keep all copies of one original together.

The synthetic scene generator stands in for hand-measured satellite crops:
it paints lawn, trees, a driveway and a house while tracking each pixel's
class, so the lawn area label is exact.
"""

import csv
import hashlib
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from errors import DatasetIOError, InvalidArgument, ManifestParseError
from imaging import check_image, preprocess, read_pixmap, write_pixmap

logger = logging.getLogger("lawnarea")

MANIFEST_HEADER = ("image_path", "area_sq_m", "origin_id")
SPLIT_NAMES = ("train", "val", "test")

# Pixel classes tracked while rendering a synthetic scene
LAWN, HOUSE, DRIVEWAY, TREE = 0, 1, 2, 3

PALETTE = {
    LAWN: (60, 140, 60),
    HOUSE: (120, 120, 120),
    DRIVEWAY: (90, 90, 90),
    TREE: (30, 80, 30),
}
LAWN_NOISE = 20


@dataclass(frozen=True)
class ManifestRecord:
    image_path: str
    area_sq_m: float
    origin_id: str


@dataclass
class Manifest:
    """Manifest records plus the directory their relative paths start from."""

    records: list = field(default_factory=list)
    root: str = "."

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def resolve(self, record):
        if os.path.isabs(record.image_path):
            return record.image_path
        return os.path.join(self.root, *record.image_path.split("/"))

    def origins(self):
        return sorted({r.origin_id for r in self.records})

    def areas(self):
        return np.array([r.area_sq_m for r in self.records], dtype=np.float64)

    def subset(self, records):
        return Manifest(list(records), self.root)


@dataclass(frozen=True)
class AugmentParams:
    """Ranges for the random label-preserving transforms.

    Rotation is uniform in +/- rotation_max_deg, each enabled flip fires with
    ``flip_probability``, brightness multiplies by a factor drawn from
    ``brightness_range``. ``copies`` augmented pictures are made per original.
    """

    rotation_max_deg: float = 20.0
    flip_horizontal: bool = True
    flip_vertical: bool = True
    brightness_range: tuple = (0.8, 1.2)
    copies: int = 50
    flip_probability: float = 0.5

    def validate(self):
        if not 0 <= self.rotation_max_deg <= 180:
            raise InvalidArgument(
                f"rotation_max_deg must be within [0, 180], got {self.rotation_max_deg}"
            )
        lo, hi = self.brightness_range
        if not 0 < lo <= hi:
            raise InvalidArgument(
                f"brightness range needs 0 < lo <= hi, got [{lo}, {hi}]"
            )
        if self.copies < 1:
            raise InvalidArgument(f"copies must be >= 1, got {self.copies}")
        if not 0 <= self.flip_probability <= 1:
            raise InvalidArgument(
                f"flip_probability must be within [0, 1], got {self.flip_probability}"
            )
        return self


@dataclass(frozen=True)
class SplitSpec:
    """How to cut a manifest into train/val/test.

    ``counts`` overrides ``ratios`` with explicit sizes (origins when
    ``by_original`` is set, records otherwise); sizes may add up to less than
    the total, leaving the rest unused.
    """

    ratios: tuple = (0.70, 0.15, 0.15)
    by_original: bool = True
    seed: int = 0
    counts: Optional[tuple] = None

    def validate(self):
        if len(self.ratios) != 3 or any(not r > 0 for r in self.ratios):
            raise InvalidArgument(f"split ratios must be three positive fractions, got {self.ratios}")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise InvalidArgument(f"split ratios must sum to 1, got {sum(self.ratios)}")
        if self.counts is not None:
            if len(self.counts) != 3 or any(c < 0 for c in self.counts):
                raise InvalidArgument(f"split counts must be three non-negative sizes, got {self.counts}")
        if self.seed < 0:
            raise InvalidArgument(f"seed must be >= 0, got {self.seed}")
        return self


@dataclass(frozen=True)
class SceneConfig:
    size: int = 128
    meters_per_pixel: float = 0.25
    house_fraction_range: tuple = (0.15, 0.35)
    tree_count_range: tuple = (0, 4)
    seed: int = 0

    def validate(self):
        if self.size < 32:
            raise InvalidArgument(f"scene size must be >= 32, got {self.size}")
        if not self.meters_per_pixel > 0:
            raise InvalidArgument(
                f"meters_per_pixel must be > 0, got {self.meters_per_pixel}"
            )
        lo, hi = self.house_fraction_range
        if not 0 <= lo <= hi <= 1:
            raise InvalidArgument(
                f"house fraction range needs 0 <= lo <= hi <= 1, got [{lo}, {hi}]"
            )
        tlo, thi = self.tree_count_range
        if not 0 <= tlo <= thi:
            raise InvalidArgument(
                f"tree count range needs 0 <= lo <= hi, got [{tlo}, {thi}]"
            )
        if self.seed < 0:
            raise InvalidArgument(f"seed must be >= 0, got {self.seed}")
        return self


def derive_seed(*parts):
    """Stable 64-bit seed from any mix of ints and strings."""
    text = ":".join(str(p) for p in parts)
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def _map(fn, items, threads=1):
    """Ordered map, optionally on a thread pool; results keep input order."""
    items = list(items)
    if threads <= 1 or len(items) < 2:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _unique_stems(manifest):
    stems = [os.path.splitext(os.path.basename(r.image_path))[0] for r in manifest]
    if len(set(stems)) != len(stems):
        raise InvalidArgument("manifest image file names must be unique")
    return stems


def _pixmap_name(stem, img):
    return stem + (".ppm" if img.shape[2] == 3 else ".pgm")


# -------- Manifest files --------

def load_manifest(path):
    """Parse a manifest CSV; paths resolve against the file's directory."""
    try:
        f = open(path, "r", encoding="utf-8", newline="")
    except FileNotFoundError as e:
        raise ManifestParseError("manifest file not found", path, 0) from e
    except OSError as e:
        raise DatasetIOError(f"cannot open manifest: {e.strerror or e}", path) from e
    records = []
    with f:
        reader = csv.reader(f)
        try:
            header = next(reader, None)
            if header is None:
                raise ManifestParseError("missing header row", path, 1)
            if tuple(h.strip() for h in header) != MANIFEST_HEADER:
                raise ManifestParseError(
                    f"expected header {','.join(MANIFEST_HEADER)}", path, 1
                )
            for row in reader:
                line = reader.line_num
                if not row:
                    continue
                if len(row) != 3:
                    raise ManifestParseError(
                        f"expected 3 columns, got {len(row)}", path, line
                    )
                image_path, area_text, origin_id = (c.strip() for c in row)
                try:
                    area = float(area_text)
                except ValueError:
                    raise ManifestParseError(
                        f"area {area_text!r} is not a number", path, line
                    ) from None
                if not math.isfinite(area) or area < 0:
                    raise ManifestParseError(
                        f"area must be a finite value >= 0, got {area_text}", path, line
                    )
                if not image_path:
                    raise ManifestParseError("empty image path", path, line)
                if not origin_id:
                    raise ManifestParseError("empty origin_id", path, line)
                records.append(ManifestRecord(image_path, area, origin_id))
        except csv.Error as e:
            raise ManifestParseError(str(e), path, reader.line_num) from e
    return Manifest(records, os.path.dirname(os.path.abspath(path)))


def save_manifest(manifest, path):
    """Write a manifest CSV with paths relative to the file's directory."""
    target_dir = os.path.dirname(os.path.abspath(path))
    rows = []
    for record in manifest:
        rel = os.path.relpath(os.path.abspath(manifest.resolve(record)), target_dir)
        rows.append((rel.replace(os.sep, "/"), repr(float(record.area_sq_m)), record.origin_id))
    try:
        os.makedirs(target_dir, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(MANIFEST_HEADER)
            writer.writerows(rows)
    except OSError as e:
        raise DatasetIOError(f"cannot write manifest: {e.strerror or e}", path) from e
    return Manifest(
        [ManifestRecord(p, float(a), o) for p, a, o in rows], target_dir
    )


# -------- Augmentation --------

def augment_image(img, params, seed):
    """Rotate, flip and re-brighten ``img`` with randomness seeded by ``seed``.

    Every draw happens whether or not its transform is enabled, so the random
    stream for a given seed never depends on the parameters.
    """
    check_image(img)
    params.validate()
    if seed < 0:
        raise InvalidArgument(f"seed must be >= 0, got {seed}")
    rng = np.random.default_rng(seed)
    angle = rng.uniform(-params.rotation_max_deg, params.rotation_max_deg)
    flip_h = rng.random() < params.flip_probability
    flip_v = rng.random() < params.flip_probability
    lo, hi = params.brightness_range
    factor = rng.uniform(lo, hi)

    out = img
    if angle != 0.0:
        out = ndimage.rotate(
            out, angle, axes=(1, 0), reshape=False, order=0, mode="constant", cval=0
        )
    if params.flip_horizontal and flip_h:
        out = out[:, ::-1]
    if params.flip_vertical and flip_v:
        out = out[::-1]
    if factor != 1.0:
        out = np.clip(np.floor(out.astype(np.float64) * factor + 0.5), 0, 255)
    return np.ascontiguousarray(out, dtype=np.uint8)


def generate_augmented_dataset(manifest, params, base_seed, out_dir, threads=1):
    """Write each original plus ``params.copies`` augmented copies to ``out_dir``.

    Copy ``i`` of a record is seeded from (base_seed, origin_id, i). The
    returned manifest lists, per input record, the original followed by its
    copies, in input order.
    """
    if not len(manifest):
        raise InvalidArgument("cannot augment an empty manifest")
    params.validate()
    stems = _unique_stems(manifest)
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as e:
        raise DatasetIOError(f"cannot create output directory: {e.strerror or e}", out_dir) from e

    def work(job):
        record, stem = job
        img = read_pixmap(manifest.resolve(record))
        name = _pixmap_name(stem, img)
        write_pixmap(os.path.join(out_dir, name), img)
        produced = [ManifestRecord(name, record.area_sq_m, record.origin_id)]
        for copy_index in range(params.copies):
            seed = derive_seed(base_seed, record.origin_id, copy_index)
            copy_name = _pixmap_name(f"{stem}_aug{copy_index:03d}", img)
            write_pixmap(os.path.join(out_dir, copy_name), augment_image(img, params, seed))
            produced.append(ManifestRecord(copy_name, record.area_sq_m, record.origin_id))
        return produced

    batches = _map(work, zip(manifest.records, stems), threads)
    records = [r for batch in batches for r in batch]
    logger.info(
        "Augmented %d picture(s) x%d into %s (%d records)",
        len(manifest), params.copies, out_dir, len(records),
    )
    return Manifest(records, os.path.abspath(out_dir))


# -------- Splitting --------

def allocate_counts(total, ratios):
    """Largest-remainder apportionment of ``total`` items over ``ratios``."""
    exact = [total * r for r in ratios]
    counts = [math.floor(x) for x in exact]
    remainder = total - sum(counts)
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[:remainder]:
        counts[i] += 1
    return tuple(counts)


def _checked_counts(spec, total, unit):
    counts = tuple(spec.counts) if spec.counts is not None else allocate_counts(total, spec.ratios)
    if sum(counts) > total:
        raise InvalidArgument(
            f"split counts {counts} need {sum(counts)} {unit}, only {total} available"
        )
    if sum(counts) < total:
        logger.warning(
            "Split uses %d of %d %s; the rest is left out", sum(counts), total, unit
        )
    return counts


def split_dataset(manifest, spec):
    """Cut a manifest into (train, val, test) manifests.

    With ``by_original`` the shuffled unit is the origin id, so every copy of
    a picture lands in the same split. Otherwise records are shuffled and
    dealt out directly, which lets augmented twins straddle splits.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    parts = ([], [], [])
    if spec.by_original:
        origins = manifest.origins()
        if len(origins) < 3:
            raise InvalidArgument(
                f"splitting by original needs at least 3 origins, got {len(origins)}"
            )
        shuffled = [origins[i] for i in rng.permutation(len(origins))]
        counts = _checked_counts(spec, len(origins), "origins")
        assignment = {}
        offset = 0
        for split_index, n in enumerate(counts):
            for origin in shuffled[offset:offset + n]:
                assignment[origin] = split_index
            offset += n
        for record in manifest:
            split_index = assignment.get(record.origin_id)
            if split_index is not None:
                parts[split_index].append(record)
    else:
        order = rng.permutation(len(manifest))
        counts = _checked_counts(spec, len(manifest), "records")
        offset = 0
        for split_index, n in enumerate(counts):
            for i in sorted(int(j) for j in order[offset:offset + n]):
                parts[split_index].append(manifest.records[i])
            offset += n
    return tuple(manifest.subset(p) for p in parts)


# -------- Synthetic scenes --------

def render_scene(cfg, index):
    """Paint scene ``index``; returns (RGB image, per-pixel class map)."""
    cfg.validate()
    rng = np.random.default_rng(derive_seed(cfg.seed, "scene", index))
    size = cfg.size
    classes = np.full((size, size), LAWN, dtype=np.uint8)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    tlo, thi = cfg.tree_count_range
    for _ in range(int(rng.integers(tlo, thi + 1))):
        cx, cy = rng.uniform(0, size, 2)
        rx, ry = rng.uniform(size / 16, size / 8, 2)
        crown = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
        classes[crown] = TREE

    flo, fhi = cfg.house_fraction_range
    fraction = rng.uniform(flo, fhi)
    aspect = rng.uniform(0.75, 4.0 / 3.0)
    drive_offset = rng.uniform(-0.25, 0.25)
    footprint = fraction * size * size
    if footprint >= 1.0:
        width = int(np.clip(round(math.sqrt(footprint * aspect)), math.ceil(footprint / size), size))
        height = int(np.clip(round(footprint / width), 1, size))
        x0 = (size - width) // 2
        y0 = (size - height) // 2
        drive_width = max(1, width // 4)
        drive_x = int(np.clip(x0 + (width - drive_width) // 2 + round(drive_offset * width),
                              0, size - drive_width))
        classes[y0 + height:, drive_x:drive_x + drive_width] = DRIVEWAY
        classes[y0:y0 + height, x0:x0 + width] = HOUSE

    image = np.zeros((size, size, 3), dtype=np.int64)
    for cls, colour in PALETTE.items():
        image[classes == cls] = colour
    noise = rng.integers(-LAWN_NOISE, LAWN_NOISE + 1, size=(size, size, 3))
    lawn = classes == LAWN
    image[lawn] += noise[lawn]
    return np.clip(image, 0, 255).astype(np.uint8), classes


def generate_synthetic_scene(cfg, index):
    """Render scene ``index`` and return (image, lawn area in square meters)."""
    image, classes = render_scene(cfg, index)
    lawn_pixels = int(np.count_nonzero(classes == LAWN))
    return image, lawn_pixels * cfg.meters_per_pixel ** 2


def generate_synthetic_dataset(cfg, count, out_dir, threads=1):
    """Write ``count`` scenes as P6 pixmaps; returns their manifest."""
    cfg.validate()
    if count < 0:
        raise InvalidArgument(f"count must be >= 0, got {count}")
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as e:
        raise DatasetIOError(f"cannot create output directory: {e.strerror or e}", out_dir) from e

    def work(index):
        image, area = generate_synthetic_scene(cfg, index)
        name = f"scene_{index:04d}.ppm"
        write_pixmap(os.path.join(out_dir, name), image)
        return ManifestRecord(name, area, f"scene{index:04d}")

    records = _map(work, range(count), threads)
    logger.info("Synthesized %d scene(s) of %dpx into %s", count, cfg.size, out_dir)
    return Manifest(records, os.path.abspath(out_dir))


# -------- Preprocessed sets and panels --------

def preprocess_dataset(manifest, method, params, out_dir, threads=1):
    """Run one preprocessing method over every record into ``out_dir``."""
    stems = _unique_stems(manifest)
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as e:
        raise DatasetIOError(f"cannot create output directory: {e.strerror or e}", out_dir) from e

    def work(job):
        record, stem = job
        out = preprocess(read_pixmap(manifest.resolve(record)), method, params)
        name = _pixmap_name(stem, out)
        write_pixmap(os.path.join(out_dir, name), out)
        return ManifestRecord(name, record.area_sq_m, record.origin_id)

    records = _map(work, zip(manifest.records, stems), threads)
    logger.info("Preprocessed %d image(s) with %s into %s", len(records), method, out_dir)
    return Manifest(records, os.path.abspath(out_dir))


def make_panels(img, method, params, augment_params, seed, gap=2):
    """Side-by-side strip: original | preprocessed | augmented then preprocessed."""
    check_image(img)
    panels = [
        img,
        preprocess(img, method, params),
        preprocess(augment_image(img, augment_params, seed), method, params),
    ]
    height = img.shape[0]
    spacer = np.zeros((height, gap, 3), dtype=np.uint8)
    columns = []
    for i, panel in enumerate(panels):
        if i:
            columns.append(spacer)
        columns.append(np.repeat(panel, 3, axis=2) if panel.shape[2] == 1 else panel)
    return np.concatenate(columns, axis=1)
