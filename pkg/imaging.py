"""
Classic image operators behind the threshold, contour and edge pipelines.

Images are ``uint8`` numpy arrays shaped (height, width, channels) where
channels is 1 or 3. Binary images share that layout with every sample in
{0, 255}. All operators are pure: they never modify their input.

Pixmaps on disk are binary PNM files (P5 for one channel, P6 for three),
maxval 255, read and written through Pillow.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from errors import DatasetIOError, InvalidArgument, InvalidState

logger = logging.getLogger("lawnarea")

METHODS = ("none", "threshold", "contour", "canny")

# 8-neighbourhood in clockwise order starting west, image y axis pointing down
_NEIGHBOURS = ((-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1))

_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)

SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
SOBEL_Y = SOBEL_X.T.copy()


@dataclass(frozen=True)
class CannyParams:
    """Blur width and 8-bit hysteresis thresholds for canny_edges."""

    sigma: float = 1.4
    low: int = 50
    high: int = 150

    def validate(self):
        if not self.sigma > 0:
            raise InvalidArgument(f"canny sigma must be > 0, got {self.sigma}")
        if not 0 < self.low < self.high <= 255:
            raise InvalidArgument(
                f"canny thresholds need 0 < low < high <= 255, "
                f"got low={self.low} high={self.high}"
            )
        return self


@dataclass(frozen=True)
class PreprocessParams:
    """Settings shared by the preprocessing pipelines.

    ``threshold`` fixes the binarization level; None selects Otsu's level
    per image. ``blur_sigma`` is the Gaussian width used before contouring.
    """

    threshold: Optional[int] = None
    blur_sigma: float = 1.0
    canny: CannyParams = field(default_factory=CannyParams)

    def validate(self):
        if self.threshold is not None and not 0 <= self.threshold <= 255:
            raise InvalidArgument(
                f"threshold must be within 0..255, got {self.threshold}"
            )
        if not self.blur_sigma > 0:
            raise InvalidArgument(f"blur sigma must be > 0, got {self.blur_sigma}")
        self.canny.validate()
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        canny = CannyParams(**data.pop("canny", {}))
        return cls(canny=canny, **data)


@dataclass(frozen=True)
class Contour:
    """Ordered 8-connected boundary walk; points are (x, y) pixel coordinates."""

    points: tuple

    def __len__(self):
        return len(self.points)


def check_image(img, channels=None):
    """Validate the image layout and return the array unchanged."""
    if not isinstance(img, np.ndarray) or img.dtype != np.uint8 or img.ndim != 3:
        raise InvalidArgument("image must be a uint8 array shaped (H, W, C)")
    height, width, depth = img.shape
    if height < 1 or width < 1:
        raise InvalidArgument(f"image must be at least 1x1, got {width}x{height}")
    if depth not in (1, 3):
        raise InvalidArgument(f"image must have 1 or 3 channels, got {depth}")
    if channels is not None and depth != channels:
        raise InvalidArgument(f"expected a {channels}-channel image, got {depth}")
    return img


def _plane(img):
    return check_image(img, channels=1)[:, :, 0]


def _as_image(plane):
    return np.ascontiguousarray(plane, dtype=np.uint8)[:, :, None]


def _round_to_u8(values):
    # half-up rounding, then clamp
    return np.clip(np.floor(values + 0.5), 0, 255).astype(np.uint8)


# -------- Pixmap I/O --------

def read_pixmap(path):
    """Read a P5/P6 pixmap into a (H, W, C) uint8 array."""
    try:
        with PILImage.open(path) as im:
            im.load()
            mode = im.mode
            data = np.array(im, dtype=np.uint8)
    except OSError as e:
        raise DatasetIOError(f"cannot read image: {e}", path) from e
    if mode == "L":
        return data[:, :, None]
    if mode == "RGB":
        return data
    raise DatasetIOError(f"unsupported pixmap mode {mode!r}", path)


def write_pixmap(path, img):
    """Write a 1-channel image as P5 or a 3-channel image as P6."""
    check_image(img)
    data = img[:, :, 0] if img.shape[2] == 1 else img
    try:
        PILImage.fromarray(np.ascontiguousarray(data)).save(path, format="PPM")
    except OSError as e:
        raise DatasetIOError(f"cannot write image: {e}", path) from e


# -------- Point operators --------

def to_grayscale(img):
    """ITU-R 601 luma of a 3-channel image, as a 1-channel image."""
    check_image(img)
    if img.shape[2] != 3:
        raise InvalidArgument("to_grayscale needs a 3-channel image")
    rgb = img.astype(np.float64)
    luma = 0.299 * rgb[:, :, 0] + 0.587 * rgb[:, :, 1] + 0.114 * rgb[:, :, 2]
    return _as_image(_round_to_u8(luma))


def histogram(img):
    """256-bin histogram of a 1-channel image."""
    return np.bincount(_plane(img).ravel(), minlength=256).astype(np.int64)


def otsu_threshold(hist):
    """Return the level t maximizing between-class variance of ``hist``.

    Class 0 holds levels <= t and class 1 levels > t, matching
    threshold_binary. Scores are compared exactly in integer arithmetic and
    ties go to the smallest t. A histogram occupying a single level has no
    valid split; its lowest occupied level is returned.
    """
    hist = np.asarray(hist)
    if hist.shape != (256,):
        raise InvalidArgument(f"histogram must have 256 bins, got shape {hist.shape}")
    counts = [int(c) for c in hist]
    if any(c < 0 for c in counts):
        raise InvalidArgument("histogram counts must be non-negative")
    total = sum(counts)
    if total == 0:
        raise InvalidArgument("histogram is empty")
    level_sum = sum(level * c for level, c in enumerate(counts))

    best_t = None
    best_num, best_den = 0, 1
    n0 = 0
    s0 = 0
    for t, c in enumerate(counts):
        n0 += c
        s0 += t * c
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            continue
        # sigma_b * total^2 = (s0 * total - level_sum * n0)^2 / (n0 * n1)
        num = (s0 * total - level_sum * n0) ** 2
        den = n0 * n1
        if best_t is None or num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    if best_t is None:
        return next(level for level, c in enumerate(counts) if c)
    return best_t


def threshold_binary(img, t):
    """Samples above ``t`` become 255, the rest 0."""
    plane = _plane(img)
    if not 0 <= t <= 255:
        raise InvalidArgument(f"threshold must be within 0..255, got {t}")
    return _as_image(np.where(plane > t, 255, 0))


# -------- Filters --------

def gaussian_kernel(sigma):
    """Sampled, normalized 1-D Gaussian of radius ceil(3 * sigma)."""
    if not sigma > 0:
        raise InvalidArgument(f"sigma must be > 0, got {sigma}")
    radius = math.ceil(3 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    weights = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return weights / weights.sum()


def gaussian_blur(img, sigma):
    """Separable Gaussian blur with clamp-to-border edges."""
    plane = _plane(img).astype(np.float64)
    kernel = gaussian_kernel(sigma)
    rows = ndimage.correlate1d(plane, kernel, axis=1, mode="nearest")
    blurred = ndimage.correlate1d(rows, kernel, axis=0, mode="nearest")
    return _as_image(_round_to_u8(blurred))


def _non_max_suppression(magnitude, gx, gy):
    height, width = magnitude.shape
    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    sector = ((angle + 22.5) // 45.0).astype(np.int64) % 4
    padded = np.pad(magnitude, 1, mode="edge")

    def shifted(dy, dx):
        return padded[1 + dy:1 + dy + height, 1 + dx:1 + dx + width]

    kept = np.zeros_like(magnitude)
    # step along the quantized gradient: 0, 45, 90 and 135 degrees
    for index, (dy, dx) in enumerate(((0, 1), (1, 1), (1, 0), (1, -1))):
        ahead = shifted(dy, dx)
        behind = shifted(-dy, -dx)
        # strict on one side so a two-pixel plateau keeps a single pixel
        peak = (sector == index) & (magnitude > behind) & (magnitude >= ahead)
        kept[peak] = magnitude[peak]
    return kept


def canny_edges(img, params=None):
    """Canny edge map: blur, Sobel, non-maximum suppression, hysteresis."""
    params = (params or CannyParams()).validate()
    blurred = gaussian_blur(img, params.sigma)[:, :, 0].astype(np.float64)
    gx = ndimage.correlate(blurred, SOBEL_X, mode="nearest")
    gy = ndimage.correlate(blurred, SOBEL_Y, mode="nearest")
    magnitude = np.hypot(gx, gy)
    # thinning sees the unclamped magnitude; thresholds see 8-bit values
    thinned = np.minimum(_non_max_suppression(magnitude, gx, gy), 255.0)

    strong = thinned >= params.high
    candidates = thinned >= params.low
    labels, count = ndimage.label(candidates, structure=_EIGHT_CONNECTED)
    linked = np.zeros(count + 1, dtype=bool)
    linked[np.unique(labels[strong])] = True
    linked[0] = False
    return _as_image(np.where(linked[labels], 255, 0))


# -------- Contours --------

def _trace(foreground, start_x, start_y):
    """Moore-neighbour walk with Jacob's stopping criterion."""
    height, width = foreground.shape

    def is_foreground(x, y):
        return 0 <= x < width and 0 <= y < height and foreground[y, x]

    start = (start_x, start_y)
    # the first pixel of a component in raster order always has background on its left
    start_back = (start_x - 1, start_y)
    points = [start]
    current, back = start, start_back
    limit = 4 * foreground.size + 8
    while True:
        origin = _NEIGHBOURS.index((back[0] - current[0], back[1] - current[1]))
        found = None
        for step in range(1, 9):
            dx, dy = _NEIGHBOURS[(origin + step) % 8]
            candidate = (current[0] + dx, current[1] + dy)
            if is_foreground(*candidate):
                px, py = _NEIGHBOURS[(origin + step - 1) % 8]
                found = candidate
                entered_from = (current[0] + px, current[1] + py)
                break
        if found is None:
            return points
        if found == start and entered_from == start_back:
            return points
        # leaving start towards the second point again closes thin loops
        if current == start and len(points) > 1 and found == points[1]:
            return points[:-1]
        points.append(found)
        current, back = found, entered_from
        if len(points) > limit:
            raise InvalidState(f"contour trace from {start} did not terminate")


def find_contours(binary):
    """Outer contour of every 8-connected foreground component, in scan order."""
    foreground = _plane(binary) > 0
    labels, count = ndimage.label(foreground, structure=_EIGHT_CONNECTED)
    if count == 0:
        return []
    width = foreground.shape[1]
    values, first = np.unique(labels.ravel(), return_index=True)
    starts = sorted(int(i) for v, i in zip(values, first) if v != 0)
    contours = []
    for index in starts:
        y, x = divmod(index, width)
        contours.append(Contour(tuple(_trace(foreground, x, y))))
    return contours


def contour_area(contour):
    """Absolute shoelace area of the contour polygon, in pixels squared."""
    points = contour.points if isinstance(contour, Contour) else contour
    if len(points) < 3:
        return 0.0
    xy = np.asarray(points, dtype=np.float64)
    x, y = xy[:, 0], xy[:, 1]
    return float(abs(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y)) / 2.0)


def _segment(x0, y0, x1, y1):
    steps = max(abs(x1 - x0), abs(y1 - y0))
    if steps == 0:
        return np.array([x0]), np.array([y0])
    t = np.linspace(0.0, 1.0, steps + 1)
    xs = np.floor(x0 + (x1 - x0) * t + 0.5).astype(np.int64)
    ys = np.floor(y0 + (y1 - y0) * t + 0.5).astype(np.int64)
    return xs, ys


def draw_contours(height, width, contours):
    """Render contours as closed 1-pixel polylines of 255 on black."""
    canvas = np.zeros((height, width), dtype=np.uint8)
    for contour in contours:
        points = contour.points if isinstance(contour, Contour) else contour
        count = len(points)
        for i in range(count):
            x0, y0 = points[i]
            x1, y1 = points[(i + 1) % count]
            xs, ys = _segment(x0, y0, x1, y1)
            inside = (xs >= 0) & (xs < width) & (ys >= 0) & (ys < height)
            canvas[ys[inside], xs[inside]] = 255
    return _as_image(canvas)


# -------- Pipelines --------

def _grayscale_of(img):
    check_image(img)
    return img if img.shape[2] == 1 else to_grayscale(img)


def _binarize(gray, params):
    t = params.threshold
    if t is None:
        t = otsu_threshold(histogram(gray))
    return threshold_binary(gray, t)


def preprocess(img, method, params=None):
    """Apply one of the preprocessing pipelines to an image.

    ``none`` returns a copy of the input. The other methods return 1-channel
    images; a 1-channel input skips the grayscale step.
    """
    if method not in METHODS:
        raise InvalidArgument(
            f"unknown preprocessing method {method!r}; expected one of {', '.join(METHODS)}"
        )
    params = (params or PreprocessParams()).validate()
    if method == "none":
        return check_image(img).copy()
    gray = _grayscale_of(img)
    if method == "threshold":
        return _binarize(gray, params)
    if method == "contour":
        binary = _binarize(gaussian_blur(gray, params.blur_sigma), params)
        height, width = binary.shape[:2]
        return draw_contours(height, width, find_contours(binary))
    return canny_edges(gray, params.canny)
