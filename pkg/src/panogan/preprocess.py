"""Image preprocessing: CLAHE, resizing, patch extraction and patch labelling.

Images are 2-D float arrays in [0, 1] indexed ``[row, col]``; masks are
boolean arrays of the same shape. Patches carry intensities in [-1, 1].
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidInputError

NORMAL = "normal"
ABNORMAL = "abnormal"
LABELS = (NORMAL, ABNORMAL)

HEALTHY_SOURCE = "healthy_source"
UNHEALTHY_SOURCE = "unhealthy_source"


@dataclass(frozen=True)
class ClaheParams:
    tile_size: int = 128
    clip_limit: float = 0.01
    num_bins: int = 256

    def __post_init__(self):
        if self.tile_size < 2:
            raise InvalidInputError(f"tile_size must be >= 2, got {self.tile_size}")
        if not 0 < self.clip_limit <= 1:
            raise InvalidInputError(f"clip_limit must be in (0, 1], got {self.clip_limit}")
        if self.num_bins < 2:
            raise InvalidInputError(f"num_bins must be >= 2, got {self.num_bins}")


@dataclass(frozen=True)
class NoduleAnnotation:
    centroid_x: float
    centroid_y: float


@dataclass
class Patch:
    """Square patch. ``x``/``y`` are the column/row of its top-left pixel."""

    data: np.ndarray
    label: str | None = None
    source: str = ""
    x: int = 0
    y: int = 0

    @property
    def size(self) -> int:
        return self.data.shape[0]

    def contains(self, cx: float, cy: float) -> bool:
        return self.x <= cx < self.x + self.size and self.y <= cy < self.y + self.size


def check_image(image) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InvalidInputError(f"expected a non-empty 2-D image, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("image contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise InvalidInputError("image intensities must lie in [0, 1]")
    return arr


# --------------------------------------------------------------------- CLAHE

def _tile_bounds(length: int, tile: int) -> list[tuple[int, int]]:
    return [(s, min(s + tile, length)) for s in range(0, length, tile)]


def _clipped_mapping(hist, count: int, clip_limit: float) -> np.ndarray:
    # Exact rational arithmetic, rounded once, so results do not depend on
    # summation order.
    nbins = len(hist)
    limit = Fraction(clip_limit) * count
    counts = [Fraction(int(h)) for h in hist]
    excess = sum((h - limit for h in counts if h > limit), Fraction(0))
    share = excess / nbins
    mapping = np.empty(nbins, dtype=np.float64)
    running = Fraction(0)
    for b, h in enumerate(counts):
        running += min(h, limit) + share
        mapping[b] = float(running / count)
    return mapping


def _interp_axis(length: int, bounds: list[tuple[int, int]]):
    """Per-pixel (lower tile, upper tile, upper weight) along one axis."""
    centers = np.array([(a + b) / 2.0 for a, b in bounds])
    pos = np.arange(length) + 0.5
    lo = np.clip(np.searchsorted(centers, pos, side="right") - 1, 0, len(centers) - 1)
    hi = np.minimum(lo + 1, len(centers) - 1)
    w = np.zeros(length)
    inner = (pos > centers[0]) & (pos < centers[-1])
    w[inner] = (pos[inner] - centers[lo[inner]]) / (centers[hi[inner]] - centers[lo[inner]])
    hi = np.where(inner, hi, lo)
    return lo, hi, w


def clahe(image, params: ClaheParams = ClaheParams()) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization on non-overlapping tiles.

    Each tile's histogram is clipped at ``clip_limit * tile_pixels``; the
    clipped excess is spread evenly over all bins in one pass. Tile CDF
    mappings are blended bilinearly between tile centers; pixels outside the
    outermost centers use the nearest tile(s) only.
    """
    img = check_image(image)
    height, width = img.shape
    nb = params.num_bins
    bins = np.minimum((img * nb).astype(np.int64), nb - 1)

    rows = _tile_bounds(height, params.tile_size)
    cols = _tile_bounds(width, params.tile_size)
    maps = np.empty((len(rows), len(cols), nb))
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            tile = bins[r0:r1, c0:c1]
            hist = np.bincount(tile.ravel(), minlength=nb)
            maps[i, j] = _clipped_mapping(hist, tile.size, params.clip_limit)

    ylo, yhi, wy = _interp_axis(height, rows)
    xlo, xhi, wx = _interp_axis(width, cols)
    ylo, yhi, wy = ylo[:, None], yhi[:, None], wy[:, None]
    m00 = maps[ylo, xlo[None, :], bins]
    m01 = maps[ylo, xhi[None, :], bins]
    m10 = maps[yhi, xlo[None, :], bins]
    m11 = maps[yhi, xhi[None, :], bins]
    # a + w*(b - a) keeps equal neighbours exact
    top = m00 + wx * (m01 - m00)
    bottom = m10 + wx * (m11 - m10)
    out = top + wy * (bottom - top)
    return np.clip(out, 0.0, 1.0)


# -------------------------------------------------------------------- resize

def _resample_axis(length: int, target: int):
    src = (np.arange(target) + 0.5) * (length / target) - 0.5
    src = np.clip(src, 0.0, length - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, length - 1)
    return i0, i1, src - i0


def resize(image, target: int) -> np.ndarray:
    """Bilinear resize to ``target x target`` with half-pixel centers and edge clamping."""
    if target < 1:
        raise InvalidInputError(f"target size must be >= 1, got {target}")
    img = check_image(image)
    y0, y1, wy = _resample_axis(img.shape[0], target)
    x0, x1, wx = _resample_axis(img.shape[1], target)
    rows = img[y0] * (1.0 - wy)[:, None] + img[y1] * wy[:, None]
    out = rows[:, x0] * (1.0 - wx) + rows[:, x1] * wx
    return np.clip(out, 0.0, 1.0)


# ------------------------------------------------------------------- patches

def to_patch_range(values):
    return 2.0 * np.asarray(values) - 1.0


def from_patch_range(values):
    return (np.asarray(values) + 1.0) / 2.0


def extract_patches(image, mask, patch_size: int = 64, stride: int | None = None,
                    min_coverage: float = 0.5, source: str = "") -> list[Patch]:
    """Cut unlabeled patches on a regular grid, keeping those with enough lung coverage."""
    img = check_image(image)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != img.shape:
        raise InvalidInputError(f"mask shape {mask.shape} does not match image shape {img.shape}"
                                + (f" for {source!r}" if source else ""))
    stride = patch_size if stride is None else stride
    if patch_size < 1 or stride < 1:
        raise InvalidInputError("patch_size and stride must be >= 1")
    if not 0.0 <= min_coverage <= 1.0:
        raise InvalidInputError(f"min_coverage must be in [0, 1], got {min_coverage}")

    height, width = img.shape
    area = patch_size * patch_size
    patches = []
    for row in range(0, height - patch_size + 1, stride):
        for col in range(0, width - patch_size + 1, stride):
            covered = int(mask[row:row + patch_size, col:col + patch_size].sum())
            if covered / area < min_coverage:
                continue
            data = to_patch_range(img[row:row + patch_size, col:col + patch_size])
            patches.append(Patch(data.astype(np.float32), None, source, col, row))
    return patches


def label_patches(patches, annotations, policy: str) -> list[Patch]:
    """Label patches by source policy.

    Healthy sources yield only normal patches. For unhealthy sources a patch is
    abnormal when it contains a nodule centroid and is dropped otherwise.
    """
    if policy == HEALTHY_SOURCE:
        return [replace(p, label=NORMAL) for p in patches]
    if policy != UNHEALTHY_SOURCE:
        raise InvalidInputError(f"unknown labelling policy {policy!r}")
    return [replace(p, label=ABNORMAL) for p in patches
            if any(p.contains(a.centroid_x, a.centroid_y) for a in annotations)]


# ---------------------------------------------------------------------- I/O

_PGM_HEADER = re.compile(rb"^P5(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)"
                         rb"(?:\s|#[^\n]*\n)+(\d+)\s")


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5) PGM, 8- or 16-bit, scaled to [0, 1]."""
    raw = Path(path).read_bytes()
    m = _PGM_HEADER.match(raw)
    if m is None:
        raise FormatError(f"{path}: not a binary PGM (P5) file")
    width, height, maxval = (int(g) for g in m.groups())
    if not 0 < maxval < 65536 or width < 1 or height < 1:
        raise FormatError(f"{path}: bad PGM header")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    payload = raw[m.end():]
    expected = width * height * dtype.itemsize
    if len(payload) < expected:
        raise FormatError(f"{path}: truncated PGM payload")
    data = np.frombuffer(payload[:expected], dtype=dtype).reshape(height, width)
    return np.clip(data.astype(np.float64) / maxval, 0.0, 1.0)


def write_pgm(path, image, maxval: int = 255) -> None:
    img = check_image(image)
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    data = np.rint(img * maxval).astype(dtype)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + data.tobytes())


def read_raw_float(path) -> np.ndarray:
    """Read a ``W H`` text header line followed by little-endian float32 pixels."""
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n")
    try:
        width, height = (int(v) for v in raw[:newline].split())
    except ValueError:
        raise FormatError(f"{path}: bad raw header") from None
    payload = raw[newline + 1:]
    if len(payload) != width * height * 4:
        raise FormatError(f"{path}: expected {width * height} float32 values")
    data = np.frombuffer(payload, dtype="<f4").reshape(height, width)
    return check_image(data)


def write_raw_float(path, image) -> None:
    img = check_image(image)
    header = f"{img.shape[1]} {img.shape[0]}\n".encode("ascii")
    Path(path).write_bytes(header + img.astype("<f4").tobytes())


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return read_pgm(path)
    if path.suffix.lower() == ".raw":
        return read_raw_float(path)
    raise FormatError(f"{path}: unsupported image format")


def read_mask(path) -> np.ndarray:
    return read_pgm(path) > 0


def read_annotations(path) -> tuple[str, list[NoduleAnnotation]]:
    try:
        doc = json.loads(Path(path).read_text())
        centroids = [NoduleAnnotation(float(x), float(y)) for x, y in doc["centroids"]]
        return str(doc["image_id"]), centroids
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: bad annotation file ({exc})") from None


def check_annotations(annotations, shape) -> None:
    height, width = shape
    for a in annotations:
        if not (0 <= a.centroid_x < width and 0 <= a.centroid_y < height):
            raise InvalidInputError(f"centroid ({a.centroid_x}, {a.centroid_y}) "
                                    f"outside a {width}x{height} image")
