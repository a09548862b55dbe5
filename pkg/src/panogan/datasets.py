"""Patch datasets: the PANO1 container, seeded synthetic corpora and batch streams."""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidInputError
from .preprocess import ABNORMAL, NORMAL, Patch

MAGIC = b"PANO1"
FORMAT_VERSION = 1

_LABEL_CODES = {NORMAL: 0, ABNORMAL: 1, None: 255}
_CODE_LABELS = {v: k for k, v in _LABEL_CODES.items()}


def label_counts(patches) -> dict:
    counts = {NORMAL: 0, ABNORMAL: 0, "unlabeled": 0}
    for p in patches:
        counts[p.label if p.label is not None else "unlabeled"] += 1
    return counts


@dataclass
class PatchDataset:
    patch_size: int
    patches: list = field(default_factory=list)
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        for p in self.patches:
            if p.data.shape != (self.patch_size, self.patch_size):
                raise InvalidInputError(
                    f"patch of shape {p.data.shape} in a {self.patch_size}px dataset")
        self.manifest = dict(self.manifest)
        self.manifest["counts"] = label_counts(self.patches)

    def __len__(self):
        return len(self.patches)

    def array(self) -> np.ndarray:
        """All patch data stacked as ``(N, size, size)`` float32."""
        if not self.patches:
            return np.zeros((0, self.patch_size, self.patch_size), dtype=np.float32)
        return np.stack([p.data for p in self.patches]).astype(np.float32)

    def labels(self) -> list:
        return [p.label for p in self.patches]

    def subset(self, label: str) -> "PatchDataset":
        kept = [p for p in self.patches if p.label == label]
        return PatchDataset(self.patch_size, kept, {**self.manifest, "subset": label})


def concat(datasets, source: str = "concat") -> PatchDataset:
    datasets = list(datasets)
    size = datasets[0].patch_size
    patches = [p for ds in datasets for p in ds.patches]
    parts = [ds.manifest.get("source", "") for ds in datasets]
    return PatchDataset(size, patches, {"source": source, "parts": parts})


# ---------------------------------------------------------------- PANO1 I/O

def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def dumps_dataset(ds: PatchDataset) -> bytes:
    sources = sorted({p.source for p in ds.patches})
    index = {s: i for i, s in enumerate(sources)}
    manifest = json.dumps(ds.manifest, sort_keys=True).encode()
    table = json.dumps(sources).encode()
    n = len(ds.patches)
    parts = [
        MAGIC,
        struct.pack("<HII", FORMAT_VERSION, ds.patch_size, n),
        struct.pack("<I", len(manifest)), manifest,
        struct.pack("<I", len(table)), table,
        np.array([_LABEL_CODES[p.label] for p in ds.patches], dtype="u1").tobytes(),
        np.array([index[p.source] for p in ds.patches], dtype="<u4").tobytes(),
        np.array([p.x for p in ds.patches], dtype="<i4").tobytes(),
        np.array([p.y for p in ds.patches], dtype="<i4").tobytes(),
        ds.array().astype("<f4").tobytes(),
    ]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def loads_dataset(raw: bytes, name: str = "<bytes>") -> PatchDataset:
    if len(raw) < len(MAGIC) + 14 or raw[:len(MAGIC)] != MAGIC:
        raise FormatError(f"{name}: not a PANO1 dataset")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError(f"{name}: checksum mismatch (truncated or corrupted file)")

    pos = len(MAGIC)
    version, size, n = struct.unpack_from("<HII", body, pos)
    if version != FORMAT_VERSION:
        raise FormatError(f"{name}: format version {version}, expected {FORMAT_VERSION}")
    pos += 10

    def take(nbytes):
        nonlocal pos
        chunk = body[pos:pos + nbytes]
        if len(chunk) != nbytes:
            raise FormatError(f"{name}: truncated payload")
        pos += nbytes
        return chunk

    manifest = json.loads(take(struct.unpack("<I", take(4))[0]))
    sources = json.loads(take(struct.unpack("<I", take(4))[0]))
    labels = np.frombuffer(take(n), dtype="u1")
    src = np.frombuffer(take(4 * n), dtype="<u4")
    xs = np.frombuffer(take(4 * n), dtype="<i4")
    ys = np.frombuffer(take(4 * n), dtype="<i4")
    data = np.frombuffer(take(4 * n * size * size), dtype="<f4").reshape(n, size, size)
    if pos != len(body):
        raise FormatError(f"{name}: trailing bytes after payload")
    patches = [Patch(data[i].astype(np.float32), _CODE_LABELS[int(labels[i])],
                     sources[int(src[i])], int(xs[i]), int(ys[i])) for i in range(n)]
    ds = PatchDataset(size, patches, manifest)
    if ds.manifest["counts"] != manifest.get("counts"):
        raise FormatError(f"{name}: manifest counts disagree with payload")
    return ds


def save_dataset(ds: PatchDataset, path) -> None:
    path = Path(path)
    path.write_bytes(dumps_dataset(ds))
    manifest_path(path).write_text(json.dumps(
        {**ds.manifest, "patch_size": ds.patch_size, "format": "PANO1"},
        indent=2, sort_keys=True) + "\n")


def load_dataset(path, patch_size: int | None = None) -> PatchDataset:
    """Load a PANO1 file; optionally insist on a specific patch size."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise InvalidInputError(f"cannot read dataset {path}: {exc}") from None
    ds = loads_dataset(raw, str(path))
    if patch_size is not None and ds.patch_size != patch_size:
        raise InvalidInputError(
            f"{path}: patch size {ds.patch_size}, expected {patch_size}")
    return ds


# -------------------------------------------------------- synthetic corpora

def _texture(rng: np.random.Generator, size: int, noise: float = 0.05) -> np.ndarray:
    # sum of 3-6 oriented gratings (a quarter to one cycle per patch) plus weak white noise
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.zeros((size, size))
    for _ in range(int(rng.integers(3, 7))):
        theta = rng.uniform(0.0, np.pi)
        freq = rng.uniform(0.25, 1.0)
        phase = rng.uniform(0.0, 2 * np.pi)
        amp = rng.uniform(0.5, 1.0)
        img += amp * np.cos(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    img += noise * rng.standard_normal((size, size))
    img -= img.mean()
    return img / np.abs(img).max()


def synth_healthy(n: int, patch_size: int = 64, seed: int = 0,
                  source: str = "synth-healthy") -> PatchDataset:
    """``n`` normal patches of seeded band-limited texture in [-1, 1]."""
    if n < 1:
        raise InvalidInputError("n must be >= 1")
    patches = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        patches.append(Patch(_texture(rng, patch_size).astype(np.float32), NORMAL, source, i, 0))
    params = {"kind": "healthy", "n": n, "patch_size": patch_size, "seed": seed}
    return PatchDataset(patch_size, patches, {"source": source, "params": params})


def disc_profile(size: int, cx: float, cy: float, radius: float, edge: float = 2.0) -> np.ndarray:
    """Disc weight in [0, 1] with a linear ramp ``edge`` pixels wide at ``radius``."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dist = np.hypot(xx - cx, yy - cy)
    return np.clip((radius - dist) / edge + 0.5, 0.0, 1.0)


def synth_anomalous(n: int, patch_size: int = 64, seed: int = 0, radius: float = 8,
                    contrast: float = 0.6, source: str = "synth-lesion") -> PatchDataset:
    """Healthy-family patches with one bright additive disc each, labelled abnormal."""
    if n < 1:
        raise InvalidInputError("n must be >= 1")
    if not 1 <= radius <= patch_size / 4:
        raise InvalidInputError(f"radius must be in [1, {patch_size / 4}], got {radius}")
    if not 0 < contrast <= 1:
        raise InvalidInputError(f"contrast must be in (0, 1], got {contrast}")
    margin = radius + 2.0  # ramp reaches radius + 1
    patches = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        base = _texture(rng, patch_size)
        cx, cy = rng.uniform(margin, patch_size - margin, size=2)
        lesion = np.clip(base + contrast * disc_profile(patch_size, cx, cy, radius), -1.0, 1.0)
        patches.append(Patch(lesion.astype(np.float32), ABNORMAL, source, i, 0))
    params = {"kind": "lesion", "n": n, "patch_size": patch_size, "seed": seed,
              "radius": radius, "contrast": contrast}
    return PatchDataset(patch_size, patches, {"source": source, "params": params})


# ------------------------------------------------------------------ batches

class BatchStream:
    """Seeded per-epoch shuffling over ``n`` items; the short final batch is kept."""

    def __init__(self, n: int, batch_size: int, seed: int = 0, epoch: int = 0, position: int = 0):
        if n < 1:
            raise InvalidInputError("cannot stream an empty dataset")
        if batch_size < 1:
            raise InvalidInputError("batch_size must be >= 1")
        self.n = n
        self.batch_size = batch_size
        self.seed = seed
        self.epoch = epoch
        self.position = position
        self._order = self.permutation(epoch)

    def permutation(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.seed, epoch]).permutation(self.n)

    def batches_per_epoch(self) -> int:
        return -(-self.n // self.batch_size)

    def next_indices(self) -> np.ndarray:
        if self.position >= self.n:
            self.epoch += 1
            self.position = 0
            self._order = self.permutation(self.epoch)
        batch = self._order[self.position:self.position + self.batch_size]
        self.position += len(batch)
        return batch

    def next_batch(self, dataset: PatchDataset) -> list:
        return [dataset.patches[i] for i in self.next_indices()]

    def state(self) -> dict:
        return {"seed": self.seed, "epoch": self.epoch, "position": self.position}
