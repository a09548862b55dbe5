"""Encoder-decoder-encoder reconstruction and anomaly scoring."""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np
import torch

from .encoder import LOSS_VARIANTS
from .errors import InvalidInputError


@dataclass(frozen=True)
class AnomalyScore:
    image_term: float
    latent_term: float | None = None

    @property
    def value(self) -> float:
        return self.image_term + (self.latent_term or 0.0)


@dataclass
class ScoredPatch:
    patch_id: str
    x: int
    y: int
    label: str | None
    score: AnomalyScore
    reconstruction: np.ndarray


def _abs_mean(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean(np.abs(a - b)))


def score(x, x_rec, z, z_rec, variant: str) -> AnomalyScore:
    """Image MAD, plus latent MAD when the model was trained with ``iziz_f``."""
    if variant not in LOSS_VARIANTS:
        raise InvalidInputError(f"unknown scoring variant {variant!r}")
    image = _abs_mean(x, x_rec)
    if variant == "iziz_f":
        return AnomalyScore(image, _abs_mean(z, z_rec))
    return AnomalyScore(image)


def _as_batch(x, dtype):
    t = torch.as_tensor(np.asarray(x), dtype=dtype)
    return t.reshape(-1, 1, *t.shape[-2:])


def reconstruct_batch(e, gan, x):
    """``z = E(x)``, ``x~ = G(z)``, ``z~ = E(x~)`` for a batch, with no gradients."""
    dtype = next(e.parameters()).dtype
    xb = _as_batch(x, dtype)
    e.eval()
    with torch.no_grad():
        z = e(xb)
        x_rec = gan.decode(z)
        if x_rec.shape != xb.shape:
            raise InvalidInputError(f"generator output {tuple(x_rec.shape)} does not match "
                                    f"query shape {tuple(xb.shape)}")
        z_rec = e(x_rec)
    return z.numpy(), x_rec[:, 0].numpy(), z_rec.numpy()


def reconstruct(e, gan, x):
    """Single-patch reconstruction triple ``(z, x~, z~)``."""
    z, x_rec, z_rec = reconstruct_batch(e, gan, x)
    return z[0], x_rec[0], z_rec[0]


def score_dataset(e, gan, dataset, variant: str, batch_size: int = 64,
                  timings: dict | None = None) -> list[ScoredPatch]:
    """Score every patch, preserving order. Per-patch wall-clock goes into ``timings``."""
    patches = list(dataset.patches if hasattr(dataset, "patches") else dataset)
    out = []
    start = time.perf_counter()
    for lo in range(0, len(patches), batch_size):
        chunk = patches[lo:lo + batch_size]
        z, x_rec, z_rec = reconstruct_batch(e, gan, np.stack([p.data for p in chunk]))
        for i, p in enumerate(chunk):
            s = score(p.data, x_rec[i], z[i], z_rec[i], variant)
            out.append(ScoredPatch(f"{p.source}#{lo + i}", p.x, p.y, p.label, s, x_rec[i]))
    if timings is not None and patches:
        elapsed = time.perf_counter() - start
        timings.update({"patches": len(patches), "seconds": elapsed,
                        "ms_per_patch": 1000.0 * elapsed / len(patches)})
    return out


CSV_COLUMNS = ["patch_id", "origin_x", "origin_y", "label", "score", "image_term", "latent_term"]


def write_scores_csv(path, scored) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for s in scored:
            latent = "" if s.score.latent_term is None else repr(s.score.latent_term)
            w.writerow([s.patch_id, s.x, s.y, s.label or "", repr(s.score.value),
                        repr(s.score.image_term), latent])


def read_scores_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for key in ("score", "image_term"):
            r[key] = float(r[key])
        r["latent_term"] = float(r["latent_term"]) if r["latent_term"] else None
        r["origin_x"], r["origin_y"] = int(r["origin_x"]), int(r["origin_y"])
        r["label"] = r["label"] or None
    return rows
