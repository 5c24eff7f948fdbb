"""Synthetic chest-X-ray-like images with known opacified zones.

Each image is a dark field with a faint lung silhouette; k of the six lung
zones (3 rows x 2 lungs) receive one smooth Gaussian opacity. A bright text
marker is stamped into the top rows, which preprocessing crops away.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import InputError
from ..rng import substream
from .manifest import Manifest, SampleRecord, write_manifest
from .pgm import to_raster, write_pgm
from .transforms import crop_rows

# zone grid in fractions of the image: rows (top, bottom), lungs (left, right)
ZONE_ROWS = ((0.14, 0.41), (0.41, 0.68), (0.68, 0.95))
ZONE_COLS = ((0.08, 0.46), (0.54, 0.92))
BLOB_SIGMA = (0.055, 0.065)
BLOB_AMPLITUDE = (0.50, 0.60)
UNIFORM_ZONES = (1 / 6,) * 6


@dataclass(frozen=True)
class Blob:
    zone: int  # row-major over the 3x2 grid, 0..5
    cy: float
    cx: float
    sigma: float
    amplitude: float


def zone_box(zone: int, size: int) -> tuple[float, float, float, float]:
    r, c = divmod(zone, 2)
    (y0, y1), (x0, x1) = ZONE_ROWS[r], ZONE_COLS[c]
    return y0 * size, y1 * size, x0 * size, x1 * size


def render(blobs: list[Blob], size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64),
                         indexing="ij")
    img = np.full((size, size), 0.08)
    # soft lung fields, then opacities, then sensor noise
    for (x0, x1) in ZONE_COLS:
        cy, cx = 0.55 * size, (x0 + x1) / 2 * size
        ry, rx = 0.42 * size, (x1 - x0) / 2 * size
        img += 0.06 * np.exp(-(((yy - cy) / ry) ** 4 + ((xx - cx) / rx) ** 4))
    for b in blobs:
        img += b.amplitude * np.exp(-((yy - b.cy) ** 2 + (xx - b.cx) ** 2) / (2 * b.sigma ** 2))
    img += rng.normal(0.0, 0.015, size=img.shape)
    top = crop_rows(size)
    if top >= 2:
        w = max(2, size // 6)
        x0 = int(rng.integers(0, size - w))
        img[1:top, x0:x0 + w] = 0.95
    return np.clip(img, 0.0, 1.0)


def draw_blobs(k: int, size: int, rng: np.random.Generator) -> list[Blob]:
    zones = sorted(rng.choice(6, size=k, replace=False).tolist())
    blobs = []
    for z in zones:
        y0, y1, x0, x1 = zone_box(z, size)
        cy = (y0 + y1) / 2 + rng.uniform(-0.12, 0.12) * (y1 - y0)
        cx = (x0 + x1) / 2 + rng.uniform(-0.12, 0.12) * (x1 - x0)
        blobs.append(Blob(z, float(cy), float(cx),
                          float(rng.uniform(*BLOB_SIGMA) * size),
                          float(rng.uniform(*BLOB_AMPLITUDE))))
    return blobs


def generate_synthetic(n_images: int, zone_count_distribution=UNIFORM_ZONES,
                       image_size: int = 64, rng_seed: int = 0, out_dir=None):
    """Write ``n_images`` P5 images plus ``manifest.csv`` and ``blobs.csv`` to ``out_dir``.

    ``zone_count_distribution`` holds probabilities for k = 1..6. Returns the
    manifest and a mapping image_path -> list of :class:`Blob` in raw
    (uncropped) pixel coordinates.
    """
    if image_size < 16:
        raise InputError(f"image_size {image_size} < 16")
    p = np.asarray(zone_count_distribution, dtype=np.float64)
    if p.shape != (6,) or np.any(p < 0) or p.sum() <= 0:
        raise InputError("zone_count_distribution must hold 6 non-negative weights for k = 1..6")
    p = p / p.sum()
    out = Path(out_dir if out_dir is not None else ".")
    (out / "images").mkdir(parents=True, exist_ok=True)

    meta_rng = substream(rng_seed, 0x5A17)
    records, blob_map = [], {}
    i = patient = 0
    while i < n_images:
        n_own = int(meta_rng.integers(1, 5))
        pid = f"P{patient:05d}"
        age = int(np.clip(np.rint(meta_rng.normal(59.0, 16.0)), 18, 98))
        sex = "M" if meta_rng.random() < 0.62 else "F"
        for _ in range(min(n_own, n_images - i)):
            rng = substream(rng_seed, 0x1A6E, i)
            k = int(rng.choice(6, p=p)) + 1
            blobs = draw_blobs(k, image_size, rng)
            img = render(blobs, image_size, rng)
            rel = f"images/img_{i:05d}.pgm"
            write_pgm(out / rel, to_raster(img, 255), 255, comment=f"seed {rng_seed}")
            view = str(rng.choice(["AP", "PA", "unknown"], p=[0.55, 0.01, 0.44]))
            records.append(SampleRecord(rel, pid, k, "unassigned", age, sex, view))
            blob_map[rel] = blobs
            i += 1
        patient += 1
    manifest = Manifest(records, out)
    write_manifest(manifest, out / "manifest.csv")
    write_blobs(blob_map, out / "blobs.csv")
    return manifest, blob_map


def write_blobs(blob_map: dict[str, list[Blob]], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_path", "zone", "cy", "cx", "sigma", "amplitude"])
        for rel, blobs in blob_map.items():
            for b in blobs:
                w.writerow([rel, b.zone, repr(b.cy), repr(b.cx), repr(b.sigma), repr(b.amplitude)])


def read_blobs(path) -> dict[str, list[Blob]]:
    out: dict[str, list[Blob]] = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["image_path"], []).append(Blob(
                int(row["zone"]), float(row["cy"]), float(row["cx"]),
                float(row["sigma"]), float(row["amplitude"])))
    return out


def blob_mask(blobs: list[Blob], raw_size: int, size: int, radius: float = 2.0) -> np.ndarray:
    """Boolean (size, size) mask of pixels within ``radius`` sigmas of any blob centre,
    in preprocessed (cropped and resampled) coordinates."""
    top = crop_rows(raw_size)
    sy = (raw_size - top) / size
    sx = raw_size / size
    yy, xx = np.meshgrid((np.arange(size) + 0.5) * sy - 0.5 + top,
                         (np.arange(size) + 0.5) * sx - 0.5, indexing="ij")
    mask = np.zeros((size, size), dtype=bool)
    for b in blobs:
        mask |= (yy - b.cy) ** 2 + (xx - b.cx) ** 2 <= (radius * b.sigma) ** 2
    return mask
