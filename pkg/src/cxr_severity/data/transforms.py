"""Crop/resample preprocessing and geometric + intensity augmentation.

Bilinear sampling uses the half-pixel-centre convention: output pixel (i, j)
of an S x S resample reads the input at ((i + 0.5) * H / S - 0.5,
(j + 0.5) * W / S - 0.5). Interpolation is written as a + f * (b - a), so a
constant image stays exactly constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import InputError, ParameterError
from ..tensor import Tensor

CROP_FRACTION = 0.08
DEFAULT_SIZE = 480

MAX_SHIFT = 0.10
MAX_ANGLE = 10.0
ZOOM_RANGE = (0.85, 1.15)
MAX_INTENSITY = 0.10


def crop_rows(height: int) -> int:
    """Rows removed from the top of an image of the given height."""
    return math.floor(CROP_FRACTION * height)


def _lerp2(img, sy, sx):
    """Bilinear sample ``img`` at float coordinates already clamped to the grid."""
    h, w = img.shape
    y0 = np.floor(sy).astype(np.intp)
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.clip(y0, 0, h - 1)
    x0 = np.clip(x0, 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = sy - y0
    fx = sx - x0
    a = img[y0, x0]
    b = img[y0, x1]
    c = img[y1, x0]
    d = img[y1, x1]
    top = a + fx * (b - a)
    bot = c + fx * (d - c)
    return top + fy * (bot - top)


def resample(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = img.shape
    sy = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    sx = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    sy = np.clip(sy, 0, h - 1)
    sx = np.clip(sx, 0, w - 1)
    yy, xx = np.meshgrid(sy, sx, indexing="ij")
    return _lerp2(img, yy, xx)


def preprocess(raster, size: int = DEFAULT_SIZE, maxval: int | None = None,
               precision: str = "f64") -> Tensor:
    """Crop the top 8% of rows, normalize to [0, 1], resample to (1, size, size).

    Integer rasters are divided by ``maxval`` (default: the dtype maximum);
    float rasters are taken to be in [0, 1] already unless ``maxval`` is given.
    """
    raster = np.asarray(raster)
    if raster.size == 0:
        raise InputError("preprocess: empty image")
    if raster.ndim == 3 and raster.shape[0] == 1:
        raster = raster[0]
    if raster.ndim != 2:
        raise InputError(f"preprocess: expected a 2-D grayscale raster, got {raster.shape}")
    h = raster.shape[0]
    if h < 13:
        raise InputError(f"preprocess: height {h} < 13 leaves nothing after the crop")
    if maxval is None and np.issubdtype(raster.dtype, np.integer):
        maxval = np.iinfo(raster.dtype).max
    img = raster.astype(np.float64)
    if maxval is not None:
        img = img / float(maxval)
    img = img[crop_rows(h):]
    return Tensor(resample(img, size, size)[None], precision)


@dataclass(frozen=True)
class AugmentDraw:
    """One set of augmentation parameters. ``tx``/``ty`` are in pixels."""

    tx: float = 0.0
    ty: float = 0.0
    angle: float = 0.0
    flip: bool = False
    zoom: float = 1.0
    intensity: float = 0.0

    @property
    def is_geometric_identity(self) -> bool:
        return self.tx == 0 and self.ty == 0 and self.angle == 0 and self.zoom == 1


IDENTITY = AugmentDraw()


def validate_draw(draw: AugmentDraw, size: int) -> None:
    lim = MAX_SHIFT * size
    checks = [
        ("tx", draw.tx, -lim, lim),
        ("ty", draw.ty, -lim, lim),
        ("angle", draw.angle, -MAX_ANGLE, MAX_ANGLE),
        ("zoom", draw.zoom, *ZOOM_RANGE),
        ("intensity", draw.intensity, -MAX_INTENSITY, MAX_INTENSITY),
    ]
    for name, value, lo, hi in checks:
        if not (lo <= value <= hi) or not math.isfinite(value):
            raise ParameterError(f"augment: {name}={value} outside [{lo}, {hi}]")


def random_draw(rng: np.random.Generator, size: int) -> AugmentDraw:
    lim = MAX_SHIFT * size
    return AugmentDraw(
        tx=float(rng.uniform(-lim, lim)),
        ty=float(rng.uniform(-lim, lim)),
        angle=float(rng.uniform(-MAX_ANGLE, MAX_ANGLE)),
        flip=bool(rng.random() < 0.5),
        zoom=float(rng.uniform(*ZOOM_RANGE)),
        intensity=float(rng.uniform(-MAX_INTENSITY, MAX_INTENSITY)),
    )


def _warp(img, draw: AugmentDraw, fill: float):
    # forward map about the centre: p' = zoom * R(angle) * p + t; sample at the inverse
    h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")
    dy = (yy - draw.ty - cy) / draw.zoom
    dx = (xx - draw.tx - cx) / draw.zoom
    th = math.radians(draw.angle)
    c, s = math.cos(th), math.sin(th)
    sx = c * dx + s * dy + cx
    sy = -s * dx + c * dy + cy
    inside = (sy >= 0) & (sy <= h - 1) & (sx >= 0) & (sx <= w - 1)
    out = _lerp2(img, np.clip(sy, 0, h - 1), np.clip(sx, 0, w - 1))
    return np.where(inside, out, fill)


def augment(image, draw: AugmentDraw) -> Tensor:
    """Flip, rotate, zoom, translate (fill = image mean), shift intensity, clamp to [0, 1]."""
    t = image if isinstance(image, Tensor) else Tensor(image)
    arr = t.data
    if arr.ndim != 3 or arr.shape[0] != 1:
        raise InputError(f"augment: expected (1, S, S) image, got {list(arr.shape)}")
    validate_draw(draw, arr.shape[-1])
    img = arr[0]
    fill = img.mean()
    if draw.flip:
        img = img[:, ::-1]
    if not draw.is_geometric_identity:
        img = _warp(img, draw, fill)
    if draw.intensity != 0:
        img = img + draw.intensity
    img = np.clip(img, 0.0, 1.0)
    return Tensor(img[None], t.precision)
