"""Binary portable graymap (P5) reading and writing."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..errors import InputError


def _tokens(buf: bytes, count: int):
    # header tokens separated by whitespace; '#' starts a comment to end of line
    out, i = [], 0
    while len(out) < count:
        while i < len(buf) and buf[i:i + 1].isspace():
            i += 1
        if buf[i:i + 1] == b"#":
            while i < len(buf) and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(buf) and not buf[j:j + 1].isspace():
            j += 1
        if j == i:
            raise InputError("truncated PGM header")
        out.append(buf[i:j])
        i = j
    return out, i + 1  # exactly one whitespace byte before the raster


def read_pgm(path) -> tuple[np.ndarray, int]:
    """Return (raster, maxval); the raster is uint8 or uint16 with shape (H, W)."""
    buf = Path(path).read_bytes()
    toks, off = _tokens(buf, 4)
    if toks[0] != b"P5":
        raise InputError(f"{path}: not a binary PGM (magic {toks[0]!r})")
    try:
        w, h, maxval = (int(t) for t in toks[1:])
    except ValueError as exc:
        raise InputError(f"{path}: malformed PGM header") from exc
    if not 0 < maxval < 65536:
        raise InputError(f"{path}: invalid maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    n = w * h
    if len(buf) - off < n * dtype.itemsize:
        raise InputError(f"{path}: truncated raster")
    arr = np.frombuffer(buf, dtype=dtype, count=n, offset=off).reshape(h, w)
    return arr.astype(np.uint16 if maxval > 255 else np.uint8), maxval


def write_pgm(path, raster: np.ndarray, maxval: int = 255, comment: str | None = None) -> None:
    raster = np.asarray(raster)
    if raster.ndim != 2:
        raise InputError(f"PGM raster must be 2-D, got {raster.shape}")
    h, w = raster.shape
    header = b"P5\n"
    if comment:
        header += b"".join(b"# " + line.encode("utf-8") + b"\n" for line in comment.splitlines())
    header += f"{w} {h}\n{maxval}\n".encode("ascii")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    Path(path).write_bytes(header + raster.astype(dtype).tobytes())


def to_raster(image: np.ndarray, maxval: int = 255) -> np.ndarray:
    """Quantize [0, 1] floats to integer grey levels."""
    return np.rint(np.clip(image, 0.0, 1.0) * maxval).astype(np.uint16 if maxval > 255 else np.uint8)
