"""Critical-factor search by greedy patch occlusion, and overlay rendering.

A critical factor here is a set of image patches whose joint occlusion
(filled with the image mean) lowers the predicted-class probability by at
least ``delta``. The threshold is this package's operationalization; it is
echoed into every overlay sidecar.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .data.pgm import to_raster, write_pgm
from .errors import ModelError, OutputError, ShapeError
from .model import level_from_probs, predict_proba

DEFAULT_DELTA = 0.2
DEFAULT_MAX_PATCHES = 20
HIGHLIGHT_FLOOR = 0.75


@dataclass(frozen=True)
class PatchGrid:
    grid_rows: int = 15
    grid_cols: int = 15

    def __post_init__(self):
        if self.grid_rows < 1 or self.grid_cols < 1:
            raise ShapeError("patch grid dims must be positive", module="explain")

    def bounds(self, row: int, col: int, height: int, width: int) -> tuple[int, int, int, int]:
        """Pixel bounds (y0, y1, x0, x1); the last row/col absorbs the remainder."""
        if self.grid_rows > height or self.grid_cols > width:
            raise ShapeError(f"grid {self.grid_rows}x{self.grid_cols} finer than image "
                             f"{height}x{width}", module="explain")
        ph, pw = height // self.grid_rows, width // self.grid_cols
        y0, x0 = row * ph, col * pw
        y1 = height if row == self.grid_rows - 1 else y0 + ph
        x1 = width if col == self.grid_cols - 1 else x0 + pw
        return y0, y1, x0, x1


@dataclass
class ExplanationMask:
    mask: np.ndarray
    achieved_drop: float
    grid: PatchGrid
    delta: float
    predicted_level: int
    base_prob: float
    partial: bool
    # cumulative drop measured after each greedy step, and the patch added at that step
    steps: list[float] = field(default_factory=list)
    order: list[tuple[int, int]] = field(default_factory=list)

    def patches(self) -> list[tuple[int, int]]:
        return [tuple(int(v) for v in rc) for rc in np.argwhere(self.mask)]


def _prob_fn(network) -> Callable[[np.ndarray], np.ndarray]:
    if hasattr(network, "params") and hasattr(network, "forward"):
        return lambda batch: predict_proba(network, batch)
    return network


def occlude(image: np.ndarray, mask: np.ndarray, grid: PatchGrid, fill: float) -> np.ndarray:
    out = np.array(image, dtype=np.float64 if image.dtype != np.float32 else np.float32)
    h, w = out.shape[-2:]
    for r, c in np.argwhere(mask):
        y0, y1, x0, x1 = grid.bounds(r, c, h, w)
        out[..., y0:y1, x0:x1] = fill
    return out


def _checked(probs, what):
    probs = np.asarray(probs, dtype=np.float64)
    if not np.all(np.isfinite(probs)):
        raise ModelError(f"network prediction is non-finite ({what})")
    return probs


def critical_factors(network, image, grid: PatchGrid = PatchGrid(), delta: float = DEFAULT_DELTA,
                     max_patches: int = DEFAULT_MAX_PATCHES) -> ExplanationMask:
    """Greedily occlude the patch that most lowers the predicted-class probability.

    Stops once the cumulative drop reaches ``delta``, ``max_patches`` patches
    are masked, or no remaining patch increases the drop. Ties go to the
    lowest row-major patch index. ``network`` is a NetworkGraph or any
    callable mapping an (N,1,H,W) batch to (N,2) probabilities.
    """
    if not 0 < delta < 1:
        raise ShapeError(f"delta must be in (0, 1), got {delta}", module="explain")
    probs_of = _prob_fn(network)
    img = np.asarray(getattr(image, "data", image))
    h, w = img.shape[-2:]
    fill = float(img.mean())
    base = _checked(probs_of(img[None]), "input image")[0]
    level = level_from_probs(base)
    cls = level - 1
    p0 = float(base[cls])

    def measure(m):
        return p0 - float(_checked(probs_of(occlude(img, m, grid, fill)[None]), "occluded")[0, cls])

    mask = np.zeros((grid.grid_rows, grid.grid_cols), dtype=bool)
    grid.bounds(0, 0, h, w)
    cum, steps, order = 0.0, [], []
    while len(order) < max_patches and cum < delta:
        cand = [(r, c) for r in range(grid.grid_rows) for c in range(grid.grid_cols)
                if not mask[r, c]]
        if not cand:
            break
        batch = []
        for r, c in cand:
            m = mask.copy()
            m[r, c] = True
            batch.append(occlude(img, m, grid, fill))
        drops = p0 - _checked(probs_of(np.stack(batch)), "candidates")[:, cls]
        best = int(np.argmax(drops))
        trial = mask.copy()
        trial[cand[best]] = True
        # record the drop re-measured on the single chosen configuration
        new = measure(trial)
        if not new > cum:
            break
        mask, cum = trial, new
        steps.append(new)
        order.append(cand[best])
    return ExplanationMask(mask, cum, grid, delta, level, p0, cum < delta, steps, order)


def render_overlay(image, explanation: ExplanationMask, path, seed: int | None = None) -> Path:
    """Write a P5 overlay with masked patches remapped into the top intensity band,
    plus a ``.txt`` sidecar listing (row, col, y0, y1, x0, x1) per masked patch."""
    img = np.asarray(getattr(image, "data", image), dtype=np.float64)
    img2 = img.reshape(img.shape[-2:])
    h, w = img2.shape
    grid = explanation.grid
    if explanation.mask.shape != (grid.grid_rows, grid.grid_cols):
        raise ShapeError("mask shape does not match its grid", module="explain")
    out = img2.copy()
    rows = []
    for r, c in explanation.patches():
        y0, y1, x0, x1 = grid.bounds(r, c, h, w)
        out[y0:y1, x0:x1] = HIGHLIGHT_FLOOR + (1 - HIGHLIGHT_FLOOR) * np.clip(img2[y0:y1, x0:x1], 0, 1)
        rows.append(f"{r} {c} {y0} {y1} {x0} {x1}")
    path = Path(path)
    header = [
        "critical_factor_rule = cumulative occlusion drop >= delta",
        f"delta = {explanation.delta!r}",
        f"achieved_drop = {explanation.achieved_drop!r}",
        f"partial = {str(explanation.partial).lower()}",
        f"predicted_level = {explanation.predicted_level}",
        f"grid = {grid.grid_rows}x{grid.grid_cols}",
    ]
    if seed is not None:
        header.append(f"seed = {seed}")
    try:
        write_pgm(path, to_raster(out, 255), 255)
        Path(str(path) + ".txt").write_text(
            "\n".join(["# " + line for line in header] + ["# row col y0 y1 x0 x1"] + rows) + "\n",
            encoding="utf-8")
    except OSError as exc:
        raise OutputError(f"cannot write overlay {path}: {exc}") from exc
    return path
