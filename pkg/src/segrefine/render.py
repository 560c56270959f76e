"""Indexed-colour PNG dumps of label maps.

Palette indices 0..3 are the class colours (background black, muscle pink,
SAT yellow, VAT blue). Indices 4..255 hold a grey ramp for the image column.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

CLASS_COLORS = ((0, 0, 0), (255, 105, 180), (255, 215, 0), (30, 144, 255))
_GREY_LEVELS = 256 - len(CLASS_COLORS)
GAP = 2


def palette() -> list[int]:
    flat = [v for rgb in CLASS_COLORS for v in rgb]
    for i in range(_GREY_LEVELS):
        g = round(255 * i / (_GREY_LEVELS - 1))
        flat += [g, g, g]
    return flat


def _grey_indices(image: np.ndarray) -> np.ndarray:
    x = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return (len(CLASS_COLORS) + np.rint(x * (_GREY_LEVELS - 1))).astype(np.uint8)


def label_grid(rows: list[list[np.ndarray]]) -> np.ndarray:
    """Tile equal-sized index maps into one array with background-coloured gaps."""
    h, w = rows[0][0].shape
    ncol = max(len(r) for r in rows)
    out = np.zeros((len(rows) * (h + GAP) - GAP, ncol * (w + GAP) - GAP), dtype=np.uint8)
    for i, row in enumerate(rows):
        for j, tile in enumerate(row):
            out[i * (h + GAP) : i * (h + GAP) + h, j * (w + GAP) : j * (w + GAP) + w] = tile
    return out


def write_label_snapshot(path, samples) -> Path:
    """One row per sample: image, current label, initial weak label, ground truth."""
    rows = []
    for s in samples:
        initial = s.initial_label if s.initial_label is not None else s.label
        rows.append([_grey_indices(s.image[0]), s.label, initial, s.hidden_truth])
    img = Image.fromarray(label_grid(rows), mode="P")
    img.putpalette(palette())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path, format="PNG")
    return path
