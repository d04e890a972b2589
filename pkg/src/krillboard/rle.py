"""Run-length encoding for binary masks.

Counts are row-major and alternate background/foreground, always starting
with background (a leading 0 means the mask begins with foreground).
"""

from __future__ import annotations

import numpy as np


def encode(mask: np.ndarray) -> dict:
    """Encode a 2-D binary mask as ``{"size": [h, w], "counts": [...]}``."""
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    flat = np.asarray(mask, dtype=bool).ravel(order="C")
    counts: list[int] = []
    if flat.size == 0:
        return {"size": [mask.shape[0], mask.shape[1]], "counts": counts}
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], changes, [flat.size]))
    runs = np.diff(bounds)
    if flat[0]:  # first run is foreground: prepend an empty background run
        counts.append(0)
    counts.extend(int(r) for r in runs)
    return {"size": [int(mask.shape[0]), int(mask.shape[1])], "counts": counts}


def decode(rle: dict) -> np.ndarray:
    """Inverse of :func:`encode`; returns a bool array of the stored size."""
    h, w = (int(v) for v in rle["size"])
    counts = rle["counts"]
    total = sum(counts)
    if total != h * w:
        raise ValueError(f"RLE counts sum to {total}, expected {h * w}")
    flat = np.zeros(h * w, dtype=bool)
    pos = 0
    fg = False
    for c in counts:
        if fg:
            flat[pos:pos + c] = True
        pos += c
        fg = not fg
    return flat.reshape(h, w)
