"""Fixed perceptual-ish colormap for relevancy heatmaps.

The LUT is generated here from a handful of anchor colors (dark blue ->
cyan -> yellow -> red) with straight linear interpolation, so renders are
reproducible without carrying a binary table around.
"""
from __future__ import annotations

import numpy as np

_ANCHORS = np.array(
    [
        [0.050, 0.030, 0.270],
        [0.120, 0.380, 0.640],
        [0.150, 0.750, 0.710],
        [0.900, 0.870, 0.200],
        [0.800, 0.110, 0.070],
    ]
)


def _build_lut(n: int = 256) -> np.ndarray:
    pos = np.linspace(0.0, 1.0, len(_ANCHORS))
    t = np.linspace(0.0, 1.0, n)
    lut = np.stack([np.interp(t, pos, _ANCHORS[:, c]) for c in range(3)], axis=1)
    return lut


LUT = _build_lut()


def heatmap(values: np.ndarray) -> np.ndarray:
    """Map a scalar field (H, W) to an RGB image (H, W, 3) in [0, 1].

    Values are min-max normalized; a constant field maps to the low end of
    the table rather than dividing by zero.
    """
    values = np.asarray(values, dtype=np.float64)
    lo = float(values.min())
    hi = float(values.max())
    if hi > lo:
        norm = (values - lo) / (hi - lo)
    else:
        norm = np.zeros_like(values)
    idx = np.clip((norm * 255.0).round().astype(np.int64), 0, 255)
    return LUT[idx]
