"""Pool-adjacent-violators isotonic regression."""

from __future__ import annotations

import numpy as np


def pava(values, weights=None) -> np.ndarray:
    """Least-squares non-decreasing fit to ``values``."""
    y = np.asarray(values, dtype=float)
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=float)
    # each block: [weighted mean, total weight, length]
    blocks: list[list[float]] = []
    for yi, wi in zip(y, w):
        blocks.append([yi, wi, 1])
        while len(blocks) > 1 and blocks[-2][0] > blocks[-1][0]:
            m2, w2, n2 = blocks.pop()
            m1, w1, n1 = blocks.pop()
            wt = w1 + w2
            blocks.append([(m1 * w1 + m2 * w2) / wt, wt, n1 + n2])
    return np.concatenate([np.full(int(n), m) for m, _, n in blocks]) if blocks else np.empty(0)


def isotonic_project(values, anchor: float) -> np.ndarray:
    """Non-decreasing least-squares fit whose values never drop below ``anchor``.

    Equivalent to pooling with the anchor prepended as an infinitely heavy
    first point and then dropping it: the floored solution is the unfloored
    one clipped from below.
    """
    return np.maximum(pava(values), float(anchor))
