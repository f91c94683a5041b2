"""Binary mask helpers: run-length encoding and tight boxes.

Runs are ``[start, length]`` pairs over row-major pixel indices of the
foreground. Boxes are ``(x_min, y_min, x_max, y_max)`` with inclusive
integer pixel bounds.
"""
import numpy as np


def rle_encode(mask):
    flat = np.asarray(mask, dtype=bool).ravel()
    if not flat.any():
        return np.zeros((0, 2), dtype=np.int64)
    padded = np.concatenate(([False], flat, [False])).astype(np.int8)
    edges = np.flatnonzero(np.diff(padded))
    starts, ends = edges[0::2], edges[1::2]
    return np.stack([starts, ends - starts], axis=1).astype(np.int64)


def rle_decode(runs, shape):
    h, w = shape
    flat = np.zeros(h * w, dtype=bool)
    for start, length in np.asarray(runs, dtype=np.int64).reshape(-1, 2):
        flat[start:start + length] = True
    return flat.reshape(h, w)


def rle_area(runs):
    runs = np.asarray(runs, dtype=np.int64).reshape(-1, 2)
    return int(runs[:, 1].sum())


def rle_to_list(runs):
    return [[int(s), int(n)] for s, n in np.asarray(runs, dtype=np.int64).reshape(-1, 2)]


def mask_to_box(mask):
    """Tight inclusive bounding box of a non-empty mask."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise ValueError("empty mask has no bounding box")
    return (int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))


def box_to_rle(box, shape):
    """Runs covering the inclusive pixel rectangle of ``box``, clipped to ``shape``."""
    h, w = shape
    x0, y0, x1, y1 = (int(round(v)) for v in box)
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(x1, w - 1), min(y1, h - 1)
    if x1 < x0 or y1 < y0:
        return np.zeros((0, 2), dtype=np.int64)
    rows = np.arange(y0, y1 + 1, dtype=np.int64)
    return np.stack([rows * w + x0, np.full_like(rows, x1 - x0 + 1)], axis=1)


def box_area(box):
    x0, y0, x1, y1 = box
    return max(0, x1 - x0 + 1) * max(0, y1 - y0 + 1)


def box_intersection(a, b):
    x0, y0 = max(a[0], b[0]), max(a[1], b[1])
    x1, y1 = min(a[2], b[2]), min(a[3], b[3])
    return box_area((x0, y0, x1, y1)) if x1 >= x0 and y1 >= y0 else 0
