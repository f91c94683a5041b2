"""Pure Python/numpy implementations of the loop-heavy kernels.

These are the reference versions; ``_ckernels.pyx`` mirrors them with the
same arithmetic order so both backends agree bit-for-bit.
"""
from collections import deque

import numpy as np


def diffusion_fill(values, invalid, tol=1e-6, max_iter=10000):
    """Jacobi 4-neighbour averaging over the ``invalid`` pixels.

    Valid pixels are held fixed. Invalid pixels start at the mean of the
    valid pixels and are relaxed until the largest per-pixel update drops
    below ``tol`` or ``max_iter`` sweeps have run.

    Returns ``(filled, sweeps)``.
    """
    v = np.array(values, dtype=np.float64, copy=True)
    hole = np.asarray(invalid, dtype=bool)
    if not hole.any():
        return v, 0
    v[hole] = v[~hole].mean()
    h, w = v.shape
    count = np.zeros((h, w), dtype=np.float64)
    count[1:, :] += 1.0
    count[:-1, :] += 1.0
    count[:, 1:] += 1.0
    count[:, :-1] += 1.0
    sweeps = 0
    while sweeps < max_iter:
        acc = np.zeros((h, w), dtype=np.float64)
        acc[1:, :] += v[:-1, :]
        acc[:-1, :] += v[1:, :]
        acc[:, 1:] += v[:, :-1]
        acc[:, :-1] += v[:, 1:]
        new = acc[hole] / count[hole]
        delta = np.max(np.abs(new - v[hole]))
        v[hole] = new
        sweeps += 1
        if delta < tol:
            break
    return v, sweeps


_NEIGHBOURS = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))


def label_components(classes):
    """8-connected components of equal-valued pixels, ignoring values < 0.

    Components are numbered 1..n in raster order of their first pixel;
    0 marks pixels that belong to no component.
    """
    cls = np.asarray(classes, dtype=np.int64)
    h, w = cls.shape
    grid = cls.tolist()
    out = [[0] * w for _ in range(h)]
    n = 0
    for i in range(h):
        for j in range(w):
            c = grid[i][j]
            if c < 0 or out[i][j]:
                continue
            n += 1
            out[i][j] = n
            queue = deque([(i, j)])
            while queue:
                y, x = queue.popleft()
                for dy, dx in _NEIGHBOURS:
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < h and 0 <= xx < w and not out[yy][xx] and grid[yy][xx] == c:
                        out[yy][xx] = n
                        queue.append((yy, xx))
    return np.array(out, dtype=np.int32).reshape(h, w), n


def rle_intersection(runs_a, runs_b):
    """Number of pixels shared by two sorted, disjoint ``[start, length]`` run lists."""
    a = np.asarray(runs_a, dtype=np.int64).reshape(-1, 2).tolist()
    b = np.asarray(runs_b, dtype=np.int64).reshape(-1, 2).tolist()
    i = j = 0
    total = 0
    while i < len(a) and j < len(b):
        a0, a1 = a[i][0], a[i][0] + a[i][1]
        b0, b1 = b[j][0], b[j][0] + b[j][1]
        lo, hi = max(a0, b0), min(a1, b1)
        if hi > lo:
            total += hi - lo
        if a1 <= b1:
            i += 1
        else:
            j += 1
    return total


def greedy_match(ious, threshold):
    """Greedy assignment of confidence-sorted detections to ground truths.

    ``ious`` is (n_det, n_gt) with rows already in descending-confidence
    order. Each detection takes the unmatched ground truth with the highest
    IOU at or above ``threshold`` (first index wins ties). Returns the
    matched ground-truth index per detection, -1 for unmatched.
    """
    m = np.asarray(ious, dtype=np.float64)
    n_det, n_gt = m.shape
    taken = [False] * n_gt
    rows = m.tolist()
    out = np.full(n_det, -1, dtype=np.int64)
    for d in range(n_det):
        best = -1
        best_iou = threshold
        row = rows[d]
        for g in range(n_gt):
            if taken[g]:
                continue
            if row[g] >= best_iou and (best < 0 or row[g] > best_iou):
                best = g
                best_iou = row[g]
        if best >= 0:
            taken[best] = True
            out[d] = best
    return out
