# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the kernels in ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs

cnp.import_array()


def diffusion_fill(values, invalid, double tol=1e-6, Py_ssize_t max_iter=10000):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] v = np.array(values, dtype=np.float64, copy=True)
    cdef cnp.ndarray[cnp.uint8_t, ndim=2] hole = np.ascontiguousarray(invalid, dtype=np.uint8)
    cdef Py_ssize_t h = v.shape[0], w = v.shape[1]
    cdef Py_ssize_t n_hole = 0, k, i, j, sweeps = 0
    cdef double acc, cnt, delta, d
    mask = hole.view(bool)
    if not mask.any():
        return v, 0
    v[mask] = v[~mask].mean()
    idx = np.flatnonzero(mask.ravel())
    n_hole = idx.shape[0]
    cdef cnp.ndarray[cnp.int64_t, ndim=1] rows = (idx // w).astype(np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] cols = (idx % w).astype(np.int64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] new = np.empty(n_hole, dtype=np.float64)
    while sweeps < max_iter:
        delta = 0.0
        for k in range(n_hole):
            i = rows[k]
            j = cols[k]
            acc = 0.0
            cnt = 0.0
            if i > 0:
                acc += v[i - 1, j]
                cnt += 1.0
            if i < h - 1:
                acc += v[i + 1, j]
                cnt += 1.0
            if j > 0:
                acc += v[i, j - 1]
                cnt += 1.0
            if j < w - 1:
                acc += v[i, j + 1]
                cnt += 1.0
            new[k] = acc / cnt
            d = fabs(new[k] - v[i, j])
            if d > delta:
                delta = d
        for k in range(n_hole):
            v[rows[k], cols[k]] = new[k]
        sweeps += 1
        if delta < tol:
            break
    return v, sweeps


def label_components(classes):
    cdef cnp.ndarray[cnp.int64_t, ndim=2] cls = np.ascontiguousarray(classes, dtype=np.int64)
    cdef Py_ssize_t h = cls.shape[0], w = cls.shape[1]
    cdef cnp.ndarray[cnp.int32_t, ndim=2] out = np.zeros((h, w), dtype=np.int32)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] queue = np.empty(max(h * w, 1), dtype=np.int64)
    cdef Py_ssize_t i, j, y, x, yy, xx, dy, dx, head, tail
    cdef long long c
    cdef int n = 0
    for i in range(h):
        for j in range(w):
            c = cls[i, j]
            if c < 0 or out[i, j] != 0:
                continue
            n += 1
            out[i, j] = n
            head = 0
            tail = 0
            queue[tail] = i * w + j
            tail += 1
            while head < tail:
                y = queue[head] // w
                x = queue[head] % w
                head += 1
                for dy in range(-1, 2):
                    for dx in range(-1, 2):
                        if dy == 0 and dx == 0:
                            continue
                        yy = y + dy
                        xx = x + dx
                        if 0 <= yy < h and 0 <= xx < w and out[yy, xx] == 0 and cls[yy, xx] == c:
                            out[yy, xx] = n
                            queue[tail] = yy * w + xx
                            tail += 1
    return out, n


def rle_intersection(runs_a, runs_b):
    cdef cnp.ndarray[cnp.int64_t, ndim=2] a = np.ascontiguousarray(np.asarray(runs_a, dtype=np.int64).reshape(-1, 2))
    cdef cnp.ndarray[cnp.int64_t, ndim=2] b = np.ascontiguousarray(np.asarray(runs_b, dtype=np.int64).reshape(-1, 2))
    cdef Py_ssize_t i = 0, j = 0, na = a.shape[0], nb = b.shape[0]
    cdef long long a0, a1, b0, b1, lo, hi, total = 0
    while i < na and j < nb:
        a0 = a[i, 0]
        a1 = a0 + a[i, 1]
        b0 = b[j, 0]
        b1 = b0 + b[j, 1]
        lo = a0 if a0 > b0 else b0
        hi = a1 if a1 < b1 else b1
        if hi > lo:
            total += hi - lo
        if a1 <= b1:
            i += 1
        else:
            j += 1
    return int(total)


def greedy_match(ious, double threshold):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] m = np.ascontiguousarray(ious, dtype=np.float64)
    cdef Py_ssize_t n_det = m.shape[0], n_gt = m.shape[1], d, g, best
    cdef double best_iou
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] taken = np.zeros(n_gt, dtype=np.uint8)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] out = np.full(n_det, -1, dtype=np.int64)
    for d in range(n_det):
        best = -1
        best_iou = threshold
        for g in range(n_gt):
            if taken[g]:
                continue
            if m[d, g] >= best_iou and (best < 0 or m[d, g] > best_iou):
                best = g
                best_iou = m[d, g]
        if best >= 0:
            taken[best] = 1
            out[d] = best
    return out
