"""Numba-compiled twins of the ``_numpy`` kernels."""
from __future__ import annotations

import numpy as np
from numba import njit

SNAP = 1e-9


@njit(cache=True)
def interp_stencil(points, lo, hi, shape):
    n_pts, d = points.shape
    n_corners = 1 << d
    strides = np.ones(d, dtype=np.int64)
    for k in range(d - 2, -1, -1):
        strides[k] = strides[k + 1] * shape[k + 1]
    idx = np.zeros((n_pts, n_corners), dtype=np.int64)
    w = np.ones((n_pts, n_corners), dtype=np.float64)
    cell = np.empty(d, dtype=np.int64)
    frac = np.empty(d, dtype=np.float64)
    for p in range(n_pts):
        for k in range(d):
            step = (hi[k] - lo[k]) / (shape[k] - 1)
            t = (points[p, k] - lo[k]) / step
            top = shape[k] - 1.0
            if t < 0.0:
                t = 0.0
            elif t > top:
                t = top
            r = np.floor(t + 0.5)
            if abs(t - r) < SNAP:
                t = r
            c = int(np.floor(t))
            if c > shape[k] - 2:
                c = shape[k] - 2
            cell[k] = c
            frac[k] = t - c
        for c in range(n_corners):
            flat = 0
            wc = 1.0
            for k in range(d):
                bit = (c >> (d - 1 - k)) & 1
                flat += (cell[k] + bit) * strides[k]
                if bit:
                    wc *= frac[k]
                else:
                    wc *= 1.0 - frac[k]
            idx[p, c] = flat
            w[p, c] = wc
    return idx, w


@njit(cache=True)
def gather_sum(table, idx, w):
    n_rows, n_cols = idx.shape
    out = np.empty(n_rows, dtype=np.float64)
    for r in range(n_rows):
        acc = 0.0
        for j in range(n_cols):
            acc += w[r, j] * table[idx[r, j]]
        out[r] = acc
    return out


@njit(cache=True)
def row_logmeanexp(values, weights, beta):
    n_rows, n_cols = values.shape
    out = np.empty(n_rows, dtype=np.float64)
    for r in range(n_rows):
        top = -np.inf
        for j in range(n_cols):
            if weights[r, j] > 0.0:
                s = beta * values[r, j]
                if s > top:
                    top = s
        acc = 0.0
        for j in range(n_cols):
            if weights[r, j] > 0.0:
                acc += weights[r, j] * np.exp(beta * values[r, j] - top)
        out[r] = (top + np.log(acc)) / beta
    return out
