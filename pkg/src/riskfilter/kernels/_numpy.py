"""Pure-numpy reference kernels.

Every function here has a twin in ``_numba`` with an identical signature.
"""
from __future__ import annotations

import numpy as np

# Fractional cell coordinates this close to an integer are snapped onto the node.
SNAP = 1e-9


def _strides(shape):
    d = shape.shape[0]
    strides = np.ones(d, dtype=np.int64)
    for k in range(d - 2, -1, -1):
        strides[k] = strides[k + 1] * shape[k + 1]
    return strides


def interp_stencil(points, lo, hi, shape):
    """Corner indices and weights for multilinear interpolation.

    ``points`` has shape (P, d) and must already lie inside ``[lo, hi]``.
    Returns ``idx`` (P, 2**d) into the C-ordered node table and matching
    weights ``w`` that sum to one per row.
    """
    points = np.asarray(points, dtype=np.float64)
    n_pts, d = points.shape
    shape = np.asarray(shape, dtype=np.int64)
    step = (hi - lo) / (shape - 1)
    t = (points - lo) / step
    t = np.clip(t, 0.0, (shape - 1).astype(np.float64))
    r = np.floor(t + 0.5)
    t = np.where(np.abs(t - r) < SNAP, r, t)
    cell = np.minimum(np.floor(t), shape - 2).astype(np.int64)
    frac = t - cell
    strides = _strides(shape)
    n_corners = 1 << d
    idx = np.zeros((n_pts, n_corners), dtype=np.int64)
    w = np.ones((n_pts, n_corners), dtype=np.float64)
    for c in range(n_corners):
        for k in range(d):
            bit = (c >> (d - 1 - k)) & 1
            idx[:, c] += (cell[:, k] + bit) * strides[k]
            w[:, c] *= frac[:, k] if bit else 1.0 - frac[:, k]
    return idx, w


def gather_sum(table, idx, w):
    """Row-wise ``sum_j w[r, j] * table[idx[r, j]]``."""
    return np.einsum("rj,rj->r", table[idx], w)


def row_logmeanexp(values, weights, beta):
    """Weighted entropic risk ``(1/beta) log sum_j w_j exp(beta v_j)`` per row.

    Weights are expected to sum to one per row; zero-weight entries are ignored.
    """
    s = beta * values
    s_masked = np.where(weights > 0.0, s, -np.inf)
    top = s_masked.max(axis=1)
    with np.errstate(invalid="ignore"):
        z = np.where(weights > 0.0, np.exp(s_masked - top[:, None]), 0.0)
    acc = np.einsum("rj,rj->r", z, weights)
    return (top + np.log(acc)) / beta
