"""Multi-channel 2-D correlation with zero "same" padding and its exact adjoint.

Weights use the layout ``(c_out, c_in, k, k)`` with odd ``k``. Inputs carry
arbitrary leading batch axes: ``(..., c_in, h, w)``.
"""

from __future__ import annotations

import numpy as np


def _check(weights: np.ndarray, channels: int) -> int:
    if weights.ndim != 4 or weights.shape[2] != weights.shape[3]:
        raise ValueError(f"bad kernel shape {weights.shape}")
    k = weights.shape[2]
    if k % 2 != 1:
        raise ValueError("kernel size must be odd")
    if channels != weights.shape[1]:
        raise ValueError(f"expected {weights.shape[1]} input channels, got {channels}")
    return k


def conv2d(x: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """``out[o, r, s] = sum_{c,i,j} W[o, c, i, j] * xpad[c, r + i, s + j]``."""
    k = _check(weights, x.shape[-3])
    p = k // 2
    h, w = x.shape[-2:]
    lead = x.shape[:-3]
    c_in = x.shape[-3]
    xp = np.zeros(lead + (c_in, h + 2 * p, w + 2 * p))
    xp[..., p:p + h, p:p + w] = x
    # im2col: rows ordered (c, i, j) to match weights.reshape(c_out, -1)
    cols = np.empty(lead + (c_in, k * k, h, w))
    for t in range(k * k):
        i, j = divmod(t, k)
        cols[..., t, :, :] = xp[..., i:i + h, j:j + w]
    cols = cols.reshape(lead + (c_in * k * k, h * w))
    out = weights.reshape(weights.shape[0], -1) @ cols
    return out.reshape(lead + (weights.shape[0], h, w))


def conv2d_transpose(y: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`conv2d` for the same ``weights``: ``(..., c_out, h, w) -> (..., c_in, h, w)``."""
    if weights.ndim != 4 or y.shape[-3] != weights.shape[0]:
        raise ValueError(f"expected {weights.shape[0]} channels, got {y.shape[-3]}")
    c_out, c_in, k, _ = weights.shape
    p = k // 2
    h, w = y.shape[-2:]
    lead = y.shape[:-3]
    cols = weights.reshape(c_out, -1).T @ y.reshape(lead + (c_out, h * w))
    cols = cols.reshape(lead + (c_in, k * k, h, w))
    gp = np.zeros(lead + (c_in, h + 2 * p, w + 2 * p))
    for t in range(k * k):
        i, j = divmod(t, k)
        gp[..., i:i + h, j:j + w] += cols[..., t, :, :]
    return gp[..., p:p + h, p:p + w]


def conv_frobenius_sq(weights: np.ndarray, shape: tuple[int, int]) -> float:
    """Squared Frobenius norm of the matrix of :func:`conv2d` on an ``h x w`` grid.

    Tap ``(i, j)`` contributes once for every output pixel whose shifted input
    pixel stays inside the grid.
    """
    h, w = shape
    k = weights.shape[2]
    p = k // 2
    off = np.abs(np.arange(k) - p)
    counts = np.outer(np.clip(h - off, 0, None), np.clip(w - off, 0, None))
    return float(np.sum(weights ** 2 * counts[None, None]))
