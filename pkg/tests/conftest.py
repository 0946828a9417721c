import numpy as np
import pytest

from resgd.regularizer import FilterBank


def dense_conv_matrix(weights, shape):
    """Explicit loop construction of the zero-padded correlation matrix.

    Rows index ``(o, r, s)``, columns ``(c, r', s')`` in C order.
    """
    c_out, c_in, k, _ = weights.shape
    h, w = shape
    p = k // 2
    M = np.zeros((c_out * h * w, c_in * h * w))
    for o in range(c_out):
        for r in range(h):
            for s in range(w):
                row = (o * h + r) * w + s
                for c in range(c_in):
                    for i in range(k):
                        for j in range(k):
                            rr, ss = r + i - p, s + j - p
                            if 0 <= rr < h and 0 <= ss < w:
                                M[row, (c * h + rr) * w + ss] += weights[o, c, i, j]
    return M


def dense_g(fb, x):
    """Dense-matrix evaluation of B sigma(A x), returned as an (m, d) field."""
    A = dense_conv_matrix(fb.a2, fb.shape) @ dense_conv_matrix(fb.a1, fb.shape)
    B = dense_conv_matrix(fb.b, fb.shape)
    feat = B @ fb.act(A @ x)
    return feat.reshape(fb.d, fb.m).T


def central_difference(fun, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (fun(x + e) - fun(x - e)) / (2 * h)
    return g


def rel_err(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


@pytest.fixture
def small_fb():
    return FilterBank.random((4, 5), d=3, seed=1, gain=1.5, zero_mean=False)
