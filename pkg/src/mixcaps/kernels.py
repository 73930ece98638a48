"""Hot numeric kernels with a compiled backend and a numpy fallback.

The compiled extension ``mixcaps._kernels`` is used when it imports cleanly;
set ``MIXCAPS_KERNELS=python`` to force the fallback.  Both backends expose the
same three functions and are checked against each other in the test suite.
"""
import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SQUASH_EPS = 1e-9


def _py_im2col(x, k, stride):
    # x: (N, H, W, C) -> (N, Ho, Wo, k, k, C)
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))


def _py_col2im(cols, x_shape, k, stride):
    n, h, w, c = x_shape
    ho, wo = cols.shape[1], cols.shape[2]
    out = np.zeros(x_shape, dtype=cols.dtype)
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    for ki in range(k):
        for kj in range(k):
            out[:, ki:ki + hspan:stride, kj:kj + wspan:stride, :] += cols[:, :, :, ki, kj, :]
    return out


def squash_array(s, eps=SQUASH_EPS):
    q = np.sum(s * s, axis=-1, keepdims=True)
    scale = q / ((1.0 + q) * np.sqrt(q + eps * eps))
    return s * scale


def _py_route(u_hat, iterations, eps=SQUASH_EPS):
    n, ni, nj, d = u_hat.shape
    dt = u_hat.dtype
    b_hist = np.zeros((iterations, n, ni, nj), dtype=dt)
    c_hist = np.empty((iterations, n, ni, nj), dtype=dt)
    a_hist = np.empty((iterations - 1, n, ni, nj), dtype=dt)
    s_hist = np.empty((iterations, n, nj, d), dtype=dt)
    v_hist = np.empty((iterations, n, nj, d), dtype=dt)
    b = np.zeros((n, ni, nj), dtype=dt)
    for r in range(iterations):
        b_hist[r] = b
        e = np.exp(b - b.max(axis=2, keepdims=True))
        c = e / e.sum(axis=2, keepdims=True)
        c_hist[r] = c
        s = np.einsum("nij,nijd->njd", c, u_hat)
        s_hist[r] = s
        v = squash_array(s, eps)
        v_hist[r] = v
        if r < iterations - 1:
            a = np.einsum("njd,nijd->nij", v, u_hat)
            a_hist[r] = a
            b = b + a
    return b_hist, c_hist, a_hist, s_hist, v_hist


PYTHON = {"im2col": _py_im2col, "col2im": _py_col2im, "route": _py_route}

try:
    if os.environ.get("MIXCAPS_KERNELS", "").lower() == "python":
        raise ImportError("compiled kernels disabled by MIXCAPS_KERNELS")
    from mixcaps import _kernels as _ext
except ImportError:
    _ext = None

if _ext is not None:
    COMPILED = {"im2col": _ext.im2col, "col2im": _ext.col2im, "route": _ext.route}
    BACKEND = "compiled"
else:
    COMPILED = None
    BACKEND = "python"

_active = COMPILED if COMPILED is not None else PYTHON


def im2col(x, k, stride):
    """Unfold ``(N, H, W, C)`` into valid-convolution patches ``(N, Ho, Wo, k, k, C)``."""
    return _active["im2col"](np.ascontiguousarray(x), k, stride)


def col2im(cols, x_shape, k, stride):
    """Adjoint of :func:`im2col`: scatter-add patches back onto an ``x_shape`` grid."""
    return _active["col2im"](np.ascontiguousarray(cols), tuple(x_shape), k, stride)


def route(u_hat, iterations, eps=SQUASH_EPS):
    """Dynamic routing over ``u_hat`` of shape ``(N, I, J, D)``.

    Returns per-round histories ``(b, c, a, s, v)``; ``a`` has one round fewer
    because the agreement update is skipped after the last round.
    """
    if iterations < 1:
        raise ValueError("routing needs at least one iteration")
    return _active["route"](np.ascontiguousarray(u_hat), int(iterations), float(eps))


def implementations():
    """Every available backend keyed by name, for cross-checking and benchmarks."""
    out = {"python": PYTHON}
    if COMPILED is not None:
        out["compiled"] = COMPILED
    return out
