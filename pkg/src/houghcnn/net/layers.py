"""Valid convolution, max-pooling and PReLU on channels-last arrays.

Activations are ``(N, *spatial, C)`` with one or more spatial axes. Conv
kernels are stored ``(C_in, *window, C_out)`` so that an im2col row of a
``(N, *spatial, C)`` input lines up with a flattened kernel column.
"""

from __future__ import annotations

import itertools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _spatial_axes(x):
    return tuple(range(1, x.ndim - 1))


def im2col(x: np.ndarray, size: int) -> tuple[np.ndarray, tuple[int, ...]]:
    """Rows of all ``size``-sided windows: ``(N * prod(out), size**rank * C)``.

    Row entries run window-major, channel-minor so the copy reads contiguous
    channel vectors.
    """
    axes = _spatial_axes(x)
    rank = len(axes)
    win = sliding_window_view(x, (size,) * rank, axis=axes)
    out_shape = win.shape[: 1 + rank]
    win = np.moveaxis(win, 1 + rank, -1)
    cols = win.reshape(int(np.prod(out_shape)), -1)
    return cols, out_shape


def _kernel_matrix(W):
    """``(C_in, *window, C_out)`` -> ``(prod(window) * C_in, C_out)`` matching im2col rows."""
    return np.moveaxis(W, 0, -2).reshape(-1, W.shape[-1])


def conv_forward(x, W, b):
    """Valid cross-correlation; returns ``(y, cols)`` (cols kept for backward)."""
    size = W.shape[1]
    cols, out_shape = im2col(x, size)
    y = cols @ _kernel_matrix(W)
    y += b
    return y.reshape(out_shape + (W.shape[-1],)), cols


def conv_backward(g, cols, W, need_input_grad=True):
    k = W.shape[-1]
    g2 = g.reshape(-1, k)
    dWm = cols.T @ g2
    dW = np.moveaxis(dWm.reshape(W.shape[1:-1] + (W.shape[0], k)), -2, 0)
    db = g2.sum(axis=0)
    dx = None
    if need_input_grad:
        size = W.shape[1]
        rank = W.ndim - 2
        out_sp = g.shape[1:-1]
        dcols = (g2 @ _kernel_matrix(W).T).reshape(g.shape[:-1] + (size,) * rank + (W.shape[0],))
        in_shape = (g.shape[0],) + tuple(n + size - 1 for n in out_sp) + (W.shape[0],)
        dx = np.zeros(in_shape, dtype=dcols.dtype)
        # col2im: scatter each window offset back onto the input
        for offs in itertools.product(range(size), repeat=rank):
            sl = (slice(None),) + tuple(slice(o, o + n) for o, n in zip(offs, out_sp)) + (slice(None),)
            dx[sl] += dcols[(Ellipsis,) + offs + (slice(None),)]
    return dx, np.ascontiguousarray(dW), db


def conv_direct(x, W, b):
    """Loop-over-window reference convolution (slow; used as a test oracle)."""
    size = W.shape[1]
    rank = W.ndim - 2
    out_sp = tuple(n - size + 1 for n in x.shape[1:-1])
    y = np.zeros((x.shape[0],) + out_sp + (W.shape[-1],), dtype=np.result_type(x, W))
    for offs in itertools.product(range(size), repeat=rank):
        sl = (slice(None),) + tuple(slice(o, o + n) for o, n in zip(offs, out_sp))
        # (N, *out, C) x (C, K)
        y += np.tensordot(x[sl], W[(slice(None),) + offs], axes=([-1], [0]))
    return y + b


def pool_forward(x, size, stride):
    """Max-pool with square windows; returns ``(y, argmax)``.

    ``argmax`` is the row-major offset of the winner inside its window; the
    first maximum wins ties.
    """
    axes = _spatial_axes(x)
    rank = len(axes)
    win = sliding_window_view(x, (size,) * rank, axis=axes)
    win = win[(slice(None),) + (slice(None, None, stride),) * rank]
    flat = win.reshape(win.shape[: rank + 2] + (-1,))
    arg = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return y, arg


def pool_backward(g, arg, in_shape, size, stride):
    """Route each output gradient to the position that won the max."""
    rank = len(in_shape) - 2
    dx = np.zeros(in_shape, dtype=g.dtype)
    out_sp = g.shape[1:-1]
    for q, offs in enumerate(itertools.product(range(size), repeat=rank)):
        sel = arg == q
        if not sel.any():
            continue
        sl = (slice(None),) + tuple(
            slice(o, o + stride * (n - 1) + 1, stride) for o, n in zip(offs, out_sp)
        ) + (slice(None),)
        dx[sl] += np.where(sel, g, 0)
    return dx


def prelu_forward(x, alpha):
    return np.where(x >= 0, x, alpha * x)


def prelu_backward(g, x, alpha):
    neg = x < 0
    red = tuple(range(x.ndim - 1))
    # min(x, 0) * g is x * g on the negative side and 0 elsewhere
    dalpha = (np.minimum(x, 0) * g).sum(axis=red)
    dx = np.where(neg, alpha * g, g)
    return dx, dalpha
