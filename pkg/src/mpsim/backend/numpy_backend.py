"""Vectorized numpy implementations of the hot kernels.

This module is the always-available fallback; ``_fastk`` (compiled) provides
the same functions with C inner loops. Both share the GEMM-backed convolution
strategy: lower to an im2col matrix, multiply, reshape. Keep signatures and
edge-case rules in sync between the two backends -- the parity tests in
``tests/test_backends.py`` compare them element by element.
"""

import numpy as np

name = "numpy"


def _im2col(x, k):
    """(N,C,H,W) -> (N*oh*ow, C*k*k) patch matrix for a k x k valid window."""
    n, c, h, w = x.shape
    oh, ow = h - k + 1, w - k + 1
    cols = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    cols = cols.transpose(0, 2, 3, 1, 4, 5)
    return cols.reshape(n * oh * ow, c * k * k)


def conv2d_forward(x, w, b, return_cols=False):
    """Valid cross-correlation, stride 1. x (N,Ci,H,W), w (Co,Ci,k,k), b (Co,).

    With return_cols=True also returns the im2col matrix so a following
    backward pass can skip rebuilding it.
    """
    n, ci, h, wd = x.shape
    co, _, k, _ = w.shape
    oh, ow = h - k + 1, wd - k + 1
    cols = None
    if k == 1:
        out = np.tensordot(x, w[:, :, 0, 0], axes=([1], [1])) + b
    else:
        cols = _im2col(x, k)
        out = (cols @ w.reshape(co, ci * k * k).T + b).reshape(n, oh, ow, co)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    return (out, cols) if return_cols else out


def conv2d_backward(x, w, gout, cols=None, need_gx=True):
    """Gradients of conv2d_forward. Returns (gx, gw, gb); gx is None when
    need_gx is False (first layer)."""
    n, ci, h, wd = x.shape
    co, _, k, _ = w.shape
    oh, ow = gout.shape[2], gout.shape[3]
    gb = gout.sum(axis=(0, 2, 3))
    gout_mat = np.ascontiguousarray(gout.transpose(0, 2, 3, 1)).reshape(n * oh * ow, co)
    if k == 1:
        gw = (gout_mat.T @ x.transpose(0, 2, 3, 1).reshape(n * oh * ow, ci)).reshape(w.shape)
        gx = None
        if need_gx:
            gx = np.ascontiguousarray(
                np.tensordot(gout, w[:, :, 0, 0], axes=([1], [0])).transpose(0, 3, 1, 2)
            )
        return gx, np.ascontiguousarray(gw), gb
    if cols is None:
        cols = _im2col(x, k)
    gw = (gout_mat.T @ cols).reshape(w.shape)
    gx = None
    if need_gx:
        # grad wrt input: accumulate one shifted tensordot per kernel tap,
        # which keeps memory bounded (no padded im2col blow-up)
        gx = np.zeros_like(x)
        for ky in range(k):
            for kx in range(k):
                contrib = np.tensordot(gout, w[:, :, ky, kx], axes=([1], [0]))
                gx[:, :, ky : ky + oh, kx : kx + ow] += contrib.transpose(0, 3, 1, 2)
    return gx, np.ascontiguousarray(gw), gb


def maxpool2_forward(x):
    """2x2 max pooling, stride 2. Returns (out, idx) with idx in 0..3 (dy*2+dx)."""
    n, c, h, w = x.shape
    x4 = np.ascontiguousarray(
        x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    ).reshape(n, c, h // 2, w // 2, 4)
    idx = x4.argmax(axis=4)
    out = np.take_along_axis(x4, idx[..., None], axis=4)[..., 0]
    return np.ascontiguousarray(out), idx.astype(np.uint8)


def maxpool2_backward(gout, idx, h, w):
    """Scatter gout back to the argmax positions of the forward pass."""
    n, c, ph, pw = gout.shape
    g4 = np.zeros((n, c, ph, pw, 4), dtype=gout.dtype)
    np.put_along_axis(g4, idx[..., None].astype(np.intp), gout[..., None], axis=4)
    gx = g4.reshape(n, c, ph, pw, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
    return np.ascontiguousarray(gx)


def bilinear_sample(src, mask, xs, ys):
    """Sample src (H,W) at float coords. Returns (values, valid).

    A sample is valid iff the point lies inside [0,W-1]x[0,H-1] and all four
    contributing pixels are valid in ``mask``. Invalid samples read 0.
    """
    h, w = src.shape
    inside = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
    xc = np.clip(xs, 0.0, w - 1.0)
    yc = np.clip(ys, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(xc).astype(np.intp), w - 2)
    y0 = np.minimum(np.floor(yc).astype(np.intp), h - 2)
    fx = xc - x0
    fy = yc - y0
    x1 = x0 + 1
    y1 = y0 + 1
    v = (1 - fy) * ((1 - fx) * src[y0, x0] + fx * src[y0, x1]) + fy * (
        (1 - fx) * src[y1, x0] + fx * src[y1, x1]
    )
    valid = inside & mask[y0, x0] & mask[y0, x1] & mask[y1, x0] & mask[y1, x1]
    return np.where(valid, v, 0.0).astype(src.dtype, copy=False), valid


def window_sum(img, s):
    """Sliding s x s window sums over full windows, float64 accumulation.

    img (H,W) -> (H-s+1, W-s+1).
    """
    h, w = img.shape
    ii = np.zeros((h + 1, w + 1), np.float64)
    np.cumsum(img, axis=0, dtype=np.float64, out=ii[1:, 1:])
    np.cumsum(ii[1:, 1:], axis=1, out=ii[1:, 1:])
    return ii[s:, s:] - ii[:-s, s:] - ii[s:, :-s] + ii[:-s, :-s]
