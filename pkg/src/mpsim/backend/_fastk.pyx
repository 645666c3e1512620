# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: C inner loops, with convolution GEMMs left to BLAS.

Mirror of ``numpy_backend`` -- same signatures, same edge-case rules. The C
loops replace the expensive gather/scatter stages (im2col, col2im, pooling,
bilinear sampling, integral images); the dense matrix products still go
through numpy's BLAS, which is where they belong.
"""

import numpy as np

from libc.math cimport floor

name = "cython"

ctypedef fused real:
    float
    double


cdef void _im2col(real[:, :, :, ::1] x, real[:, ::1] cols, Py_ssize_t k) noexcept nogil:
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = h - k + 1, ow = w - k + 1
    cdef Py_ssize_t i, ci, oy, ox, ky, kx, row, col
    for i in range(n):
        for oy in range(oh):
            for ox in range(ow):
                row = (i * oh + oy) * ow + ox
                col = 0
                for ci in range(c):
                    for ky in range(k):
                        for kx in range(k):
                            cols[row, col] = x[i, ci, oy + ky, ox + kx]
                            col += 1


cdef void _col2im(real[:, ::1] cols, real[:, :, :, ::1] gx, Py_ssize_t k) noexcept nogil:
    cdef Py_ssize_t n = gx.shape[0], c = gx.shape[1], h = gx.shape[2], w = gx.shape[3]
    cdef Py_ssize_t oh = h - k + 1, ow = w - k + 1
    cdef Py_ssize_t i, ci, oy, ox, ky, kx, row, col
    for i in range(n):
        for oy in range(oh):
            for ox in range(ow):
                row = (i * oh + oy) * ow + ox
                col = 0
                for ci in range(c):
                    for ky in range(k):
                        for kx in range(k):
                            gx[i, ci, oy + ky, ox + kx] += cols[row, col]
                            col += 1


def _chunk_samples(n, per_sample_cols):
    """Samples per streaming chunk, sized to keep im2col slabs cache-friendly."""
    return max(1, min(n, 2_000_000 // max(1, per_sample_cols)))


def conv2d_forward(x, w, b, return_cols=False):
    """Valid cross-correlation, stride 1. x (N,Ci,H,W), w (Co,Ci,k,k), b (Co,).

    Streams the im2col lowering in sample chunks; the GEMMs run on
    cache-resident slabs. return_cols is accepted for API parity with the
    numpy backend but this implementation never materializes the full
    matrix (returns None).
    """
    x = np.ascontiguousarray(x)
    n, ci, h, wd = x.shape
    co, _, k, _ = w.shape
    oh, ow = h - k + 1, wd - k + 1
    if k == 1:
        out = np.tensordot(x, w[:, :, 0, 0], axes=([1], [1])) + b
        out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
        return (out, None) if return_cols else out
    wmat = np.ascontiguousarray(w).reshape(co, ci * k * k)
    out = np.empty((n, oh, ow, co), dtype=x.dtype)
    rows = out.reshape(n * oh * ow, co)
    step = _chunk_samples(n, oh * ow * ci * k * k)
    cols = np.empty((step * oh * ow, ci * k * k), dtype=x.dtype)
    for i0 in range(0, n, step):
        i1 = min(n, i0 + step)
        cc = cols[: (i1 - i0) * oh * ow]
        if x.dtype == np.float32:
            _im2col[float](x[i0:i1], cc, k)
        else:
            _im2col[double](x[i0:i1], cc, k)
        np.matmul(cc, wmat.T, out=rows[i0 * oh * ow : i1 * oh * ow])
    out += b
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    return (out, None) if return_cols else out


def conv2d_backward(x, w, gout, cols=None, need_gx=True):
    """Gradients of conv2d_forward. Returns (gx, gw, gb); gx is None when
    need_gx is False (first layer).

    cols is accepted for API parity; the streaming path rebuilds its chunk
    slabs instead.
    """
    x = np.ascontiguousarray(x)
    gout = np.ascontiguousarray(gout)
    n, ci, h, wd = x.shape
    co, _, k, _ = w.shape
    oh, ow = gout.shape[2], gout.shape[3]
    gb = gout.sum(axis=(0, 2, 3))
    gout_mat = np.ascontiguousarray(gout.transpose(0, 2, 3, 1)).reshape(n * oh * ow, co)
    wmat = np.ascontiguousarray(w).reshape(co, ci * k * k)
    if k == 1:
        gw = (gout_mat.T @ x.transpose(0, 2, 3, 1).reshape(n * oh * ow, ci)).reshape(w.shape)
        gx = None
        if need_gx:
            gx = np.ascontiguousarray(
                np.tensordot(gout, w[:, :, 0, 0], axes=([1], [0])).transpose(0, 3, 1, 2)
            )
        return gx, np.ascontiguousarray(gw), gb
    gw = np.zeros((co, ci * k * k), dtype=x.dtype)
    gx = np.zeros_like(x) if need_gx else None
    step = _chunk_samples(n, oh * ow * ci * k * k)
    colbuf = np.empty((step * oh * ow, ci * k * k), dtype=x.dtype)
    gcolbuf = np.empty_like(colbuf) if need_gx else None
    for i0 in range(0, n, step):
        i1 = min(n, i0 + step)
        nr = (i1 - i0) * oh * ow
        cc = colbuf[:nr]
        if x.dtype == np.float32:
            _im2col[float](x[i0:i1], cc, k)
        else:
            _im2col[double](x[i0:i1], cc, k)
        gm = gout_mat[i0 * oh * ow : i1 * oh * ow]
        gw += gm.T @ cc
        if need_gx:
            gc = gcolbuf[:nr]
            np.matmul(gm, wmat, out=gc)
            if x.dtype == np.float32:
                _col2im[float](gc, gx[i0:i1], k)
            else:
                _col2im[double](gc, gx[i0:i1], k)
    return gx, gw.reshape(w.shape), gb


cdef void _maxpool_fwd(real[:, :, :, ::1] x, real[:, :, :, ::1] out,
                       unsigned char[:, :, :, ::1] idx) noexcept nogil:
    cdef Py_ssize_t n = out.shape[0], c = out.shape[1], ph = out.shape[2], pw = out.shape[3]
    cdef Py_ssize_t i, ci, py, px, y, xq
    cdef real best, v
    cdef unsigned char bi
    for i in range(n):
        for ci in range(c):
            for py in range(ph):
                for px in range(pw):
                    y = 2 * py
                    xq = 2 * px
                    best = x[i, ci, y, xq]
                    bi = 0
                    v = x[i, ci, y, xq + 1]
                    if v > best:
                        best = v
                        bi = 1
                    v = x[i, ci, y + 1, xq]
                    if v > best:
                        best = v
                        bi = 2
                    v = x[i, ci, y + 1, xq + 1]
                    if v > best:
                        best = v
                        bi = 3
                    out[i, ci, py, px] = best
                    idx[i, ci, py, px] = bi


def maxpool2_forward(x):
    """2x2 max pooling, stride 2. Returns (out, idx) with idx in 0..3 (dy*2+dx)."""
    x = np.ascontiguousarray(x)
    n, c, h, w = x.shape
    out = np.empty((n, c, h // 2, w // 2), dtype=x.dtype)
    idx = np.empty((n, c, h // 2, w // 2), dtype=np.uint8)
    if x.dtype == np.float32:
        _maxpool_fwd[float](x, out, idx)
    else:
        _maxpool_fwd[double](x, out, idx)
    return out, idx


cdef void _maxpool_bwd(real[:, :, :, ::1] gout, unsigned char[:, :, :, ::1] idx,
                       real[:, :, :, ::1] gx) noexcept nogil:
    cdef Py_ssize_t n = gout.shape[0], c = gout.shape[1], ph = gout.shape[2], pw = gout.shape[3]
    cdef Py_ssize_t i, ci, py, px
    cdef unsigned char b
    for i in range(n):
        for ci in range(c):
            for py in range(ph):
                for px in range(pw):
                    b = idx[i, ci, py, px]
                    gx[i, ci, 2 * py + (b >> 1), 2 * px + (b & 1)] = gout[i, ci, py, px]


def maxpool2_backward(gout, idx, h, w):
    """Scatter gout back to the argmax positions of the forward pass."""
    gout = np.ascontiguousarray(gout)
    idx = np.ascontiguousarray(idx)
    n, c, ph, pw = gout.shape
    gx = np.zeros((n, c, h, w), dtype=gout.dtype)
    if gout.dtype == np.float32:
        _maxpool_bwd[float](gout, idx, gx)
    else:
        _maxpool_bwd[double](gout, idx, gx)
    return gx


cdef void _bilinear(real[:, ::1] src, unsigned char[:, ::1] m, double[::1] xs,
                    double[::1] ys, real[::1] vals, unsigned char[::1] valid) noexcept nogil:
    cdef Py_ssize_t h = src.shape[0], w = src.shape[1]
    cdef Py_ssize_t i, x0, y0, x1, y1
    cdef double x, y, fx, fy, v
    for i in range(xs.shape[0]):
        x = xs[i]
        y = ys[i]
        if x < 0 or x > w - 1 or y < 0 or y > h - 1:
            continue
        x0 = <Py_ssize_t> floor(x)
        y0 = <Py_ssize_t> floor(y)
        if x0 > w - 2:
            x0 = w - 2
        if y0 > h - 2:
            y0 = h - 2
        x1 = x0 + 1
        y1 = y0 + 1
        if not (m[y0, x0] and m[y0, x1] and m[y1, x0] and m[y1, x1]):
            continue
        fx = x - x0
        fy = y - y0
        v = (1 - fy) * ((1 - fx) * src[y0, x0] + fx * src[y0, x1]) + fy * (
            (1 - fx) * src[y1, x0] + fx * src[y1, x1]
        )
        vals[i] = <real> v
        valid[i] = 1


def bilinear_sample(src, mask, xs, ys):
    """Sample src (H,W) at float coords. Returns (values, valid).

    Same validity rule as the numpy backend: inside the image rectangle and
    all four contributing pixels valid.
    """
    src = np.ascontiguousarray(src)
    m = np.ascontiguousarray(mask, dtype=np.uint8)
    shape = np.shape(xs)
    xf = np.ascontiguousarray(np.ravel(xs), dtype=np.float64)
    yf = np.ascontiguousarray(np.ravel(ys), dtype=np.float64)
    vals = np.zeros(xf.shape[0], dtype=src.dtype)
    valid = np.zeros(xf.shape[0], dtype=np.uint8)
    if src.dtype == np.float32:
        _bilinear[float](src, m, xf, yf, vals, valid)
    else:
        _bilinear[double](src, m, xf, yf, vals, valid)
    return vals.reshape(shape), valid.reshape(shape).astype(bool)


cdef void _integral(real[:, ::1] img, double[:, ::1] ii) noexcept nogil:
    # two passes matching np.cumsum(axis=0) then np.cumsum(axis=1)
    cdef Py_ssize_t h = img.shape[0], w = img.shape[1]
    cdef Py_ssize_t i, j
    for i in range(h):
        for j in range(w):
            ii[i + 1, j + 1] = img[i, j] + ii[i, j + 1]
    for i in range(h):
        for j in range(1, w):
            ii[i + 1, j + 1] = ii[i + 1, j + 1] + ii[i + 1, j]


def window_sum(img, s):
    """Sliding s x s window sums over full windows, float64 accumulation."""
    img = np.ascontiguousarray(img)
    h, w = img.shape
    ii = np.zeros((h + 1, w + 1), np.float64)
    if img.dtype == np.float32:
        _integral[float](img, ii)
    else:
        _integral[double](img, ii)
    return ii[s:, s:] - ii[:-s, s:] - ii[s:, :-s] + ii[:-s, :-s]
