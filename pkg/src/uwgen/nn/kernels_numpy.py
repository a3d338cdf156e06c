"""Pure-numpy kernel implementations (im2col convolutions, reshape pooling).

Fallback path for :mod:`uwgen.nn.backend`; semantics identical to
:mod:`uwgen.nn.kernels_numba`. All arrays are NCHW, float32 or float64.
"""

import numpy as np


def conv_out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _im2col(xp, kh, kw, stride, ho, wo):
    # (N, CI, HO, WO, KH, KW) view, no copy until reshape
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]
    n, ci = xp.shape[:2]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, ci * kh * kw)
    return cols


def conv2d_forward(x, w, b, stride, pad):
    n, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    ho = conv_out_size(h, kh, stride, pad)
    wo = conv_out_size(wd, kw, stride, pad)
    cols = _im2col(_pad(x, pad), kh, kw, stride, ho, wo)
    y = cols @ w.reshape(co, -1).T
    y += b
    return np.ascontiguousarray(y.reshape(n, ho, wo, co).transpose(0, 3, 1, 2))


def conv2d_backward_input(dy, w, x_shape, stride, pad):
    n, ci, h, wd = x_shape
    co, _, kh, kw = w.shape
    ho, wo = dy.shape[2], dy.shape[3]
    dyr = dy.transpose(0, 2, 3, 1).reshape(n * ho * wo, co)
    dcols = dyr @ w.reshape(co, -1)  # (N*HO*WO, CI*KH*KW)
    dcols = dcols.reshape(n, ho, wo, ci, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    dxp = np.zeros((n, ci, h + 2 * pad, wd + 2 * pad), dtype=dy.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride] += dcols[
                :, :, i, j
            ]
    if pad == 0:
        return dxp
    return np.ascontiguousarray(dxp[:, :, pad:-pad, pad:-pad])


def conv2d_backward_weights(dy, x, w_shape, stride, pad):
    co, ci, kh, kw = w_shape
    n = x.shape[0]
    ho, wo = dy.shape[2], dy.shape[3]
    cols = _im2col(_pad(x, pad), kh, kw, stride, ho, wo)
    dyr = dy.transpose(0, 2, 3, 1).reshape(n * ho * wo, co)
    dw = (dyr.T @ cols).reshape(co, ci, kh, kw)
    db = dy.sum(axis=(0, 2, 3))
    return dw, db


def maxpool2d_forward(x, k):
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    win = x[:, :, : ho * k, : wo * k].reshape(n, c, ho, k, wo, k)
    win = win.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    arg = win.argmax(axis=-1).astype(np.int64)
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(y), arg


def maxpool2d_backward(dy, arg, x_shape, k):
    n, c, h, w = x_shape
    ho, wo = h // k, w // k
    dx = np.zeros(x_shape, dtype=dy.dtype)
    ni, ci, hi, wi = np.indices((n, c, ho, wo), sparse=True)
    rows = hi * k + arg // k
    cols = wi * k + arg % k
    # pooling windows are disjoint: plain fancy assignment, no accumulation needed
    dx[ni, ci, rows, cols] = dy
    return dx


def upsample_nearest_forward(x, f):
    return np.ascontiguousarray(np.repeat(np.repeat(x, f, axis=2), f, axis=3))


def upsample_nearest_backward(dy, f):
    n, c, h, w = dy.shape
    return dy.reshape(n, c, h // f, f, w // f, f).sum(axis=(3, 5))
