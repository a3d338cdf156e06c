"""Numba-jitted kernel implementations (direct convolution loops).

Default backend for :mod:`uwgen.nn.backend`; semantics identical to
:mod:`uwgen.nn.kernels_numpy`. All arrays are NCHW, float32 or float64;
kernels compile per dtype on first use and cache to disk.
"""

import numpy as np
from numba import njit, prange


def conv_out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


@njit(parallel=True, fastmath=True, cache=True)
def conv2d_forward(x, w, b, stride, pad):
    n, ci, h, wd = x.shape
    co = w.shape[0]
    kh, kw = w.shape[2], w.shape[3]
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    y = np.empty((n, co, ho, wo), x.dtype)
    for nc in prange(n * co):
        ni = nc // co
        c = nc % co
        for i in range(ho):
            hi0 = i * stride - pad
            for j in range(wo):
                wi0 = j * stride - pad
                acc = b[c]
                for q in range(ci):
                    for u in range(kh):
                        hi = hi0 + u
                        if hi < 0 or hi >= h:
                            continue
                        for v in range(kw):
                            wi = wi0 + v
                            if 0 <= wi < wd:
                                acc += x[ni, q, hi, wi] * w[c, q, u, v]
                y[ni, c, i, j] = acc
    return y


@njit(parallel=True, fastmath=True, cache=True)
def conv2d_backward_input(dy, w, x_shape, stride, pad):
    n, ci, h, wd = x_shape
    co = w.shape[0]
    kh, kw = w.shape[2], w.shape[3]
    ho, wo = dy.shape[2], dy.shape[3]
    dx = np.zeros((n, ci, h, wd), dy.dtype)
    for ni in prange(n):
        for c in range(co):
            for i in range(ho):
                hi0 = i * stride - pad
                for j in range(wo):
                    wi0 = j * stride - pad
                    g = dy[ni, c, i, j]
                    for q in range(ci):
                        for u in range(kh):
                            hi = hi0 + u
                            if hi < 0 or hi >= h:
                                continue
                            for v in range(kw):
                                wi = wi0 + v
                                if 0 <= wi < wd:
                                    dx[ni, q, hi, wi] += g * w[c, q, u, v]
    return dx


@njit(parallel=True, fastmath=True, cache=True)
def conv2d_backward_weights(dy, x, w_shape, stride, pad):
    co, ci, kh, kw = w_shape
    n = x.shape[0]
    h, wd = x.shape[2], x.shape[3]
    ho, wo = dy.shape[2], dy.shape[3]
    dw = np.zeros((co, ci, kh, kw), dy.dtype)
    db = np.zeros(co, dy.dtype)
    for c in prange(co):
        for ni in range(n):
            for i in range(ho):
                hi0 = i * stride - pad
                for j in range(wo):
                    wi0 = j * stride - pad
                    g = dy[ni, c, i, j]
                    db[c] += g
                    for q in range(ci):
                        for u in range(kh):
                            hi = hi0 + u
                            if hi < 0 or hi >= h:
                                continue
                            for v in range(kw):
                                wi = wi0 + v
                                if 0 <= wi < wd:
                                    dw[c, q, u, v] += g * x[ni, q, hi, wi]
    return dw, db


@njit(parallel=True, fastmath=True, cache=True)
def maxpool2d_forward(x, k):
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    y = np.empty((n, c, ho, wo), x.dtype)
    arg = np.empty((n, c, ho, wo), np.int64)
    for ni in prange(n):
        for q in range(c):
            for i in range(ho):
                for j in range(wo):
                    best = x[ni, q, i * k, j * k]
                    bidx = 0
                    for u in range(k):
                        for v in range(k):
                            val = x[ni, q, i * k + u, j * k + v]
                            if val > best:
                                best = val
                                bidx = u * k + v
                    y[ni, q, i, j] = best
                    arg[ni, q, i, j] = bidx
    return y, arg


@njit(parallel=True, fastmath=True, cache=True)
def maxpool2d_backward(dy, arg, x_shape, k):
    n, c, h, w = x_shape
    ho, wo = dy.shape[2], dy.shape[3]
    dx = np.zeros((n, c, h, w), dy.dtype)
    for ni in prange(n):
        for q in range(c):
            for i in range(ho):
                for j in range(wo):
                    a = arg[ni, q, i, j]
                    dx[ni, q, i * k + a // k, j * k + a % k] = dy[ni, q, i, j]
    return dx


@njit(parallel=True, fastmath=True, cache=True)
def upsample_nearest_forward(x, f):
    n, c, h, w = x.shape
    y = np.empty((n, c, h * f, w * f), x.dtype)
    for ni in prange(n):
        for q in range(c):
            for i in range(h * f):
                for j in range(w * f):
                    y[ni, q, i, j] = x[ni, q, i // f, j // f]
    return y


@njit(parallel=True, fastmath=True, cache=True)
def upsample_nearest_backward(dy, f):
    n, c, hf, wf = dy.shape
    h, w = hf // f, wf // f
    dx = np.zeros((n, c, h, w), dy.dtype)
    for ni in prange(n):
        for q in range(c):
            for i in range(hf):
                for j in range(wf):
                    dx[ni, q, i // f, j // f] += dy[ni, q, i, j]
    return dx
