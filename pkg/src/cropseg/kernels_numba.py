"""Numba-compiled hot kernels (the default backend).

Same contracts as :mod:`cropseg.kernels_numpy`. Inner loops run over the
contiguous last axis with the kernel tap hoisted to a scalar, which LLVM
vectorizes; every output element is accumulated in a fixed order, so the
results are bit-reproducible. ``cache=True`` persists compilation across
processes.
"""

import numpy as np
from numba import njit

NAME = "numba"

_JIT = dict(cache=True, nogil=True)


@njit(**_JIT)
def conv3d_forward(x_padded, kernel, bias, s_t, s_h, s_w):
    n, cin, tp, hp, wp = x_padded.shape
    cout = kernel.shape[0]
    kt, kh, kw = kernel.shape[2], kernel.shape[3], kernel.shape[4]
    to = (tp - kt) // s_t + 1
    ho = (hp - kh) // s_h + 1
    wo = (wp - kw) // s_w + 1
    out = np.empty((n, cout, to, ho, wo), dtype=x_padded.dtype)
    row = np.empty(wo, dtype=x_padded.dtype)
    for ni in range(n):
        for co in range(cout):
            b = bias[co]
            for t in range(to):
                for h in range(ho):
                    for w in range(wo):
                        row[w] = b
                    for ci in range(cin):
                        for dt in range(kt):
                            for dh in range(kh):
                                xrow = x_padded[ni, ci, t * s_t + dt, h * s_h + dh]
                                for dw in range(kw):
                                    kv = kernel[co, ci, dt, dh, dw]
                                    if s_w == 1:
                                        for w in range(wo):
                                            row[w] += xrow[w + dw] * kv
                                    else:
                                        for w in range(wo):
                                            row[w] += xrow[w * s_w + dw] * kv
                    for w in range(wo):
                        out[ni, co, t, h, w] = row[w]
    return out


@njit(**_JIT)
def _conv3d_grad_input(x_padded, kernel, grad_out, s_t, s_h, s_w):
    n, cout, to, ho, wo = grad_out.shape
    cin = kernel.shape[1]
    kt, kh, kw = kernel.shape[2], kernel.shape[3], kernel.shape[4]
    grad_x = np.zeros(x_padded.shape, dtype=x_padded.dtype)
    for ni in range(n):
        for co in range(cout):
            for t in range(to):
                for h in range(ho):
                    grow = grad_out[ni, co, t, h]
                    for ci in range(cin):
                        for dt in range(kt):
                            for dh in range(kh):
                                gxrow = grad_x[ni, ci, t * s_t + dt, h * s_h + dh]
                                for dw in range(kw):
                                    kv = kernel[co, ci, dt, dh, dw]
                                    if s_w == 1:
                                        for w in range(wo):
                                            gxrow[w + dw] += grow[w] * kv
                                    else:
                                        for w in range(wo):
                                            gxrow[w * s_w + dw] += grow[w] * kv
    return grad_x


@njit(**_JIT)
def _conv3d_grad_kernel(x_padded, grad_out, kt, kh, kw, s_t, s_h, s_w):
    n, cout, to, ho, wo = grad_out.shape
    cin = x_padded.shape[1]
    grad_k = np.zeros((cout, cin, kt, kh, kw), dtype=x_padded.dtype)
    for co in range(cout):
        for ci in range(cin):
            for ni in range(n):
                for t in range(to):
                    for h in range(ho):
                        grow = grad_out[ni, co, t, h]
                        for dt in range(kt):
                            for dh in range(kh):
                                xrow = x_padded[ni, ci, t * s_t + dt, h * s_h + dh]
                                for dw in range(kw):
                                    acc = grad_k[co, ci, dt, dh, dw]
                                    if s_w == 1:
                                        for w in range(wo):
                                            acc += xrow[w + dw] * grow[w]
                                    else:
                                        for w in range(wo):
                                            acc += xrow[w * s_w + dw] * grow[w]
                                    grad_k[co, ci, dt, dh, dw] = acc
    return grad_k


@njit(**_JIT)
def _conv3d_grad_bias(grad_out):
    n, cout, to, ho, wo = grad_out.shape
    grad_b = np.zeros(cout, dtype=grad_out.dtype)
    for co in range(cout):
        acc = grad_b[co]
        for ni in range(n):
            for t in range(to):
                for h in range(ho):
                    grow = grad_out[ni, co, t, h]
                    for w in range(wo):
                        acc += grow[w]
        grad_b[co] = acc
    return grad_b


def conv3d_backward(x_padded, kernel, grad_out, s_t, s_h, s_w):
    grad_x = _conv3d_grad_input(x_padded, kernel, grad_out, s_t, s_h, s_w)
    grad_k = _conv3d_grad_kernel(
        x_padded, grad_out, kernel.shape[2], kernel.shape[3], kernel.shape[4], s_t, s_h, s_w
    )
    grad_b = _conv3d_grad_bias(grad_out)
    return grad_x, grad_k, grad_b


@njit(**_JIT)
def maxpool3d_forward(x, w_t, w_h, w_w, s_t, s_h, s_w):
    n, c, t, h, w = x.shape
    to = (t - w_t) // s_t + 1
    ho = (h - w_h) // s_h + 1
    wo = (w - w_w) // s_w + 1
    out = np.empty((n, c, to, ho, wo), dtype=x.dtype)
    argmax = np.empty((n, c, to, ho, wo), dtype=np.int64)
    for ni in range(n):
        for ci in range(c):
            for ot in range(to):
                for oh in range(ho):
                    for ow in range(wo):
                        t0 = ot * s_t
                        h0 = oh * s_h
                        w0 = ow * s_w
                        best = x[ni, ci, t0, h0, w0]
                        besti = (t0 * h + h0) * w + w0
                        for dt in range(w_t):
                            for dh in range(w_h):
                                for dw in range(w_w):
                                    v = x[ni, ci, t0 + dt, h0 + dh, w0 + dw]
                                    if v > best:
                                        best = v
                                        besti = ((t0 + dt) * h + h0 + dh) * w + w0 + dw
                        out[ni, ci, ot, oh, ow] = best
                        argmax[ni, ci, ot, oh, ow] = besti
    return out, argmax


@njit(**_JIT)
def maxpool3d_backward(grad_out, argmax, t, h, w):
    n, c, to, ho, wo = grad_out.shape
    grad_x = np.zeros((n, c, t * h * w), dtype=grad_out.dtype)
    for ni in range(n):
        for ci in range(c):
            for ot in range(to):
                for oh in range(ho):
                    for ow in range(wo):
                        grad_x[ni, ci, argmax[ni, ci, ot, oh, ow]] += grad_out[
                            ni, ci, ot, oh, ow
                        ]
    return grad_x.reshape(n, c, t, h, w)


@njit(**_JIT)
def interp_to_grid(values, dates, valid, grid):
    b, k, h, w = values.shape
    g = grid.shape[0]
    out = np.zeros((b, g, h, w), dtype=values.dtype)
    vidx = np.empty(k, dtype=np.int64)
    for hi in range(h):
        for wi in range(w):
            nv = 0
            for ki in range(k):
                if valid[ki, hi, wi]:
                    vidx[nv] = ki
                    nv += 1
            if nv == 0:
                continue  # masked pixel, stays zero
            for bi in range(b):
                j = 0  # index into vidx of first valid obs with date strictly after the grid point
                for gi in range(g):
                    gd = grid[gi]
                    while j < nv and dates[vidx[j]] <= gd:
                        j += 1
                    if j == 0:
                        out[bi, gi, hi, wi] = values[bi, vidx[0], hi, wi]
                    elif j == nv:
                        out[bi, gi, hi, wi] = values[bi, vidx[nv - 1], hi, wi]
                    else:
                        # d0 <= gd < d1, so frac in [0,1) and knot values are exact
                        d0 = dates[vidx[j - 1]]
                        d1 = dates[vidx[j]]
                        v0 = values[bi, vidx[j - 1], hi, wi]
                        v1 = values[bi, vidx[j], hi, wi]
                        frac = (gd - d0) / float(d1 - d0)
                        out[bi, gi, hi, wi] = v0 + (v1 - v0) * frac
    return out
