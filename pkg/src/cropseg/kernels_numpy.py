"""Pure-numpy implementations of the hot kernels.

This is the fallback path (``CROPSEG_BACKEND=numpy``). Convolutions are
computed as a loop over kernel offsets, each offset being one strided-slice
channel mix that BLAS handles in bulk; accumulation order over offsets is
fixed, so results are bit-reproducible within this backend. Input dtype is
preserved throughout (float32 for training, float64 for gradient checks).

All convolution entry points take the *already padded* input; padding and
shape validation live in :mod:`cropseg.ops`, shared with the numba path.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

NAME = "numpy"


def _out_extent(padded, k, s):
    return (padded - k) // s + 1


def conv3d_forward(x_padded, kernel, bias, s_t, s_h, s_w):
    """Correlate a (N,Cin,T,H,W) padded volume with a (Cout,Cin,kT,kH,kW) kernel."""
    n, cin, tp, hp, wp = x_padded.shape
    cout, _, kt, kh, kw = kernel.shape
    to = _out_extent(tp, kt, s_t)
    ho = _out_extent(hp, kh, s_h)
    wo = _out_extent(wp, kw, s_w)
    out = np.empty((n, cout, to, ho, wo), dtype=x_padded.dtype)
    out[:] = bias[None, :, None, None, None]
    for dt in range(kt):
        for dh in range(kh):
            for dw in range(kw):
                xs = x_padded[
                    :,
                    :,
                    dt : dt + s_t * to : s_t,
                    dh : dh + s_h * ho : s_h,
                    dw : dw + s_w * wo : s_w,
                ]
                # (n,cin,to,ho,wo) x (cout,cin) -> (n,to,ho,wo,cout)
                mix = np.tensordot(xs, kernel[:, :, dt, dh, dw], axes=([1], [1]))
                out += np.moveaxis(mix, -1, 1)
    return out


def conv3d_backward(x_padded, kernel, grad_out, s_t, s_h, s_w):
    """Gradients of :func:`conv3d_forward` w.r.t. padded input, kernel, bias."""
    cout, cin, kt, kh, kw = kernel.shape
    to, ho, wo = grad_out.shape[2:]
    grad_bias = grad_out.sum(axis=(0, 2, 3, 4))
    grad_kernel = np.empty_like(kernel)
    grad_x = np.zeros_like(x_padded)
    for dt in range(kt):
        for dh in range(kh):
            for dw in range(kw):
                sl = (
                    slice(None),
                    slice(None),
                    slice(dt, dt + s_t * to, s_t),
                    slice(dh, dh + s_h * ho, s_h),
                    slice(dw, dw + s_w * wo, s_w),
                )
                xs = x_padded[sl]
                # grad wrt kernel slice: contract batch and space
                grad_kernel[:, :, dt, dh, dw] = np.tensordot(
                    grad_out, xs, axes=([0, 2, 3, 4], [0, 2, 3, 4])
                )
                # grad wrt input: scatter the channel-mixed upstream gradient
                mix = np.tensordot(grad_out, kernel[:, :, dt, dh, dw], axes=([1], [0]))
                grad_x[sl] += np.moveaxis(mix, -1, 1)
    return grad_x, grad_kernel, grad_bias


def maxpool3d_forward(x, w_t, w_h, w_w, s_t, s_h, s_w):
    """Max over (wT,wH,wW) windows. Returns (output, argmax).

    ``argmax`` holds, per output cell, the linear index of the winning input
    element within that cell's (T,H,W) volume; ties go to the lowest linear
    index, which is the first occurrence in window scan order.
    """
    n, c, t, h, w = x.shape
    to = _out_extent(t, w_t, s_t)
    ho = _out_extent(h, w_h, s_h)
    wo = _out_extent(w, w_w, s_w)
    win = sliding_window_view(x, (w_t, w_h, w_w), axis=(2, 3, 4))
    win = win[:, :, ::s_t, ::s_h, ::s_w]
    flat = win.reshape(n, c, to, ho, wo, w_t * w_h * w_w)
    local = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]
    # window-local (dt,dh,dw) back to absolute linear index over (T,H,W)
    dt = local // (w_h * w_w)
    rem = local % (w_h * w_w)
    dh = rem // w_w
    dw = rem % w_w
    it = np.arange(to)[:, None, None] * s_t + dt
    ih = np.arange(ho)[None, :, None] * s_h + dh
    iw = np.arange(wo)[None, None, :] * s_w + dw
    argmax = (it * h + ih) * w + iw
    return out, argmax.astype(np.int64)


def maxpool3d_backward(grad_out, argmax, t, h, w):
    """Route upstream gradients to the argmax positions (overlap-safe add)."""
    n, c = grad_out.shape[:2]
    grad_x = np.zeros((n, c, t * h * w), dtype=grad_out.dtype)
    flat_g = grad_out.reshape(n, c, -1)
    flat_a = argmax.reshape(n, c, -1)
    ni = np.arange(n)[:, None, None]
    ci = np.arange(c)[None, :, None]
    np.add.at(grad_x, (ni, ci, flat_a), flat_g)
    return grad_x.reshape(n, c, t, h, w)


def interp_to_grid(values, dates, valid, grid):
    """Piecewise-linear interpolation of sparse observations onto a date grid.

    values: (B,K,H,W) observations, dates: (K,) sorted ints, valid: (K,H,W)
    boolean per-pixel validity, grid: (G,) sorted ints. Outside the valid
    span the nearest valid value is held constant. Pixels with no valid
    observation at all come back as zero for every grid step.
    """
    b, k, h, w = values.shape
    g = grid.shape[0]
    idx = np.arange(k)[:, None, None]
    # last valid observation index at-or-before k (-1: none yet)
    prev = np.maximum.accumulate(np.where(valid, idx, -1), axis=0)
    # first valid observation index at-or-after k (k: none ahead)
    nxt = np.minimum.accumulate(np.where(valid, idx, k)[::-1], axis=0)[::-1]
    out = np.empty((b, g, h, w), dtype=values.dtype)
    datesf = dates.astype(np.float64)
    for gi in range(g):
        gd = float(grid[gi])
        j = int(np.searchsorted(dates, gd, side="right")) - 1
        left = prev[j] if j >= 0 else np.full((h, w), -1)
        right = nxt[j + 1] if j + 1 < k else np.full((h, w), k)
        has_l = left >= 0
        has_r = right < k
        li = np.where(has_l, left, 0)
        ri = np.where(has_r, right, 0)
        dl = datesf[li]
        dr = datesf[ri]
        both = has_l & has_r
        denom = np.where(both, dr - dl, 1.0)
        frac = np.where(both, (gd - dl) / denom, 0.0)
        vl = np.take_along_axis(values, li[None, None], axis=1)[:, 0]
        vr = np.take_along_axis(values, ri[None, None], axis=1)[:, 0]
        step = np.where(
            both,
            vl + (vr - vl) * frac,
            np.where(has_l, vl, np.where(has_r, vr, 0.0)),
        )
        out[:, gi] = step.astype(values.dtype, copy=False)
    return out
