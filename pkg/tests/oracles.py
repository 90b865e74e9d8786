"""Independent brute-force oracles the fast kernels are checked against.

Everything here is written as plain nested loops with scalar indexing, on
purpose: these implementations share no code (and no algorithmic shortcuts)
with the package, so agreement is meaningful evidence.
"""

import numpy as np


def conv3d_loops(x, kernel, bias, stride, padding):
    """Direct six-nested-loop 3D convolution, float64 accumulation."""
    n, cin, t, h, w = x.shape
    cout, _, kt, kh, kw = kernel.shape
    st, sh, sw = stride
    pt, ph, pw = padding
    xp = np.zeros((n, cin, t + 2 * pt, h + 2 * ph, w + 2 * pw), dtype=np.float64)
    xp[:, :, pt : pt + t, ph : ph + h, pw : pw + w] = x
    to = (t + 2 * pt - kt) // st + 1
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    out = np.zeros((n, cout, to, ho, wo), dtype=np.float64)
    for ni in range(n):
        for co in range(cout):
            for ot in range(to):
                for oh in range(ho):
                    for ow in range(wo):
                        acc = float(bias[co])
                        for ci in range(cin):
                            for dt in range(kt):
                                for dh in range(kh):
                                    for dw in range(kw):
                                        acc += (
                                            xp[ni, ci, ot * st + dt, oh * sh + dh, ow * sw + dw]
                                            * kernel[co, ci, dt, dh, dw]
                                        )
                        out[ni, co, ot, oh, ow] = acc
    return out


def maxpool3d_loops(x, window, stride):
    """Loop max pooling; ties resolved to the lowest input linear index."""
    n, c, t, h, w = x.shape
    wt, wh, ww = window
    st, sh, sw = stride
    to = (t - wt) // st + 1
    ho = (h - wh) // sh + 1
    wo = (w - ww) // sw + 1
    out = np.empty((n, c, to, ho, wo), dtype=x.dtype)
    arg = np.empty((n, c, to, ho, wo), dtype=np.int64)
    for ni in range(n):
        for ci in range(c):
            for ot in range(to):
                for oh in range(ho):
                    for ow in range(wo):
                        best = None
                        besti = -1
                        for dt in range(wt):
                            for dh in range(wh):
                                for dw in range(ww):
                                    ti, hi, wi = ot * st + dt, oh * sh + dh, ow * sw + dw
                                    v = x[ni, ci, ti, hi, wi]
                                    if best is None or v > best:
                                        best = v
                                        besti = (ti * h + hi) * w + wi
                        out[ni, ci, ot, oh, ow] = best
                        arg[ni, ci, ot, oh, ow] = besti
    return out, arg


def interp_pixel_loops(values, dates, valid, grid):
    """Per-pixel np.interp with endpoint hold; the vectorized kernels'
    reference. values:(B,K,H,W), valid:(K,H,W)."""
    b, k, h, w = values.shape
    out = np.zeros((b, len(grid), h, w), dtype=np.float64)
    for hi in range(h):
        for wi in range(w):
            mask = valid[:, hi, wi].astype(bool)
            if not mask.any():
                continue
            d = dates[mask].astype(np.float64)
            for bi in range(b):
                v = values[bi, mask, hi, wi].astype(np.float64)
                out[bi, :, hi, wi] = np.interp(grid, d, v)
    return out


def central_difference(f, x, eps=1e-5):
    """Dense central-difference gradient of scalar f at x (float64)."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad
