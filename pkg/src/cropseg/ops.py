"""Primitive numerical operations and their analytic backward passes.

Forward/backward pairs for 3D convolution, 3D max pooling, nearest-neighbor
2D upsampling, channel concatenation, ReLU, channel softmax, and max
collapse over the time axis. Arrays are dense row-major numpy arrays with
layout (example, channel, time, row, col) for volumes and
(example, channel, row, col) for maps; dtype is preserved (float32 for
training, float64 for gradient verification).

The convolution, pooling, and interpolation inner loops dispatch to the
backend selected by ``CROPSEG_BACKEND`` (see :mod:`cropseg.backend`); all
other operations are plain numpy. Every operation is a pure function of its
inputs and deterministic within one backend.
"""

import numpy as np

from . import backend
from .errors import DimensionError

_K = backend.load_kernels()

_AXIS_NAMES_5D = ("example", "channel", "time", "row", "col")


def _as_triple(v, name):
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ValueError(f"{name} must be an int or a triple, got {v!r}")
    return t


def _check_rank(x, rank, what):
    if x.ndim != rank:
        raise DimensionError(f"{what} must be rank {rank}, got rank {x.ndim}")


def conv3d_out_shape(in_shape, kernel_shape, stride, padding):
    """Output extents for a 3D convolution: floor((in + 2*pad - k)/stride) + 1."""
    stride = _as_triple(stride, "stride")
    padding = _as_triple(padding, "padding")
    n, cin, t, h, w = in_shape
    cout, _, kt, kh, kw = kernel_shape
    spatial = []
    for axis, (inn, k, s, p) in enumerate(
        zip((t, h, w), (kt, kh, kw), stride, padding)
    ):
        padded = inn + 2 * p
        if k > padded:
            raise DimensionError(
                f"kernel extent {k} exceeds padded input extent {padded} "
                f"on the {_AXIS_NAMES_5D[axis + 2]} axis"
            )
        if s < 1:
            raise ValueError(f"stride must be >= 1, got {s}")
        spatial.append((padded - k) // s + 1)
    return (n, cout) + tuple(spatial)


def _check_conv_args(x, kernel, bias, stride, padding):
    _check_rank(x, 5, "conv3d input")
    _check_rank(kernel, 5, "conv3d kernel")
    if kernel.shape[1] != x.shape[1]:
        raise DimensionError(
            f"channel axis mismatch: kernel expects {kernel.shape[1]} input "
            f"channels, input has {x.shape[1]}"
        )
    if bias.shape != (kernel.shape[0],):
        raise DimensionError(
            f"bias must have shape ({kernel.shape[0]},), got {bias.shape}"
        )
    for p in _as_triple(padding, "padding"):
        if p < 0:
            raise ValueError(f"padding must be >= 0, got {p}")


def _pad3d(x, padding):
    pt, ph, pw = padding
    if pt == 0 and ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))


def conv3d_forward(x, kernel, bias, stride=(1, 1, 1), padding=(0, 0, 0)):
    """Correlate x:(N,Cin,T,H,W) with kernel:(Cout,Cin,kT,kH,kW) plus bias."""
    _check_conv_args(x, kernel, bias, stride, padding)
    stride = _as_triple(stride, "stride")
    padding = _as_triple(padding, "padding")
    conv3d_out_shape(x.shape, kernel.shape, stride, padding)
    xp = _pad3d(x, padding)
    return _K.conv3d_forward(xp, kernel, bias, *stride)


def conv3d_backward(x, kernel, grad_out, stride=(1, 1, 1), padding=(0, 0, 0)):
    """Gradients of conv3d_forward w.r.t. (input, kernel, bias).

    ``grad_out`` must match the forward output shape for these arguments.
    """
    bias = np.zeros(kernel.shape[0], dtype=kernel.dtype)
    _check_conv_args(x, kernel, bias, stride, padding)
    stride = _as_triple(stride, "stride")
    padding = _as_triple(padding, "padding")
    expected = conv3d_out_shape(x.shape, kernel.shape, stride, padding)
    if grad_out.shape != expected:
        raise DimensionError(
            f"grad_out shape {grad_out.shape} does not match forward output {expected}"
        )
    xp = _pad3d(x, padding)
    gx_pad, gk, gb = _K.conv3d_backward(xp, kernel, grad_out, *stride)
    pt, ph, pw = padding
    if (pt, ph, pw) != (0, 0, 0):
        t, h, w = x.shape[2:]
        gx_pad = gx_pad[:, :, pt : pt + t, ph : ph + h, pw : pw + w]
    return np.ascontiguousarray(gx_pad), gk, gb


def maxpool3d_forward(x, window, stride=None):
    """Max over (wT,wH,wW) windows; returns (output, argmax index map).

    The argmax map stores the linear index over (T,H,W) of each window's
    maximum (ties: lowest linear index) and routes gradients in
    :func:`maxpool3d_backward`.
    """
    _check_rank(x, 5, "maxpool3d input")
    window = _as_triple(window, "window")
    stride = window if stride is None else _as_triple(stride, "stride")
    for axis, (k, s, inn) in enumerate(zip(window, stride, x.shape[2:])):
        if k < 1 or s < 1:
            raise ValueError("pool window and stride must be >= 1")
        if k > inn:
            raise DimensionError(
                f"pool window {k} exceeds input extent {inn} on the "
                f"{_AXIS_NAMES_5D[axis + 2]} axis"
            )
    return _K.maxpool3d_forward(x, *window, *stride)


def maxpool3d_backward(grad_out, argmax, in_shape):
    """Scatter upstream gradients back to the pooled argmax positions."""
    if grad_out.shape != argmax.shape:
        raise DimensionError(
            f"grad_out shape {grad_out.shape} does not match argmax map {argmax.shape}"
        )
    n, c, t, h, w = in_shape
    return _K.maxpool3d_backward(grad_out, argmax, t, h, w)


def upsample2d_nearest(x, factor):
    """Replicate each pixel of x:(N,C,H,W) into a factor x factor block."""
    _check_rank(x, 4, "upsample2d input")
    f = int(factor)
    if f < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    return np.repeat(np.repeat(x, f, axis=2), f, axis=3)


def upsample2d_backward(grad_out, factor):
    """Sum each factor x factor block of upstream gradients."""
    _check_rank(grad_out, 4, "upsample2d grad_out")
    f = int(factor)
    if f < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    n, c, hf, wf = grad_out.shape
    if hf % f or wf % f:
        raise DimensionError(
            f"grad_out extents ({hf},{wf}) not divisible by factor {f}"
        )
    return grad_out.reshape(n, c, hf // f, f, wf // f, f).sum(axis=(3, 5))


def concat_channels(a, b):
    """Concatenate along the channel axis; a occupies the leading channels."""
    if a.ndim != b.ndim:
        raise DimensionError(f"rank mismatch: {a.ndim} vs {b.ndim}")
    for axis in range(a.ndim):
        if axis == 1:
            continue
        if a.shape[axis] != b.shape[axis]:
            name = _AXIS_NAMES_5D[axis] if a.ndim == 5 else ("example", "channel", "row", "col")[axis]
            raise DimensionError(
                f"{name} axis mismatch: {a.shape[axis]} vs {b.shape[axis]}"
            )
    return np.concatenate((a, b), axis=1)


def concat_channels_backward(grad_out, channels_a):
    """Split the concatenated gradient back into (grad_a, grad_b)."""
    if channels_a > grad_out.shape[1]:
        raise DimensionError(
            f"cannot split {channels_a} channels from {grad_out.shape[1]}"
        )
    ga = np.ascontiguousarray(grad_out[:, :channels_a])
    gb = np.ascontiguousarray(grad_out[:, channels_a:])
    return ga, gb


def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    """Derivative taken as 0 at x == 0."""
    return np.where(x > 0, grad_out, 0)


def softmax_channels(x):
    """Per-pixel softmax over the channel axis, max-shifted for stability."""
    if x.shape[1] < 1:
        raise DimensionError("softmax requires a channel extent of at least 1")
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_channels_backward(probs, grad_probs):
    """Chain an upstream gradient on probabilities back to the logits."""
    if probs.shape != grad_probs.shape:
        raise DimensionError(
            f"probs shape {probs.shape} does not match grad shape {grad_probs.shape}"
        )
    inner = (grad_probs * probs).sum(axis=1, keepdims=True)
    return probs * (grad_probs - inner)


def temporal_max(x):
    """Max over the time axis of x:(N,C,T,H,W); returns (output, argmax).

    Ties resolve to the earliest time step so the backward route is unique.
    """
    _check_rank(x, 5, "temporal max input")
    arg = x.argmax(axis=2)
    out = np.take_along_axis(x, arg[:, :, None], axis=2)[:, :, 0]
    return out, arg


def temporal_max_backward(grad_out, argmax, time_steps):
    """Send each upstream gradient to its winning time step."""
    if grad_out.shape != argmax.shape:
        raise DimensionError(
            f"grad_out shape {grad_out.shape} does not match argmax map {argmax.shape}"
        )
    n, c, h, w = grad_out.shape
    grad_x = np.zeros((n, c, time_steps, h, w), dtype=grad_out.dtype)
    np.put_along_axis(grad_x, argmax[:, :, None], grad_out[:, :, None], axis=2)
    return grad_x
