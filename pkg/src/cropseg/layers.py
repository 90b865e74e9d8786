"""Stateful layers: parameters, cached activations, and backward passes.

Each layer owns ``params`` and same-shaped ``grads`` dictionaries; backward
accumulates into ``grads`` (+=) so batch averaging stays explicit in the
trainer. A forward call caches exactly what its backward needs; calling
backward first raises :class:`~cropseg.errors.StateError`. Caches survive
backward, so repeated backward calls accumulate, and are replaced by the
next forward.
"""

import math

import numpy as np

from . import ops
from .errors import DimensionError, StateError


def he_uniform(rng, shape, fan_in, dtype):
    """He-style uniform init: U(-b, b) with b = sqrt(6 / fan_in)."""
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    """Base layer: parameter/gradient bookkeeping and cache discipline."""

    kind = "Layer"

    def __init__(self, layer_id=""):
        self.layer_id = layer_id
        self.params = {}
        self.grads = {}
        self._cache = None

    def forward(self, x):
        raise NotImplementedError

    def backward(self, grad_out):
        raise NotImplementedError

    def zero_grads(self):
        for g in self.grads.values():
            g[...] = 0

    def _require_cache(self):
        if self._cache is None:
            raise StateError(
                f"{self.kind} layer {self.layer_id!r}: backward called before forward"
            )
        return self._cache

    def _init_grads(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def _check_channels(self, x, expected):
        if x.shape[1] != expected:
            raise DimensionError(
                f"{self.kind} layer {self.layer_id!r}: channel axis has "
                f"{x.shape[1]}, expected {expected}"
            )

    def __repr__(self):
        return f"<{self.kind} {self.layer_id!r}>"


def _same_padding(ksize):
    for k in ksize:
        if k % 2 == 0:
            raise ValueError(f"'same' padding needs odd kernel extents, got {ksize}")
    return tuple(k // 2 for k in ksize)


class Conv3d(Layer):
    kind = "Conv3d"

    def __init__(self, in_channels, out_channels, ksize=(3, 3, 3), stride=(1, 1, 1),
                 padding="same", *, rng, dtype=np.float32, layer_id=""):
        super().__init__(layer_id)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.ksize = tuple(ksize)
        self.stride = tuple(stride)
        self.padding = _same_padding(self.ksize) if padding == "same" else tuple(padding)
        fan_in = in_channels * int(np.prod(self.ksize))
        self.params = {
            "weight": he_uniform(rng, (out_channels, in_channels) + self.ksize, fan_in, dtype),
            "bias": np.zeros(out_channels, dtype=dtype),
        }
        self._init_grads()

    def forward(self, x):
        self._check_channels(x, self.in_channels)
        self._cache = x
        return ops.conv3d_forward(x, self.params["weight"], self.params["bias"],
                                  self.stride, self.padding)

    def backward(self, grad_out):
        x = self._require_cache()
        gx, gk, gb = ops.conv3d_backward(x, self.params["weight"], grad_out,
                                         self.stride, self.padding)
        self.grads["weight"] += gk
        self.grads["bias"] += gb
        return gx


class Conv2d(Layer):
    """2D convolution on (N,C,H,W) maps, realized by the 3D kernels with a
    singleton time axis so both share one verified code path."""

    kind = "Conv2d"

    def __init__(self, in_channels, out_channels, ksize=(3, 3), stride=(1, 1),
                 padding="same", *, rng, dtype=np.float32, layer_id=""):
        super().__init__(layer_id)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.ksize = tuple(ksize)
        self.stride = tuple(stride)
        self.padding = _same_padding(self.ksize) if padding == "same" else tuple(padding)
        fan_in = in_channels * int(np.prod(self.ksize))
        self.params = {
            "weight": he_uniform(rng, (out_channels, in_channels) + self.ksize, fan_in, dtype),
            "bias": np.zeros(out_channels, dtype=dtype),
        }
        self._init_grads()

    def forward(self, x):
        if x.ndim != 4:
            raise DimensionError(
                f"Conv2d layer {self.layer_id!r}: expected a rank-4 map, got rank {x.ndim}"
            )
        self._check_channels(x, self.in_channels)
        self._cache = x
        w3 = self.params["weight"][:, :, None]
        out = ops.conv3d_forward(x[:, :, None], w3, self.params["bias"],
                                 (1,) + self.stride, (0,) + self.padding)
        return out[:, :, 0]

    def backward(self, grad_out):
        x = self._require_cache()
        w3 = self.params["weight"][:, :, None]
        gx, gk, gb = ops.conv3d_backward(x[:, :, None], w3, grad_out[:, :, None],
                                         (1,) + self.stride, (0,) + self.padding)
        self.grads["weight"] += gk[:, :, 0]
        self.grads["bias"] += gb
        return gx[:, :, 0]


class ReLU(Layer):
    kind = "ReLU"

    def forward(self, x):
        self._cache = x
        return ops.relu(x)

    def backward(self, grad_out):
        return ops.relu_backward(self._require_cache(), grad_out)


class MaxPool3d(Layer):
    kind = "MaxPool3d"

    def __init__(self, window=(2, 2, 2), stride=None, *, layer_id=""):
        super().__init__(layer_id)
        self.window = tuple(window)
        self.stride = self.window if stride is None else tuple(stride)

    def forward(self, x):
        out, argmax = ops.maxpool3d_forward(x, self.window, self.stride)
        self._cache = (x.shape, argmax)
        return out

    def backward(self, grad_out):
        in_shape, argmax = self._require_cache()
        return ops.maxpool3d_backward(grad_out, argmax, in_shape)


class Upsample2d(Layer):
    kind = "Upsample2d"

    def __init__(self, factor=2, *, layer_id=""):
        super().__init__(layer_id)
        if int(factor) < 1:
            raise ValueError(f"upsample factor must be >= 1, got {factor}")
        self.factor = int(factor)

    def forward(self, x):
        self._cache = x.shape
        return ops.upsample2d_nearest(x, self.factor)

    def backward(self, grad_out):
        self._require_cache()
        return ops.upsample2d_backward(grad_out, self.factor)


class ConcatSkip(Layer):
    """Channel concatenation of the decoder path with an encoder skip.

    forward takes (x, skip); backward returns (grad_x, grad_skip).
    """

    kind = "ConcatSkip"

    def forward(self, x, skip):
        out = ops.concat_channels(x, skip)
        self._cache = x.shape[1]
        return out

    def backward(self, grad_out):
        channels_x = self._require_cache()
        return ops.concat_channels_backward(grad_out, channels_x)


class TemporalCollapse(Layer):
    """Collapse the time axis to a single map, per pixel and channel.

    ``mode="max"`` keeps the peak response (seasonal peaks are the
    discriminative signal); ``mode="mean"`` averages, which spreads
    gradients over every time step.
    """

    kind = "TemporalCollapse"

    def __init__(self, mode="max", *, layer_id=""):
        super().__init__(layer_id)
        if mode not in ("max", "mean"):
            raise ValueError(f"collapse mode must be 'max' or 'mean', got {mode!r}")
        self.mode = mode

    def forward(self, x):
        if self.mode == "max":
            out, argmax = ops.temporal_max(x)
            self._cache = ("max", x.shape[2], argmax)
        else:
            out = x.mean(axis=2)
            self._cache = ("mean", x.shape[2], None)
        return out

    def backward(self, grad_out):
        mode, time_steps, argmax = self._require_cache()
        if mode == "max":
            return ops.temporal_max_backward(grad_out, argmax, time_steps)
        return np.repeat(grad_out[:, :, None] / time_steps, time_steps, axis=2)


class SoftmaxHead(Layer):
    """Per-pixel softmax over the class/channel axis."""

    kind = "SoftmaxHead"

    def forward(self, x):
        probs = ops.softmax_channels(x)
        self._cache = probs
        return probs

    def backward(self, grad_out):
        return ops.softmax_channels_backward(self._require_cache(), grad_out)


def param_entries(named_layers):
    """Flatten [(layer_id, layer), ...] into (layer_id, name, array) triples.

    Ordering follows the given layer order then parameter insertion order,
    so it is stable across runs for a fixed architecture.
    """
    out = []
    for layer_id, layer in named_layers:
        for name, arr in layer.params.items():
            out.append((layer_id, name, arr))
    return out


def grad_entries(named_layers):
    """Gradient triples congruent with :func:`param_entries`."""
    out = []
    for layer_id, layer in named_layers:
        for name, arr in layer.grads.items():
            out.append((layer_id, name, arr))
    return out


def zero_grads(named_layers):
    for _, layer in named_layers:
        layer.zero_grads()
