"""Encoder-decoder segmentation network over multi-temporal cubes.

The encoder runs two same-padded 3x3x3 convolutions plus ReLU per level,
with 2x2x2 max pooling between levels, so a (bands, T, S, S) cube shrinks
along space and time together. Each level's feature volume is collapsed
over time by a per-pixel max and handed to the decoder as a skip map. The
decoder is two-dimensional: nearest-neighbor x2 upsampling, skip
concatenation, and two same-padded 3x3 convolutions per stage, finished by
a 1x1 convolution to the class count and a per-pixel softmax. Forward maps
(N, bands, T, S, S) to class probabilities (N, classes, S, S).

Weights serialize as a raw little-endian float32 blob (parameters
concatenated in a fixed order) plus a text key-value manifest recording the
architecture and each parameter's name, shape, and byte offset.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .errors import ConfigError, DimensionError, FormatError, StateError

WEIGHTS_FORMAT = "cropseg-weights-v1"


@dataclass(frozen=True)
class ArchitectureConfig:
    levels: int = 4
    base_channels: int = 16
    channel_schedule: tuple = ()
    input_bands: int = 6
    time_steps: int = 23
    num_classes: int = 3
    tile_size: int = 128
    temporal_collapse: str = "max"

    def __post_init__(self):
        if not self.channel_schedule:
            object.__setattr__(
                self,
                "channel_schedule",
                tuple(self.base_channels << i for i in range(self.levels)),
            )
        object.__setattr__(self, "channel_schedule", tuple(int(c) for c in self.channel_schedule))

    def validate(self):
        if self.levels < 2:
            raise ConfigError(f"levels must be >= 2, got {self.levels}")
        if len(self.channel_schedule) != self.levels:
            raise ConfigError(
                f"channel_schedule length {len(self.channel_schedule)} != levels {self.levels}"
            )
        if any(c < 1 for c in self.channel_schedule):
            raise ConfigError(f"channel_schedule must be positive, got {self.channel_schedule}")
        divisor = 1 << (self.levels - 1)
        if self.tile_size % divisor:
            raise ConfigError(
                f"tile_size {self.tile_size} not divisible by {divisor} "
                f"(2^(levels-1) for {self.levels} levels)"
            )
        if self.input_bands < 1 or self.num_classes < 1:
            raise ConfigError("input_bands and num_classes must be >= 1")
        if self.temporal_collapse not in ("max", "mean"):
            raise ConfigError(
                f"temporal_collapse must be 'max' or 'mean', got {self.temporal_collapse!r}"
            )
        for t in self.temporal_trace()[:-1]:
            if t < 2:
                raise ConfigError(
                    f"time_steps {self.time_steps} too short to pool across "
                    f"{self.levels} levels (trace {self.temporal_trace()})"
                )
        return self

    def spatial_trace(self):
        """Per-level spatial extent: halved by each 2x2x2 pool."""
        out = [self.tile_size]
        for _ in range(self.levels - 1):
            out.append((out[-1] - 2) // 2 + 1)
        return out

    def temporal_trace(self):
        """Per-level temporal extent under the same pooling."""
        out = [self.time_steps]
        for _ in range(self.levels - 1):
            out.append((out[-1] - 2) // 2 + 1)
        return out


@dataclass
class NetworkModel:
    config: ArchitectureConfig
    encoder_levels: list
    pools: list
    collapses: list
    decoder_stages: list
    head_conv: L.Conv2d
    head_softmax: L.SoftmaxHead
    dtype: object = np.float32
    _forwarded: bool = field(default=False, repr=False)

    # -- construction ------------------------------------------------------

    @property
    def named_layers(self):
        """All layers as (layer_id, layer), in deterministic build order."""
        out = []
        for i, level in enumerate(self.encoder_levels):
            for j, lay in enumerate(level):
                out.append((f"enc{i}.{lay.kind.lower()}{j}", lay))
            if i < len(self.pools):
                out.append((f"enc{i}.pool", self.pools[i]))
            out.append((f"skip{i}.collapse", self.collapses[i]))
        for j, stage in enumerate(self.decoder_stages):
            for k, lay in enumerate(stage):
                out.append((f"dec{j}.{lay.kind.lower()}{k}", lay))
        out.append(("head.conv", self.head_conv))
        out.append(("head.softmax", self.head_softmax))
        return out

    def param_set(self):
        return L.param_entries(self.named_layers)

    def grad_set(self):
        return L.grad_entries(self.named_layers)

    def num_params(self):
        return sum(int(arr.size) for _, _, arr in self.param_set())

    def zero_grads(self):
        L.zero_grads(self.named_layers)

    # -- execution ---------------------------------------------------------

    def _check_input(self, cube):
        cfg = self.config
        expected = (cfg.input_bands, cfg.time_steps, cfg.tile_size, cfg.tile_size)
        if cube.ndim != 5:
            raise DimensionError(f"input cube must be rank 5, got rank {cube.ndim}")
        got = cube.shape[1:]
        names = ("band", "time", "row", "col")
        for name, e, g in zip(names, expected, got):
            if e != g:
                raise DimensionError(f"{name} axis mismatch: got {g}, expected {e}")

    def forward(self, cube):
        """Class probabilities (N, classes, S, S) for a (N, bands, T, S, S) cube."""
        self._check_input(cube)
        cfg = self.config
        skips = []
        x = cube
        for i in range(cfg.levels):
            for lay in self.encoder_levels[i]:
                x = lay.forward(x)
            skips.append(self.collapses[i].forward(x))
            if i < cfg.levels - 1:
                x = self.pools[i].forward(x)
        d = skips[-1]
        for j, stage in enumerate(self.decoder_stages):
            skip = skips[cfg.levels - 2 - j]
            upsample, concat, conv1, relu1, conv2, relu2 = stage
            d = upsample.forward(d)
            d = concat.forward(d, skip)
            d = relu1.forward(conv1.forward(d))
            d = relu2.forward(conv2.forward(d))
        logits = self.head_conv.forward(d)
        probs = self.head_softmax.forward(logits)
        self._forwarded = True
        return probs

    def backward(self, grad_probs):
        """Populate parameter gradients from a gradient on the probabilities.

        Returns the gradient with respect to the input cube.
        """
        if not self._forwarded:
            raise StateError("backward called before forward")
        cfg = self.config
        g = self.head_softmax.backward(grad_probs)
        g = self.head_conv.backward(g)
        skip_grads = [None] * cfg.levels
        for j in range(len(self.decoder_stages) - 1, -1, -1):
            upsample, concat, conv1, relu1, conv2, relu2 = self.decoder_stages[j]
            g = conv2.backward(relu2.backward(g))
            g = conv1.backward(relu1.backward(g))
            g, g_skip = concat.backward(g)
            skip_grads[cfg.levels - 2 - j] = g_skip
            g = upsample.backward(g)
        skip_grads[cfg.levels - 1] = g
        g_down = None
        for i in range(cfg.levels - 1, -1, -1):
            g_level = self.collapses[i].backward(skip_grads[i])
            if i < cfg.levels - 1:
                g_level = g_level + self.pools[i].backward(g_down)
            for lay in reversed(self.encoder_levels[i]):
                g_level = lay.backward(g_level)
            g_down = g_level
        return g_down


def build(config, seed=0, dtype=np.float32):
    """Construct a model with He-uniform conv weights from a seeded generator."""
    cfg = config.validate()
    rng = np.random.default_rng(seed)
    enc = []
    pools = []
    collapses = []
    in_ch = cfg.input_bands
    for i, out_ch in enumerate(cfg.channel_schedule):
        enc.append([
            L.Conv3d(in_ch, out_ch, rng=rng, dtype=dtype, layer_id=f"enc{i}.conv0"),
            L.ReLU(layer_id=f"enc{i}.relu0"),
            L.Conv3d(out_ch, out_ch, rng=rng, dtype=dtype, layer_id=f"enc{i}.conv1"),
            L.ReLU(layer_id=f"enc{i}.relu1"),
        ])
        if i < cfg.levels - 1:
            pools.append(L.MaxPool3d(layer_id=f"enc{i}.pool"))
        collapses.append(L.TemporalCollapse(cfg.temporal_collapse,
                                            layer_id=f"skip{i}.collapse"))
        in_ch = out_ch
    dec = []
    d_ch = cfg.channel_schedule[-1]
    for j in range(cfg.levels - 1):
        skip_ch = cfg.channel_schedule[cfg.levels - 2 - j]
        out_ch = skip_ch
        dec.append([
            L.Upsample2d(2, layer_id=f"dec{j}.up"),
            L.ConcatSkip(layer_id=f"dec{j}.concat"),
            L.Conv2d(d_ch + skip_ch, out_ch, rng=rng, dtype=dtype, layer_id=f"dec{j}.conv0"),
            L.ReLU(layer_id=f"dec{j}.relu0"),
            L.Conv2d(out_ch, out_ch, rng=rng, dtype=dtype, layer_id=f"dec{j}.conv1"),
            L.ReLU(layer_id=f"dec{j}.relu1"),
        ])
        d_ch = out_ch
    head_conv = L.Conv2d(d_ch, cfg.num_classes, ksize=(1, 1), rng=rng, dtype=dtype,
                         layer_id="head.conv")
    return NetworkModel(
        config=cfg,
        encoder_levels=enc,
        pools=pools,
        collapses=collapses,
        decoder_stages=dec,
        head_conv=head_conv,
        head_softmax=L.SoftmaxHead(layer_id="head.softmax"),
        dtype=dtype,
    )


# -- serialization ----------------------------------------------------------

_CONFIG_KEYS = ("levels", "base_channels", "channel_schedule", "input_bands",
                "time_steps", "num_classes", "tile_size", "temporal_collapse")


def _config_to_lines(cfg):
    lines = []
    for key in _CONFIG_KEYS:
        v = getattr(cfg, key)
        if key == "channel_schedule":
            v = ",".join(str(c) for c in v)
        lines.append(f"{key} {v}")
    return lines


def _config_from_fields(fields):
    try:
        return ArchitectureConfig(
            levels=int(fields["levels"]),
            base_channels=int(fields["base_channels"]),
            channel_schedule=tuple(int(c) for c in fields["channel_schedule"].split(",")),
            input_bands=int(fields["input_bands"]),
            time_steps=int(fields["time_steps"]),
            num_classes=int(fields["num_classes"]),
            tile_size=int(fields["tile_size"]),
            temporal_collapse=fields.get("temporal_collapse", "max"),
        )
    except (KeyError, ValueError) as e:
        raise FormatError(f"weights manifest missing or bad config field: {e}") from e


def manifest_path(weights_path):
    return str(weights_path) + ".manifest"


def save_weights(model, path):
    """Write the float32 parameter blob and its sidecar manifest."""
    entries = model.param_set()
    lines = [f"format {WEIGHTS_FORMAT}"] + _config_to_lines(model.config)
    offset = 0
    blobs = []
    for layer_id, name, arr in entries:
        raw = np.ascontiguousarray(arr, dtype="<f4")
        shape = ",".join(str(s) for s in arr.shape)
        lines.append(f"param {layer_id} {name} {shape} {offset}")
        blobs.append(raw.tobytes())
        offset += len(blobs[-1])
    lines.append(f"total_bytes {offset}")
    with open(path, "wb") as f:
        for b in blobs:
            f.write(b)
    with open(manifest_path(path), "w") as f:
        f.write("\n".join(lines) + "\n")


def load_weights(path, expected_config=None):
    """Rebuild a model from blob + manifest; verify sizes and config."""
    mpath = manifest_path(path)
    if not os.path.exists(mpath):
        raise FormatError(f"missing weights manifest: {mpath}")
    fields = {}
    params = []
    with open(mpath) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            key, _, rest = line.partition(" ")
            if key == "param":
                try:
                    layer_id, name, shape_s, offset_s = rest.split(" ")
                    shape = tuple(int(s) for s in shape_s.split(","))
                    params.append((layer_id, name, shape, int(offset_s)))
                except ValueError as e:
                    raise FormatError(f"bad param line in manifest: {line!r}") from e
            else:
                fields[key] = rest
    if fields.get("format") != WEIGHTS_FORMAT:
        raise FormatError(f"unrecognized weights format {fields.get('format')!r}")
    cfg = _config_from_fields(fields)
    if expected_config is not None and cfg != expected_config:
        raise FormatError(
            f"weights config {cfg} does not match expected {expected_config}"
        )
    try:
        total = int(fields["total_bytes"])
    except (KeyError, ValueError) as e:
        raise FormatError("manifest missing total_bytes") from e
    blob = open(path, "rb").read()
    if len(blob) != total:
        raise FormatError(
            f"weights blob is {len(blob)} bytes, manifest says {total} (truncated?)"
        )
    model = build(cfg, seed=0, dtype=np.float32)
    entries = {(lid, name): arr for lid, name, arr in model.param_set()}
    if len(params) != len(entries):
        raise FormatError(
            f"manifest lists {len(params)} parameters, architecture has {len(entries)}"
        )
    for layer_id, name, shape, offset in params:
        key = (layer_id, name)
        if key not in entries:
            raise FormatError(f"unknown parameter {layer_id}/{name} in manifest")
        arr = entries[key]
        if arr.shape != shape:
            raise FormatError(
                f"parameter {layer_id}/{name}: manifest shape {shape} != model {arr.shape}"
            )
        nbytes = arr.size * 4
        if offset + nbytes > len(blob):
            raise FormatError(f"parameter {layer_id}/{name} overruns the blob")
        arr[...] = np.frombuffer(blob[offset : offset + nbytes], dtype="<f4").reshape(shape)
    return model


def cast_model(model, dtype):
    """Fresh model with parameters cast to dtype (for 64-bit checking)."""
    clone = build(model.config, seed=0, dtype=dtype)
    src = model.param_set()
    dst = clone.param_set()
    for (_, _, a), (_, _, b) in zip(src, dst):
        b[...] = a.astype(dtype)
    return clone
