"""Raster ingestion, preprocessing, tiling, and synthetic dataset generation.

The preprocessing chain mirrors the growing-season protocol the pipeline is
built around: per-pixel validity screening (a pixel must have at least 7
valid observations strictly after day-of-year 135, i.e. May 15), linear
interpolation of each retained pixel's band series onto a fixed 23-step
grid of 7-day intervals from day-of-year 112 (Apr 22) through 266 (Sep 23),
and per-band standardization with statistics pooled over the training
years' valid pixels. Day-of-year arithmetic assumes non-leap calendars.

Classes are indexed 0 = other, 1 = corn, 2 = soybean.

On-disk layout of a processed dataset directory (see the README):

    <root>/<year>/cube.bin     float32 LE, C-order, axes (band,time,row,col)
    <root>/<year>/labels.bin   uint8, (row,col)
    <root>/<year>/mask.bin     uint8 {0 invalid, 1 valid}, (row,col)
    <root>/<year>/manifest     text key-value sidecar

Raw (pre-interpolation) year directories hold observations.bin with axes
(band,obs,row,col), qa.bin (obs,row,col) with 1 marking a valid
observation, labels.bin, and a manifest listing the observation dates.
"""

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import backend
from .errors import ConfigError, DataError, DimensionError, FormatError

_K = backend.load_kernels()

GRID_START_DOY = 112
GRID_STEP_DAYS = 7
GRID_STEPS = 23
GRID_DATES = np.arange(GRID_START_DOY, GRID_START_DOY + GRID_STEP_DAYS * GRID_STEPS,
                       GRID_STEP_DAYS, dtype=np.int64)
VALIDITY_CUTOFF_DOY = 135  # May 15; observations must fall strictly after
MIN_VALID_OBSERVATIONS = 7

BAND_NAMES = ("red", "green", "blue", "swir1", "swir2", "nir")
CLASS_NAMES = ("other", "corn", "soybean")

DATASET_FORMAT = "cropseg-dataset-v1"
RAW_FORMAT = "cropseg-raw-v1"


@dataclass
class SceneStack:
    """Raw multi-date observations for one year over one raster."""

    observations: np.ndarray  # (B, K, H, W) reflectance
    dates: np.ndarray         # (K,) day-of-year, strictly increasing
    qa: np.ndarray            # (K, H, W) 1 = valid observation
    band_names: tuple = BAND_NAMES

    def __post_init__(self):
        self.dates = np.asarray(self.dates, dtype=np.int64)
        if self.observations.ndim != 4:
            raise DimensionError("observations must be rank 4 (band,obs,row,col)")
        b, k, h, w = self.observations.shape
        if self.dates.shape != (k,):
            raise DimensionError(
                f"dates length {self.dates.shape} != observation count {k}"
            )
        if self.qa.shape != (k, h, w):
            raise DimensionError(f"qa shape {self.qa.shape} != {(k, h, w)}")
        if k > 1 and not (np.diff(self.dates) > 0).all():
            raise DataError("observation dates must be strictly increasing")


@dataclass
class RegularCube:
    """Gap-filled cube on the fixed 7-day grid plus its validity mask."""

    values: np.ndarray        # (B, GRID_STEPS, H, W)
    pixel_valid: np.ndarray   # (H, W) bool
    band_names: tuple = BAND_NAMES
    dates: np.ndarray = field(default_factory=lambda: GRID_DATES.copy())


@dataclass
class NormStats:
    mean: np.ndarray  # (B,)
    std: np.ndarray   # (B,)
    band_names: tuple = BAND_NAMES


@dataclass
class TileExample:
    """One training/inference example cut from a year raster."""

    cube: np.ndarray    # (B, T, tile, tile) float32
    labels: np.ndarray  # (tile, tile) uint8
    valid: np.ndarray   # (tile, tile) bool
    year: int
    row0: int
    col0: int

    @property
    def tile_id(self):
        return (self.year, self.row0, self.col0)


def pixel_validity(qa, dates, *, cutoff_doy=VALIDITY_CUTOFF_DOY,
                   min_valid=MIN_VALID_OBSERVATIONS):
    """Pixels with >= min_valid valid observations strictly after the cutoff.

    Monotone in the QA flags: turning an observation valid can only keep or
    grow the valid set.
    """
    dates = np.asarray(dates, dtype=np.int64)
    qa = np.asarray(qa)
    if qa.ndim != 3 or qa.shape[0] != dates.shape[0]:
        raise DimensionError(
            f"qa shape {qa.shape} not aligned with {dates.shape[0]} dates"
        )
    late = dates > cutoff_doy
    if not late.any():
        raise ConfigError(
            f"no observations after day-of-year {cutoff_doy} in the stack"
        )
    counts = (qa[late] != 0).sum(axis=0)
    return counts >= min_valid


def interpolate_to_grid(stack, pixel_valid=None, grid=GRID_DATES):
    """Per-pixel piecewise-linear interpolation onto the 23-step grid.

    Before the first valid observation the first value is held; after the
    last, the last. A retained (valid) pixel must have at least one valid
    observation; that is guaranteed by the validity filter and enforced
    here.
    """
    grid = np.asarray(grid, dtype=np.int64)
    valid = stack.qa != 0
    any_valid = valid.any(axis=0)
    if pixel_valid is None:
        pixel_valid = pixel_validity(stack.qa, stack.dates)
    elif (pixel_valid & ~any_valid).any():
        raise RuntimeError(
            "internal error: retained pixel with zero valid observations"
        )
    values = _K.interp_to_grid(stack.observations, stack.dates, valid, grid)
    return RegularCube(values=values, pixel_valid=np.asarray(pixel_valid, dtype=bool),
                       band_names=stack.band_names, dates=grid.copy())


def compute_norm_stats(cubes, masks=None):
    """Pooled per-band mean/std over valid pixels and every time step.

    ``cubes`` are RegularCubes or bare (B,T,H,W) arrays; ``masks`` overrides
    the cubes' own validity masks. Population std (ddof 0).
    """
    cubes = list(cubes)
    if not cubes:
        raise ConfigError("no cubes to compute normalization statistics from")
    first = cubes[0].values if isinstance(cubes[0], RegularCube) else cubes[0]
    b = first.shape[0]
    names = cubes[0].band_names if isinstance(cubes[0], RegularCube) else BAND_NAMES
    total = 0
    s1 = np.zeros(b, dtype=np.float64)
    s2 = np.zeros(b, dtype=np.float64)
    for i, cube in enumerate(cubes):
        values = cube.values if isinstance(cube, RegularCube) else cube
        mask = None
        if masks is not None:
            mask = np.asarray(masks[i], dtype=bool)
        elif isinstance(cube, RegularCube):
            mask = cube.pixel_valid
        sel = values if mask is None else values[:, :, mask]
        flat = sel.reshape(b, -1).astype(np.float64)
        total += flat.shape[1]
        s1 += flat.sum(axis=1)
        s2 += (flat**2).sum(axis=1)
    if total == 0:
        raise ConfigError("no valid pixels available for normalization statistics")
    mean = s1 / total
    var = s2 / total - mean**2
    std = np.sqrt(np.maximum(var, 0.0))
    for i, s in enumerate(std):
        if s <= 0:
            raise ConfigError(f"band {names[i]!r} has zero variance")
    return NormStats(mean=mean, std=std, band_names=tuple(names))


def apply_norm(values, stats):
    """Standardize per band: (x - mean) / std."""
    _check_band_count(values, stats)
    shape = (-1,) + (1,) * (values.ndim - 1)
    out = (values - stats.mean.reshape(shape)) / stats.std.reshape(shape)
    return out.astype(values.dtype, copy=False)


def invert_norm(values, stats):
    """Undo :func:`apply_norm`."""
    _check_band_count(values, stats)
    shape = (-1,) + (1,) * (values.ndim - 1)
    out = values * stats.std.reshape(shape) + stats.mean.reshape(shape)
    return out.astype(values.dtype, copy=False)


def _check_band_count(values, stats):
    if values.shape[0] != stats.mean.shape[0]:
        raise DimensionError(
            f"band axis has {values.shape[0]} entries, stats cover {stats.mean.shape[0]}"
        )


def tile_raster(values, labels, valid, tile_size, year):
    """Cut a (B,T,H,W) raster into non-overlapping zero-padded tiles.

    The tile grid covers the raster with ceil(H/tile) x ceil(W/tile) tiles;
    padding pixels are zero-valued, label 0, and marked invalid so they
    never contribute to losses or metrics.
    """
    if tile_size < 1:
        raise ValueError(f"tile_size must be >= 1, got {tile_size}")
    b, t, h, w = values.shape
    if h < 1 or w < 1:
        raise ValueError("raster must be at least one pixel")
    if labels.shape != (h, w) or valid.shape != (h, w):
        raise DimensionError(
            f"labels {labels.shape} / mask {valid.shape} do not match raster ({h}, {w})"
        )
    out = []
    for r0 in range(0, h, tile_size):
        for c0 in range(0, w, tile_size):
            cube = np.zeros((b, t, tile_size, tile_size), dtype=np.float32)
            lab = np.zeros((tile_size, tile_size), dtype=np.uint8)
            msk = np.zeros((tile_size, tile_size), dtype=bool)
            rh = min(tile_size, h - r0)
            cw = min(tile_size, w - c0)
            cube[:, :, :rh, :cw] = values[:, :, r0 : r0 + rh, c0 : c0 + cw]
            lab[:rh, :cw] = labels[r0 : r0 + rh, c0 : c0 + cw]
            msk[:rh, :cw] = valid[r0 : r0 + rh, c0 : c0 + cw]
            out.append(TileExample(cube=cube, labels=lab, valid=msk,
                                   year=year, row0=r0, col0=c0))
    return out


def tile_grid_shape(h, w, tile_size):
    return math.ceil(h / tile_size), math.ceil(w / tile_size)


def reassemble_tiles(tiles, full_shape):
    """Stitch per-tile arrays back into a raster, cropping the padding.

    ``tiles`` is a list of ((row0, col0), array) where each array's last two
    axes are the tile rows/cols; leading axes are preserved.
    """
    h, w = full_shape
    first = tiles[0][1]
    out = np.zeros(first.shape[:-2] + (h, w), dtype=first.dtype)
    for (r0, c0), arr in tiles:
        rh = min(arr.shape[-2], h - r0)
        cw = min(arr.shape[-1], w - c0)
        out[..., r0 : r0 + rh, c0 : c0 + cw] = arr[..., :rh, :cw]
    return out


# -- synthetic desk-scale data ----------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    height: int = 64
    width: int = 64
    bands: int = 6
    time_steps: int = GRID_STEPS
    classes: int = 3
    noise: float = 0.1
    invalid_fraction: float = 0.05
    field_size: int = 8


def class_signatures(classes, bands, time_steps):
    """Distinct per-class seasonal reflectance curves, one per band.

    Class 0 plays the flat "other" background; crop classes get bumps that
    peak at staggered times with band-dependent amplitude, loosely shaped
    like greenness curves. Deterministic by construction.
    """
    t = np.linspace(0.0, 1.0, time_steps)
    sig = np.zeros((classes, bands, time_steps), dtype=np.float64)
    for c in range(classes):
        for b in range(bands):
            base = 0.15 + 0.04 * b
            if c == 0:
                sig[c, b] = base + 0.05 * np.sin(2 * np.pi * (t + 0.13 * b))
            else:
                peak = 0.30 + 0.35 * (c - 1) / max(1, classes - 2)
                width = 0.12 + 0.02 * ((b + c) % 3)
                amp = 0.45 + 0.10 * np.cos(1.7 * b + 0.9 * c)
                sig[c, b] = base + amp * np.exp(-((t - peak) ** 2) / (2 * width**2))
    return sig


def synthesize_dataset(spec, seed):
    """Seeded synthetic year: blocky class fields, per-class temporal
    signatures plus Gaussian noise, and a sprinkling of invalid pixels.

    Returns (values (B,T,H,W) float32, labels (H,W) uint8, valid (H,W) bool,
    signatures (C,B,T)).
    """
    rng = np.random.default_rng(seed)
    h, w = spec.height, spec.width
    gh = math.ceil(h / spec.field_size)
    gw = math.ceil(w / spec.field_size)
    fields = rng.integers(0, spec.classes, size=(gh, gw))
    labels = np.repeat(np.repeat(fields, spec.field_size, 0), spec.field_size, 1)
    labels = labels[:h, :w].astype(np.uint8)
    sig = class_signatures(spec.classes, spec.bands, spec.time_steps)
    values = sig[labels]                     # (H, W, B, T)
    values = np.moveaxis(values, (2, 3), (0, 1)).copy()
    if spec.noise > 0:
        values += rng.normal(0.0, spec.noise, size=values.shape)
    valid = rng.random((h, w)) >= spec.invalid_fraction
    return values.astype(np.float32), labels, valid, sig


# -- dataset directory IO ----------------------------------------------------

def _write_manifest(path, fields):
    with open(path, "w") as f:
        for k, v in fields.items():
            f.write(f"{k} {v}\n")


def _read_manifest(path):
    if not os.path.exists(path):
        raise FormatError(f"missing manifest: {path}")
    fields = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                k, _, v = line.partition(" ")
                fields[k] = v
    return fields


def _fmt_floats(arr):
    return ",".join(f"{x:.9g}" for x in arr)


def write_year_dir(root, year, values, labels, valid, *, band_names=BAND_NAMES,
                   dates=GRID_DATES, stats=None, extra=None):
    """Write one processed year (cube/labels/mask plus manifest)."""
    ydir = os.path.join(str(root), str(year))
    os.makedirs(ydir, exist_ok=True)
    b, t, h, w = values.shape
    values.astype("<f4").tofile(os.path.join(ydir, "cube.bin"))
    np.asarray(labels, dtype=np.uint8).tofile(os.path.join(ydir, "labels.bin"))
    np.asarray(valid, dtype=np.uint8).tofile(os.path.join(ydir, "mask.bin"))
    fields = {
        "format": DATASET_FORMAT,
        "year": year,
        "shape": f"{b},{t},{h},{w}",
        "axes": "band,time,row,col",
        "dtype": "float32",
        "bands": ",".join(band_names),
        "dates": ",".join(str(int(d)) for d in dates),
    }
    if stats is not None:
        fields["norm_mean"] = _fmt_floats(stats.mean)
        fields["norm_std"] = _fmt_floats(stats.std)
    if extra:
        fields.update(extra)
    _write_manifest(os.path.join(ydir, "manifest"), fields)
    return ydir


def read_year_dir(ydir):
    """Read one processed year; returns (values, labels, valid, manifest)."""
    manifest = _read_manifest(os.path.join(ydir, "manifest"))
    if manifest.get("format") != DATASET_FORMAT:
        raise FormatError(
            f"{ydir}: unrecognized dataset format {manifest.get('format')!r}"
        )
    try:
        shape = tuple(int(s) for s in manifest["shape"].split(","))
    except (KeyError, ValueError) as e:
        raise FormatError(f"{ydir}: bad or missing shape in manifest") from e
    b, t, h, w = shape
    values = _read_raster(os.path.join(ydir, "cube.bin"), "<f4", shape)
    labels = _read_raster(os.path.join(ydir, "labels.bin"), np.uint8, (h, w))
    valid = _read_raster(os.path.join(ydir, "mask.bin"), np.uint8, (h, w)).astype(bool)
    return values, labels, valid, manifest


def _read_raster(path, dtype, shape):
    if not os.path.exists(path):
        raise FormatError(f"missing raster file: {path}")
    data = np.fromfile(path, dtype=dtype)
    expected = int(np.prod(shape))
    if data.size != expected:
        raise FormatError(
            f"{path}: has {data.size} elements, manifest shape {shape} needs {expected}"
        )
    return data.reshape(shape)


def list_year_dirs(root):
    """Year subdirectories (sorted) of a dataset root."""
    root = str(root)
    out = []
    for name in sorted(os.listdir(root)):
        full = os.path.join(root, name)
        if os.path.isdir(full) and os.path.exists(os.path.join(full, "manifest")):
            out.append(full)
    if not out:
        raise FormatError(f"no year directories with manifests under {root}")
    return out


def stats_from_manifest(manifest):
    """NormStats recorded in a dataset manifest, or None if absent."""
    if "norm_mean" not in manifest or "norm_std" not in manifest:
        return None
    mean = np.array([float(x) for x in manifest["norm_mean"].split(",")])
    std = np.array([float(x) for x in manifest["norm_std"].split(",")])
    bands = tuple(manifest.get("bands", "").split(",")) or BAND_NAMES
    return NormStats(mean=mean, std=std, band_names=bands)


def write_raw_year_dir(root, year, observations, dates, qa, labels,
                       *, band_names=BAND_NAMES):
    """Write one raw (pre-interpolation) year directory."""
    ydir = os.path.join(str(root), str(year))
    os.makedirs(ydir, exist_ok=True)
    b, k, h, w = observations.shape
    observations.astype("<f4").tofile(os.path.join(ydir, "observations.bin"))
    np.asarray(qa, dtype=np.uint8).tofile(os.path.join(ydir, "qa.bin"))
    np.asarray(labels, dtype=np.uint8).tofile(os.path.join(ydir, "labels.bin"))
    _write_manifest(os.path.join(ydir, "manifest"), {
        "format": RAW_FORMAT,
        "year": year,
        "shape": f"{b},{k},{h},{w}",
        "axes": "band,obs,row,col",
        "dtype": "float32",
        "bands": ",".join(band_names),
        "dates": ",".join(str(int(d)) for d in dates),
    })
    return ydir


def read_raw_year_dir(ydir):
    """Read a raw year directory into (SceneStack, labels, year)."""
    manifest = _read_manifest(os.path.join(ydir, "manifest"))
    if manifest.get("format") != RAW_FORMAT:
        raise FormatError(f"{ydir}: unrecognized raw format {manifest.get('format')!r}")
    try:
        shape = tuple(int(s) for s in manifest["shape"].split(","))
        dates = np.array([int(d) for d in manifest["dates"].split(",")], dtype=np.int64)
        year = int(manifest["year"])
    except (KeyError, ValueError) as e:
        raise FormatError(f"{ydir}: bad raw manifest field: {e}") from e
    b, k, h, w = shape
    obs = _read_raster(os.path.join(ydir, "observations.bin"), "<f4", shape)
    qa = _read_raster(os.path.join(ydir, "qa.bin"), np.uint8, (k, h, w))
    labels = _read_raster(os.path.join(ydir, "labels.bin"), np.uint8, (h, w))
    bands = tuple(manifest.get("bands", "").split(",")) if manifest.get("bands") else BAND_NAMES
    stack = SceneStack(observations=obs, dates=dates, qa=qa, band_names=bands)
    return stack, labels, year
