"""Crop-type segmentation from multi-temporal image cubes.

A self-contained toolkit: dense 3D convolution/pooling kernels with
hand-derived backward passes, an encoder-decoder segmentation network, an
overlap (soft-IOU) training loss next to a cross-entropy baseline, SGD with
momentum, five-fold ensembling, the raster preprocessing pipeline, and
agreement metrics. See the README for the CLI entry points.
"""

from .backend import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
