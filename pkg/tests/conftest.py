import numpy as np

from cropseg import backend


def lattice(rng, shape, scale=1.0):
    """Distinct, well-separated values in (-scale, scale).

    Adjacent values differ by at least 2*scale/size and none sits within
    scale/size of zero, so finite differences with eps=1e-5 never straddle
    a max/relu kink on these inputs.
    """
    n = int(np.prod(shape))
    vals = ((rng.permutation(n) + 0.5) / n * 2.0 - 1.0) * scale
    return vals.reshape(shape)


def rel_error(a, b):
    """Global relative error: ||a-b||_inf scaled by the larger magnitude."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / denom)


def kernel_backends():
    """Kernel modules available in this environment, compiled path first."""
    mods = []
    try:
        mods.append(backend.load_kernels("numba"))
    except ImportError:
        pass
    mods.append(backend.load_kernels("numpy"))
    return mods
