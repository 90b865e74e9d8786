"""Kernel backend selection.

The hot kernels (3D convolution, max pooling, temporal gap interpolation)
exist in two interchangeable implementations: numba-compiled loops in
``kernels_numba`` and vectorized numpy in ``kernels_numpy``. The
environment variable ``CROPSEG_BACKEND`` picks one:

    CROPSEG_BACKEND=numba   require the compiled path (error if numba missing)
    CROPSEG_BACKEND=numpy   force the pure-numpy fallback
    CROPSEG_BACKEND=auto    compiled path when numba imports, else numpy

Unset behaves like ``auto``. Both paths satisfy the same contracts and are
parity-tested against each other; results are deterministic within either.
"""

import os

ENV_VAR = "CROPSEG_BACKEND"

_CHOICES = ("auto", "numba", "numpy")


def _numba_available():
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


def resolve_backend(requested=None):
    """Return ``"numba"`` or ``"numpy"`` for a requested backend name.

    ``requested=None`` reads the environment variable. An explicit request
    for numba raises ImportError when numba is not installed; ``auto``
    silently falls back to numpy.
    """
    name = requested if requested is not None else os.environ.get(ENV_VAR, "auto")
    name = name.strip().lower()
    if name not in _CHOICES:
        raise ValueError(
            f"unrecognized backend {name!r} (from {ENV_VAR}); expected one of {_CHOICES}"
        )
    if name == "numpy":
        return "numpy"
    if name == "numba":
        if not _numba_available():
            raise ImportError(f"{ENV_VAR}=numba but numba is not importable")
        return "numba"
    return "numba" if _numba_available() else "numpy"


def load_kernels(name=None):
    """Import and return the kernel module for the given backend name."""
    resolved = resolve_backend(name)
    if resolved == "numba":
        from . import kernels_numba

        return kernels_numba
    from . import kernels_numpy

    return kernels_numpy


#: Backend chosen at import time from the environment.
BACKEND = resolve_backend()
