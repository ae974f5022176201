"""Kernel backend selection.

Two interchangeable backends provide the hot array primitives used by the
tensor engine: the compiled Cython extension (``_speedups``) and the pure
numpy reference (``numpy_backend``). The compiled one is picked at import
when available; ``TOUCHSTEER_KERNELS=python|cython`` forces a choice, and
``use_backend`` switches at runtime (used by the parity tests and the
benchmark).
"""

import os

from . import numpy_backend

try:
    from . import _speedups
except ImportError:
    _speedups = None

_BACKENDS = {"python": numpy_backend}
if _speedups is not None:
    _BACKENDS["cython"] = _speedups

active = numpy_backend


def available_backends():
    return sorted(_BACKENDS)


def use_backend(name):
    """Switch the active kernel backend; returns the previous name."""
    global active
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; have {available_backends()}")
    prev = active.NAME
    active = _BACKENDS[name]
    return prev


def backend_name():
    return active.NAME


_requested = os.environ.get("TOUCHSTEER_KERNELS")
if _requested:
    use_backend(_requested)
elif _speedups is not None:
    use_backend("cython")
