"""Kernel backend selection.

The compiled extension is preferred when importable; otherwise the numpy
implementation takes over with identical semantics.  Set
``PROTOINFOMAX_KERNEL=numpy`` to force the fallback (``cython`` to demand
the extension, raising if it is missing).
"""

import os

from . import gru_numpy

_requested = os.environ.get("PROTOINFOMAX_KERNEL", "auto")
_backend = "numpy"
gru_forward = gru_numpy.gru_forward
gru_backward = gru_numpy.gru_backward

if _requested not in ("auto", "numpy", "cython"):
    raise ValueError(f"PROTOINFOMAX_KERNEL must be auto|numpy|cython, got {_requested!r}")

if _requested in ("auto", "cython"):
    try:
        from . import _gru_cy

        gru_forward = _gru_cy.gru_forward
        gru_backward = _gru_cy.gru_backward
        _backend = "cython"
    except ImportError:
        if _requested == "cython":
            raise


def backend() -> str:
    """Name of the kernel implementation in use: 'cython' or 'numpy'."""
    return _backend
