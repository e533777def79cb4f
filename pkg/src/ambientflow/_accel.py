"""Backend switch for the combinatorial kernels.

``AMBIENTFLOW_NUMBA=0`` forces the pure-numpy paths; otherwise numba is used
when importable. Both paths are exact and are cross-checked in the test suite.
"""
from __future__ import annotations

import os

try:
    import numba
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is an optional extra
    numba = None
    HAVE_NUMBA = False

_backend = "numba" if HAVE_NUMBA and os.environ.get("AMBIENTFLOW_NUMBA", "1") != "0" else "numpy"


def njit(fn):
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


def backend() -> str:
    return _backend


def set_backend(name: str) -> None:
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    _backend = name


def threads() -> int:
    """Worker cap from ``AMBIENTFLOW_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("AMBIENTFLOW_THREADS", "1")))
    except ValueError:
        return 1



def apply_thread_cap() -> int:
    """Publish the cap for worker pools started after this point; returns it.

    The kernels themselves are serial. BLAS pools are sized when numpy
    loads, so the package ``__init__`` exports the cap before that happens.
    """
    n = threads()
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ.setdefault(var, str(n))
    return n
