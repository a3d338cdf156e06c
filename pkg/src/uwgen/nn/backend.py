"""Kernel backend selection.

Two implementations of the hot kernels exist:

* ``numba`` -- jitted loops (:mod:`uwgen.nn.kernels_numba`), the default
  when numba imports cleanly;
* ``numpy`` -- pure-numpy im2col fallback (:mod:`uwgen.nn.kernels_numpy`).

The environment variable ``UWGEN_BACKEND`` selects one of
``auto`` (default), ``numba``, ``numpy``. ``set_backend()`` overrides the
environment for the current process (used by tests and the benchmark).
Both backends implement the same function set and agree to floating-point
tolerance; ``benchmarks/bench_kernels.py`` compares their speed.
"""

import os

from uwgen.errors import ValidationError

# Avoid numba probing optional threading layers (noisy on minimal installs).
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

from uwgen.nn import kernels_numpy

try:
    from uwgen.nn import kernels_numba

    _NUMBA_OK = True
    _NUMBA_IMPORT_ERROR = None
except ImportError as exc:  # pragma: no cover - depends on environment
    kernels_numba = None
    _NUMBA_OK = False
    _NUMBA_IMPORT_ERROR = exc

_VALID = ("auto", "numba", "numpy")
_override = None


def _resolve(name):
    if name not in _VALID:
        raise ValidationError(
            f"unknown backend {name!r}; expected one of {_VALID}"
        )
    if name == "numpy":
        return "numpy"
    if name == "numba":
        if not _NUMBA_OK:
            raise ValidationError(
                f"backend 'numba' requested but numba is unavailable: {_NUMBA_IMPORT_ERROR}"
            )
        return "numba"
    return "numba" if _NUMBA_OK else "numpy"


def active_backend():
    """Name of the backend currently in effect ('numba' or 'numpy')."""
    if _override is not None:
        return _override
    return _resolve(os.environ.get("UWGEN_BACKEND", "auto"))


def set_backend(name):
    """Force a backend for this process; ``None`` restores env-based selection."""
    global _override
    if name is None:
        _override = None
    else:
        _override = _resolve(name)
    return active_backend()


def kernels():
    """The module implementing the active backend's kernels."""
    return kernels_numba if active_backend() == "numba" else kernels_numpy
