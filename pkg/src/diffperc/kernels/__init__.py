"""Hot inner-loop kernels with a numba backend and a pure-numpy fallback.

The backend is chosen once at import time from the ``DIFFPERC_BACKEND``
environment variable: ``numba`` (default when importable) or ``numpy``.
Both implementations produce the same column layout, so the rest of the
package never needs to know which one is active.
"""

import os

from ..errors import ConfigError

_VALID = ("numba", "numpy")


def load_impl(name):
    """Import and return a backend module by name (used by benchmarks/tests)."""
    if name == "numpy":
        from . import numpy_impl

        return numpy_impl
    if name == "numba":
        from . import numba_impl

        return numba_impl
    raise ConfigError(f"unknown kernel backend {name!r}, expected one of {_VALID}")


def _select():
    requested = os.environ.get("DIFFPERC_BACKEND", "").strip().lower()
    if requested and requested not in _VALID:
        raise ConfigError(
            f"DIFFPERC_BACKEND={requested!r} not understood, expected one of {_VALID}"
        )
    if requested == "numpy":
        return "numpy", load_impl("numpy")
    try:
        return "numba", load_impl("numba")
    except ImportError:
        if requested == "numba":
            raise
        return "numpy", load_impl("numpy")


BACKEND, _impl = _select()

im2col = _impl.im2col
col2im = _impl.col2im
