"""Hot convolution kernels with a selectable backend.

Two implementations of the same 3x3 / stride 1 / zero-pad-1 contracts:

* ``numba`` -- jitted loops from :mod:`._numba_kernels` (default when numba
  imports cleanly),
* ``numpy`` -- pure-numpy im2col + BLAS tensordot fallback.

The backend is chosen once per process from the ``TINYSTYLE_BACKEND``
environment variable (``numba`` or ``numpy``). ``benchmarks/bench_conv.py``
compares both. Results of either backend are deterministic run-to-run; the
two backends are *not* required to agree bitwise with each other.
"""

import os

import numpy as np

_ENV_VAR = "TINYSTYLE_BACKEND"
_backend = None  # resolved lazily so "numpy" never pays the numba import


def _pad1(x):
    return np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))


def _numpy_conv3x3(x, k):
    cols = np.lib.stride_tricks.sliding_window_view(_pad1(x), (3, 3), axis=(2, 3))
    y = np.tensordot(cols, k, axes=([1, 4, 5], [1, 2, 3]))  # (n,h,w,co)
    return np.ascontiguousarray(np.transpose(y, (0, 3, 1, 2)))


def _numpy_conv3x3_wgrad(x, gy):
    cols = np.lib.stride_tricks.sliding_window_view(_pad1(x), (3, 3), axis=(2, 3))
    return np.ascontiguousarray(np.tensordot(gy, cols, axes=([0, 2, 3], [0, 2, 3])))


def _numba_conv3x3(x, k):
    from . import _numba_kernels as nk

    return nk.conv3x3_padded(_pad1(x), np.ascontiguousarray(k))


def _numba_conv3x3_wgrad(x, gy):
    from . import _numba_kernels as nk

    return nk.conv3x3_wgrad_padded(_pad1(x), np.ascontiguousarray(gy))


_IMPLS = {
    "numpy": (_numpy_conv3x3, _numpy_conv3x3_wgrad),
    "numba": (_numba_conv3x3, _numba_conv3x3_wgrad),
}


def active_backend() -> str:
    """Resolve (once) and return the kernel backend name."""
    global _backend
    if _backend is None:
        choice = os.environ.get(_ENV_VAR, "").strip().lower()
        if choice and choice not in _IMPLS:
            raise ValueError(
                f"{_ENV_VAR}={choice!r}: expected one of {sorted(_IMPLS)}"
            )
        if choice == "numpy":
            _backend = "numpy"
        elif choice == "numba":
            import numba  # noqa: F401  -- fail loudly if explicitly requested

            _backend = "numba"
        else:
            try:
                import numba  # noqa: F401

                _backend = "numba"
            except ImportError:
                _backend = "numpy"
    return _backend


def conv3x3(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Cross-correlation of (n,c,h,w) with (co,c,3,3), stride 1, zero pad 1."""
    return _IMPLS[active_backend()][0](x, k)


def conv3x3_wgrad(x: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Gradient of conv3x3 w.r.t. its kernel: (n,c,h,w) x (n,co,h,w) -> (co,c,3,3)."""
    return _IMPLS[active_backend()][1](x, gy)
