"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

import numpy as np

from ..errors import NumericalError
from .tape import Tensor, backward, no_grad


def grad_check(f, point: np.ndarray, h: float = 1e-5) -> float:
    """Max relative error between the analytic gradient of ``f`` and central
    differences at ``point``.

    ``f`` maps a Tensor to a scalar Tensor; ``point`` must be float64 so the
    difference quotient is trustworthy. The error for coordinate i is
    |analytic_i - fd_i| / max(1, |analytic_i|).
    """
    point = np.asarray(point)
    if point.dtype != np.float64:
        raise TypeError(f"grad_check requires a float64 point, got {point.dtype}")

    x = Tensor(point.copy(), requires_grad=True)
    out = f(x)
    if out.size != 1:
        raise ValueError(f"grad_check: f must be scalar-valued, got shape {out.shape}")
    analytic = backward(out, params=[x])[x].data.ravel()

    flat = point.ravel()
    worst = 0.0
    with no_grad():
        for i in range(flat.size):
            bumped = flat.copy()
            bumped[i] = flat[i] + h
            hi = f(Tensor(bumped.reshape(point.shape))).item()
            bumped[i] = flat[i] - h
            lo = f(Tensor(bumped.reshape(point.shape))).item()
            fd = (hi - lo) / (2.0 * h)
            if not np.isfinite(fd):
                raise NumericalError(f"grad_check: non-finite difference at index {i}")
            err = abs(analytic[i] - fd) / max(1.0, abs(analytic[i]))
            if err > worst:
                worst = err
    return worst
