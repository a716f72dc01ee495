"""Adam optimizer with bias correction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import NumericalError, ShapeError
from .tape import Tensor


@dataclass
class AdamState:
    """Per-parameter moment estimates and step counter."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, shape, dtype=np.float32) -> "AdamState":
        return cls(np.zeros(shape, dtype), np.zeros(shape, dtype), 0)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8):
    """One Adam update. Pure: returns (new_param, new_state).

    A non-finite gradient rejects the step (the caller decides policy).
    """
    if param.shape != grad.shape or param.shape != state.m.shape:
        raise ShapeError(f"adam_step: param {param.shape}, grad {grad.shape}, "
                         f"state {state.m.shape} must all match")
    if not np.isfinite(grad).all():
        raise NumericalError("adam_step: non-finite gradient, step rejected")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * (grad * grad)
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    new_param = param - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_param, AdamState(m, v, t)


class Adam:
    """Adam over a named parameter dict; update order is the dict order."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = {name: AdamState.zeros(p.shape, p.dtype)
                      for name, p in self.params.items()}

    def step(self, grads: dict[Tensor, Tensor]) -> None:
        for name, p in self.params.items():
            g = grads[p]
            new_data, self.state[name] = adam_step(
                p.data, g.data, self.state[name], self.lr,
                self.beta1, self.beta2, self.eps)
            p.data = new_data
