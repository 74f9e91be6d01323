"""Adam with bias correction and coupled (L2-style) weight decay."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def for_param(cls, param: Tensor, **hyper) -> "AdamState":
        return cls(np.zeros_like(param.data), np.zeros_like(param.data), **hyper)


def adam_update(param: Tensor, grad: np.ndarray, state: AdamState, lr: float):
    """One in-place Adam step on ``param``; returns ``(param, state)``."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != param.shape or state.m.shape != param.shape:
        raise ValueError(f"adam_update: shape mismatch for {param.name!r}: "
                         f"param {param.shape}, grad {grad.shape}, state {state.m.shape}")
    if lr <= 0:
        raise ValueError(f"adam_update: lr must be positive, got {lr}")
    if np.isnan(grad).any():
        raise FloatingPointError(f"adam_update: NaN gradient for parameter {param.name!r}")
    if state.weight_decay:
        grad = grad + state.weight_decay * param.data
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    param.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return param, state


class Adam:
    """Adam over a fixed list of parameters. Missing gradients count as zero."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.states = [AdamState.for_param(p, beta1=beta1, beta2=beta2, eps=eps,
                                           weight_decay=weight_decay) for p in self.params]

    def step(self, grads: dict, lr: float | None = None) -> None:
        rate = self.lr if lr is None else lr
        for p, state in zip(self.params, self.states):
            g = grads.get(p)
            adam_update(p, np.zeros_like(p.data) if g is None else g, state, rate)
