from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, layer_index: int):
        super().__init__(f"non-finite gradient in parameter array {layer_index}")
        self.layer_index = layer_index


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            lr=lr,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


def adam_step(params, grads, state: AdamState):
    """Apply one bias-corrected Adam update in place; returns ``(params, state)``.

    Raises NonFiniteGradientError before touching anything if a gradient
    contains NaN or inf.
    """
    if len(grads) != len(params):
        raise ValueError("grads and params differ in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape:
            raise ValueError(f"gradient {i} has shape {g.shape}, expected {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(i)
    state.step += 1
    for p, g, m, v in zip(params, grads, state.m, state.v):
        kernels.adam_update(p, g, m, v, state.lr, state.beta1, state.beta2, state.eps, state.step)
    return params, state


@dataclass
class ScalarAdam:
    """Adam on a single scalar (used for the SAC temperature)."""

    value: float
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: float = 0.0
    v: float = 0.0
    step: int = field(default=0)

    def update(self, grad: float) -> float:
        if not np.isfinite(grad):
            raise NonFiniteGradientError(0)
        self.step += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * (grad * grad)
        m_hat = self.m / (1.0 - self.beta1**self.step)
        v_hat = self.v / (1.0 - self.beta2**self.step)
        self.value -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return self.value
