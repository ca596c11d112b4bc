"""Adam with bias correction and a stepwise learning-rate decay."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .unet import NetParams


@dataclass
class AdamState:
    base_lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    decay_factor: float = 0.9
    decay_every: int = 1000
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def lr_at(self, t: int) -> float:
        """Learning rate used for the update taken after ``t`` completed steps."""
        return self.base_lr * self.decay_factor ** (t // self.decay_every)

    @property
    def effective_lr(self) -> float:
        return self.lr_at(self.t)


def _moments(state: AdamState, key, shape):
    if key not in state.m:
        state.m[key] = np.zeros(shape)
        state.v[key] = np.zeros(shape)
    return state.m[key], state.v[key]


def adam_update(theta: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
                t: int, lr: float, beta1: float, beta2: float, eps: float) -> None:
    """In-place Adam update of ``theta``, ``m``, ``v`` for step number ``t`` (1-based)."""
    m *= beta1
    m += (1 - beta1) * grad
    v *= beta2
    v += (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    theta -= lr * m_hat / (np.sqrt(v_hat) + eps)


def adam_step(params: NetParams, grads: dict, state: AdamState) -> tuple[NetParams, AdamState]:
    """Apply one Adam step to every kernel; ``params`` and ``state`` are updated in place."""
    if set(grads) != set(params.kernels):
        raise ConfigError(f"gradient keys {sorted(grads)} != parameter keys {sorted(params.kernels)}")
    lr = state.effective_lr
    state.t += 1
    for name, kernel in params.kernels.items():
        g = grads[name]
        for part, theta, gp in (("w", kernel.weights, g.weights), ("b", kernel.bias, g.bias)):
            if theta.shape != gp.shape:
                raise ConfigError(f"{name}.{part}: gradient shape {gp.shape} != {theta.shape}")
            m, v = _moments(state, (name, part), theta.shape)
            adam_update(theta, gp, m, v, state.t, lr, state.beta1, state.beta2, state.adam_eps)
    params.version += 1
    return params, state
