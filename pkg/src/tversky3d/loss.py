"""Tversky index and the soft Tversky loss over two-class softmax planes.

With predicted lesion/background probabilities ``p0, p1`` and one-hot labels
``g0, g1``::

    T = (sum p0*g0 + eps) / (sum p0*g0 + alpha*sum p0*g1 + beta*sum p1*g0 + eps)
    loss = 1 - T

``alpha`` weighs false positives and ``beta`` false negatives. The gradient is
the exact derivative of this expression with ``p0`` and ``p1`` treated as
independent inputs; chaining through the softmax happens in the network.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

__all__ = [
    "TverskyParams",
    "tversky_index_sets",
    "tversky_loss_forward",
    "tversky_loss_backward",
    "named_special_case",
    "one_hot_planes",
]


@dataclass(frozen=True)
class TverskyParams:
    alpha: float = 0.5
    beta: float = 0.5
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError(f"alpha and beta must be >= 0, got {self.alpha}, {self.beta}")
        if self.alpha + self.beta <= 0:
            raise ConfigError("alpha + beta must be positive")
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")


def named_special_case(name: str, b: float | None = None) -> TverskyParams:
    """Parameters that reduce the Tversky index to a named score.

    ``dice`` -> (0.5, 0.5); ``tanimoto`` -> (1, 1); ``f_beta`` with ``b`` ->
    alpha + beta = 1 and beta / alpha = b**2.
    """
    if name == "dice":
        return TverskyParams(0.5, 0.5)
    if name == "tanimoto":
        return TverskyParams(1.0, 1.0)
    if name == "f_beta":
        if b is None or not b > 0:
            raise ConfigError(f"f_beta needs b > 0, got {b}")
        b2 = b * b
        return TverskyParams(1.0 / (1.0 + b2), b2 / (1.0 + b2))
    raise ConfigError(f"unknown special case {name!r}; expected dice, tanimoto or f_beta")


def tversky_index_sets(counts, params: TverskyParams) -> float:
    """Set-based index TP / (TP + alpha*FP + beta*FN), smoothed by epsilon.

    ``counts`` is anything with ``tp``, ``fp`` and ``fn`` attributes.
    """
    tp, fp, fn = float(counts.tp), float(counts.fp), float(counts.fn)
    eps = params.epsilon
    return (tp + eps) / (tp + params.alpha * fp + params.beta * fn + eps)


def one_hot_planes(labels) -> tuple[np.ndarray, np.ndarray]:
    """(g0, g1) planes from a binary lesion mask."""
    g0 = np.asarray(labels, dtype=np.float64)
    if not np.all((g0 == 0) | (g0 == 1)):
        raise ConfigError("labels must be {0,1}-valued")
    return g0, 1.0 - g0


def _sums(p0, p1, g0, g1):
    p0, p1, g0, g1 = (np.asarray(a, dtype=np.float64) for a in (p0, p1, g0, g1))
    if not (p0.shape == p1.shape == g0.shape == g1.shape):
        raise ConfigError(
            f"shape mismatch: p0 {p0.shape}, p1 {p1.shape}, g0 {g0.shape}, g1 {g1.shape}"
        )
    if np.isnan(p0).any() or np.isnan(p1).any():
        raise ConfigError("prediction planes contain NaN")
    tp = float(np.sum(p0 * g0))
    fp = float(np.sum(p0 * g1))
    fn = float(np.sum(p1 * g0))
    return (p0, p1, g0, g1), (tp, fp, fn)


def tversky_loss_forward(p0, p1, g0, g1, params: TverskyParams) -> tuple[float, float]:
    """Return ``(loss, T)`` with ``loss = 1 - T``."""
    _, (tp, fp, fn) = _sums(p0, p1, g0, g1)
    eps = params.epsilon
    t = (tp + eps) / (tp + params.alpha * fp + params.beta * fn + eps)
    return 1.0 - t, t


def tversky_loss_backward(p0, p1, g0, g1, params: TverskyParams):
    """Return ``(dloss/dp0, dloss/dp1)`` for :func:`tversky_loss_forward`."""
    (p0, p1, g0, g1), (tp, fp, fn) = _sums(p0, p1, g0, g1)
    a, b, eps = params.alpha, params.beta, params.epsilon
    num = tp + eps
    den = tp + a * fp + b * fn + eps
    den2 = den * den
    # dT/dp0 = (g0*den - num*(g0 + a*g1)) / den^2 ; dT/dp1 = -num*b*g0 / den^2
    d_p0 = (g0 * den - num * (g0 + a * g1)) / den2
    d_p1 = -num * b * g0 / den2
    return -d_p0, -d_p1
