"""Central finite-difference checks of every analytic gradient in the package."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn, unet
from .harness import TABLE1_PAIRS
from .loss import TverskyParams, tversky_loss_backward, tversky_loss_forward
from .nn import ConvKernel

STEP = 1e-6


def numeric_grad(f, x: np.ndarray, step: float = STEP) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        fp = f()
        flat[i] = old - step
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * step)
    return g


def rel_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Max over entries of |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / den)) if a.size else 0.0


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance

    def __str__(self):
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: rel err {self.error:.2e} (tol {self.tolerance:g})"


def random_planes(rng, n: int):
    p0 = rng.uniform(0.01, 0.99, size=n)
    g0 = (rng.random(n) < 0.3).astype(float)
    if g0.sum() == 0:
        g0[rng.integers(n)] = 1.0
    return p0, 1.0 - p0, g0, 1.0 - g0


def check_loss(n_instances: int = 100, seed: int = 0, tolerance: float = 1e-5) -> CheckResult:
    """Tversky-loss gradient on random planes of 2..64 voxels over the Table 1 pairs."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(n_instances):
        alpha, beta = TABLE1_PAIRS[i % len(TABLE1_PAIRS)]
        params = TverskyParams(alpha, beta)
        p0, p1, g0, g1 = random_planes(rng, int(rng.integers(2, 65)))
        d0, d1 = tversky_loss_backward(p0, p1, g0, g1, params)
        f = lambda: tversky_loss_forward(p0, p1, g0, g1, params)[0]  # noqa: E731
        worst = max(worst, rel_error(d0, numeric_grad(f, p0)), rel_error(d1, numeric_grad(f, p1)))
    return CheckResult(f"tversky loss ({n_instances} instances)", worst, tolerance)


def check_layers(seed: int = 0, tolerance: float = 1e-5) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []

    x = rng.normal(size=(4, 4, 4, 2))
    k = ConvKernel(rng.normal(size=(3, 3, 3, 2, 2)), rng.normal(size=2))
    w_out = rng.normal(size=(4, 4, 4, 2))
    f = lambda: float(np.sum(nn.conv3d_forward(x, k, "same") * w_out))  # noqa: E731
    gx, gk = nn.conv3d_backward(x, k, w_out, "same")
    err = max(rel_error(gx, numeric_grad(f, x)), rel_error(gk.weights, numeric_grad(f, k.weights)),
              rel_error(gk.bias, numeric_grad(f, k.bias)))
    results.append(CheckResult("conv3d same 3x3x3", err, tolerance))

    x = rng.normal(size=(5, 5, 5, 2))
    k = ConvKernel(rng.normal(size=(2, 2, 2, 2, 3)), rng.normal(size=3))
    w_out = rng.normal(size=(2, 2, 2, 3))
    f = lambda: float(np.sum(nn.conv3d_forward(x, k, "none", 2) * w_out))  # noqa: E731
    gx, gk = nn.conv3d_backward(x, k, w_out, "none", 2)
    err = max(rel_error(gx, numeric_grad(f, x)), rel_error(gk.weights, numeric_grad(f, k.weights)))
    results.append(CheckResult("conv3d valid stride 2", err, tolerance))

    x = rng.normal(size=(2, 3, 2, 3))
    k = ConvKernel(rng.normal(size=(2, 2, 2, 3, 2)), rng.normal(size=2))
    w_out = rng.normal(size=(4, 6, 4, 2))
    f = lambda: float(np.sum(nn.transposed_conv3d_forward(x, k) * w_out))  # noqa: E731
    gx, gk = nn.transposed_conv3d_backward(x, k, w_out)
    err = max(rel_error(gx, numeric_grad(f, x)), rel_error(gk.weights, numeric_grad(f, k.weights)),
              rel_error(gk.bias, numeric_grad(f, k.bias)))
    results.append(CheckResult("transposed conv3d", err, tolerance))

    x = rng.normal(size=(4, 4, 2, 2))
    w_out = rng.normal(size=(2, 2, 1, 2))
    f = lambda: float(np.sum(nn.maxpool3d_forward(x)[0] * w_out))  # noqa: E731
    _, argmax = nn.maxpool3d_forward(x)
    err = rel_error(nn.maxpool3d_backward(x.shape, argmax, w_out), numeric_grad(f, x))
    results.append(CheckResult("maxpool3d", err, tolerance))

    x = rng.normal(size=(3, 3, 3, 2))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
    w_out = rng.normal(size=x.shape)
    f = lambda: float(np.sum(nn.relu_forward(x) * w_out))  # noqa: E731
    results.append(CheckResult("relu", rel_error(nn.relu_backward(x, w_out), numeric_grad(f, x)), tolerance))

    z = rng.normal(size=(2, 2, 2, 2))
    w_out = rng.normal(size=z.shape)
    f = lambda: float(np.sum(nn.softmax_channels(z) * w_out))  # noqa: E731
    err = rel_error(nn.softmax_backward(nn.softmax_channels(z), w_out), numeric_grad(f, z))
    results.append(CheckResult("softmax", err, tolerance))
    return results


def network_gradients(config: unet.NetConfig, params: TverskyParams, seed: int = 0):
    """Analytic and numeric gradients of Tversky loss through the whole network.

    Biases are randomised (not zero as at init) so their gradients are exercised
    away from symmetric points. Returns ``(analytic, numeric)`` flat vectors.
    """
    rng = np.random.default_rng(seed)
    net = unet.init_params(config)
    for k in net.kernels.values():
        k.bias[:] = rng.normal(0.0, 0.1, size=k.bias.shape)
    x = rng.normal(size=(*config.input_shape, config.in_channels))
    labels = np.zeros(config.input_shape)
    labels[rng.random(config.input_shape) < 0.1] = 1.0

    def f():
        probs, _ = unet.forward(net, x)
        return tversky_loss_forward(probs[..., 0], probs[..., 1], labels, 1 - labels, params)[0]

    probs, cache = unet.forward(net, x)
    d0, d1 = tversky_loss_backward(probs[..., 0], probs[..., 1], labels, 1 - labels, params)
    grads = unet.backward(net, cache, d0, d1)
    analytic, numeric = [], []
    for name, k in net.kernels.items():
        analytic += [grads[name].weights.ravel(), grads[name].bias]
        numeric += [numeric_grad(f, k.weights).ravel(), numeric_grad(f, k.bias)]
    return np.concatenate(analytic), np.concatenate(numeric)


TINY_CONFIG = unet.NetConfig(input_shape=(8, 8, 8), in_channels=3, levels=1, base_features=2)


def check_network(config: unet.NetConfig = TINY_CONFIG, tolerance: float = 1e-4) -> CheckResult:
    a, n = network_gradients(config, TverskyParams(0.3, 0.7))
    return CheckResult(f"whole network ({a.size} parameters)", rel_error(a, n), tolerance)


def run_all(network: bool = True) -> list[CheckResult]:
    results = [check_loss(), *check_layers()]
    if network:
        results.append(check_network())
    return results
