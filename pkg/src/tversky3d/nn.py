"""Layer primitives with explicit forward and backward passes.

Volumes and feature maps are plain ``float64`` numpy arrays laid out as
depth x height x width x channels. Every function is pure: inputs are never
modified in place.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _kernels
from .errors import ConfigError

__all__ = [
    "ConvKernel",
    "as_tensor",
    "conv3d_forward",
    "conv3d_backward",
    "conv3d_reference",
    "maxpool3d_forward",
    "maxpool3d_backward",
    "transposed_conv3d_forward",
    "transposed_conv3d_backward",
    "relu_forward",
    "relu_backward",
    "softmax_channels",
    "softmax_backward",
    "concat_channels",
    "concat_backward",
]


def as_tensor(data, shape=None) -> np.ndarray:
    """Coerce ``data`` to a float64 array of order <= 5 with positive extents."""
    arr = np.array(data, dtype=np.float64)
    if shape is not None:
        arr = arr.reshape(shape)
    if arr.ndim > 5:
        raise ConfigError(f"tensor order {arr.ndim} exceeds 5")
    if any(n < 1 for n in arr.shape):
        raise ConfigError(f"tensor extents must be >= 1, got {arr.shape}")
    return arr


@dataclass
class ConvKernel:
    """Weights of shape (k, k, k, c_in, c_out) plus a bias of length c_out."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        w = self.weights
        if w.ndim != 5 or not (w.shape[0] == w.shape[1] == w.shape[2]):
            raise ConfigError(f"kernel must have shape (k,k,k,c_in,c_out), got {w.shape}")
        if w.shape[0] not in (1, 2, 3):
            raise ConfigError(f"kernel size must be 1, 2 or 3, got {w.shape[0]}")
        if self.bias.shape != (w.shape[4],):
            raise ConfigError(
                f"bias shape {self.bias.shape} does not match c_out={w.shape[4]}"
            )
        if not np.all(np.isfinite(w)):
            raise ConfigError("kernel weights must be finite")

    @property
    def size(self) -> int:
        return self.weights.shape[0]

    @property
    def c_in(self) -> int:
        return self.weights.shape[3]

    @property
    def c_out(self) -> int:
        return self.weights.shape[4]

    @classmethod
    def zeros(cls, k: int, c_in: int, c_out: int) -> "ConvKernel":
        return cls(np.zeros((k, k, k, c_in, c_out)), np.zeros(c_out))

    def copy(self) -> "ConvKernel":
        return ConvKernel(self.weights.copy(), self.bias.copy())


def _check_conv(x: np.ndarray, kernel: ConvKernel, padding: str, stride: int) -> int:
    if x.ndim != 4:
        raise ConfigError(f"expected input of shape (D,H,W,C), got {x.shape}")
    if x.shape[3] != kernel.c_in:
        raise ConfigError(
            f"input shape {x.shape} has {x.shape[3]} channels but kernel "
            f"{kernel.weights.shape} expects c_in={kernel.c_in}"
        )
    if stride < 1:
        raise ConfigError(f"stride must be positive, got {stride}")
    if padding == "same":
        if stride != 1:
            raise ConfigError("'same' padding requires stride 1")
        if kernel.size % 2 == 0:
            raise ConfigError(f"'same' padding requires an odd kernel, got k={kernel.size}")
        return kernel.size // 2
    if padding == "none":
        if any(n < kernel.size for n in x.shape[:3]):
            raise ConfigError(f"input {x.shape} smaller than kernel {kernel.weights.shape}")
        return 0
    raise ConfigError(f"unknown padding {padding!r}")


def _pad_channel_first(x: np.ndarray, pad: int) -> np.ndarray:
    xc = np.moveaxis(x, 3, 0)
    if pad:
        return np.pad(xc, ((0, 0), (pad, pad), (pad, pad), (pad, pad)))
    return np.ascontiguousarray(xc)


def _out_extents(shape, k, pad, stride):
    return tuple((n + 2 * pad - k) // stride + 1 for n in shape[:3])


def conv3d_forward(x, kernel: ConvKernel, padding: str = "same", stride: int = 1) -> np.ndarray:
    """3D cross-correlation plus bias.

    ``same`` zero-pads the border so spatial extents are preserved; ``none``
    evaluates only fully covered positions and may use any stride.
    """
    x = np.asarray(x, dtype=np.float64)
    pad = _check_conv(x, kernel, padding, stride)
    k = kernel.size
    if k == 1 and stride == 1:
        out = x.reshape(-1, kernel.c_in) @ kernel.weights.reshape(kernel.c_in, kernel.c_out)
        return out.reshape(x.shape[:3] + (kernel.c_out,)) + kernel.bias
    if stride == 1:
        xp = _pad_channel_first(x, pad)
        ext = _out_extents(x.shape, k, pad, 1)
        out = np.empty((kernel.c_out,) + ext)
        _kernels.conv_valid_forward(xp, kernel.weights, kernel.bias, out)
        return np.ascontiguousarray(np.moveaxis(out, 0, 3))
    windows = sliding_window_view(x, (k, k, k), axis=(0, 1, 2))[::stride, ::stride, ::stride]
    # windows: (D', H', W', C_in, k, k, k)
    return np.einsum("dhwiabc,abcio->dhwo", windows, kernel.weights) + kernel.bias


def conv3d_backward(x, kernel: ConvKernel, grad_out, padding: str = "same", stride: int = 1):
    """Gradients of a scalar w.r.t. the input and kernel of :func:`conv3d_forward`.

    Returns ``(grad_input, grad_kernel)`` where ``grad_kernel`` is a
    :class:`ConvKernel` holding weight and bias gradients.
    """
    x = np.asarray(x, dtype=np.float64)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    pad = _check_conv(x, kernel, padding, stride)
    k = kernel.size
    expected = _out_extents(x.shape, k, pad, stride) + (kernel.c_out,)
    if grad_out.shape != expected:
        raise ConfigError(f"grad_out shape {grad_out.shape} != forward output shape {expected}")
    grad_b = grad_out.reshape(-1, kernel.c_out).sum(axis=0)
    if k == 1 and stride == 1:
        g2 = grad_out.reshape(-1, kernel.c_out)
        x2 = x.reshape(-1, kernel.c_in)
        grad_w = (x2.T @ g2).reshape(kernel.weights.shape)
        grad_x = (g2 @ kernel.weights.reshape(kernel.c_in, kernel.c_out).T).reshape(x.shape)
        return grad_x, ConvKernel(grad_w, grad_b)
    if stride == 1:
        xp = _pad_channel_first(x, pad)
        g = np.ascontiguousarray(np.moveaxis(grad_out, 3, 0))
        gxp = np.zeros_like(xp)
        grad_w = np.zeros_like(kernel.weights)
        _kernels.conv_valid_backward(xp, kernel.weights, g, gxp, grad_w)
        d, h, w = x.shape[:3]
        grad_x = gxp[:, pad:pad + d, pad:pad + h, pad:pad + w]
        return np.ascontiguousarray(np.moveaxis(grad_x, 0, 3)), ConvKernel(grad_w, grad_b)
    windows = sliding_window_view(x, (k, k, k), axis=(0, 1, 2))[::stride, ::stride, ::stride]
    grad_w = np.einsum("dhwiabc,dhwo->abcio", windows, grad_out)
    grad_x = np.zeros_like(x)
    contrib = np.einsum("dhwo,abcio->dhwabci", grad_out, kernel.weights)
    od, oh, ow = grad_out.shape[:3]
    for a in range(k):
        for b in range(k):
            for c in range(k):
                grad_x[a:a + stride * od:stride, b:b + stride * oh:stride,
                       c:c + stride * ow:stride] += contrib[:, :, :, a, b, c]
    return grad_x, ConvKernel(grad_w, grad_b)


def conv3d_reference(x, kernel: ConvKernel, padding: str = "same", stride: int = 1) -> np.ndarray:
    """Direct-loop convolution, one receptive field at a time. Slow; for checks only."""
    x = np.asarray(x, dtype=np.float64)
    pad = _check_conv(x, kernel, padding, stride)
    k = kernel.size
    xp = np.pad(x, ((pad, pad), (pad, pad), (pad, pad), (0, 0)))
    ext = _out_extents(x.shape, k, pad, stride)
    out = np.empty(ext + (kernel.c_out,))
    for i in range(ext[0]):
        for j in range(ext[1]):
            for l in range(ext[2]):
                field = xp[i * stride:i * stride + k, j * stride:j * stride + k,
                           l * stride:l * stride + k, :]
                for o in range(kernel.c_out):
                    out[i, j, l, o] = kernel.bias[o] + np.sum(field * kernel.weights[..., o])
    return out


def maxpool3d_forward(x):
    """2x2x2 max pooling with stride 2.

    Returns ``(output, argmax)`` where ``argmax`` holds, per output voxel and
    channel, the flat index into ``x`` of the winning element (first maximum
    in block order on ties).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ConfigError(f"expected input of shape (D,H,W,C), got {x.shape}")
    for axis, n in zip("DHW", x.shape[:3]):
        if n % 2:
            raise ConfigError(f"max pooling needs even extents; axis {axis} has {n}")
    d, h, w, c = x.shape
    blocks = x.reshape(d // 2, 2, h // 2, 2, w // 2, 2, c).transpose(0, 2, 4, 6, 1, 3, 5)
    blocks = blocks.reshape(d // 2, h // 2, w // 2, c, 8)
    local = np.argmax(blocks, axis=-1)
    out = np.take_along_axis(blocks, local[..., None], axis=-1)[..., 0]
    da, hb, wc = np.unravel_index(local, (2, 2, 2))
    gd, gh, gw, gc = np.indices(out.shape, sparse=True)
    argmax = np.ravel_multi_index((2 * gd + da, 2 * gh + hb, 2 * gw + wc, gc), x.shape)
    return out, argmax


def maxpool3d_backward(input_shape, argmax, grad_out) -> np.ndarray:
    """Route each pooled gradient back to its argmax position."""
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if argmax.shape != grad_out.shape:
        raise ConfigError(f"argmax shape {argmax.shape} != grad_out shape {grad_out.shape}")
    grad = np.zeros(int(np.prod(input_shape)))
    grad[argmax.ravel()] = grad_out.ravel()
    return grad.reshape(input_shape)


def _check_transposed(x: np.ndarray, kernel: ConvKernel, stride: int) -> None:
    if kernel.size != 2 or stride != 2:
        raise ConfigError(f"transposed conv needs kernel 2 and stride 2, got k={kernel.size}, stride={stride}")
    if x.ndim != 4 or x.shape[3] != kernel.c_in:
        raise ConfigError(
            f"input shape {x.shape} incompatible with kernel {kernel.weights.shape}"
        )


def transposed_conv3d_forward(x, kernel: ConvKernel, stride: int = 2) -> np.ndarray:
    """Stride-2 transposed convolution; doubles every spatial extent.

    Each input voxel scatters ``x[v] @ w[a,b,c]`` into the 2x2x2 output block
    it owns, so blocks never overlap.
    """
    x = np.asarray(x, dtype=np.float64)
    _check_transposed(x, kernel, stride)
    d, h, w, _ = x.shape
    out = np.einsum("dhwi,abcio->dahbwco", x, kernel.weights, optimize=True)
    return out.reshape(2 * d, 2 * h, 2 * w, kernel.c_out) + kernel.bias


def transposed_conv3d_backward(x, kernel: ConvKernel, grad_out, stride: int = 2):
    x = np.asarray(x, dtype=np.float64)
    _check_transposed(x, kernel, stride)
    d, h, w, _ = x.shape
    expected = (2 * d, 2 * h, 2 * w, kernel.c_out)
    if grad_out.shape != expected:
        raise ConfigError(f"grad_out shape {grad_out.shape} != forward output shape {expected}")
    g = grad_out.reshape(d, 2, h, 2, w, 2, kernel.c_out)
    grad_x = np.einsum("dahbwco,abcio->dhwi", g, kernel.weights, optimize=True)
    grad_w = np.einsum("dhwi,dahbwco->abcio", x, g, optimize=True)
    grad_b = grad_out.reshape(-1, kernel.c_out).sum(axis=0)
    return grad_x, ConvKernel(grad_w, grad_b)


def relu_forward(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_backward(x, grad_out) -> np.ndarray:
    return np.where(np.asarray(x) > 0, grad_out, 0.0)


def softmax_channels(z) -> np.ndarray:
    """Softmax over the last (channel) axis, stabilised by the per-voxel max."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] < 2:
        raise ConfigError(f"softmax needs at least 2 channels, got {z.shape[-1]}")
    if not np.all(np.isfinite(z)):
        raise ConfigError("softmax input contains non-finite values")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(p, grad_p) -> np.ndarray:
    """Gradient w.r.t. logits given softmax output ``p`` and dL/dp."""
    p = np.asarray(p)
    return p * (grad_p - np.sum(p * grad_p, axis=-1, keepdims=True))


def concat_channels(a, b) -> np.ndarray:
    """Stack ``a`` then ``b`` along the channel axis."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[:-1] != b.shape[:-1]:
        raise ConfigError(f"spatial extents differ: {a.shape[:-1]} vs {b.shape[:-1]}")
    return np.concatenate([a, b], axis=-1)


def concat_backward(grad_out, split: int):
    """Split ``grad_out`` into the channel ranges ``[:split]`` and ``[split:]``."""
    return grad_out[..., :split], grad_out[..., split:]
