"""3D U-net built from the primitives in :mod:`tversky3d.nn`.

Layer naming follows the contracting/expanding tables: ``C1, C2`` convolve,
``C3`` pools, and so on down to the two bottom convolutions; on the way up
``E(3k+1)`` upsamples with a 2x2x2 transposed convolution and concatenates
the skip features, ``E(3k+2), E(3k+3)`` convolve. At the top level the
layer after concatenation keeps the concatenated width and the last layer
is the 1x1x1 classifier followed by a channel softmax.

Output channel 0 is the lesion probability ``p0``, channel 1 is ``p1``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .errors import BadMagicError, ConfigError, HeaderMismatchError, TruncatedFileError
from .nn import ConvKernel

CHECKPOINT_MAGIC = b"TVNET1"


@dataclass(frozen=True)
class NetConfig:
    input_shape: tuple[int, int, int] = (32, 32, 32)
    in_channels: int = 3
    levels: int = 1
    base_features: int = 2
    out_classes: int = 2
    seed: int = 0
    use_bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(n) for n in self.input_shape))
        if len(self.input_shape) != 3:
            raise ConfigError(f"input_shape must be (D,H,W), got {self.input_shape}")
        if self.levels < 1 or self.base_features < 1 or self.in_channels < 1:
            raise ConfigError("levels, base_features and in_channels must be >= 1")
        if self.out_classes != 2:
            raise ConfigError("only two output classes are supported")
        step = 2 ** self.levels
        for axis, n in zip("DHW", self.input_shape):
            if n % step:
                raise ConfigError(
                    f"extent {axis}={n} not divisible by 2^levels={step}"
                )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)


PAPER_CONFIG = NetConfig(input_shape=(128, 224, 256), in_channels=3, levels=4, base_features=16)


@dataclass(frozen=True)
class LayerShape:
    name: str
    kind: str  # conv | pool | up | final
    input_shape: tuple[int, int, int, int]
    output_shape: tuple[int, int, int, int]

    @property
    def kernel_shape(self) -> tuple[int, ...] | None:
        c_in = self.input_shape[3]
        if self.kind == "conv":
            return (3, 3, 3, c_in, self.output_shape[3])
        if self.kind == "up":
            return (2, 2, 2, c_in, c_in)
        if self.kind == "final":
            return (1, 1, 1, c_in, self.output_shape[3])
        return None


def plan_shapes(config: NetConfig) -> list[LayerShape]:
    """Symbolic shape propagation; nothing is allocated."""
    plan: list[LayerShape] = []
    spatial = config.input_shape
    ch = config.in_channels
    idx = 1
    skips = []
    for level in range(config.levels):
        feat = config.base_features * 2 ** level
        for _ in range(2):
            plan.append(LayerShape(f"C{idx}", "conv", (*spatial, ch), (*spatial, feat)))
            ch = feat
            idx += 1
        skips.append(feat)
        if any(n % 2 for n in spatial):
            raise ConfigError(f"level {level}: extents {spatial} not divisible by 2")
        half = tuple(n // 2 for n in spatial)
        plan.append(LayerShape(f"C{idx}", "pool", (*spatial, ch), (*half, ch)))
        spatial = half
        idx += 1
    feat = config.base_features * 2 ** config.levels
    for _ in range(2):
        plan.append(LayerShape(f"C{idx}", "conv", (*spatial, ch), (*spatial, feat)))
        ch = feat
        idx += 1

    idx = 1
    for level in reversed(range(config.levels)):
        up = tuple(n * 2 for n in spatial)
        cat = ch + skips[level]
        plan.append(LayerShape(f"E{idx}", "up", (*spatial, ch), (*up, cat)))
        spatial, ch = up, cat
        idx += 1
        if level > 0:
            feat = skips[level]
            for _ in range(2):
                plan.append(LayerShape(f"E{idx}", "conv", (*spatial, ch), (*spatial, feat)))
                ch = feat
                idx += 1
        else:
            plan.append(LayerShape(f"E{idx}", "conv", (*spatial, ch), (*spatial, ch)))
            plan.append(LayerShape(f"E{idx + 1}", "final", (*spatial, ch),
                                   (*spatial, config.out_classes)))
            idx += 2
    return plan


@dataclass
class NetParams:
    config: NetConfig
    kernels: dict[str, ConvKernel]
    version: int = field(default=0, compare=False)

    def names(self) -> list[str]:
        return list(self.kernels)

    def n_parameters(self) -> int:
        return sum(k.weights.size + k.bias.size for k in self.kernels.values())

    def copy(self) -> "NetParams":
        return NetParams(self.config, {n: k.copy() for n, k in self.kernels.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([np.r_[k.weights.ravel(), k.bias] for k in self.kernels.values()])


def init_params(config: NetConfig) -> NetParams:
    """He-normal weights (std sqrt(2/fan_in)), zero biases, deterministic in ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    kernels = {}
    for layer in plan_shapes(config):
        shape = layer.kernel_shape
        if shape is None:
            continue
        k, c_in = shape[0], shape[3]
        # a stride-2 transposed conv feeds each output voxel from one kernel tap
        fan_in = c_in if layer.kind == "up" else k ** 3 * c_in
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        kernels[layer.name] = ConvKernel(w, np.zeros(shape[4]))
    return NetParams(config, kernels)


@dataclass
class ForwardCache:
    params: NetParams
    version: int
    records: list
    probs: np.ndarray


def forward(params: NetParams, x) -> tuple[np.ndarray, ForwardCache]:
    """Run the network; returns softmax planes of shape (D,H,W,2) and a cache."""
    cfg = params.config
    x = np.asarray(x, dtype=np.float64)
    expected = (*cfg.input_shape, cfg.in_channels)
    if x.shape != expected:
        raise ConfigError(f"input shape {x.shape} does not match config {expected}")
    records = []
    skips = []
    h = x
    plan = plan_shapes(cfg)
    for i, layer in enumerate(plan):
        if layer.kind == "conv":
            k = params.kernels[layer.name]
            z = nn.conv3d_forward(h, k, "same")
            records.append((layer, h, z))
            h = nn.relu_forward(z)
            nxt = plan[i + 1] if i + 1 < len(plan) else None
            if nxt is not None and nxt.kind == "pool":
                skips.append(h)
        elif layer.kind == "pool":
            out, argmax = nn.maxpool3d_forward(h)
            records.append((layer, h.shape, argmax))
            h = out
        elif layer.kind == "up":
            k = params.kernels[layer.name]
            u = nn.transposed_conv3d_forward(h, k)
            records.append((layer, h, u.shape[-1]))
            h = nn.concat_channels(u, skips.pop())
        else:
            k = params.kernels[layer.name]
            logits = nn.conv3d_forward(h, k, "same")
            records.append((layer, h, None))
            h = nn.softmax_channels(logits)
    return h, ForwardCache(params, params.version, records, h)


def backward(params: NetParams, cache: ForwardCache, grad_p0, grad_p1) -> dict[str, ConvKernel]:
    """Parameter gradients given dL/dp0 and dL/dp1 from the loss."""
    if cache.params is not params or cache.version != params.version:
        raise ConfigError("stale forward cache: parameters changed since forward()")
    grad_p = np.stack([grad_p0, grad_p1], axis=-1)
    if grad_p.shape != cache.probs.shape:
        raise ConfigError(f"gradient planes {grad_p.shape} != output {cache.probs.shape}")
    grads: dict[str, ConvKernel] = {}
    g = nn.softmax_backward(cache.probs, grad_p)
    skip_grads = []
    for layer, a, b in reversed(cache.records):
        if layer.kind == "final":
            g, grads[layer.name] = nn.conv3d_backward(a, params.kernels[layer.name], g, "same")
        elif layer.kind == "conv":
            g = nn.relu_backward(b, g)
            g, grads[layer.name] = nn.conv3d_backward(a, params.kernels[layer.name], g, "same")
        elif layer.kind == "up":
            g_up, g_skip = nn.concat_backward(g, b)
            skip_grads.append(g_skip)
            g, grads[layer.name] = nn.transposed_conv3d_backward(a, params.kernels[layer.name], g_up)
        else:
            g = nn.maxpool3d_backward(a, b, g)
            # the skip tapped just before this pool receives its decoder gradient
            g = g + skip_grads.pop()
    if not params.config.use_bias:
        for k in grads.values():
            k.bias[:] = 0.0
    return {name: grads[name] for name in params.kernels}


def _canonical(d: dict) -> bytes:
    return json.dumps(d, sort_keys=True, separators=(",", ":")).encode()


def save_checkpoint(path, params: NetParams) -> None:
    header = _canonical(params.config.to_dict())
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for k in params.kernels.values():
            fh.write(k.weights.astype("<f8").tobytes())
            fh.write(k.bias.astype("<f8").tobytes())


def load_checkpoint(path: str | Path) -> NetParams:
    blob = Path(path).read_bytes()
    if blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: expected magic {CHECKPOINT_MAGIC.decode()!r}")
    pos = len(CHECKPOINT_MAGIC)
    if len(blob) < pos + 4:
        raise TruncatedFileError(f"{path}: truncated before header length")
    (n,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    if len(blob) < pos + n:
        raise TruncatedFileError(f"{path}: truncated inside header")
    try:
        config = NetConfig.from_dict(json.loads(blob[pos:pos + n]))
    except (ValueError, TypeError) as exc:
        raise HeaderMismatchError(f"{path}: bad config header: {exc}") from exc
    pos += n
    kernels = {}
    for layer in plan_shapes(config):
        shape = layer.kernel_shape
        if shape is None:
            continue
        arrays = []
        for count, sh in ((int(np.prod(shape)), shape), (shape[4], (shape[4],))):
            end = pos + 8 * count
            if len(blob) < end:
                raise TruncatedFileError(f"{path}: truncated in layer {layer.name}")
            arrays.append(np.frombuffer(blob, "<f8", count, pos).reshape(sh).astype(np.float64))
            pos = end
        kernels[layer.name] = ConvKernel(*arrays)
    if pos != len(blob):
        raise HeaderMismatchError(f"{path}: {len(blob) - pos} trailing bytes after last layer")
    return NetParams(config, kernels)


# (name, input D,H,W,C, output D,H,W,C) at 128x224x256, 3 channels, 16 base features, 4 levels
PAPER_TABLE = [
    ("C1", (128, 224, 256, 3), (128, 224, 256, 16)),
    ("C2", (128, 224, 256, 16), (128, 224, 256, 16)),
    ("C3", (128, 224, 256, 16), (64, 112, 128, 16)),
    ("C4", (64, 112, 128, 16), (64, 112, 128, 32)),
    ("C5", (64, 112, 128, 32), (64, 112, 128, 32)),
    ("C6", (64, 112, 128, 32), (32, 56, 64, 32)),
    ("C7", (32, 56, 64, 32), (32, 56, 64, 64)),
    ("C8", (32, 56, 64, 64), (32, 56, 64, 64)),
    ("C9", (32, 56, 64, 64), (16, 28, 32, 64)),
    ("C10", (16, 28, 32, 64), (16, 28, 32, 128)),
    ("C11", (16, 28, 32, 128), (16, 28, 32, 128)),
    ("C12", (16, 28, 32, 128), (8, 14, 16, 128)),
    ("C13", (8, 14, 16, 128), (8, 14, 16, 256)),
    ("C14", (8, 14, 16, 256), (8, 14, 16, 256)),
    ("E1", (8, 14, 16, 256), (16, 28, 32, 384)),
    ("E2", (16, 28, 32, 384), (16, 28, 32, 128)),
    ("E3", (16, 28, 32, 128), (16, 28, 32, 128)),
    ("E4", (16, 28, 32, 128), (32, 56, 64, 192)),
    ("E5", (32, 56, 64, 192), (32, 56, 64, 64)),
    ("E6", (32, 56, 64, 64), (32, 56, 64, 64)),
    ("E7", (32, 56, 64, 64), (64, 112, 128, 96)),
    ("E8", (64, 112, 128, 96), (64, 112, 128, 32)),
    ("E9", (64, 112, 128, 32), (64, 112, 128, 32)),
    ("E10", (64, 112, 128, 32), (128, 224, 256, 48)),
    ("E11", (128, 224, 256, 48), (128, 224, 256, 48)),
    ("E12", (128, 224, 256, 48), (128, 224, 256, 2)),
]


def verify_paper_plan() -> list[str]:
    """Rows where the paper-scale plan disagrees with ``PAPER_TABLE`` (empty when all match)."""
    plan = {layer.name: layer for layer in plan_shapes(PAPER_CONFIG)}
    problems = []
    for name, shape_in, shape_out in PAPER_TABLE:
        layer = plan.get(name)
        if layer is None:
            problems.append(f"{name}: missing from plan")
        elif (layer.input_shape, layer.output_shape) != (shape_in, shape_out):
            problems.append(f"{name}: plan {layer.input_shape} -> {layer.output_shape}, "
                            f"table {shape_in} -> {shape_out}")
    if len(plan) != len(PAPER_TABLE):
        problems.append(f"plan has {len(plan)} rows, table has {len(PAPER_TABLE)}")
    return problems
