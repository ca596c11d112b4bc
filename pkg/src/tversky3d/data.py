"""Synthetic imbalanced multi-channel volumes, ``TVOL1`` file I/O and CV splits."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadMagicError, ConfigError, HeaderMismatchError, TruncatedFileError

VOLUME_MAGIC = b"TVOL1"


@dataclass(frozen=True)
class SynthConfig:
    """Generator settings.

    ``channel_contrasts`` holds one ``(background_mean, lesion_mean)`` pair per
    channel. Each lesion's offset from background is scaled by a factor drawn
    from ``contrast_jitter``, so some lesions are faint relative to the noise.

    Mimics are unlabeled blobs of lesion size carrying the per-channel offsets
    ``mimic_contrasts``; they share part of the lesion signature, which gives
    a recall-hungry model something plausible to over-segment.
    """

    volume_shape: tuple[int, int, int] = (32, 32, 32)
    channels: int = 3
    foreground_fraction_target: float = 0.002
    lesion_count_range: tuple[int, int] = (1, 6)
    lesion_radius_range: tuple[float, float] = (1.0, 2.5)
    noise_sigma: float = 1.0
    channel_contrasts: tuple[tuple[float, float], ...] = ((0.0, 1.5), (0.0, -0.9), (0.0, 2.1))
    contrast_jitter: tuple[float, float] = (0.5, 1.5)
    mimic_count_range: tuple[int, int] = (2, 6)
    mimic_contrasts: tuple[float, ...] = (1.5, 0.0, 2.1)
    seed: int = 0

    def __post_init__(self):
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        set_("volume_shape", tuple(int(n) for n in self.volume_shape))
        set_("lesion_count_range", tuple(int(n) for n in self.lesion_count_range))
        set_("lesion_radius_range", tuple(float(r) for r in self.lesion_radius_range))
        set_("channel_contrasts", tuple(tuple(float(v) for v in c) for c in self.channel_contrasts))
        set_("contrast_jitter", tuple(float(v) for v in self.contrast_jitter))
        set_("mimic_count_range", tuple(int(n) for n in self.mimic_count_range))
        set_("mimic_contrasts", tuple(float(v) for v in self.mimic_contrasts))
        if not 0.0 < self.foreground_fraction_target < 0.5:
            raise ConfigError(
                f"foreground_fraction_target must lie in (0, 0.5), got {self.foreground_fraction_target}"
            )
        lo, hi = self.lesion_radius_range
        if not 0 < lo <= hi:
            raise ConfigError(f"bad lesion_radius_range {self.lesion_radius_range}")
        if 2 * hi + 1 > min(self.volume_shape):
            raise ConfigError(
                f"lesions of radius {hi} cannot fit in volume {self.volume_shape}"
            )
        cmin, cmax = self.lesion_count_range
        if not 1 <= cmin <= cmax:
            raise ConfigError(f"bad lesion_count_range {self.lesion_count_range}")
        if len(self.channel_contrasts) != self.channels:
            raise ConfigError(
                f"{len(self.channel_contrasts)} channel contrasts for {self.channels} channels"
            )
        mlo, mhi = self.mimic_count_range
        if not 0 <= mlo <= mhi:
            raise ConfigError(f"bad mimic_count_range {self.mimic_count_range}")
        if mhi > 0 and len(self.mimic_contrasts) != self.channels:
            raise ConfigError(
                f"{len(self.mimic_contrasts)} mimic contrasts for {self.channels} channels"
            )
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("volume_shape", "lesion_count_range", "lesion_radius_range", "contrast_jitter",
                  "mimic_count_range", "mimic_contrasts"):
            d[k] = list(d[k])
        d["channel_contrasts"] = [list(c) for c in self.channel_contrasts]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        return cls(**d)


@dataclass
class LabeledVolume:
    image: np.ndarray  # (D, H, W, C) float64
    labels: np.ndarray  # (D, H, W) uint8 in {0, 1}
    subject_id: str = field(default="")

    @property
    def foreground_fraction(self) -> float:
        return float(self.labels.mean())

    def __eq__(self, other):
        if not isinstance(other, LabeledVolume):
            return NotImplemented
        return (self.subject_id == other.subject_id
                and self.image.shape == other.image.shape
                and np.array_equal(self.image, other.image)
                and np.array_equal(self.labels, other.labels))


def _ellipsoid(shape, center, semi_axes) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, n) for n in shape)]
    r2 = sum(((g - c) / s) ** 2 for g, c, s in zip(grids, center, semi_axes))
    return r2 <= 1.0


def _add_mimics(config: SynthConfig, subject_index: int, mask, offset) -> None:
    # own stream, so lesions and noise do not depend on the mimic settings
    rng = np.random.default_rng([config.seed, subject_index, 1])
    shape = config.volume_shape
    rlo, rhi = config.lesion_radius_range
    mimic = np.array(config.mimic_contrasts)
    n = int(rng.integers(config.mimic_count_range[0], config.mimic_count_range[1] + 1))
    for _ in range(n):
        for _attempt in range(20):
            axes = rng.uniform(rlo, rhi, size=3)
            center = [rng.uniform(a, n_ax - 1 - a) for a, n_ax in zip(axes, shape)]
            inside = _ellipsoid(shape, center, axes)
            if not (inside & mask).any():
                offset[inside] = rng.uniform(*config.contrast_jitter) * mimic
                break


def generate_subject(config: SynthConfig, subject_index: int) -> LabeledVolume:
    """Deterministic synthetic subject for ``(config.seed, subject_index)``.

    Lesions are axis-aligned ellipsoids added one at a time until the target
    foreground fraction is reached (within the lesion count range).
    """
    rng = np.random.default_rng([config.seed, subject_index])
    shape = config.volume_shape
    n_vox = int(np.prod(shape))
    target = config.foreground_fraction_target * n_vox
    cmin, cmax = config.lesion_count_range
    rlo, rhi = config.lesion_radius_range
    contrast = np.array([les - bg for bg, les in config.channel_contrasts])

    mask = np.zeros(shape, dtype=bool)
    offset = np.zeros(shape + (config.channels,))
    for i in range(cmax):
        if i >= cmin and mask.sum() >= target:
            break
        axes = rng.uniform(rlo, rhi, size=3)
        center = [rng.uniform(a, n - 1 - a) for a, n in zip(axes, shape)]
        inside = _ellipsoid(shape, center, axes)
        scale = rng.uniform(*config.contrast_jitter)
        offset[inside] = scale * contrast
        mask |= inside
    _add_mimics(config, subject_index, mask, offset)
    frac = mask.mean()
    lo, hi = 0.2 * config.foreground_fraction_target, 5.0 * config.foreground_fraction_target
    if not lo <= frac <= hi:
        raise ConfigError(
            f"subject {subject_index}: realized foreground fraction {frac:.5f} outside "
            f"[{lo:.5f}, {hi:.5f}]; adjust lesion radius/count ranges"
        )
    background = np.array([bg for bg, _ in config.channel_contrasts])
    image = background + offset
    if config.noise_sigma > 0:
        image = image + rng.normal(0.0, config.noise_sigma, size=image.shape)
    # float32-representable so the on-disk format round-trips exactly
    image = image.astype(np.float32).astype(np.float64)
    return LabeledVolume(image, mask.astype(np.uint8), f"subject_{subject_index:03d}")


def generate_subjects(config: SynthConfig, n: int) -> list[LabeledVolume]:
    return [generate_subject(config, i) for i in range(n)]


def two_fold_split(subjects: list, seed: int) -> tuple[list, list]:
    """Shuffle deterministically and cut into halves; the first gets the extra item."""
    if len(subjects) < 2:
        raise ConfigError(f"two-fold split needs >= 2 subjects, got {len(subjects)}")
    order = np.random.default_rng(seed).permutation(len(subjects))
    half = (len(subjects) + 1) // 2
    return [subjects[i] for i in order[:half]], [subjects[i] for i in order[half:]]


def write_volume(path, vol: LabeledVolume) -> None:
    d, h, w, c = vol.image.shape
    if vol.labels.shape != (d, h, w):
        raise ConfigError(f"labels {vol.labels.shape} do not match image {vol.image.shape}")
    header = json.dumps(
        {"channels": c, "dtype": "float32", "label_dtype": "uint8",
         "shape": [d, h, w], "subject_id": vol.subject_id},
        sort_keys=True, separators=(",", ":"),
    ).encode()
    with open(path, "wb") as fh:
        fh.write(VOLUME_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(vol.image.astype("<f4").tobytes())
        fh.write(vol.labels.astype(np.uint8).tobytes())


def read_volume(path: str | Path) -> LabeledVolume:
    blob = Path(path).read_bytes()
    if blob[:len(VOLUME_MAGIC)] != VOLUME_MAGIC:
        raise BadMagicError(f"{path}: not a volume file, expected magic 'TVOL1'")
    pos = len(VOLUME_MAGIC)
    if len(blob) < pos + 4:
        raise TruncatedFileError(f"{path}: truncated before header length")
    (n,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    if len(blob) < pos + n:
        raise TruncatedFileError(f"{path}: truncated inside header")
    try:
        header = json.loads(blob[pos:pos + n])
        shape = tuple(int(v) for v in header["shape"])
        channels = int(header["channels"])
    except (ValueError, KeyError, TypeError) as exc:
        raise HeaderMismatchError(f"{path}: malformed header: {exc}") from exc
    if header.get("dtype") != "float32" or header.get("label_dtype") != "uint8":
        raise HeaderMismatchError(
            f"{path}: unsupported dtypes {header.get('dtype')}/{header.get('label_dtype')}"
        )
    if len(shape) != 3 or min(shape) < 1 or channels < 1:
        raise HeaderMismatchError(f"{path}: bad shape {shape} x {channels}")
    pos += n
    n_vox = int(np.prod(shape))
    need = n_vox * channels * 4 + n_vox
    if len(blob) - pos < need:
        raise TruncatedFileError(f"{path}: payload has {len(blob) - pos} bytes, expected {need}")
    if len(blob) - pos > need:
        raise HeaderMismatchError(f"{path}: {len(blob) - pos - need} trailing bytes after payload")
    image = np.frombuffer(blob, "<f4", n_vox * channels, pos).reshape(shape + (channels,))
    labels = np.frombuffer(blob, np.uint8, n_vox, pos + n_vox * channels * 4).reshape(shape)
    if labels.max(initial=0) > 1:
        raise HeaderMismatchError(f"{path}: labels are not binary")
    return LabeledVolume(image.astype(np.float64), labels.copy(), header.get("subject_id", ""))
