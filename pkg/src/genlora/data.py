"""Synthetic real/fake images with parametric generator fingerprints.

Images are float32 arrays (C, H, W) in [0, 1]. "Real" images are smoothed
multi-octave noise; each fake family imprints one weak, controllable trace.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sfft
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, DataError

CLIP_MEAN = np.array([0.48145466, 0.4578275, 0.40821073])
CLIP_STD = np.array([0.26862954, 0.26130258, 0.27577711])

FINGERPRINT_KINDS = ("checkerboard", "spectral_peak", "blockiness")
# Mixing ratios live on a dyadic grid so that 1 - (1 - lam) == lam exactly.
LAMBDA_GRID = 2 ** 16


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def make_real(seed, size=32, channels=3):
    """Sum of three blurred white-noise octaves (sigma 1, 2, 4), min-max scaled to [0, 1]."""
    rng = _rng(seed)
    img = np.zeros((channels, size, size))
    for sigma in (1.0, 2.0, 4.0):
        noise = rng.standard_normal((channels, size, size))
        octave = gaussian_filter(noise, sigma=(0, sigma, sigma), mode="wrap")
        img += octave / octave.std()
    img -= img.min()
    img /= img.max()
    return img.astype(np.float32)


@dataclass(frozen=True)
class FingerprintSpec:
    kind: str
    amplitude: float = 0.05
    period: int = 2
    frequency: tuple = (8, 8)
    block: int = 4

    def __post_init__(self):
        if self.kind not in FINGERPRINT_KINDS:
            raise ConfigError(f"unknown fingerprint kind {self.kind!r}; expected one of {FINGERPRINT_KINDS}")
        if not 0.0 < self.amplitude <= 0.2:
            raise ConfigError(f"fingerprint amplitude must be in (0, 0.2], got {self.amplitude}")
        object.__setattr__(self, "frequency", tuple(int(f) for f in self.frequency))

    def describe(self):
        extra = {"checkerboard": f"period={self.period}",
                 "spectral_peak": f"frequency={self.frequency[0]}x{self.frequency[1]}",
                 "blockiness": f"block={self.block}"}[self.kind]
        return f"{self.kind}:amplitude={self.amplitude}:{extra}"

    @classmethod
    def parse(cls, text):
        kind, *fields = text.split(":")
        kw = {}
        for item in fields:
            key, value = item.split("=")
            if key == "frequency":
                kw[key] = tuple(int(v) for v in value.split("x"))
            elif key == "amplitude":
                kw[key] = float(value)
            else:
                kw[key] = int(value)
        return cls(kind, **kw)


# name -> fingerprint; the first three form the default mixture, the fourth is held back
# for the extension workflow.
DEFAULT_GENERATORS = {
    "checker": FingerprintSpec("checkerboard"),
    "spectral": FingerprintSpec("spectral_peak", frequency=(8, 8)),
    "blocky": FingerprintSpec("blockiness"),
    "stripes": FingerprintSpec("spectral_peak", frequency=(0, 8)),
}


def fingerprint_pattern(spec: FingerprintSpec, size):
    yy, xx = np.mgrid[0:size, 0:size]
    if spec.kind == "checkerboard":
        half = max(spec.period // 2, 1)
        sign = 1.0 - 2.0 * (((yy // half) + (xx // half)) % 2)
        return spec.amplitude * sign
    if spec.kind == "spectral_peak":
        fy, fx = spec.frequency
        return spec.amplitude * np.sin(2 * np.pi * (fy * yy + fx * xx) / size)
    raise ConfigError(f"{spec.kind} has no additive pattern")


def block_mean(image, block):
    c, h, w = image.shape
    m = image.reshape(c, h // block, block, w // block, block).mean(axis=(2, 4), keepdims=True)
    return np.broadcast_to(m, (c, h // block, block, w // block, block)).reshape(c, h, w)


def apply_fingerprint(image, spec: FingerprintSpec, seed=None):
    """Imprint one generator trace; the result is clipped to [0, 1].

    All three kinds are deterministic; ``seed`` is accepted for interface
    symmetry with the other pipeline stages.
    """
    if not isinstance(spec, FingerprintSpec):
        raise ConfigError("apply_fingerprint expects a FingerprintSpec")
    x = np.asarray(image, dtype=np.float64)
    if spec.kind == "blockiness":
        weight = spec.amplitude * 4
        out = (1.0 - weight) * x + weight * block_mean(x, spec.block)
    else:
        out = x + fingerprint_pattern(spec, x.shape[-1])[None]
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentationConfig:
    p_flip: float = 0.5
    p_quality: float = 0.3
    quality: tuple = (60, 95)
    p_blur: float = 0.3
    blur_sigma: tuple = (0.3, 1.0)
    p_color: float = 0.3
    brightness: float = 0.2
    contrast: float = 0.2
    p_channel_mix: float = 0.3
    channel_mix: float = 0.1
    p_noise: float = 0.3
    noise_sigma: tuple = (0.0, 0.02)

    def __post_init__(self):
        for name in ("p_flip", "p_quality", "p_blur", "p_color", "p_channel_mix", "p_noise"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be a probability")

    @classmethod
    def disabled(cls):
        return cls(p_flip=0, p_quality=0, p_blur=0, p_color=0, p_channel_mix=0, p_noise=0)


_JPEG_LUMA = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


def quality_table(quality):
    q = int(np.clip(quality, 1, 100))
    s = 5000 / q if q < 50 else 200 - 2 * q
    return np.clip(np.floor((_JPEG_LUMA * s + 50) / 100), 1, 255)


def block_dct_quantize(image, quality):
    """8x8 block DCT coefficient quantization; the artifact JPEG leaves, without a codec."""
    c, h, w = image.shape
    table = quality_table(quality)
    x = image.astype(np.float64) * 255.0 - 128.0
    blocks = x.reshape(c, h // 8, 8, w // 8, 8).transpose(0, 1, 3, 2, 4)
    coef = sfft.dctn(blocks, type=2, norm="ortho", axes=(-2, -1))
    coef = np.round(coef / table) * table
    blocks = sfft.idctn(coef, type=2, norm="ortho", axes=(-2, -1))
    out = blocks.transpose(0, 1, 3, 2, 4).reshape(c, h, w)
    return (out + 128.0) / 255.0


def hflip(image):
    return np.ascontiguousarray(image[..., ::-1])


def gaussian_blur(image, sigma):
    return gaussian_filter(np.asarray(image, np.float64), sigma=(0, sigma, sigma), mode="reflect")


def augment(image, config: AugmentationConfig, seed):
    """Apply each transform independently with its probability; output clipped to [0, 1].

    Every random draw happens regardless of whether its transform fires, so
    the stream of decisions depends only on the seed.
    """
    rng = _rng(seed)
    x = np.asarray(image, dtype=np.float64)
    u = rng.random(6)
    quality = rng.integers(config.quality[0], config.quality[1] + 1)
    sigma = rng.uniform(*config.blur_sigma)
    bright = rng.uniform(-config.brightness, config.brightness)
    contrast = rng.uniform(-config.contrast, config.contrast)
    mix = np.eye(x.shape[0]) + rng.uniform(-config.channel_mix, config.channel_mix, (x.shape[0],) * 2)
    noise_sigma = rng.uniform(*config.noise_sigma)
    noise = rng.standard_normal(x.shape)
    changed = False
    if u[0] < config.p_flip:
        x = hflip(x)
        changed = True
    if u[1] < config.p_quality and x.shape[-1] % 8 == 0 and x.shape[-2] % 8 == 0:
        x = block_dct_quantize(x, quality)
        changed = True
    if u[2] < config.p_blur:
        x = gaussian_blur(x, sigma)
        changed = True
    if u[3] < config.p_color:
        mean = x.mean()
        x = (x - mean) * (1.0 + contrast) + mean + bright
        changed = True
    if u[4] < config.p_channel_mix:
        x = np.einsum("ij,jhw->ihw", mix, x)
        changed = True
    if u[5] < config.p_noise:
        x = x + noise_sigma * noise
        changed = True
    if not changed:
        return np.asarray(image, dtype=np.float32)
    return np.clip(x, 0.0, 1.0).astype(np.float32)


def normalize(image):
    """Per-channel standardization with the CLIP image statistics, in float64.

    The model casts to its own dtype when tokenizing.
    """
    x = np.asarray(image, dtype=np.float64)
    c = x.shape[-3]
    return (x - CLIP_MEAN[:c, None, None]) / CLIP_STD[:c, None, None]


def denormalize(tensor):
    x = np.asarray(tensor, dtype=np.float64)
    c = x.shape[-3]
    return x * CLIP_STD[:c, None, None] + CLIP_MEAN[:c, None, None]


# ---------------------------------------------------------------- samples


@dataclass(frozen=True)
class Sample:
    image: np.ndarray
    y: int
    g: int
    fusion: tuple | None = None

    def __post_init__(self):
        if self.y not in (0, 1):
            raise DataError(f"label must be 0 or 1, got {self.y}")
        if (self.y == 0) != (self.g == 0):
            raise DataError(f"label {self.y} inconsistent with generator id {self.g}")
        if self.fusion is not None:
            a, b, _ = self.fusion
            if self.y != 1 or a == b:
                raise DataError("fused samples must be fakes from two different generators")


def quantize_lambda(lam):
    return round(float(lam) * LAMBDA_GRID) / LAMBDA_GRID


def genmix(a: Sample, b: Sample, lam):
    """Pixel-wise blend ``lam * a + (1 - lam) * b`` of two fakes from different generators.

    ``lam`` is snapped to a 2**-16 grid so that ``genmix(a, b, lam)`` and
    ``genmix(b, a, 1 - lam)`` agree bit for bit.
    """
    if a.y != 1 or b.y != 1:
        raise DataError("genmix needs two fake samples")
    if a.g == b.g:
        raise DataError(f"genmix needs different generators, got {a.g} twice")
    if not 0.0 <= lam <= 1.0:
        raise DataError(f"mixing ratio must lie in [0, 1], got {lam}")
    lam = quantize_lambda(lam)
    img = lam * a.image.astype(np.float64) + (1.0 - lam) * b.image.astype(np.float64)
    return Sample(img.astype(np.float32), 1, a.g, (a.g, b.g, lam))


# ---------------------------------------------------------------- datasets


@dataclass
class DatasetSpec:
    generators: dict = field(default_factory=lambda: {k: DEFAULT_GENERATORS[k]
                                                      for k in ("checker", "spectral", "blocky")})
    n_real_train: int = 500
    n_fake_train: int = 500
    n_real_test: int = 100
    n_fake_test: int = 100
    image_size: int = 32
    channels: int = 3

    def __post_init__(self):
        if not self.generators:
            raise ConfigError("a dataset needs at least one generator")
        for name in ("n_real_train", "n_fake_train", "n_real_test", "n_fake_test"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    @property
    def names(self):
        return list(self.generators)


@dataclass
class Dataset:
    names: list
    train: list
    test: list


_SPLIT_IDS = {"train": 1, "test": 2}


def make_sample(seed, split, g, index, spec: DatasetSpec, fingerprint=None):
    entropy = [int(seed), _SPLIT_IDS[split], int(index)]
    img = make_real(entropy + [int(g)], spec.image_size, spec.channels)
    if g == 0:
        return Sample(img, 0, 0)
    return Sample(apply_fingerprint(img, fingerprint, seed=entropy), 1, g)


def build_split(spec: DatasetSpec, seed, split):
    n_real = spec.n_real_train if split == "train" else spec.n_real_test
    n_fake = spec.n_fake_train if split == "train" else spec.n_fake_test
    samples = [make_sample(seed, split, 0, i, spec) for i in range(n_real)]
    for g, name in enumerate(spec.names, start=1):
        fp = spec.generators[name]
        samples += [make_sample(seed, split, g, i, spec, fp) for i in range(n_fake)]
    order = np.random.default_rng([int(seed), _SPLIT_IDS[split], 0x5F]).permutation(len(samples))
    return [samples[i] for i in order]


def build_dataset(spec: DatasetSpec, seed) -> Dataset:
    """Deterministic shuffled train/test splits; the two splits draw from disjoint seed streams."""
    return Dataset(spec.names, build_split(spec, seed, "train"), build_split(spec, seed, "test"))


def subset_for_generator(samples, g):
    """Reals plus the fakes of generator ``g``."""
    return [s for s in samples if s.g in (0, g)]


def stack_images(samples):
    return np.stack([s.image for s in samples])
