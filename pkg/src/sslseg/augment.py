"""Strong (RandAugment-style) and weak augmentation for segmentation samples.

Images are H x W x 3 float arrays in [0, 1]; label maps are H x W integer
arrays. Photometric ops only ever see the image. Geometric ops (scale, flip,
crop) are applied to image and label with one shared spatial mapping:
bilinear for the image, nearest neighbour for the label. Regions exposed by
padding get the ignore index in the label and the dataset mean in the image,
so they become zero after mean subtraction.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import ConfigurationError, GeometryError
from .numerics import resize_array

IGNORE_INDEX = 255

PHOTOMETRIC = "photometric"
GEOMETRIC = "geometric"

# Parameter ranges for every photometric op. Overridable per experiment.
DEFAULT_RANGES: dict[str, dict] = {
    "contrast_gamma": {"gamma": (0.5, 2.0)},
    "contrast_linear": {"alpha": (0.5, 1.5)},
    "brightness": {"delta": (-0.25, 0.25)},
    "brightness_channel": {"delta": (-0.25, 0.25)},
    "equalize": {},
    "hsv": {"hue_shift": (-0.1, 0.1), "saturation_scale": (0.5, 1.5)},
    "invert_channel": {},
    "blur": {"sigma": (0.5, 2.0)},
    "noise_gau": {"sigma": (0.01, 0.1)},
    "noise_pos": {},
    "channel_shuffle": {},
    "dropout": {"p": (0.01, 0.1)},
    "coarse_dropout": {"count": (1, 8), "max_fraction": (0.2, 0.2)},
    "multiply": {"factor": (0.7, 1.3)},
    "salt_pepper": {"p": (0.005, 0.03)},
    "solarize": {"threshold": (0.4, 0.8)},
    "jpeg_compression": {"quality": (30, 90)},
}

_INTEGER_PARAMS = {"count", "quality"}


# ----------------------------------------------------------------------------
# Photometric kernels. Each takes (image, rng, **params) and returns a new image.


def _contrast_gamma(img, rng, gamma):
    return img**gamma


def _contrast_linear(img, rng, alpha):
    m = img.mean(axis=(0, 1), keepdims=True)
    return (img - m) * alpha + m


def _brightness(img, rng, delta):
    return img + delta


def _brightness_channel(img, rng, delta, channel):
    out = img.copy()
    out[..., channel] += delta
    return out


def _equalize(img, rng):
    q = np.clip(np.round(img * 255.0), 0, 255).astype(np.int64)
    out = np.empty_like(img)
    for ch in range(img.shape[2]):
        hist = np.bincount(q[..., ch].ravel(), minlength=256)
        cdf = np.cumsum(hist)
        nonzero = cdf[hist > 0]
        lo = nonzero[0] if nonzero.size else 0
        total = cdf[-1]
        if total == lo:
            out[..., ch] = img[..., ch]
            continue
        lut = (cdf - lo) / (total - lo)
        out[..., ch] = np.clip(lut[q[..., ch]], 0.0, 1.0)
    return out


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    mx = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    delta = mx - mn
    safe = np.where(delta > 0, delta, 1.0)
    h = np.where(mx == r, ((g - b) / safe) % 6.0, np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0))
    h = np.where(delta > 0, h / 6.0, 0.0)
    s = np.where(mx > 0, delta / np.where(mx > 0, mx, 1.0), 0.0)
    return np.stack([h, s, mx], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    h6 = (h % 1.0) * 6.0
    i = np.floor(h6).astype(np.int64) % 6
    f = h6 - np.floor(h6)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    choices_r = [v, q, p, p, t, v]
    choices_g = [t, v, v, q, p, p]
    choices_b = [p, p, t, v, v, q]
    r = np.choose(i, choices_r)
    g = np.choose(i, choices_g)
    b = np.choose(i, choices_b)
    return np.stack([r, g, b], axis=-1)


def _hsv(img, rng, hue_shift, saturation_scale):
    hsv = rgb_to_hsv(np.clip(img, 0.0, 1.0))
    hsv[..., 0] = (hsv[..., 0] + hue_shift) % 1.0
    hsv[..., 1] = np.clip(hsv[..., 1] * saturation_scale, 0.0, 1.0)
    return hsv_to_rgb(hsv)


def _invert_channel(img, rng, channel):
    out = img.copy()
    out[..., channel] = 1.0 - out[..., channel]
    return out


def _blur(img, rng, sigma):
    return gaussian_filter(img, sigma=(sigma, sigma, 0.0), mode="reflect")


def _noise_gau(img, rng, sigma):
    return img + rng.normal(0.0, sigma, size=img.shape)


def _noise_pos(img, rng):
    return rng.poisson(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def _channel_shuffle(img, rng, order):
    return img[..., list(order)]


def _dropout(img, rng, p):
    keep = rng.random(img.shape[:2]) >= p
    return img * keep[..., None]


def _coarse_dropout(img, rng, count, max_fraction):
    out = img.copy()
    h, w = img.shape[:2]
    mh, mw = max(1, int(h * max_fraction)), max(1, int(w * max_fraction))
    for _ in range(count):
        rh = int(rng.integers(1, mh + 1))
        rw = int(rng.integers(1, mw + 1))
        top = int(rng.integers(0, h - rh + 1))
        left = int(rng.integers(0, w - rw + 1))
        out[top : top + rh, left : left + rw] = 0.0
    return out


def _multiply(img, rng, factor):
    return img * factor


def _salt_pepper(img, rng, p):
    out = img.copy()
    u = rng.random(img.shape[:2])
    out[u < p / 2] = 0.0
    out[(u >= p / 2) & (u < p)] = 1.0
    return out


def _solarize(img, rng, threshold):
    return np.where(img >= threshold, 1.0 - img, img)


def _jpeg_compression(img, rng, quality):
    arr = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="JPEG", quality=int(quality), subsampling=0)
    buf.seek(0)
    return np.asarray(Image.open(buf).convert("RGB"), dtype=np.float64) / 255.0


_KERNELS: dict[str, Callable] = {
    "contrast_gamma": _contrast_gamma,
    "contrast_linear": _contrast_linear,
    "brightness": _brightness,
    "brightness_channel": _brightness_channel,
    "equalize": _equalize,
    "hsv": _hsv,
    "invert_channel": _invert_channel,
    "blur": _blur,
    "noise_gau": _noise_gau,
    "noise_pos": _noise_pos,
    "channel_shuffle": _channel_shuffle,
    "dropout": _dropout,
    "coarse_dropout": _coarse_dropout,
    "multiply": _multiply,
    "salt_pepper": _salt_pepper,
    "solarize": _solarize,
    "jpeg_compression": _jpeg_compression,
}

# extra discrete parameters drawn per application
_DISCRETE = {
    "brightness_channel": lambda rng: {"channel": int(rng.integers(0, 3))},
    "invert_channel": lambda rng: {"channel": int(rng.integers(0, 3))},
    "channel_shuffle": lambda rng: {"order": tuple(int(i) for i in rng.permutation(3))},
}


@dataclass(frozen=True)
class AugmentOp:
    """A named transform. ``fixed`` pins parameters instead of sampling them."""

    name: str
    kind: str
    ranges: dict = field(default_factory=dict, compare=False)
    fixed: tuple = ()

    def with_params(self, **params) -> "AugmentOp":
        return replace(self, fixed=tuple(sorted({**dict(self.fixed), **params}.items())))

    def sample_params(self, rng: np.random.Generator) -> dict:
        params = {}
        for key, (lo, hi) in self.ranges.items():
            if key in _INTEGER_PARAMS:
                params[key] = int(rng.integers(int(lo), int(hi) + 1))
            else:
                params[key] = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
        if self.name in _DISCRETE:
            params.update(_DISCRETE[self.name](rng))
        params.update(dict(self.fixed))
        return params

    def __call__(self, image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if self.kind != PHOTOMETRIC or self.name not in _KERNELS:
            raise ValueError(f"{self.name} is not a standalone photometric op")
        params = self.sample_params(rng)
        return np.clip(_KERNELS[self.name](image, rng, **params), 0.0, 1.0)


def photometric_pool(ranges: Optional[dict] = None) -> list[AugmentOp]:
    table = {k: dict(v) for k, v in DEFAULT_RANGES.items()}
    for name, override in (ranges or {}).items():
        if name not in table:
            raise ConfigurationError(f"unknown augmentation op {name!r}")
        table[name].update(override)
    return [AugmentOp(name, PHOTOMETRIC, table[name]) for name in DEFAULT_RANGES]


POOL = photometric_pool()
OPS = {op.name: op for op in POOL}

BASIC_OPS = (
    AugmentOp("random_scale", GEOMETRIC),
    AugmentOp("random_flip", GEOMETRIC),
    AugmentOp("random_crop", GEOMETRIC),
    AugmentOp("normalization", PHOTOMETRIC),
)
_BASIC_NAMES = {op.name for op in BASIC_OPS}


def sample_policy(n_ops: int, rng: np.random.Generator, pool: Optional[Sequence[AugmentOp]] = None) -> list[AugmentOp]:
    """Draw ``n_ops`` photometric ops uniformly with replacement, then append the basic transforms."""
    pool = list(POOL if pool is None else pool)
    if not 1 <= n_ops <= len(pool):
        raise ConfigurationError(f"n_ops must lie in [1, {len(pool)}], got {n_ops}")
    picks = rng.integers(0, len(pool), size=n_ops)
    return [pool[i] for i in picks] + list(BASIC_OPS)


# ----------------------------------------------------------------------------
# Geometry


@dataclass
class AugConfig:
    crop_size: tuple = (64, 64)
    scale_range: tuple = (0.5, 2.0)
    flip_prob: float = 0.5
    mean: tuple = (0.0, 0.0, 0.0)
    pad: bool = True
    ignore_index: int = IGNORE_INDEX
    n_ops: int = 2

    def __post_init__(self):
        if isinstance(self.crop_size, int):
            self.crop_size = (self.crop_size, self.crop_size)
        self.crop_size = tuple(int(c) for c in self.crop_size)


@dataclass(frozen=True)
class GeometryParams:
    scale: float
    flip: bool
    top: int
    left: int


def scaled_size(h: int, w: int, scale: float) -> tuple[int, int]:
    return max(1, int(round(h * scale))), max(1, int(round(w * scale)))


def sample_geometry(rng: np.random.Generator, shape: tuple, cfg: AugConfig) -> GeometryParams:
    h, w = shape[:2]
    lo, hi = cfg.scale_range
    scale = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    flip = bool(rng.random() < cfg.flip_prob)
    sh, sw = scaled_size(h, w, scale)
    ch, cw = cfg.crop_size
    if (sh < ch or sw < cw) and not cfg.pad:
        raise GeometryError(f"crop {ch}x{cw} larger than scaled image {sh}x{sw} and padding disabled")
    ph, pw = max(sh, ch), max(sw, cw)
    top = int(rng.integers(0, ph - ch + 1))
    left = int(rng.integers(0, pw - cw + 1))
    return GeometryParams(scale, flip, top, left)


def nearest_indices(n_in: int, n_out: int) -> np.ndarray:
    if n_in == n_out:
        return np.arange(n_in)
    return np.minimum(np.floor((np.arange(n_out) + 0.5) * (n_in / n_out)).astype(np.int64), n_in - 1)


def apply_geometry(image: np.ndarray, label: np.ndarray, params: GeometryParams, cfg: AugConfig):
    """Scale, flip, pad and crop image and label with one spatial mapping."""
    h, w = image.shape[:2]
    sh, sw = scaled_size(h, w, params.scale)
    if (sh, sw) != (h, w):
        image = resize_array(image.transpose(2, 0, 1), sh, sw).transpose(1, 2, 0)
        label = label[nearest_indices(h, sh)][:, nearest_indices(w, sw)]
    if params.flip:
        image = image[:, ::-1]
        label = label[:, ::-1]
    ch, cw = cfg.crop_size
    if sh < ch or sw < cw:
        if not cfg.pad:
            raise GeometryError(f"crop {ch}x{cw} larger than scaled image {sh}x{sw} and padding disabled")
        ph, pw = max(sh, ch), max(sw, cw)
        padded = np.empty((ph, pw, image.shape[2]))
        padded[:] = np.asarray(cfg.mean, dtype=np.float64)
        padded[:sh, :sw] = image
        plabel = np.full((ph, pw), cfg.ignore_index, dtype=label.dtype)
        plabel[:sh, :sw] = label
        image, label = padded, plabel
    image = image[params.top : params.top + ch, params.left : params.left + cw]
    label = label[params.top : params.top + ch, params.left : params.left + cw]
    return np.ascontiguousarray(image), np.ascontiguousarray(label)


def normalize(image: np.ndarray, mean) -> np.ndarray:
    return image - np.asarray(mean, dtype=np.float64)


def apply_weak(image: np.ndarray, label: np.ndarray, rng: np.random.Generator, cfg: Optional[AugConfig] = None):
    """Random scale, random horizontal flip, random crop, mean subtraction."""
    cfg = cfg or AugConfig()
    params = sample_geometry(rng, image.shape, cfg)
    image, label = apply_geometry(np.asarray(image, dtype=np.float64), label, params, cfg)
    return normalize(image, cfg.mean), label


def apply_strong(
    image: np.ndarray,
    label: np.ndarray,
    policy: Sequence[AugmentOp],
    rng: np.random.Generator,
    cfg: Optional[AugConfig] = None,
):
    """Photometric ops of ``policy`` in order on the image, then the weak pipeline on both."""
    cfg = cfg or AugConfig()
    image = np.asarray(image, dtype=np.float64)
    for op in policy:
        if op.name in _BASIC_NAMES:
            continue
        image = op(image, rng)
    return apply_weak(image, label, rng, cfg)


def sample_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for one (seed, step, slot, ...) coordinate."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *[int(k) for k in keys]]))
