"""Synthetic shape dataset, labeled/unlabeled splitting, and file formats.

On-disk layout written by :func:`generate_dataset`::

    <root>/images/<id>.ppm     binary P6, 8-bit RGB
    <root>/labels/<id>.pgm     binary P5, 8-bit class indices (255 = ignore)
    <root>/manifest.tsv        id, image, label or "-", provenance, split
    <root>/mean.txt            three lines, per-channel mean in [0, 1]
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, FormatError

IGNORE_INDEX = 255

PROVENANCES = ("gt", "pseudo", "none")
SPLITS = ("train-labeled", "train-unlabeled", "val")


# ----------------------------------------------------------------------------
# PPM / PGM


def _read_pnm(path, magic: bytes) -> tuple[np.ndarray, int, int, int]:
    data = Path(path).read_bytes()
    if data[:2] != magic:
        raise FormatError(f"bad magic number {data[:2]!r}, expected {magic!r}", path, 0)
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError("malformed header", path, start)
        fields.append(int(data[start:pos]))
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise FormatError("header not terminated by whitespace", path, pos)
    pos += 1
    width, height, maxval = fields
    if maxval != 255:
        raise FormatError(f"unsupported max value {maxval}, expected 255", path, pos - 1)
    return np.frombuffer(data, dtype=np.uint8), pos, width, height


def read_image(path) -> np.ndarray:
    """Read a P6 file into an H x W x 3 uint8 array."""
    buf, pos, width, height = _read_pnm(path, b"P6")
    need = width * height * 3
    if len(buf) - pos < need:
        raise FormatError(f"truncated payload: {len(buf) - pos} of {need} bytes", path, len(buf))
    return buf[pos : pos + need].reshape(height, width, 3).copy()


def write_image(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 uint8 image, got {image.dtype} {image.shape}")
    h, w = image.shape[:2]
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(image).tobytes())


def read_label(path, num_classes: Optional[int] = None, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """Read a P5 label map; values must be < num_classes or equal ignore_index."""
    buf, pos, width, height = _read_pnm(path, b"P5")
    need = width * height
    if len(buf) - pos < need:
        raise FormatError(f"truncated payload: {len(buf) - pos} of {need} bytes", path, len(buf))
    label = buf[pos : pos + need].reshape(height, width).copy()
    if num_classes is not None:
        bad = np.flatnonzero((label >= num_classes) & (label != ignore_index))
        if bad.size:
            raise FormatError(
                f"label value {int(label.flat[bad[0]])} out of range for {num_classes} classes", path, pos + int(bad[0])
            )
    return label


def write_label(path, label: np.ndarray) -> None:
    label = np.asarray(label)
    if label.ndim != 2 or label.min(initial=0) < 0 or label.max(initial=0) > 255:
        raise ValueError(f"expected H x W label map with values in 0..255, got shape {label.shape}")
    h, w = label.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + label.astype(np.uint8).tobytes())


def read_mean(path) -> tuple[float, float, float]:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if len(lines) != 3:
        raise FormatError(f"mean file must have 3 lines, found {len(lines)}", path)
    try:
        return tuple(float(v) for v in lines)  # type: ignore[return-value]
    except ValueError as exc:
        raise FormatError(f"mean file has a non-numeric line: {exc}", path) from None


def write_mean(path, mean: Sequence[float]) -> None:
    Path(path).write_text("".join(f"{float(m)!r}\n" for m in mean), encoding="utf-8")


# ----------------------------------------------------------------------------
# Manifest


@dataclass(frozen=True)
class Sample:
    id: str
    image_path: str
    label_path: Optional[str]
    provenance: str
    split: str


def read_manifest(path, strict: bool = False) -> list[Sample]:
    """Parse a manifest; relative paths are resolved against its directory."""
    path = Path(path)
    root = path.parent
    raw = path.read_bytes()
    samples = []
    seen = set()
    offset = 0
    for line in raw.decode("utf-8").splitlines(keepends=True):
        here = offset
        offset += len(line.encode("utf-8"))
        text = line.rstrip("\r\n")
        if not text.strip() or text.startswith("#"):
            continue
        parts = text.split("\t")
        if len(parts) != 5:
            raise FormatError(f"expected 5 tab-separated fields, got {len(parts)}", path, here)
        sid, img, lab, prov, split = parts
        if sid in seen:
            raise FormatError(f"duplicate sample id {sid!r}", path, here)
        if prov not in PROVENANCES:
            raise FormatError(f"unknown provenance {prov!r}", path, here)
        if split not in SPLITS:
            raise FormatError(f"unknown split {split!r}", path, here)
        label = None if lab == "-" else str(root / lab)
        if (label is None) != (prov == "none"):
            raise FormatError(f"sample {sid!r}: label path must be present iff provenance is not 'none'", path, here)
        seen.add(sid)
        s = Sample(sid, str(root / img), label, prov, split)
        if strict:
            for p in (s.image_path, s.label_path):
                if p is not None and not os.path.exists(p):
                    raise FormatError(f"sample {sid!r} references missing file {p}", path, here)
        samples.append(s)
    return samples


def write_manifest(path, samples: Iterable[Sample]) -> None:
    path = Path(path)
    root = path.parent.resolve()
    lines = ["# id\timage\tlabel\tprovenance\tsplit\n"]
    seen = set()
    for s in samples:
        if s.id in seen:
            raise FormatError(f"duplicate sample id {s.id!r}", path)
        seen.add(s.id)
        lab = "-" if s.label_path is None else _relative(s.label_path, root)
        lines.append(f"{s.id}\t{_relative(s.image_path, root)}\t{lab}\t{s.provenance}\t{s.split}\n")
    path.write_text("".join(lines), encoding="utf-8")


def _relative(p: str, root: Path) -> str:
    ap = Path(p).resolve()
    try:
        return ap.relative_to(root).as_posix()
    except ValueError:
        return os.path.relpath(ap, root).replace(os.sep, "/")


# ----------------------------------------------------------------------------
# Synthetic scenes

SHAPE_KINDS = ("ellipse", "rectangle", "triangle")


@dataclass
class SyntheticSpec:
    image_size: int = 64
    num_classes: int = 4
    shapes_per_image: tuple = (3, 6)
    size_range: tuple = (5.0, 14.0)
    noise_amplitude: float = 0.08
    color_jitter: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")


@dataclass
class Shape:
    kind: str
    label: int
    params: dict = field(default_factory=dict)


def class_colors(num_classes: int) -> np.ndarray:
    """Base RGB tint per class (row 0 is the background)."""
    golden = 0.618033988749895
    colors = [np.array([0.45, 0.45, 0.45])]
    for k in range(1, num_classes):
        hue = (k * golden) % 1.0
        colors.append(0.5 + 0.3 * np.array([math.cos(2 * math.pi * (hue + o / 3)) for o in range(3)]))
    return np.stack(colors)


def shape_mask(shape: Shape, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Boolean coverage of sample points (ys, xs) by ``shape``."""
    p = shape.params
    if shape.kind == "ellipse":
        dx, dy = xs - p["cx"], ys - p["cy"]
        c, s = math.cos(p["angle"]), math.sin(p["angle"])
        u = (dx * c + dy * s) / p["rx"]
        v = (-dx * s + dy * c) / p["ry"]
        return u * u + v * v <= 1.0
    if shape.kind == "rectangle":
        dx, dy = xs - p["cx"], ys - p["cy"]
        c, s = math.cos(p["angle"]), math.sin(p["angle"])
        u = dx * c + dy * s
        v = -dx * s + dy * c
        return (np.abs(u) <= p["hw"]) & (np.abs(v) <= p["hh"])
    if shape.kind == "triangle":
        (x0, y0), (x1, y1), (x2, y2) = p["vertices"]
        e0 = (x1 - x0) * (ys - y0) - (y1 - y0) * (xs - x0)
        e1 = (x2 - x1) * (ys - y1) - (y2 - y1) * (xs - x1)
        e2 = (x0 - x2) * (ys - y2) - (y0 - y2) * (xs - x2)
        return ((e0 >= 0) & (e1 >= 0) & (e2 >= 0)) | ((e0 <= 0) & (e1 <= 0) & (e2 <= 0))
    raise ValueError(f"unknown shape kind {shape.kind!r}")


def _random_shape(rng: np.random.Generator, spec: SyntheticSpec) -> Shape:
    n = spec.image_size
    label = int(rng.integers(1, spec.num_classes))
    kind = SHAPE_KINDS[(label - 1) % len(SHAPE_KINDS)]
    lo, hi = spec.size_range
    cx, cy = rng.uniform(0.1 * n, 0.9 * n, size=2)
    angle = float(rng.uniform(0, math.pi))
    if kind == "ellipse":
        rx, ry = rng.uniform(lo, hi, size=2)
        params = {"cx": cx, "cy": cy, "rx": rx, "ry": ry, "angle": angle}
    elif kind == "rectangle":
        hw, hh = rng.uniform(0.8 * lo, 0.8 * hi, size=2)
        params = {"cx": cx, "cy": cy, "hw": hw, "hh": hh, "angle": angle}
    else:
        r = rng.uniform(1.2 * lo, 1.2 * hi)
        base = rng.uniform(0, 2 * math.pi)
        angles = base + np.array([0.0, 2 * math.pi / 3, 4 * math.pi / 3]) + rng.uniform(-0.4, 0.4, size=3)
        verts = tuple((float(cx + r * math.cos(a)), float(cy + r * math.sin(a))) for a in angles)
        params = {"vertices": verts}
    return Shape(kind, label, params)


def render_sample(spec: SyntheticSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, list[Shape]]:
    """Render one scene; labels are sampled at pixel centers, later shapes on top."""
    n = spec.image_size
    ys, xs = np.mgrid[0:n, 0:n] + 0.5
    colors = class_colors(spec.num_classes)
    gx, gy = rng.uniform(-0.2, 0.2, size=(2, 3))
    bg = colors[0] + rng.uniform(-spec.color_jitter, spec.color_jitter, size=3)
    image = bg + (xs[..., None] / n - 0.5) * gx + (ys[..., None] / n - 0.5) * gy
    label = np.zeros((n, n), dtype=np.uint8)
    lo, hi = spec.shapes_per_image
    shapes = [_random_shape(rng, spec) for _ in range(int(rng.integers(lo, hi + 1)))]
    for shape in shapes:
        m = shape_mask(shape, ys, xs)
        color = colors[shape.label] + rng.uniform(-spec.color_jitter, spec.color_jitter, size=3)
        image[m] = color
        label[m] = shape.label
    image = image + rng.normal(0.0, spec.noise_amplitude, size=image.shape)
    image = np.clip(np.round(np.clip(image, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    return image, label, shapes


def _sample_rng(seed: int, group: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, group, index]))


def generate_dataset(spec: SyntheticSpec, n_train: int, n_val: int, out_dir) -> list[Sample]:
    """Render and write a dataset; returns the manifest rows (all train rows fully labeled)."""
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "labels").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    samples = []
    channel_sum = np.zeros(3)
    pixels = 0
    mean_pixels = np.zeros(3)
    all_pixels = 0
    for group, (prefix, count, split) in enumerate((("train", n_train, "train-labeled"), ("val", n_val, "val"))):
        for i in range(count):
            image, label, _ = render_sample(spec, _sample_rng(spec.seed, group, i))
            sid = f"{prefix}_{i:05d}"
            ip, lp = out / "images" / f"{sid}.ppm", out / "labels" / f"{sid}.pgm"
            write_image(ip, image)
            write_label(lp, label)
            samples.append(Sample(sid, str(ip), str(lp), "gt", split))
            s = image.reshape(-1, 3).sum(axis=0) / 255.0
            if split == "train-labeled":
                channel_sum += s
                pixels += image.shape[0] * image.shape[1]
            mean_pixels += s
            all_pixels += image.shape[0] * image.shape[1]
    mean = channel_sum / pixels if pixels else (mean_pixels / all_pixels if all_pixels else np.full(3, 0.5))
    write_manifest(out / "manifest.tsv", samples)
    write_mean(out / "mean.txt", mean)
    return read_manifest(out / "manifest.tsv")


# ----------------------------------------------------------------------------
# Labeled / unlabeled split


def labeled_count(n: int, fraction: float) -> int:
    return int(math.floor(fraction * n + 0.5))


def split(samples: Sequence[Sample], labeled_fraction: float, seed: int) -> tuple[list[Sample], list[Sample]]:
    """Uniformly subsample the training rows; the rest become unlabeled (label withheld)."""
    if not 0 < labeled_fraction <= 1:
        raise ConfigurationError(f"labeled fraction must lie in (0, 1], got {labeled_fraction}")
    train = [s for s in samples if s.split != "val"]
    k = labeled_count(len(train), labeled_fraction)
    if k == 0:
        raise ConfigurationError(
            f"labeled fraction {labeled_fraction} of {len(train)} training images leaves no labeled image"
        )
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, 0x5B1]))
    chosen = set(rng.choice(len(train), size=k, replace=False).tolist())
    labeled, unlabeled = [], []
    for i, s in enumerate(train):
        if i in chosen:
            labeled.append(replace(s, split="train-labeled"))
        else:
            unlabeled.append(replace(s, label_path=None, provenance="none", split="train-unlabeled"))
    return labeled, unlabeled


# ----------------------------------------------------------------------------
# In-memory arrays


@dataclass
class ArraySet:
    ids: list
    images: np.ndarray  # N, H, W, 3 float in [0, 1]
    labels: Optional[np.ndarray]  # N, H, W uint8

    def __len__(self) -> int:
        return len(self.ids)


def load_arrays(samples: Sequence[Sample], num_classes: Optional[int] = None, with_labels: bool = True) -> ArraySet:
    ids = [s.id for s in samples]
    if not samples:
        return ArraySet(ids, np.zeros((0, 0, 0, 3)), np.zeros((0, 0, 0), dtype=np.uint8) if with_labels else None)
    images = np.stack([read_image(s.image_path) for s in samples]).astype(np.float64) / 255.0
    labels = None
    if with_labels:
        missing = [s.id for s in samples if s.label_path is None]
        if missing:
            raise ConfigurationError(f"samples without labels: {missing[:3]}")
        labels = np.stack([read_label(s.label_path, num_classes) for s in samples])
    return ArraySet(ids, images, labels)
