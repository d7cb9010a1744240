"""Hard pseudo labels from a teacher with multi-scale + flip test-time augmentation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .datahub import Sample, read_image, write_label, write_manifest
from .errors import ConfigurationError, FormatError, GeometryError
from .normalization import BranchTag
from .numerics import no_grad, resize_array, softmax_array

logger = logging.getLogger(__name__)


@dataclass
class TtaConfig:
    scales: tuple = (0.5, 0.75, 1.0, 1.5, 1.75)
    flip: bool = True

    def __post_init__(self):
        self.scales = tuple(float(s) for s in self.scales)
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ConfigurationError(f"TTA scales must be non-empty and positive, got {self.scales}")


def _scaled_extent(n: int, scale: float) -> int:
    # the network needs extents divisible by 4
    return int(round(n * scale / 4.0)) * 4


def predict_probs(net, images: np.ndarray) -> np.ndarray:
    """Eval-mode softmax of an N,3,H,W batch."""
    with no_grad():
        logits = net.forward(images, BranchTag.WEAK, mode="eval")
    return softmax_array(logits.data)


def tta_predict(teacher, image: np.ndarray, cfg: TtaConfig = None) -> np.ndarray:
    """Average softmax over scales (and mirrors) at the input resolution.

    ``image`` is a normalized 3,H,W array or an N,3,H,W batch; returns C,H,W
    (or N,C,H,W) probabilities.
    """
    cfg = cfg or TtaConfig()
    batch = np.asarray(image, dtype=np.float64)
    single = batch.ndim == 3
    if single:
        batch = batch[None]
    h, w = batch.shape[2:]
    total = None
    passes = 0
    for scale in cfg.scales:
        sh, sw = _scaled_extent(h, scale), _scaled_extent(w, scale)
        if sh < 4 or sw < 4:
            raise GeometryError(f"scale {scale} shrinks {h}x{w} input below 4x4")
        scaled = resize_array(batch, sh, sw)
        variants = [(scaled, False)]
        if cfg.flip:
            variants.append((scaled[..., ::-1], True))
        for x, flipped in variants:
            probs = predict_probs(teacher, np.ascontiguousarray(x))
            if flipped:
                probs = probs[..., ::-1]
            probs = resize_array(probs, h, w)
            total = probs if total is None else total + probs
            passes += 1
    out = total / passes
    return out[0] if single else out


def harden(probs: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over the class axis; ties go to the lowest index."""
    probs = np.asarray(probs)
    axis = 0 if probs.ndim == 3 else 1
    return np.argmax(probs, axis=axis).astype(np.uint8)


def onehot(label: np.ndarray, num_classes: int) -> np.ndarray:
    return (np.arange(num_classes)[:, None, None] == label[None]).astype(np.float64)


@dataclass
class SemiDataset:
    samples: list
    errors: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors


def generate_semi_dataset(
    teacher,
    unlabeled: Sequence[Sample],
    cfg: TtaConfig,
    out_dir,
    mean=(0.0, 0.0, 0.0),
    batch_size: int = 8,
) -> SemiDataset:
    """Label every unlabeled image and write labels plus a ``pseudo`` manifest.

    Unreadable images are recorded in ``errors`` and skipped.
    """
    out = Path(out_dir)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    mean = np.asarray(mean, dtype=np.float64)
    readable, errors = [], []
    for s in unlabeled:
        try:
            readable.append((s, read_image(s.image_path)))
        except (OSError, FormatError) as exc:
            logger.warning("skipping %s: %s", s.id, exc)
            errors.append((s.id, str(exc)))
    written = []
    for start in range(0, len(readable), batch_size):
        chunk = readable[start : start + batch_size]
        by_shape: dict = {}
        for s, img in chunk:
            by_shape.setdefault(img.shape, []).append((s, img))
        for group in by_shape.values():
            batch = np.stack([(img / 255.0 - mean).transpose(2, 0, 1) for _, img in group])
            labels = harden(tta_predict(teacher, batch, cfg))
            for (s, _), lab in zip(group, labels):
                path = out / "labels" / f"{s.id}.pgm"
                write_label(path, lab)
                written.append(Sample(s.id, s.image_path, str(path), "pseudo", "train-unlabeled"))
    order = {s.id: i for i, s in enumerate(unlabeled)}
    written.sort(key=lambda s: order[s.id])
    write_manifest(out / "manifest.tsv", written)
    return SemiDataset(written, errors)
