"""Pixel-wise cross-entropy and the self-correction loss.

Both losses take N,C,H,W logits and N,H,W integer label maps, skip pixels
carrying the ignore index, and average over the remaining pixels.

The self-correction loss blends, per pixel ``i`` with softmax ``p`` and
target class ``t``::

    l_i = w_i * (-log p_t) + (1 - w_i) * (-A) * (1 - p_t),    w_i = max_c p_c

The second term is reverse cross-entropy against the one-hot target with
``log 0`` clamped to ``A`` (negative, default -4). ``w_i`` is a confidence
readout and is treated as a constant during backpropagation by default.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DimensionError, LabelDomainError
from .numerics import Tensor, as_tensor, log_softmax_array, record_op

IGNORE_INDEX = 255
LOG_ZERO_CLAMP = -4.0


@dataclass
class LossOutput:
    loss: Tensor
    count: int
    weights: Optional[np.ndarray] = None

    @property
    def value(self) -> float:
        return float(self.loss.data)


def _validate(logits: Tensor, labels: np.ndarray, ignore_index: int) -> np.ndarray:
    if logits.ndim != 4:
        raise DimensionError(f"logits must be N,C,H,W, got {logits.shape}")
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels[None]
    n, c, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise DimensionError(f"label shape {labels.shape} does not match logits shape {logits.shape}")
    bad = (labels != ignore_index) & ((labels < 0) | (labels >= c))
    if bad.any():
        raise LabelDomainError(
            f"label value {int(labels[bad][0])} outside 0..{c - 1} and not the ignore index {ignore_index}"
        )
    return labels


def _prepare(logits: Tensor, labels: np.ndarray, ignore_index: int):
    labels = _validate(logits, labels, ignore_index)
    valid = labels != ignore_index
    target = np.where(valid, labels, 0).astype(np.int64)
    logp = log_softmax_array(logits.data)
    logp_t = np.take_along_axis(logp, target[:, None], axis=1)[:, 0]
    p = np.exp(logp)
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, target[:, None], 1.0, axis=1)
    return valid, logp_t, p, onehot


def cross_entropy(logits, labels, ignore_index: int = IGNORE_INDEX) -> LossOutput:
    """Mean of -log softmax(logits)[label] over non-ignored pixels."""
    logits = as_tensor(logits)
    valid, logp_t, p, onehot = _prepare(logits, labels, ignore_index)
    count = int(valid.sum())
    if count == 0:
        return LossOutput(record_op(np.array(0.0), (logits,), lambda g: (np.zeros(logits.shape),), "cross_entropy"), 0)
    loss = -(logp_t[valid]).sum() / count
    mask = valid[:, None].astype(p.dtype)

    def backward(g):
        return (g * (p - onehot) * mask / count,)

    return LossOutput(record_op(np.array(loss), (logits,), backward, "cross_entropy"), count)


def scl(
    logits,
    pseudo_labels,
    ignore_index: int = IGNORE_INDEX,
    log_zero: float = LOG_ZERO_CLAMP,
    weights: Optional[np.ndarray] = None,
    detach_weights: bool = True,
) -> LossOutput:
    """Self-correction loss on hard pseudo labels.

    ``weights`` overrides the per-pixel confidence map (a scalar 1.0 turns
    the loss into plain cross-entropy). With ``detach_weights=False`` the
    gradient also flows through the max-softmax confidence.
    """
    logits = as_tensor(logits)
    valid, logp_t, p, onehot = _prepare(logits, pseudo_labels, ignore_index)
    p_t = np.exp(logp_t)
    if weights is None:
        w = p.max(axis=1)
        detached = detach_weights
    else:
        w = np.broadcast_to(np.asarray(weights, dtype=p.dtype), p_t.shape)
        detached = True
    count = int(valid.sum())
    if count == 0:
        return LossOutput(record_op(np.array(0.0), (logits,), lambda g: (np.zeros(logits.shape),), "scl"), 0, w)
    ce_term = -logp_t
    rce_term = -log_zero * (1.0 - p_t)
    per_pixel = w * ce_term + (1.0 - w) * rce_term
    loss = per_pixel[valid].sum() / count
    mask = valid.astype(p.dtype)

    def backward(g):
        # d/dz [w*(-log p_t) + (1-w)*(-A)*(1-p_t)] with w fixed
        coef = w + (1.0 - w) * (-log_zero) * p_t
        grad = coef[:, None] * (p - onehot)
        if not detached:
            # w = p_k with k = argmax; dp_k/dz = p_k (e_k - p)
            k = p.argmax(axis=1)
            ek = np.zeros_like(p)
            np.put_along_axis(ek, k[:, None], 1.0, axis=1)
            dl_dw = ce_term - rce_term
            grad = grad + (dl_dw * w)[:, None] * (ek - p)
        return (g * grad * mask[:, None] / count,)

    return LossOutput(record_op(np.array(loss), (logits,), backward, "scl"), count, np.array(w))
