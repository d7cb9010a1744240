"""Batch normalization with distribution-specific running statistics.

A :class:`DsbnState` keeps one pair of affine parameters (gamma, beta) and
two banks of running statistics: the *weak* bank, fed by weakly augmented
batches and used at evaluation time, and the *strong* bank (the parallel
BN), fed only by strongly augmented batches and never read at evaluation.

Running statistics follow the exponential update

    running <- momentum * running + (1 - momentum) * batch_statistic

with the momentum weighting the old value, and the biased (divide by m)
batch variance.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import BatchSizeError, DimensionError
from .numerics import Tensor, as_tensor, record_op


class BranchTag(enum.Enum):
    WEAK = "weak"
    STRONG = "strong"


class BnMode(enum.Enum):
    """How a layer treats STRONG batches during training.

    DSBN routes them to the strong bank; TRAINABLE sends everything to the
    single weak bank (plain BN); FIXED normalizes with the frozen weak bank
    and updates nothing.
    """

    DSBN = "dsbn"
    TRAINABLE = "trainable"
    FIXED = "fixed"


@dataclass
class DsbnState:
    channels: int
    momentum: float = 0.9
    eps: float = 1e-5
    gamma: Tensor = field(default=None, repr=False)
    beta: Tensor = field(default=None, repr=False)
    weak_running_mean: np.ndarray = field(default=None, repr=False)
    weak_running_var: np.ndarray = field(default=None, repr=False)
    strong_running_mean: np.ndarray = field(default=None, repr=False)
    strong_running_var: np.ndarray = field(default=None, repr=False)
    weak_updates: int = 0
    strong_updates: int = 0

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")
        c = self.channels
        if self.gamma is None:
            self.gamma = Tensor(np.ones(c), requires_grad=True)
        if self.beta is None:
            self.beta = Tensor(np.zeros(c), requires_grad=True)
        if self.weak_running_mean is None:
            self.weak_running_mean = np.zeros(c)
        if self.weak_running_var is None:
            self.weak_running_var = np.ones(c)
        if self.strong_running_mean is None:
            self.strong_running_mean = self.weak_running_mean.copy()
        if self.strong_running_var is None:
            self.strong_running_var = self.weak_running_var.copy()

    def bank(self, tag: BranchTag) -> tuple[np.ndarray, np.ndarray]:
        if tag is BranchTag.STRONG:
            return self.strong_running_mean, self.strong_running_var
        return self.weak_running_mean, self.weak_running_var

    def parameters(self) -> list[Tensor]:
        return [self.gamma, self.beta]


def batch_statistics(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and biased variance over N, H, W (two-pass)."""
    mu = x.mean(axis=(0, 2, 3))
    lo = x.min(axis=(0, 2, 3))
    hi = x.max(axis=(0, 2, 3))
    # constant channels: the summed mean may be off by an ulp, force it exact
    const = lo == hi
    if const.any():
        mu = np.where(const, lo, mu)
    centered = x - mu[None, :, None, None]
    var = (centered * centered).mean(axis=(0, 2, 3))
    return mu, var


def _check_input(x: Tensor, state: DsbnState) -> None:
    if x.ndim != 4 or x.shape[1] != state.channels:
        raise DimensionError(f"batch norm expects N,{state.channels},H,W, got {x.shape}")


def _affine_normalize(x: Tensor, state: DsbnState, mu: np.ndarray, var: np.ndarray, batch_stats: bool) -> Tensor:
    gamma, beta = state.gamma, state.beta
    sigma = np.sqrt(var + state.eps)
    xhat = (x.data - mu[None, :, None, None]) / sigma[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma.data[None, :, None, None]
        if batch_stats:
            # mu and sigma depend on x
            dx = (
                dxhat
                - dxhat.mean(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
            ) / sigma[None, :, None, None]
        else:
            dx = dxhat / sigma[None, :, None, None]
        return dx, dgamma, dbeta

    name = "bn_forward_train" if batch_stats else "bn_forward_frozen"
    return record_op(out, (x, gamma, beta), backward, name)


def bn_forward_train(x, state: DsbnState, tag: BranchTag = BranchTag.WEAK, update: bool = True) -> Tensor:
    """Normalize with batch statistics and update the bank selected by ``tag``."""
    x = as_tensor(x)
    _check_input(x, state)
    if x.shape[0] * x.shape[2] * x.shape[3] < 2:
        raise BatchSizeError(f"batch norm needs N*H*W >= 2 per channel, got input shape {x.shape}")
    mu, var = batch_statistics(x.data)
    if update:
        a = state.momentum
        if tag is BranchTag.STRONG:
            state.strong_running_mean = a * state.strong_running_mean + (1.0 - a) * mu
            state.strong_running_var = a * state.strong_running_var + (1.0 - a) * var
            state.strong_updates += 1
        else:
            state.weak_running_mean = a * state.weak_running_mean + (1.0 - a) * mu
            state.weak_running_var = a * state.weak_running_var + (1.0 - a) * var
            state.weak_updates += 1
    return _affine_normalize(x, state, mu, var, batch_stats=True)


def bn_forward_eval(x, state: DsbnState) -> Tensor:
    """Normalize with the weak bank only. Never touches the strong bank."""
    x = as_tensor(x)
    _check_input(x, state)
    return _affine_normalize(x, state, state.weak_running_mean, state.weak_running_var, batch_stats=False)


def bn_forward_frozen(x, state: DsbnState) -> Tensor:
    """Training-time forward of the fixed-BN variant: frozen weak statistics, gradients to x, gamma, beta."""
    return bn_forward_eval(x, state)


def init_pbn(state: DsbnState) -> None:
    """Copy the weak bank into the strong bank."""
    state.strong_running_mean = state.weak_running_mean.copy()
    state.strong_running_var = state.weak_running_var.copy()
    state.strong_updates = 0


def bn_forward(x, state: DsbnState, tag: BranchTag, training: bool, mode: BnMode = BnMode.DSBN) -> Tensor:
    """Dispatch on train/eval and BN variant."""
    if not training:
        return bn_forward_eval(x, state)
    if mode is BnMode.FIXED:
        return bn_forward_frozen(x, state)
    if mode is BnMode.TRAINABLE:
        tag = BranchTag.WEAK
    return bn_forward_train(x, state, tag)


# ----------------------------------------------------------------------------
# Weak vs strong statistics report

CSV_HEADER = ("layer", "channel", "weak_mean", "weak_var", "strong_mean", "strong_var")


@dataclass
class StatsReport:
    rows: list
    layer_divergence: dict  # layer -> (mean_div, logvar_div)
    mean_divergence: float
    logvar_divergence: float
    strong_at_init: bool

    @property
    def divergence(self) -> float:
        return self.mean_divergence + self.logvar_divergence

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_HEADER)
            for layer, ch, wm, wv, sm, sv in self.rows:
                writer.writerow([layer, ch, repr(float(wm)), repr(float(wv)), repr(float(sm)), repr(float(sv))])

    def write_summary(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(("layer", "mean_divergence", "logvar_divergence"))
            for layer, (md, lv) in self.layer_divergence.items():
                writer.writerow([layer, repr(md), repr(lv)])
            writer.writerow(["ALL", repr(self.mean_divergence), repr(self.logvar_divergence)])
            writer.writerow(["strong_at_init", int(self.strong_at_init), ""])


def _log_var(v: np.ndarray, eps: float) -> np.ndarray:
    return np.log(v + eps)


def stats_report(layers) -> StatsReport:
    """Tabulate both banks of every normalization layer.

    ``layers`` is a model exposing ``norm_layers()`` or an iterable of
    ``(name, DsbnState)`` pairs.
    """
    named: Sequence[tuple[str, DsbnState]] = list(layers.norm_layers() if hasattr(layers, "norm_layers") else layers)
    rows = []
    per_layer = {}
    dm_all, dv_all = [], []
    strong_at_init = True
    for name, st in named:
        for ch in range(st.channels):
            rows.append(
                (
                    name,
                    ch,
                    st.weak_running_mean[ch],
                    st.weak_running_var[ch],
                    st.strong_running_mean[ch],
                    st.strong_running_var[ch],
                )
            )
        dm = np.abs(st.weak_running_mean - st.strong_running_mean)
        dv = np.abs(_log_var(st.weak_running_var, st.eps) - _log_var(st.strong_running_var, st.eps))
        per_layer[name] = (float(dm.mean()), float(dv.mean()))
        dm_all.append(dm)
        dv_all.append(dv)
        if st.strong_updates > 0:
            strong_at_init = False
    mean_div = float(np.concatenate(dm_all).mean()) if dm_all else 0.0
    var_div = float(np.concatenate(dv_all).mean()) if dv_all else 0.0
    return StatsReport(rows, per_layer, mean_div, var_div, strong_at_init)


def read_stats_csv(path) -> list:
    with open(path, encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CSV_HEADER:
            raise ValueError(f"unexpected header {header}")
        return [(r[0], int(r[1]), float(r[2]), float(r[3]), float(r[4]), float(r[5])) for r in reader]


def all_parameters(states: Iterable[DsbnState]) -> list[Tensor]:
    return [p for st in states for p in st.parameters()]
