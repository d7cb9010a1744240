"""Dense float64 tensors with a dynamic reverse-mode tape.

Every differentiable operation records a node on the active :class:`Tape`
when at least one input requires a gradient. ``Tensor.backward`` then walks
the tape in exact reverse recording order, which is a valid topological
order because a node can only consume tensors recorded before it.

Any operation that produces NaN or inf raises :class:`NumericsError`
immediately instead of letting it propagate.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, DomainError, NumericsError

DEFAULT_DTYPE = np.float64

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """Dense array plus an optional gradient of the same shape."""

    __slots__ = ("data", "grad", "requires_grad", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None or arr.dtype.kind != "f":
            arr = arr.astype(dtype or DEFAULT_DTYPE)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._node: Optional[_Node] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        return self.data

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf that requires a gradient."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(
                    f"backward without an explicit gradient needs a scalar, got shape {self.shape}"
                )
            seed = np.ones_like(self.data)
        else:
            seed = np.broadcast_to(np.asarray(grad, dtype=self.data.dtype), self.shape).copy()
        if self._node is None:
            if self.requires_grad:
                self.grad = seed if self.grad is None else self.grad + seed
            return
        self._node.tape.backward(self, seed)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


class _Node:
    __slots__ = ("tape", "index", "inputs", "output", "backward_fn", "name")

    def __init__(self, tape, index, inputs, output, backward_fn, name):
        self.tape = tape
        self.index = index
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.name = name


class Tape:
    """Ordered record of operations for one forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, output: Tensor, inputs: Sequence[Tensor], backward_fn: BackwardFn, name: str) -> None:
        node = _Node(self, len(self.nodes), tuple(inputs), output, backward_fn, name)
        output._node = node
        self.nodes.append(node)

    def clear(self) -> None:
        for node in self.nodes:
            node.output._node = None
        self.nodes = []

    def backward(self, output: Tensor, seed: np.ndarray) -> None:
        node = output._node
        if node is None or node.tape is not self:
            raise ValueError("tensor was not recorded on this tape")
        grads = {id(output): seed}
        for node in reversed(self.nodes[: node.index + 1]):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward_fn(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.data.shape:
                    gi = _unbroadcast(gi, t.data.shape)
                _check_finite(gi, node.name + " (backward)")
                if t._node is None or t._node.tape is not self:
                    t.grad = gi.copy() if t.grad is None else t.grad + gi
                else:
                    key = id(t)
                    grads[key] = grads[key] + gi if key in grads else gi
        self.clear()


_tapes: list[Tape] = [Tape()]
_grad_enabled = [True]


def current_tape() -> Tape:
    return _tapes[-1]


def reset_tape() -> None:
    """Drop everything recorded on the active tape without running backward."""
    current_tape().clear()


@contextlib.contextmanager
def tape_scope() -> Iterator[Tape]:
    """Record onto a fresh tape for the duration of the block."""
    tape = Tape()
    _tapes.append(tape)
    try:
        yield tape
    finally:
        _tapes.pop()
        tape.clear()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    _grad_enabled.append(False)
    try:
        yield
    finally:
        _grad_enabled.pop()


def grad_enabled() -> bool:
    return _grad_enabled[-1]


def _check_finite(arr: np.ndarray, name: str) -> None:
    if not np.isfinite(arr).all():
        kind = "NaN" if np.isnan(arr).any() else "inf"
        raise NumericsError(f"{name} produced {kind} values")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record_op(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn, name: str) -> Tensor:
    """Wrap ``data`` as the output of an op and register its backward rule.

    ``backward_fn`` maps the output gradient to one gradient (or None) per
    input. Used by every op in this package, including the fused
    normalization and loss kernels defined in other modules.
    """
    _check_finite(data, name)
    needs = grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(data)
    if needs:
        out.requires_grad = True
        current_tape().record(out, inputs, backward_fn, name)
    return out


# ----------------------------------------------------------------------------
# Elementwise ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record_op(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record_op(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return record_op(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return record_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return record_op(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    if (x.data <= 0).any():
        raise DomainError(f"log of non-positive value (min {x.data.min()!r})")
    xd = x.data
    return record_op(np.log(xd), (x,), lambda g: (g / xd,), "log")


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record_op(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ----------------------------------------------------------------------------
# Channel softmax


def softmax_array(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax_array(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax_channel(logits) -> Tensor:
    """Per-pixel softmax over the channel axis of an N,C,H,W tensor."""
    logits = as_tensor(logits)
    if logits.ndim != 4:
        raise DimensionError(f"softmax_channel expects N,C,H,W, got {logits.shape}")
    if logits.shape[1] < 2:
        raise DimensionError(f"softmax_channel needs at least 2 channels, got {logits.shape}")
    p = softmax_array(logits.data)

    def backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return record_op(p, (logits,), backward, "softmax_channel")


# ----------------------------------------------------------------------------
# Convolution


def conv_output_size(size: int, kernel: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """2-D cross-correlation of an N,C,H,W input with a K,C,kh,kw kernel."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise DimensionError(f"conv2d: input shape {x.shape} does not match kernel shape {kernel.shape}")
    n, c, h, w = x.shape
    k, _, kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d: kernel extents must be odd, got kernel shape {kernel.shape}")
    ho = conv_output_size(h, kh, stride, padding, dilation)
    wo = conv_output_size(w, kw, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: input shape {x.shape} too small for kernel shape {kernel.shape}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (k,):
            raise DimensionError(f"conv2d: bias shape {bias.shape} does not match kernel shape {kernel.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    if kh == 1 and kw == 1 and stride == 1:
        cols = xp.transpose(1, 0, 2, 3).reshape(c, n * ho * wo)
    else:
        eh, ew = dilation * (kh - 1) + 1, dilation * (kw - 1) + 1
        win = sliding_window_view(xp, (eh, ew), axis=(2, 3))
        win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride, ::dilation, ::dilation]
        # -> C, kh, kw, N, Ho, Wo so the reduction axes lead
        cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * kh * kw, n * ho * wo)
    wmat = kernel.data.reshape(k, -1)
    out = (wmat @ cols).reshape(k, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(k, n * ho * wo)
        gk = (gmat @ cols.T).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ gmat).reshape(c, kh, kw, n, ho, wo)
            gxp = np.zeros((n, c) + xp.shape[2:], dtype=g.dtype)
            for i in range(kh):
                r0 = i * dilation
                for j in range(kw):
                    c0 = j * dilation
                    gxp[:, :, r0 : r0 + (ho - 1) * stride + 1 : stride, c0 : c0 + (wo - 1) * stride + 1 : stride] += (
                        gcols[:, i, j].transpose(1, 0, 2, 3)
                    )
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        if bias is None:
            return gx, gk
        return gx, gk, g.sum(axis=(0, 2, 3))

    return record_op(out, inputs, backward, "conv2d")


# ----------------------------------------------------------------------------
# Bilinear resize (align_corners=False)


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic n_out x n_in interpolation matrix with half-pixel centers."""
    if n_in < 1 or n_out < 1:
        raise DimensionError(f"resize extents must be >= 1, got {n_in} -> {n_out}")
    if n_in == n_out:
        return np.eye(n_in)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, None)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - lam)
    np.add.at(m, (rows, i1), lam)
    return m


def resize_array(x: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize over the last two axes of a plain array."""
    h, w = x.shape[-2:]
    if height < 1 or width < 1:
        raise DimensionError(f"resize target must be >= 1x1, got {height}x{width}")
    if (h, w) == (height, width):
        return x.copy()
    out = x
    if w != width:
        out = out @ bilinear_matrix(w, width).T
    if h != height:
        out = bilinear_matrix(h, height) @ out
    return out


def resize_bilinear(x, height: int, width: int) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"resize_bilinear expects N,C,H,W, got {x.shape}")
    if height < 1 or width < 1:
        raise DimensionError(f"resize_bilinear target must be >= 1x1, got {height}x{width} for input {x.shape}")
    h, w = x.shape[2:]
    if (h, w) == (height, width):
        return record_op(x.data.copy(), (x,), lambda g: (g,), "resize_bilinear")
    rh, rw = bilinear_matrix(h, height), bilinear_matrix(w, width)
    out = rh @ (x.data @ rw.T)

    def backward(g):
        return ((rh.T @ g) @ rw,)

    return record_op(out, (x,), backward, "resize_bilinear")


# ----------------------------------------------------------------------------
# Finite-difference verification


def check_gradients(
    op: Callable[..., Tensor],
    inputs: Sequence,
    eps: float = 1e-5,
    wrt: Optional[Sequence[int]] = None,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Compare tape gradients of ``op`` with central finite differences.

    Non-scalar outputs are reduced with a fixed random projection. Returns
    the max over checked scalars of ``|analytic - numeric| / max(1, |numeric|)``.
    ``max_entries`` limits each input to a random subset of its scalars.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(np.asarray(a.data if isinstance(a, Tensor) else a), dtype=DEFAULT_DTYPE) for a in inputs]
    wrt = list(range(len(arrays))) if wrt is None else list(wrt)

    with tape_scope():
        tensors = [Tensor(a.copy(), requires_grad=i in wrt) for i, a in enumerate(arrays)]
        out = op(*tensors)
        proj = np.ones(out.shape) if out.size == 1 else rng.standard_normal(out.shape)
        out.backward(proj)
    analytic = [tensors[i].grad if tensors[i].grad is not None else np.zeros_like(arrays[i]) for i in wrt]

    def evaluate(args) -> float:
        with no_grad():
            return float((op(*[Tensor(a) for a in args]).data * proj).sum())

    worst = 0.0
    for slot, i in enumerate(wrt):
        flat = arrays[i].reshape(-1)
        indices = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            indices = rng.choice(flat.size, size=max_entries, replace=False)
        for idx in indices:
            orig = flat[idx]
            flat[idx] = orig + eps
            f_plus = evaluate(arrays)
            flat[idx] = orig - eps
            f_minus = evaluate(arrays)
            flat[idx] = orig
            numeric = (f_plus - f_minus) / (2 * eps)
            a = analytic[slot].reshape(-1)[idx]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(numeric)))
    return worst
