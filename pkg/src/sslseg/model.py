"""MicroSegNet, SGD with a poly schedule, and the checkpoint file format."""

from __future__ import annotations

import copy
import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .errors import DimensionError, FormatError
from .normalization import BnMode, BranchTag, DsbnState, bn_forward
from .numerics import Tensor, as_tensor, conv2d, relu, resize_bilinear

# name, stride, dilation, input-width multiplier, output-width multiplier
_CONV_BLOCKS = (
    ("stem", 1, 1, None, 1),
    ("down1", 2, 1, 1, 2),
    ("down2", 2, 1, 2, 4),
    ("mid", 1, 2, 4, 4),
)


class MicroSegNet:
    """Tiny encoder-decoder segmentation network.

    stem conv(3->F) -> stride-2 conv(F->2F) -> stride-2 conv(2F->4F) ->
    dilated conv(4F->4F), each followed by a DSBN layer and relu; then a
    1x1 classifier (4F->C) and bilinear x4 upsampling back to input size.
    The classifier runs before the upsampling; both are linear and the
    interpolation weights sum to one, so the order does not change the
    result and this one is 16x cheaper.
    """

    def __init__(
        self,
        num_classes: int = 4,
        width: int = 16,
        in_channels: int = 3,
        bn_momentum: float = 0.9,
        bn_eps: float = 1e-5,
        seed: int = 0,
    ):
        self.num_classes = num_classes
        self.width = width
        self.in_channels = in_channels
        self.bn_mode = BnMode.DSBN
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        self.norms: dict[str, DsbnState] = {}
        for name, _stride, _dil, cin_mult, cout_mult in _CONV_BLOCKS:
            cin = in_channels if cin_mult is None else width * cin_mult
            cout = width * cout_mult
            fan_in = cin * 9
            self.params[f"{name}.weight"] = Tensor(
                rng.standard_normal((cout, cin, 3, 3)) * np.sqrt(2.0 / fan_in), requires_grad=True
            )
            self.norms[name] = DsbnState(cout, momentum=bn_momentum, eps=bn_eps)
        cin = 4 * width
        self.params["cls.weight"] = Tensor(
            rng.standard_normal((num_classes, cin, 1, 1)) * np.sqrt(2.0 / cin), requires_grad=True
        )
        self.params["cls.bias"] = Tensor(np.zeros(num_classes), requires_grad=True)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = list(self.params.items())
        for name, st in self.norms.items():
            out.append((f"{name}.bn.gamma", st.gamma))
            out.append((f"{name}.bn.beta", st.beta))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def norm_layers(self) -> list[tuple[str, DsbnState]]:
        return list(self.norms.items())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def clone(self) -> "MicroSegNet":
        return copy.deepcopy(self)

    def forward(self, images, tag: BranchTag = BranchTag.WEAK, mode: str = "train") -> Tensor:
        images = as_tensor(images)
        if images.ndim != 4 or images.shape[1] != self.in_channels:
            raise DimensionError(f"expected N,{self.in_channels},H,W images, got {images.shape}")
        h, w = images.shape[2:]
        if h % 4 or w % 4:
            raise DimensionError(f"input height and width must be divisible by 4, got {images.shape}")
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        training = mode == "train"
        x = images
        for name, stride, dil, _, _ in _CONV_BLOCKS:
            x = conv2d(x, self.params[f"{name}.weight"], stride=stride, padding=dil, dilation=dil)
            x = bn_forward(x, self.norms[name], tag, training, self.bn_mode)
            x = relu(x)
        x = conv2d(x, self.params["cls.weight"], self.params["cls.bias"])
        return resize_bilinear(x, h, w)

    __call__ = forward

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Every numeric array that defines the model, in a fixed order."""
        out = [(f"param.{n}", p.data) for n, p in self.params.items()]
        for name, st in self.norms.items():
            out += [
                (f"bn.{name}.gamma", st.gamma.data),
                (f"bn.{name}.beta", st.beta.data),
                (f"bn.{name}.weak_mean", st.weak_running_mean),
                (f"bn.{name}.weak_var", st.weak_running_var),
                (f"bn.{name}.strong_mean", st.strong_running_mean),
                (f"bn.{name}.strong_var", st.strong_running_var),
                (f"bn.{name}.updates", np.array([st.weak_updates, st.strong_updates], dtype=np.float64)),
            ]
        return out

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.state_arrays():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    def bank_checksum(self, tag: BranchTag) -> str:
        h = hashlib.sha256()
        for _, st in self.norm_layers():
            m, v = st.bank(tag)
            h.update(np.ascontiguousarray(m, dtype="<f8").tobytes())
            h.update(np.ascontiguousarray(v, dtype="<f8").tobytes())
        return h.hexdigest()


def count_parameters(net: MicroSegNet) -> int:
    return int(sum(p.size for p in net.parameters()))


# ----------------------------------------------------------------------------
# Optimizer


@dataclass
class OptimizerState:
    base_lr: float = 0.01
    power: float = 0.9
    iter: int = 0
    iter_max: int = 1000
    momentum: float = 0.9
    weight_decay: float = 1e-4
    buffers: list = field(default_factory=list)

    def __post_init__(self):
        if not 0 <= self.iter <= self.iter_max:
            raise ValueError(f"iter must lie in [0, iter_max], got {self.iter}/{self.iter_max}")


def poly_lr(state: OptimizerState) -> float:
    frac = min(state.iter, state.iter_max) / state.iter_max
    return state.base_lr * (1.0 - frac) ** state.power


def sgd_step(params: Union[MicroSegNet, Sequence[Tensor]], grads: Optional[Sequence] = None, optimizer: OptimizerState = None) -> float:
    """One momentum-SGD update; returns the learning rate used.

    v <- momentum * v + g + weight_decay * theta;  theta <- theta - lr * v
    """
    if isinstance(params, MicroSegNet):
        params = params.parameters()
    params = list(params)
    if grads is None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    if len(grads) != len(params):
        raise DimensionError(f"got {len(grads)} gradients for {len(params)} parameters")
    if not optimizer.buffers:
        optimizer.buffers = [np.zeros_like(p.data) for p in params]
    lr = poly_lr(optimizer)
    for p, g, v in zip(params, grads, optimizer.buffers):
        g = np.asarray(g, dtype=p.data.dtype)
        if g.shape != p.data.shape:
            raise DimensionError(f"gradient shape {g.shape} does not match parameter shape {p.data.shape}")
        v *= optimizer.momentum
        v += g
        if optimizer.weight_decay:
            v += optimizer.weight_decay * p.data
        p.data = p.data - lr * v
    optimizer.iter = min(optimizer.iter + 1, optimizer.iter_max)
    return lr


# ----------------------------------------------------------------------------
# Checkpoints
#
#   b"SSLSEG1\n" <manifest byte length as decimal> b"\n" <manifest> <payload>
#
# manifest: one UTF-8 line per entry, "name\tdim,dim,...\toffset\n", where
# offset is in bytes from the start of the payload. The payload is raw
# little-endian float64.

MAGIC = b"SSLSEG1\n"

_OPT_SCALARS = ("base_lr", "power", "iter", "iter_max", "momentum", "weight_decay")


def checkpoint_entries(net: MicroSegNet, optimizer: Optional[OptimizerState] = None) -> list[tuple[str, np.ndarray]]:
    entries = [
        ("meta.num_classes", np.array(float(net.num_classes))),
        ("meta.width", np.array(float(net.width))),
        ("meta.in_channels", np.array(float(net.in_channels))),
    ]
    first = next(iter(net.norms.values()))
    entries += [("meta.bn_momentum", np.array(first.momentum)), ("meta.bn_eps", np.array(first.eps))]
    entries += net.state_arrays()
    if optimizer is not None:
        entries += [(f"opt.{k}", np.array(float(getattr(optimizer, k)))) for k in _OPT_SCALARS]
        for (name, _), buf in zip(net.named_parameters(), optimizer.buffers):
            entries.append((f"opt.buffer.{name}", buf))
    return entries


def checkpoint_bytes(net: MicroSegNet, optimizer: Optional[OptimizerState] = None) -> bytes:
    entries = checkpoint_entries(net, optimizer)
    lines = []
    payload = io.BytesIO()
    for name, arr in entries:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        lines.append(f"{name}\t{','.join(str(d) for d in arr.shape)}\t{payload.tell()}\n")
        payload.write(arr.tobytes())
    manifest = "".join(lines).encode("utf-8")
    return MAGIC + str(len(manifest)).encode() + b"\n" + manifest + payload.getvalue()


def save_checkpoint(path, net: MicroSegNet, optimizer: Optional[OptimizerState] = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(net, optimizer))


def _parse_checkpoint(data: bytes, path) -> dict[str, np.ndarray]:
    if not data.startswith(MAGIC):
        raise FormatError("bad checkpoint magic, expected SSLSEG1", path, 0)
    pos = len(MAGIC)
    nl = data.find(b"\n", pos)
    if nl < 0:
        raise FormatError("truncated checkpoint header", path, pos)
    try:
        mlen = int(data[pos:nl])
    except ValueError:
        raise FormatError("manifest length is not an integer", path, pos) from None
    mstart = nl + 1
    pstart = mstart + mlen
    if pstart > len(data):
        raise FormatError("truncated checkpoint manifest", path, len(data))
    payload = data[pstart:]
    out = {}
    line_pos = mstart
    for line in data[mstart:pstart].decode("utf-8").splitlines():
        parts = line.split("\t")
        if len(parts) != 3:
            raise FormatError(f"malformed manifest line {line!r}", path, line_pos)
        name, shape_s, off_s = parts
        shape = tuple(int(s) for s in shape_s.split(",")) if shape_s else ()
        off = int(off_s)
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if off + nbytes > len(payload):
            raise FormatError(f"entry {name!r} runs past end of file", path, pstart + off)
        out[name] = np.frombuffer(payload, dtype="<f8", count=nbytes // 8, offset=off).reshape(shape).astype(np.float64)
        line_pos += len(line.encode("utf-8")) + 1
    return out


def load_checkpoint(path) -> tuple[MicroSegNet, Optional[OptimizerState]]:
    data = Path(path).read_bytes()
    e = _parse_checkpoint(data, path)
    try:
        net = MicroSegNet(
            num_classes=int(_expect(e, "meta.num_classes", (1,), path)[0]),
            width=int(_expect(e, "meta.width", (1,), path)[0]),
            in_channels=int(_expect(e, "meta.in_channels", (1,), path)[0]),
            bn_momentum=float(_expect(e, "meta.bn_momentum", (1,), path)[0]),
            bn_eps=float(_expect(e, "meta.bn_eps", (1,), path)[0]),
        )
        for name, p in net.params.items():
            p.data = _expect(e, f"param.{name}", p.data.shape, path)
        for name, st in net.norms.items():
            c = (st.channels,)
            st.gamma.data = _expect(e, f"bn.{name}.gamma", c, path)
            st.beta.data = _expect(e, f"bn.{name}.beta", c, path)
            st.weak_running_mean = _expect(e, f"bn.{name}.weak_mean", c, path)
            st.weak_running_var = _expect(e, f"bn.{name}.weak_var", c, path)
            st.strong_running_mean = _expect(e, f"bn.{name}.strong_mean", c, path)
            st.strong_running_var = _expect(e, f"bn.{name}.strong_var", c, path)
            upd = _expect(e, f"bn.{name}.updates", (2,), path)
            st.weak_updates, st.strong_updates = int(upd[0]), int(upd[1])
    except KeyError as exc:
        raise FormatError(f"checkpoint is missing entry {exc.args[0]!r}", path) from None
    optimizer = None
    if "opt.iter" in e:
        scalar = {k: _expect(e, f"opt.{k}", (1,), path)[0] for k in _OPT_SCALARS}
        optimizer = OptimizerState(
            base_lr=float(scalar["base_lr"]),
            power=float(scalar["power"]),
            iter=int(scalar["iter"]),
            iter_max=int(scalar["iter_max"]),
            momentum=float(scalar["momentum"]),
            weight_decay=float(scalar["weight_decay"]),
        )
        optimizer.buffers = [_expect(e, f"opt.buffer.{n}", p.data.shape, path) for n, p in net.named_parameters()]
    return net, optimizer


def _expect(entries, name, shape, path) -> np.ndarray:
    arr = entries[name]
    if arr.shape != tuple(shape):
        raise FormatError(f"entry {name!r} has shape {arr.shape}, expected {tuple(shape)}", path)
    return arr
