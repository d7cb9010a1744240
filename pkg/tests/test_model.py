import math

import numpy as np
import pytest

from sslseg.errors import DimensionError, FormatError
from sslseg.losses import cross_entropy
from sslseg.model import (
    MAGIC,
    MicroSegNet,
    OptimizerState,
    checkpoint_bytes,
    count_parameters,
    load_checkpoint,
    poly_lr,
    save_checkpoint,
    sgd_step,
)
from sslseg.normalization import BranchTag
from sslseg.numerics import Tensor, check_gradients, tape_scope


def small_net(seed=0, classes=3, width=4):
    return MicroSegNet(classes, width, seed=seed)


class TestForward:
    def test_shape(self):
        out = small_net().forward(np.zeros((2, 3, 12, 8)), mode="eval")
        assert out.shape == (2, 3, 12, 8)

    def test_indivisible(self):
        with pytest.raises(DimensionError):
            small_net().forward(np.zeros((1, 3, 10, 8)))

    def test_eval_pure(self):
        net = small_net()
        x = np.random.default_rng(0).normal(size=(1, 3, 8, 8))
        before = net.checksum()
        a = net.forward(x, mode="eval").data.tobytes()
        b = net.forward(x, mode="eval").data.tobytes()
        assert a == b and net.checksum() == before

    def test_strong_pass_leaves_eval(self):
        net = small_net()
        rng = np.random.default_rng(1)
        with tape_scope():
            net.forward(rng.normal(size=(2, 3, 8, 8)), BranchTag.WEAK)
        x = rng.normal(size=(1, 3, 8, 8))
        ref = net.forward(x, mode="eval").data.tobytes()
        weak = net.bank_checksum(BranchTag.WEAK)
        with tape_scope():
            net.forward(rng.normal(3.0, 2.0, size=(2, 3, 8, 8)), BranchTag.STRONG)
        assert net.bank_checksum(BranchTag.WEAK) == weak
        assert net.forward(x, mode="eval").data.tobytes() == ref

    def test_parameter_count_size_independent(self):
        net = small_net()
        n = count_parameters(net)
        for size in (8, 16, 32):
            net.forward(np.zeros((1, 3, size, size)), mode="eval")
            assert count_parameters(net) == n
        # 3x3 convs without bias, 2 affine params per normalized channel, 1x1 classifier with bias
        f, c = 4, 3
        expected = 9 * (3 * f + f * 2 * f + 2 * f * 4 * f + 4 * f * 4 * f) + 2 * (f + 2 * f + 4 * f + 4 * f) + 4 * f * c + c
        assert n == expected

    def test_end_to_end_gradcheck(self):
        net = MicroSegNet(3, 2, seed=3)
        rng = np.random.default_rng(3)
        x = rng.normal(size=(1, 3, 8, 8))
        y = rng.integers(0, 3, size=(1, 8, 8))
        names = [n for n, _ in net.named_parameters()]
        values = [p.data.copy() for _, p in net.named_parameters()]

        def op(*tensors):
            clone = net.clone()
            for (name, _), t in zip(clone.named_parameters(), tensors):
                _assign(clone, name, t)
            return cross_entropy(clone.forward(x, BranchTag.WEAK), y).loss

        assert len(names) == len(values)
        assert check_gradients(op, values, max_entries=12, seed=3) < 1e-3

    def test_memorize_single_image(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(1, 3, 16, 16))
        y = np.zeros((1, 16, 16), dtype=int)
        y[0, 4:12, 4:12] = 1
        y[0, 10:, :5] = 2
        net = MicroSegNet(3, 8, seed=4)
        opt = OptimizerState(base_lr=0.05, iter_max=200)
        for _ in range(200):
            with tape_scope():
                out = cross_entropy(net.forward(x), y)
                net.zero_grad()
                out.loss.backward()
            sgd_step(net, None, opt)
        assert out.value < 0.05


def _assign(net, name, tensor):
    if name in net.params:
        net.params[name] = tensor
        return
    layer, _, attr = name.split(".")
    setattr(net.norms[layer], attr, tensor)


class TestPoly:
    def test_start(self):
        assert poly_lr(OptimizerState(base_lr=0.01, iter=0, iter_max=100)) == 0.01

    def test_end(self):
        assert poly_lr(OptimizerState(iter=100, iter_max=100)) == 0.0

    def test_half(self):
        lr = poly_lr(OptimizerState(base_lr=0.01, power=0.9, iter=50, iter_max=100))
        assert lr == pytest.approx(0.01 * 0.5**0.9, abs=1e-15)
        assert lr == pytest.approx(0.0053589, abs=1e-7)

    def test_iter_bounds(self):
        with pytest.raises(ValueError):
            OptimizerState(iter=5, iter_max=4)


class TestSgd:
    def _scalar(self, **kw):
        theta = Tensor(np.array([1.0]), requires_grad=True)
        opt = OptimizerState(base_lr=0.1, power=0.0, iter_max=10, **kw)
        return theta, opt

    def test_zero_grad_noop(self):
        theta, opt = self._scalar(momentum=0.9, weight_decay=0.0)
        sgd_step([theta], [np.zeros(1)], opt)
        assert theta.data[0] == 1.0

    def test_one_step(self):
        theta, opt = self._scalar(momentum=0.0, weight_decay=0.0)
        sgd_step([theta], [np.ones(1)], opt)
        assert theta.data[0] == pytest.approx(0.9, abs=1e-15)
        assert opt.iter == 1

    def test_momentum_two_steps(self):
        theta, opt = self._scalar(momentum=0.9, weight_decay=0.0)
        sgd_step([theta], [np.ones(1)], opt)
        sgd_step([theta], [np.ones(1)], opt)
        assert theta.data[0] == pytest.approx(1 - 0.1 - 0.1 * 1.9, abs=1e-15)
        assert theta.data[0] == pytest.approx(0.71, abs=1e-12)

    def test_weight_decay(self):
        theta, opt = self._scalar(momentum=0.0, weight_decay=0.5)
        sgd_step([theta], [np.zeros(1)], opt)
        assert theta.data[0] == pytest.approx(1 - 0.1 * 0.5, abs=1e-15)

    def test_shape_mismatch(self):
        theta, opt = self._scalar()
        with pytest.raises(DimensionError):
            sgd_step([theta], [np.zeros(2)], opt)

    def test_iter_capped(self):
        theta, opt = self._scalar()
        for _ in range(15):
            sgd_step([theta], [np.zeros(1)], opt)
        assert opt.iter == opt.iter_max


class TestCheckpoint:
    def _trained(self):
        net = small_net(seed=5)
        opt = OptimizerState(iter_max=10)
        rng = np.random.default_rng(5)
        for tag in (BranchTag.WEAK, BranchTag.STRONG):
            with tape_scope():
                out = cross_entropy(net.forward(rng.normal(size=(2, 3, 8, 8)), tag), rng.integers(0, 3, size=(2, 8, 8)))
                net.zero_grad()
                out.loss.backward()
            sgd_step(net, None, opt)
        return net, opt

    def test_round_trip_bitwise(self, tmp_path):
        net, opt = self._trained()
        save_checkpoint(tmp_path / "m.ckpt", net, opt)
        back, opt2 = load_checkpoint(tmp_path / "m.ckpt")
        assert back.checksum() == net.checksum()
        assert checkpoint_bytes(back, opt2) == (tmp_path / "m.ckpt").read_bytes()
        assert opt2.iter == opt.iter and opt2.base_lr == opt.base_lr
        for a, b in zip(opt.buffers, opt2.buffers):
            assert a.tobytes() == b.tobytes()
        x = np.random.default_rng(6).normal(size=(1, 3, 8, 8))
        assert back.forward(x, mode="eval").data.tobytes() == net.forward(x, mode="eval").data.tobytes()

    def test_magic(self, tmp_path):
        net, _ = self._trained()
        data = checkpoint_bytes(net)
        assert data.startswith(MAGIC)
        (tmp_path / "bad.ckpt").write_bytes(b"NOTMAGIC" + data[8:])
        with pytest.raises(FormatError, match="bad.ckpt"):
            load_checkpoint(tmp_path / "bad.ckpt")

    def test_truncated(self, tmp_path):
        net, _ = self._trained()
        (tmp_path / "t.ckpt").write_bytes(checkpoint_bytes(net)[:-16])
        with pytest.raises(FormatError, match="byte"):
            load_checkpoint(tmp_path / "t.ckpt")
