import csv
from dataclasses import replace

import numpy as np
import pytest

from sslseg import datahub, pipeline
from sslseg.datahub import ArraySet, SyntheticSpec
from sslseg.errors import ConfigurationError
from sslseg.model import MicroSegNet, load_checkpoint
from sslseg.normalization import BranchTag, stats_report
from sslseg.numerics import Tensor
from sslseg.pipeline import (
    ExperimentConfig,
    confusion_matrix,
    evaluate,
    iou_from_confusion,
    iterate,
    train_student,
    train_teacher,
)
from sslseg.pseudolabel import TtaConfig


def brute_confusion(gt, pred, c, ignore=255):
    cm = np.zeros((c, c), dtype=np.int64)
    for g, p in zip(gt.ravel().tolist(), pred.ravel().tolist()):
        if g != ignore:
            cm[g, p] += 1
    return cm


class FixedPredictor:
    """Eval forward that emits one-hot logits of a stored prediction."""

    def __init__(self, pred, num_classes):
        self.pred = pred
        self.num_classes = num_classes
        self.calls = 0

    def forward(self, x, tag=None, mode="eval"):
        n = x.shape[0]
        chunk = self.pred[self.calls : self.calls + n]
        self.calls += n
        return Tensor(np.eye(self.num_classes)[chunk].transpose(0, 3, 1, 2) * 5.0)


def small_cfg(**kw):
    base = dict(
        num_classes=4,
        width=4,
        crop_size=32,
        batch_size=4,
        pseudo_batch_size=4,
        teacher_iters=20,
        student_iters=20,
        rounds=2,
        tta=TtaConfig((0.75, 1.0), flip=True),
        log_interval=5,
        labeled_fraction=0.25,
    )
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    datahub.generate_dataset(SyntheticSpec(image_size=32, seed=11), 16, 6, root)
    return root, pipeline.load_bundle(root, small_cfg())


class TestMetrics:
    def test_two_class_example(self):
        miou, ious = iou_from_confusion(np.array([[3, 1], [1, 3]]))
        assert np.allclose(ious, [0.6, 0.6], atol=1e-15) and miou == pytest.approx(0.6, abs=1e-15)

    def test_perfect(self):
        gt = np.random.default_rng(0).integers(0, 3, size=(4, 5, 5))
        miou, _ = iou_from_confusion(confusion_matrix(gt, gt, 3))
        assert miou == 1.0

    def test_all_wrong(self):
        miou, ious = iou_from_confusion(confusion_matrix(np.zeros((3, 3), int), np.ones((3, 3), int), 2))
        assert miou == 0.0 and np.array_equal(ious, [0.0, 0.0])

    def test_absent_class_excluded(self):
        gt = np.array([0, 0, 1, 1])
        miou, ious = iou_from_confusion(confusion_matrix(gt, gt, 3))
        assert np.isnan(ious[2]) and miou == 1.0

    def test_ignore_excluded(self):
        gt = np.array([0, 255, 1])
        cm = confusion_matrix(gt, np.array([0, 1, 1]), 2)
        assert cm.sum() == 2 and np.all(cm >= 0)

    @pytest.mark.parametrize("seed", range(20))
    def test_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        c = int(rng.integers(2, 6))
        gt = rng.integers(0, c, size=(2, 4, 5))
        gt[rng.random(gt.shape) < 0.1] = 255
        pred = rng.integers(0, c, size=gt.shape)
        assert np.array_equal(confusion_matrix(gt, pred, c), brute_confusion(gt, pred, c))

    def test_evaluate_matches_oracle(self):
        rng = np.random.default_rng(1)
        gt = rng.integers(0, 3, size=(5, 8, 8)).astype(np.uint8)
        pred = rng.integers(0, 3, size=(5, 8, 8))
        val = ArraySet([str(i) for i in range(5)], np.zeros((5, 8, 8, 3)), gt)
        res = evaluate(FixedPredictor(pred, 3), val, (0, 0, 0), batch_size=2)
        assert np.array_equal(res.confusion, brute_confusion(gt, pred, 3))
        assert res.miou == pytest.approx(iou_from_confusion(brute_confusion(gt, pred, 3))[0], abs=0)

    def test_evaluate_needs_labels(self):
        with pytest.raises(ConfigurationError):
            evaluate(MicroSegNet(3, 2), ArraySet(["a"], np.zeros((1, 8, 8, 3)), None), (0, 0, 0))

    def test_evaluate_is_pure(self, bundle):
        _, b = bundle
        net = MicroSegNet(4, 4, seed=1)
        before = net.checksum()
        evaluate(net, b.val, b.mean)
        assert net.checksum() == before


class TestConfig:
    @pytest.mark.parametrize("kw", [{"labeled_fraction": 0.0}, {"labeled_fraction": 1.2}, {"pseudo_loss": "mse"}, {"bn_mode": "group"}, {"rounds": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigurationError):
            ExperimentConfig(**kw)


class TestTeacher:
    def test_memorize_one_image(self):
        # quadrants aligned with the output stride, so every pixel is reachable
        lab = np.zeros((32, 32), dtype=np.uint8)
        lab[:16, 16:], lab[16:, :16], lab[16:, 16:] = 1, 2, 3
        colors = np.array([[0.9, 0.1, 0.1], [0.1, 0.9, 0.1], [0.1, 0.1, 0.9], [0.9, 0.9, 0.1]])
        one = ArraySet(["m"], colors[lab][None], lab[None])
        cfg = small_cfg(scale_range=(1.0, 1.0), flip_prob=0.0, batch_size=2, base_lr=0.05, log_interval=50)
        _, log = train_teacher(cfg, one, (0.5, 0.5, 0.5), iters=200)
        assert log.steps[-1][2] < 0.05

    def test_deterministic_checkpoint(self, bundle, tmp_path):
        _, b = bundle
        for name in ("a", "b"):
            train_teacher(small_cfg(), b.labeled, b.mean, out_dir=tmp_path / name)
        assert (tmp_path / "a" / "teacher.ckpt").read_bytes() == (tmp_path / "b" / "teacher.ckpt").read_bytes()

    def test_curve_rows(self, bundle, tmp_path):
        _, b = bundle
        train_teacher(small_cfg(teacher_iters=12), b.labeled, b.mean, out_dir=tmp_path)
        with open(tmp_path / "teacher_curve.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["step", "lr", "ce", "scl", "total"]
        assert [int(r[0]) for r in rows[1:]] == [0, 5, 10, 11]

    def test_empty_labeled(self, bundle):
        _, b = bundle
        empty = ArraySet([], np.zeros((0, 32, 32, 3)), np.zeros((0, 32, 32), dtype=np.uint8))
        with pytest.raises(ConfigurationError):
            train_teacher(small_cfg(), empty, b.mean)

    def test_weak_only_divergence_zero(self, bundle):
        _, b = bundle
        teacher, _ = train_teacher(small_cfg(), b.labeled, b.mean)
        report = stats_report(teacher)
        assert report.divergence == 0.0 and report.strong_at_init


@pytest.fixture(scope="module")
def teacher_and_pseudo(bundle):
    _, b = bundle
    cfg = small_cfg()
    teacher, _ = train_teacher(cfg, b.labeled, b.mean)
    pseudo = pipeline.pseudo_label_arrays(teacher, b.unlabeled, b.mean, cfg.tta)
    return teacher, pseudo


class TestStudent:
    def test_degenerates_to_teacher_training(self, bundle, teacher_and_pseudo):
        _, b = bundle
        teacher, pseudo = teacher_and_pseudo
        cfg = small_cfg(scl_weight=0.0, pseudo_batch_size=0)
        student, _ = train_student(cfg, b.labeled, pseudo, teacher, b.mean)
        cont, _ = train_teacher(cfg, b.labeled, b.mean, net=teacher.clone(), stream=pipeline.STUDENT_STREAM, iters=cfg.student_iters)
        assert student.checksum() == cont.checksum()

    def test_banks_diverge_with_strong_policies(self, bundle, teacher_and_pseudo):
        _, b = bundle
        teacher, pseudo = teacher_and_pseudo
        student, _ = train_student(small_cfg(), b.labeled, pseudo, teacher, b.mean)
        report = stats_report(student)
        assert not report.strong_at_init
        assert all(md > 0 and lv > 0 for md, lv in report.layer_divergence.values())

    def test_checkpoint_loads_and_evaluates(self, bundle, teacher_and_pseudo, tmp_path):
        _, b = bundle
        teacher, pseudo = teacher_and_pseudo
        train_student(small_cfg(student_iters=3), b.labeled, pseudo, teacher, b.mean, out_dir=tmp_path)
        net, _ = load_checkpoint(tmp_path / "student.ckpt")
        assert 0.0 <= evaluate(net, b.val, b.mean).miou <= 1.0

    def test_missing_pseudo(self, bundle, teacher_and_pseudo):
        _, b = bundle
        with pytest.raises(ConfigurationError):
            train_student(small_cfg(), b.labeled, None, teacher_and_pseudo[0], b.mean)

    def test_loss_composition(self, bundle, teacher_and_pseudo):
        _, b = bundle
        teacher, pseudo = teacher_and_pseudo
        _, log = train_student(small_cfg(scl_weight=0.7, student_iters=5), b.labeled, pseudo, teacher, b.mean)
        for _, _, ce, scl_part, total in log.steps:
            assert scl_part > 0
            assert abs(total - (ce + scl_part)) < 1e-12

    def test_branch_hygiene(self, bundle, teacher_and_pseudo, monkeypatch):
        _, b = bundle
        teacher, pseudo = teacher_and_pseudo
        original = MicroSegNet.forward
        seen = []

        def checked(self, images, tag=BranchTag.WEAK, mode="train"):
            other = BranchTag.STRONG if tag is BranchTag.WEAK else BranchTag.WEAK
            before = self.bank_checksum(other)
            out = original(self, images, tag, mode)
            assert self.bank_checksum(other) == before
            seen.append(tag)
            return out

        monkeypatch.setattr(MicroSegNet, "forward", checked)
        train_student(small_cfg(student_iters=4), b.labeled, pseudo, teacher, b.mean)
        assert seen.count(BranchTag.WEAK) == 4 and seen.count(BranchTag.STRONG) == 4


class TestIterate:
    def test_single_round_equals_student_plus_eval(self, bundle, teacher_and_pseudo):
        _, b = bundle
        teacher, _ = teacher_and_pseudo
        cfg = small_cfg()
        it = iterate(cfg, b.labeled, b.unlabeled, b.val, teacher, b.mean, rounds=1)
        pseudo = pipeline.pseudo_label_arrays(teacher, b.unlabeled, b.mean, cfg.tta)
        student, _ = train_student(pipeline.round_config(cfg, 1), b.labeled, pseudo, teacher, b.mean)
        assert it.mious == [evaluate(student, b.val, b.mean).miou]

    def test_round_count_and_csv(self, bundle, teacher_and_pseudo, tmp_path):
        _, b = bundle
        teacher, _ = teacher_and_pseudo
        it = iterate(small_cfg(student_iters=5), b.labeled, b.unlabeled, b.val, teacher, b.mean, rounds=2, out_dir=tmp_path)
        assert len(it.mious) == 2
        with open(tmp_path / "rounds.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["round", "miou", "iou_0", "iou_1", "iou_2", "iou_3"]
        assert [float(r[1]) for r in rows[1:]] == it.mious
        assert (tmp_path / "best.ckpt").exists()
        assert it.best_miou == max([it.teacher_miou] + it.mious)

    def test_zero_rounds(self, bundle, teacher_and_pseudo):
        _, b = bundle
        with pytest.raises(ConfigurationError):
            iterate(small_cfg(), b.labeled, b.unlabeled, b.val, teacher_and_pseudo[0], b.mean, rounds=0)

    def test_reproducible(self, bundle):
        root, _ = bundle
        cfg = small_cfg(teacher_iters=8, student_iters=8, rounds=1)
        a = pipeline.run_experiment(cfg, root)
        b = pipeline.run_experiment(cfg, root)
        assert a.final_miou == b.final_miou and a.best.checksum() == b.best.checksum()


class TestAblation:
    def test_bn_grid_and_csv(self, bundle, teacher_and_pseudo, tmp_path):
        _, b = bundle
        teacher, pseudo = teacher_and_pseudo
        rows = pipeline.bn_ablation(small_cfg(student_iters=3), b.labeled, pseudo, teacher, b.val, b.mean)
        assert [r["setting"] for r in rows] == [f"{v}/{a}" for a in ("weak", "strong") for v in ("trainable", "fixed", "dsbn")]
        pipeline.write_ablation_csv(tmp_path / "ab.csv", rows + [dict(rows[0], seed=1)])
        with open(tmp_path / "ab.csv") as fh:
            out = list(csv.reader(fh))
        assert out[0] == ["grid", "setting", "seed", "miou"]
        means = [r for r in out[1:] if r[2] == "mean"]
        assert len(means) == 6

    def test_group_grid(self, bundle, teacher_and_pseudo):
        _, b = bundle
        _, pseudo = teacher_and_pseudo
        rows = pipeline.group_ablation(small_cfg(teacher_iters=3), {"labeled-gt": b.labeled, "unlabeled-pseudo": pseudo}, b.val, b.mean)
        assert len(rows) == 6 and all(0 <= r["miou"] <= 1 for r in rows)
