"""Teacher/student self-training loop, mIoU evaluation, and ablation grids.

Every random draw during training comes from a generator keyed on
``(seed, stream, step, slot)``, so a run is reproducible regardless of how
batches are assembled.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import datahub
from .augment import AugConfig, apply_strong, apply_weak, photometric_pool, sample_policy, sample_rng
from .datahub import ArraySet, Sample
from .errors import ConfigurationError
from .losses import IGNORE_INDEX, cross_entropy, scl
from .model import MicroSegNet, OptimizerState, load_checkpoint, save_checkpoint, sgd_step
from .normalization import BnMode, BranchTag, init_pbn, stats_report
from .numerics import no_grad
from .pseudolabel import TtaConfig, generate_semi_dataset, harden, tta_predict

logger = logging.getLogger(__name__)

# stream ids for sample_rng
TEACHER_STREAM = 1
STUDENT_STREAM = 2
GROUP_STREAM = 3


@dataclass
class ExperimentConfig:
    seed: int = 0
    num_classes: int = 4
    width: int = 16
    labeled_fraction: float = 0.125
    unlabeled_multiplier: float = 0.0  # unlabeled:labeled ratio, 0 = use the whole unlabeled pool
    crop_size: int = 64
    batch_size: int = 8
    pseudo_batch_size: int = 8
    teacher_iters: int = 1000
    student_iters: int = 1000
    rounds: int = 2
    tta: TtaConfig = field(default_factory=TtaConfig)
    n_ops: int = 2
    aug_ranges: dict = field(default_factory=dict)
    scale_range: tuple = (0.5, 2.0)
    flip_prob: float = 0.5
    base_lr: float = 0.01
    power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 1e-4
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5
    scl_weight: float = 1.0
    log_zero: float = -4.0
    pseudo_loss: str = "scl"  # scl | ce
    strong_aug: bool = True
    bn_mode: str = "dsbn"  # dsbn | trainable | fixed
    log_interval: int = 50
    eval_batch_size: int = 16
    out_dir: Optional[str] = None

    def __post_init__(self):
        if not 0 < self.labeled_fraction <= 1:
            raise ConfigurationError(f"labeled_fraction must lie in (0, 1], got {self.labeled_fraction}")
        if self.pseudo_loss not in ("scl", "ce"):
            raise ConfigurationError(f"pseudo_loss must be 'scl' or 'ce', got {self.pseudo_loss!r}")
        if self.bn_mode not in ("dsbn", "trainable", "fixed"):
            raise ConfigurationError(f"bn_mode must be dsbn, trainable or fixed, got {self.bn_mode!r}")
        if self.rounds < 1:
            raise ConfigurationError(f"rounds must be >= 1, got {self.rounds}")

    def aug_config(self, mean) -> AugConfig:
        return AugConfig(
            crop_size=self.crop_size,
            scale_range=tuple(self.scale_range),
            flip_prob=self.flip_prob,
            mean=tuple(float(m) for m in mean),
            n_ops=self.n_ops,
        )

    def optimizer(self, iters: int) -> OptimizerState:
        return OptimizerState(
            base_lr=self.base_lr,
            power=self.power,
            iter=0,
            iter_max=max(1, iters),
            momentum=self.momentum,
            weight_decay=self.weight_decay,
        )

    def new_model(self) -> MicroSegNet:
        return MicroSegNet(self.num_classes, self.width, bn_momentum=self.bn_momentum, bn_eps=self.bn_eps, seed=self.seed)


# ----------------------------------------------------------------------------
# Metrics


@dataclass
class EvalResult:
    miou: float
    ious: np.ndarray  # NaN where a class never occurs in labels or predictions
    confusion: np.ndarray


def confusion_matrix(gt: np.ndarray, pred: np.ndarray, num_classes: int, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """C x C counts, rows = ground truth, columns = prediction; ignore pixels dropped."""
    gt = np.asarray(gt).ravel().astype(np.int64)
    pred = np.asarray(pred).ravel().astype(np.int64)
    keep = gt != ignore_index
    gt, pred = gt[keep], pred[keep]
    if gt.size and (gt.max() >= num_classes or pred.max() >= num_classes or gt.min() < 0 or pred.min() < 0):
        raise ValueError("class index out of range in confusion_matrix")
    return np.bincount(gt * num_classes + pred, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def iou_from_confusion(cm: np.ndarray) -> tuple[float, np.ndarray]:
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    ious = np.full(len(tp), np.nan)
    present = union > 0
    ious[present] = tp[present] / union[present]
    miou = float(ious[present].mean()) if present.any() else float("nan")
    return miou, ious


def to_network_input(images: np.ndarray, mean) -> np.ndarray:
    """N,H,W,3 images in [0, 1] -> mean-subtracted N,3,H,W."""
    return np.ascontiguousarray((images - np.asarray(mean, dtype=np.float64)).transpose(0, 3, 1, 2))


def predict(net: MicroSegNet, images: np.ndarray, mean, batch_size: int = 16) -> np.ndarray:
    preds = []
    for start in range(0, len(images), batch_size):
        x = to_network_input(images[start : start + batch_size], mean)
        with no_grad():
            logits = net.forward(x, BranchTag.WEAK, mode="eval")
        preds.append(np.argmax(logits.data, axis=1))
    return np.concatenate(preds) if preds else np.zeros((0,), dtype=np.int64)


def evaluate(net: MicroSegNet, eval_set: ArraySet, mean, batch_size: int = 16) -> EvalResult:
    """Single-scale, no-flip, eval-mode mIoU."""
    if eval_set.labels is None:
        raise ConfigurationError("evaluation set has no ground-truth labels")
    pred = predict(net, eval_set.images, mean, batch_size)
    cm = confusion_matrix(eval_set.labels, pred, net.num_classes)
    miou, ious = iou_from_confusion(cm)
    return EvalResult(miou, ious, cm)


# ----------------------------------------------------------------------------
# Training


CURVE_HEADER = ("step", "lr", "ce", "scl", "total")


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)  # (step, lr, ce, scl, total)
    steps: list = field(default_factory=list)  # every step, same tuple layout

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CURVE_HEADER)
            for row in self.rows:
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


@dataclass
class Source:
    """One sub-batch stream per step: which data, how augmented, which BN bank, which loss."""

    data: ArraySet
    batch_size: int
    strong: bool
    tag: BranchTag
    loss: str  # "ce" | "scl"
    weight: float = 1.0


def _draw_indices(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    return rng.choice(n, size=k, replace=k > n)


def _assemble(src: Source, slot_base: int, seed: int, stream: int, step: int, aug: AugConfig, pool) -> tuple:
    rng = sample_rng(seed, stream, step, slot_base)
    idx = _draw_indices(rng, len(src.data), src.batch_size)
    images, labels = [], []
    for j, i in enumerate(idx):
        r = sample_rng(seed, stream, step, slot_base + 1 + j)
        img, lab = src.data.images[i], src.data.labels[i]
        if src.strong:
            policy = sample_policy(aug.n_ops, r, pool)
            img, lab = apply_strong(img, lab, policy, r, aug)
        else:
            img, lab = apply_weak(img, lab, r, aug)
        images.append(img.transpose(2, 0, 1))
        labels.append(lab)
    return np.stack(images), np.stack(labels)


def train_loop(
    net: MicroSegNet,
    sources: Sequence[Source],
    iters: int,
    cfg: ExperimentConfig,
    mean,
    stream: int,
    optimizer: Optional[OptimizerState] = None,
    step_hook=None,
) -> TrainLog:
    """Generic SGD loop; each step runs one forward per source and one shared update."""
    aug = cfg.aug_config(mean)
    pool = photometric_pool(cfg.aug_ranges)
    optimizer = optimizer or cfg.optimizer(iters)
    net.bn_mode = BnMode(cfg.bn_mode)
    log = TrainLog()
    sources = [s for s in sources if s.batch_size > 0 and len(s.data) > 0]
    for step in range(iters):
        parts = {"ce": 0.0, "scl": 0.0}
        total = None
        for k, src in enumerate(sources):
            x, y = _assemble(src, 1000 * k, cfg.seed, stream, step, aug, pool)
            logits = net.forward(x, src.tag, mode="train")
            if src.loss == "ce":
                out = cross_entropy(logits, y)
            else:
                out = scl(logits, y, log_zero=cfg.log_zero)
            parts[src.loss] += src.weight * out.value
            term = out.loss if src.weight == 1.0 else out.loss * src.weight
            total = term if total is None else total + term
        if total is None:
            raise ConfigurationError("no training data for this loop")
        net.zero_grad()
        total.backward()
        if step_hook is not None:
            step_hook(step, net)
        lr = sgd_step(net, None, optimizer)
        row = (step, lr, parts["ce"], parts["scl"], float(total.data))
        log.steps.append(row)
        if step % cfg.log_interval == 0 or step == iters - 1:
            log.rows.append(row)
            logger.debug("step %d lr %.5f ce %.4f scl %.4f", step, lr, parts["ce"], parts["scl"])
    # a strong bank that saw no STRONG batch stays a copy of the weak bank
    for _, st in net.norm_layers():
        if st.strong_updates == 0:
            init_pbn(st)
    return log


def train_teacher(
    cfg: ExperimentConfig,
    labeled: ArraySet,
    mean,
    out_dir=None,
    net: Optional[MicroSegNet] = None,
    stream: int = TEACHER_STREAM,
    iters: Optional[int] = None,
) -> tuple[MicroSegNet, TrainLog]:
    """Supervised training on labeled data: weak augmentation, CE, WEAK bank only."""
    if len(labeled) == 0:
        raise ConfigurationError("labeled set is empty")
    net = net or cfg.new_model()
    iters = cfg.teacher_iters if iters is None else iters
    src = Source(labeled, cfg.batch_size, strong=False, tag=BranchTag.WEAK, loss="ce")
    log = train_loop(net, [src], iters, cfg, mean, stream)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "teacher.ckpt", net)
        log.write_csv(out / "teacher_curve.csv")
    return net, log


def student_sources(cfg: ExperimentConfig, labeled: ArraySet, pseudo: ArraySet) -> list[Source]:
    # the tag follows the batch's distribution; only DSBN keeps a separate bank for it
    pseudo_tag = BranchTag.STRONG if cfg.bn_mode == "dsbn" and cfg.strong_aug else BranchTag.WEAK
    return [
        Source(labeled, cfg.batch_size, strong=False, tag=BranchTag.WEAK, loss="ce"),
        Source(pseudo, cfg.pseudo_batch_size, strong=cfg.strong_aug, tag=pseudo_tag, loss=cfg.pseudo_loss, weight=cfg.scl_weight),
    ]


def train_student(
    cfg: ExperimentConfig,
    labeled: ArraySet,
    pseudo: ArraySet,
    init: MicroSegNet,
    mean,
    out_dir=None,
    stream: int = STUDENT_STREAM,
    step_hook=None,
) -> tuple[MicroSegNet, TrainLog]:
    """Labeled CE sub-batch (weak, WEAK bank) + pseudo sub-batch (strong, STRONG bank), one shared step."""
    if pseudo is None:
        raise ConfigurationError("pseudo-labeled set is missing")
    net = init.clone()
    for _, st in net.norm_layers():
        init_pbn(st)
    log = train_loop(net, student_sources(cfg, labeled, pseudo), cfg.student_iters, cfg, mean, stream, step_hook=step_hook)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "student.ckpt", net)
        log.write_csv(out / "student_curve.csv")
    return net, log


def pseudo_label_arrays(teacher: MicroSegNet, unlabeled: ArraySet, mean, tta: TtaConfig, batch_size: int = 8) -> ArraySet:
    """In-memory twin of generate_semi_dataset."""
    labels = []
    for start in range(0, len(unlabeled), batch_size):
        x = to_network_input(unlabeled.images[start : start + batch_size], mean)
        labels.append(harden(tta_predict(teacher, x, tta)))
    lab = np.concatenate(labels) if labels else np.zeros((0,) + unlabeled.images.shape[1:3], dtype=np.uint8)
    return ArraySet(list(unlabeled.ids), unlabeled.images, lab)


# ----------------------------------------------------------------------------
# Iterative self-training


@dataclass
class RoundResult:
    round: int
    miou: float
    ious: np.ndarray
    promoted: bool


def write_rounds_csv(path, results: Sequence[RoundResult], num_classes: int) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "miou"] + [f"iou_{c}" for c in range(num_classes)])
        for r in results:
            w.writerow([r.round, repr(r.miou)] + [repr(float(v)) for v in r.ious])


@dataclass
class IterateResult:
    rounds: list
    best: MicroSegNet
    best_miou: float
    teacher_miou: float
    students: list = field(default_factory=list)
    pseudo_sets: list = field(default_factory=list)

    @property
    def mious(self) -> list:
        return [r.miou for r in self.rounds]


def round_config(cfg: ExperimentConfig, r: int) -> ExperimentConfig:
    """Round ``r`` draws from its own seed so rounds do not replay each other's batches."""
    return replace(cfg, seed=cfg.seed + 7919 * r)


def iterate(
    cfg: ExperimentConfig,
    labeled: ArraySet,
    unlabeled: ArraySet,
    val: ArraySet,
    teacher: MicroSegNet,
    mean,
    rounds: Optional[int] = None,
    out_dir=None,
    keep_students: bool = False,
) -> IterateResult:
    """Pseudo-label with the best model so far, train a student, evaluate; repeat.

    Stops early when validation mIoU drops two rounds in a row.
    """
    rounds = cfg.rounds if rounds is None else rounds
    if rounds < 1:
        raise ConfigurationError(f"rounds must be >= 1, got {rounds}")
    best = teacher
    best_miou = evaluate(teacher, val, mean, cfg.eval_batch_size).miou
    teacher_miou = best_miou
    results = []
    students = []
    pseudo_sets = []
    drops = 0
    prev = best_miou
    for r in range(1, rounds + 1):
        pseudo = pseudo_label_arrays(best, unlabeled, mean, cfg.tta)
        pseudo_sets.append(pseudo)
        rcfg = round_config(cfg, r)
        student, log = train_student(rcfg, labeled, pseudo, best, mean)
        res = evaluate(student, val, mean, cfg.eval_batch_size)
        promoted = res.miou > best_miou
        if promoted:
            best, best_miou = student, res.miou
        results.append(RoundResult(r, res.miou, res.ious, promoted))
        if keep_students:
            students.append(student)
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            save_checkpoint(out / f"student_round{r}.ckpt", student)
            log.write_csv(out / f"student_round{r}_curve.csv")
            write_rounds_csv(out / "rounds.csv", results, cfg.num_classes)
        logger.info("round %d: mIoU %.4f (best %.4f)", r, res.miou, best_miou)
        drops = drops + 1 if res.miou < prev else 0
        prev = res.miou
        if drops >= 2:
            break
    if out_dir is not None:
        save_checkpoint(Path(out_dir) / "best.ckpt", best)
    return IterateResult(results, best, best_miou, teacher_miou, students, pseudo_sets)


# ----------------------------------------------------------------------------
# Datasets on disk -> arrays


@dataclass
class DataBundle:
    labeled: ArraySet
    unlabeled: ArraySet
    val: ArraySet
    mean: tuple
    labeled_samples: list
    unlabeled_samples: list


def load_bundle(data_root, cfg: ExperimentConfig) -> DataBundle:
    root = Path(data_root)
    samples = datahub.read_manifest(root / "manifest.tsv", strict=True)
    mean = datahub.read_mean(root / "mean.txt")
    lab_s, unl_s = datahub.split(samples, cfg.labeled_fraction, cfg.seed)
    if cfg.unlabeled_multiplier > 0:
        unl_s = unl_s[: int(round(cfg.unlabeled_multiplier * len(lab_s)))]
    val_s = [s for s in samples if s.split == "val"]
    labeled = datahub.load_arrays(lab_s, cfg.num_classes)
    unlabeled = datahub.load_arrays(unl_s, with_labels=False)
    val = datahub.load_arrays(val_s, cfg.num_classes)
    return DataBundle(labeled, unlabeled, val, mean, lab_s, unl_s)


def ground_truth_for(samples: Sequence[Sample], num_classes: int, ids: Sequence[str], data_root) -> np.ndarray:
    """Ground-truth labels for withheld samples (used only by the Table-3-style full-GT group)."""
    root = Path(data_root)
    return np.stack([datahub.read_label(root / "labels" / f"{i}.pgm", num_classes) for i in ids])


# ----------------------------------------------------------------------------
# Ablations


BN_VARIANTS = ("trainable", "fixed", "dsbn")
AUG_KINDS = ("weak", "strong")
DATA_GROUPS = ("labeled-gt", "full-gt", "unlabeled-pseudo")
GROUP_AUGS = ("weak", "saug", "saug+dsbn")


def bn_ablation(
    cfg: ExperimentConfig,
    labeled: ArraySet,
    pseudo: ArraySet,
    teacher: MicroSegNet,
    val: ArraySet,
    mean,
    variants: Sequence[str] = BN_VARIANTS,
    augs: Sequence[str] = AUG_KINDS,
    pseudo_loss: str = "ce",
) -> list[dict]:
    """Student runs over {BN variant} x {weak, strong} from one teacher and pseudo set."""
    rows = []
    for aug in augs:
        for variant in variants:
            vcfg = replace(cfg, bn_mode=variant, strong_aug=(aug == "strong"), pseudo_loss=pseudo_loss)
            student, _ = train_student(vcfg, labeled, pseudo, teacher, mean)
            res = evaluate(student, val, mean, cfg.eval_batch_size)
            rows.append({"grid": "bn", "setting": f"{variant}/{aug}", "seed": cfg.seed, "miou": res.miou})
    return rows


def group_ablation(
    cfg: ExperimentConfig,
    groups: dict,
    val: ArraySet,
    mean,
    augs: Sequence[str] = GROUP_AUGS,
) -> list[dict]:
    """Train from scratch on each data group with weak / strong / strong+DSBN augmentation.

    Every step draws a weak sub-batch and a second sub-batch that is weak,
    strongly augmented into the weak bank, or strongly augmented into the
    strong bank.
    """
    rows = []
    half = max(1, cfg.batch_size // 2)
    for gname, data in groups.items():
        for aug in augs:
            strong = aug != "weak"
            tag = BranchTag.STRONG if aug == "saug+dsbn" else BranchTag.WEAK
            gcfg = replace(cfg, bn_mode="dsbn")
            net = gcfg.new_model()
            sources = [
                Source(data, half, strong=False, tag=BranchTag.WEAK, loss="ce"),
                Source(data, half, strong=strong, tag=tag, loss="ce"),
            ]
            train_loop(net, sources, cfg.teacher_iters, gcfg, mean, GROUP_STREAM)
            res = evaluate(net, val, mean, cfg.eval_batch_size)
            rows.append({"grid": "group", "setting": f"{gname}/{aug}", "seed": cfg.seed, "miou": res.miou})
    return rows


def write_ablation_csv(path, rows: Sequence[dict]) -> None:
    """Per-run rows plus a per-setting mean over seeds."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["grid", "setting", "seed", "miou"])
        for r in rows:
            w.writerow([r["grid"], r["setting"], r["seed"], repr(r["miou"])])
        keys = []
        for r in rows:
            if (r["grid"], r["setting"]) not in keys:
                keys.append((r["grid"], r["setting"]))
        for grid, setting in keys:
            vals = [r["miou"] for r in rows if r["grid"] == grid and r["setting"] == setting]
            w.writerow([grid, setting, "mean", repr(float(np.mean(vals)))])


# ----------------------------------------------------------------------------
# Whole experiment


@dataclass
class ExperimentResult:
    seed: int
    baseline_miou: float
    round_mious: list
    final_miou: float
    best_miou: float
    teacher: MicroSegNet
    best: MicroSegNet
    iterate: IterateResult
    bundle: DataBundle
    seconds: float


def run_experiment(cfg: ExperimentConfig, data_root, out_dir=None, keep_students: bool = False) -> ExperimentResult:
    """split -> teacher -> baseline eval -> iterate; optional artifacts under out_dir."""
    t0 = time.perf_counter()
    bundle = load_bundle(data_root, cfg)
    teacher, _ = train_teacher(cfg, bundle.labeled, bundle.mean, out_dir=out_dir)
    it = iterate(cfg, bundle.labeled, bundle.unlabeled, bundle.val, teacher, bundle.mean, out_dir=out_dir, keep_students=keep_students)
    return ExperimentResult(
        seed=cfg.seed,
        baseline_miou=it.teacher_miou,
        round_mious=it.mious,
        final_miou=it.mious[-1],
        best_miou=it.best_miou,
        teacher=teacher,
        best=it.best,
        iterate=it,
        bundle=bundle,
        seconds=time.perf_counter() - t0,
    )


@dataclass
class BenchmarkRecord:
    seed: int
    baseline_miou: float
    round_mious: list
    dsbn_miou: float  # round-1 student
    trainable_miou: float  # same teacher, pseudo labels and streams, single-bank BN
    divergence: float  # weak/strong bank divergence of the round-1 student
    layer_divergence: dict  # layer -> (mean, log-variance) divergence of the round-1 student
    teacher_divergence: float  # weak-only training, expected to be exactly 0
    seconds: float


REFERENCE_SPEC = dict(image_size=64, num_classes=4)
REFERENCE_SIZES = dict(n_train=256, n_val=64)


def reference_config(seed: int, **overrides) -> ExperimentConfig:
    return replace(ExperimentConfig(seed=seed, num_classes=4, labeled_fraction=0.125, rounds=2, crop_size=64), **overrides)


def run_reference_seed(seed: int, work_dir, **overrides) -> BenchmarkRecord:
    """One seed of the reference benchmark: data, teacher, two rounds, plus a trainable-BN round-1 twin."""
    t0 = time.perf_counter()
    root = Path(work_dir) / f"data_seed{seed}"
    datahub.generate_dataset(datahub.SyntheticSpec(seed=seed, **REFERENCE_SPEC), REFERENCE_SIZES["n_train"], REFERENCE_SIZES["n_val"], root)
    cfg = reference_config(seed, **overrides)
    res = run_experiment(cfg, root, keep_students=True)
    student1 = res.iterate.students[0]
    twin_cfg = replace(round_config(cfg, 1), bn_mode="trainable")
    twin, _ = train_student(twin_cfg, res.bundle.labeled, res.iterate.pseudo_sets[0], res.teacher, res.bundle.mean)
    trainable = evaluate(twin, res.bundle.val, res.bundle.mean, cfg.eval_batch_size).miou
    report = stats_report(student1)
    return BenchmarkRecord(
        seed=seed,
        baseline_miou=res.baseline_miou,
        round_mious=res.round_mious,
        dsbn_miou=res.round_mious[0],
        trainable_miou=trainable,
        divergence=report.divergence,
        layer_divergence=report.layer_divergence,
        teacher_divergence=stats_report(res.teacher).divergence,
        seconds=time.perf_counter() - t0,
    )
