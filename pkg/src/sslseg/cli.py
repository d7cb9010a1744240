"""Command-line entry point: ``sslseg <subcommand> [--config FILE] [--set section.key=value ...]``.

Exit codes: 0 success, 1 configuration error, 2 I/O or format error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np

from . import datahub, pipeline
from .augment import DEFAULT_RANGES, apply_strong, apply_weak, photometric_pool, sample_policy, sample_rng
from .datahub import SyntheticSpec
from .errors import ConfigurationError, FormatError, SslsegError
from .model import load_checkpoint, save_checkpoint
from .normalization import stats_report
from .pseudolabel import TtaConfig, generate_semi_dataset

logger = logging.getLogger("sslseg")

SECTIONS = ("data", "model", "train", "augment", "tta")
SEED_ENV = "SSLSEG_SEED"
CONFIG_NAME = "config.ini"
LOCK_NAME = ".lock"


# ----------------------------------------------------------------------------
# Config schema


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_floats(text: str) -> tuple:
    parts = [p for p in text.replace(",", " ").split() if p]
    if not parts:
        raise ValueError("expected at least one number")
    return tuple(float(p) for p in parts)


def _parse_pair(text: str) -> tuple:
    vals = _parse_floats(text)
    if len(vals) != 2:
        raise ValueError(f"expected two numbers, got {text!r}")
    return vals


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        t = text.strip()
        if t not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return t

    return parse


def _fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_fmt(float(v)) for v in value)
    return str(value)


@dataclass(frozen=True)
class Key:
    section: str
    name: str
    parse: Callable[[str], Any]
    default: Any
    help: str


KEYS: tuple[Key, ...] = (
    Key("data", "root", str, "data", "dataset directory (manifest.tsv, mean.txt)"),
    Key("data", "image_size", int, 64, "synthetic image side length"),
    Key("data", "num_classes", int, 4, "class count including background"),
    Key("data", "n_train", int, 256, "synthetic training images"),
    Key("data", "n_val", int, 64, "synthetic validation images"),
    Key("data", "shapes_min", int, 3, "fewest shapes per image"),
    Key("data", "shapes_max", int, 6, "most shapes per image"),
    Key("data", "size_min", float, 5.0, "smallest shape radius in pixels"),
    Key("data", "size_max", float, 14.0, "largest shape radius in pixels"),
    Key("data", "noise_amplitude", float, 0.08, "background noise amplitude"),
    Key("data", "color_jitter", float, 0.25, "per-shape color jitter"),
    Key("data", "labeled_fraction", float, 0.125, "labeled share of the training set, in (0, 1]"),
    Key("data", "unlabeled_multiplier", float, 0.0, "unlabeled:labeled ratio cap, 0 uses every unlabeled image"),
    Key("model", "width", int, 16, "base channel width"),
    Key("model", "bn_momentum", float, 0.9, "running-statistic momentum"),
    Key("model", "bn_eps", float, 1e-5, "normalization epsilon"),
    Key("model", "bn_mode", _choice("dsbn", "trainable", "fixed"), "dsbn", "student normalization variant"),
    Key("train", "seed", int, 0, "global seed (also SSLSEG_SEED)"),
    Key("train", "batch_size", int, 8, "labeled images per step"),
    Key("train", "pseudo_batch_size", int, 8, "pseudo-labeled images per step"),
    Key("train", "teacher_iters", int, 1000, "teacher optimizer steps"),
    Key("train", "student_iters", int, 1000, "student optimizer steps per round"),
    Key("train", "rounds", int, 2, "self-training rounds"),
    Key("train", "base_lr", float, 0.01, "initial learning rate"),
    Key("train", "power", float, 0.9, "poly schedule power"),
    Key("train", "momentum", float, 0.9, "SGD momentum"),
    Key("train", "weight_decay", float, 1e-4, "L2 weight decay"),
    Key("train", "scl_weight", float, 1.0, "weight of the pseudo-label loss"),
    Key("train", "log_zero", float, -4.0, "clamped log of zero in the reverse term"),
    Key("train", "pseudo_loss", _choice("scl", "ce"), "scl", "loss on pseudo labels"),
    Key("train", "log_interval", int, 50, "training-curve row interval in steps"),
    Key("train", "eval_batch_size", int, 16, "images per evaluation forward"),
    Key("augment", "crop_size", int, 64, "training crop side length"),
    Key("augment", "scale_min", float, 0.5, "smallest random rescale"),
    Key("augment", "scale_max", float, 2.0, "largest random rescale"),
    Key("augment", "flip_prob", float, 0.5, "horizontal flip probability"),
    Key("augment", "n_ops", int, 2, "photometric ops per strong policy"),
    Key("augment", "strong", _parse_bool, True, "strongly augment pseudo batches"),
    Key("tta", "scales", _parse_floats, (0.5, 0.75, 1.0, 1.5, 1.75), "pseudo-labeling scales"),
    Key("tta", "flip", _parse_bool, True, "add mirrored passes"),
)
KEY_INDEX = {(k.section, k.name): k for k in KEYS}

# augment.<op>.<param> = lo, hi
RANGE_KEYS = {(op, p): rng for op, params in DEFAULT_RANGES.items() for p, rng in params.items()}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)  # (section, name) -> value
    ranges: dict = field(default_factory=dict)  # (op, param) -> (lo, hi), overrides only

    def get(self, section: str, name: str):
        return self.values[(section, name)]

    def set(self, section: str, name: str, text: str) -> None:
        if section == "augment" and "." in name:
            op, _, param = name.partition(".")
            if (op, param) not in RANGE_KEYS:
                raise ConfigurationError(f"unknown config key [augment] {name}")
            try:
                self.ranges[(op, param)] = _parse_pair(text)
            except ValueError as exc:
                raise ConfigurationError(f"[augment] {name}: {exc}") from None
            return
        key = KEY_INDEX.get((section, name))
        if key is None:
            raise ConfigurationError(f"unknown config key [{section}] {name}")
        try:
            self.values[(section, name)] = key.parse(text)
        except ValueError as exc:
            raise ConfigurationError(f"[{section}] {name}: {exc}") from None

    def dump(self) -> str:
        lines = []
        for section in SECTIONS:
            lines.append(f"[{section}]")
            for k in KEYS:
                if k.section == section:
                    lines.append(f"{k.name} = {_fmt(self.values[(section, k.name)])}")
            if section == "augment":
                for (op, param), pair in sorted(self.ranges.items()):
                    lines.append(f"{op}.{param} = {_fmt(pair)}")
            lines.append("")
        return "\n".join(lines)

    # -- views onto the library types

    def synthetic_spec(self) -> SyntheticSpec:
        g = self.get
        return SyntheticSpec(
            image_size=g("data", "image_size"),
            num_classes=g("data", "num_classes"),
            shapes_per_image=(g("data", "shapes_min"), g("data", "shapes_max")),
            size_range=(g("data", "size_min"), g("data", "size_max")),
            noise_amplitude=g("data", "noise_amplitude"),
            color_jitter=g("data", "color_jitter"),
            seed=g("train", "seed"),
        )

    def tta(self) -> TtaConfig:
        return TtaConfig(self.get("tta", "scales"), self.get("tta", "flip"))

    def aug_ranges(self) -> dict:
        out: dict = {}
        for (op, param), pair in self.ranges.items():
            out.setdefault(op, {})[param] = pair
        return out

    def experiment(self, out_dir=None) -> pipeline.ExperimentConfig:
        g = self.get
        return pipeline.ExperimentConfig(
            seed=g("train", "seed"),
            num_classes=g("data", "num_classes"),
            width=g("model", "width"),
            labeled_fraction=g("data", "labeled_fraction"),
            unlabeled_multiplier=g("data", "unlabeled_multiplier"),
            crop_size=g("augment", "crop_size"),
            batch_size=g("train", "batch_size"),
            pseudo_batch_size=g("train", "pseudo_batch_size"),
            teacher_iters=g("train", "teacher_iters"),
            student_iters=g("train", "student_iters"),
            rounds=g("train", "rounds"),
            tta=self.tta(),
            n_ops=g("augment", "n_ops"),
            aug_ranges=self.aug_ranges(),
            scale_range=(g("augment", "scale_min"), g("augment", "scale_max")),
            flip_prob=g("augment", "flip_prob"),
            base_lr=g("train", "base_lr"),
            power=g("train", "power"),
            momentum=g("train", "momentum"),
            weight_decay=g("train", "weight_decay"),
            bn_momentum=g("model", "bn_momentum"),
            bn_eps=g("model", "bn_eps"),
            scl_weight=g("train", "scl_weight"),
            log_zero=g("train", "log_zero"),
            pseudo_loss=g("train", "pseudo_loss"),
            strong_aug=g("augment", "strong"),
            bn_mode=g("model", "bn_mode"),
            log_interval=g("train", "log_interval"),
            eval_batch_size=g("train", "eval_batch_size"),
            out_dir=None if out_dir is None else str(out_dir),
        )


def default_config() -> RunConfig:
    return RunConfig({(k.section, k.name): k.default for k in KEYS})


def parse_config_text(text: str, cfg: Optional[RunConfig] = None, source: str = "<config>") -> RunConfig:
    cfg = cfg or default_config()
    parser = configparser.ConfigParser(delimiters=("=",), comment_prefixes=("#", ";"), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigurationError(f"{source}: {exc}") from None
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigurationError(f"{source}: unknown section [{section}]")
        for name, value in parser.items(section):
            try:
                cfg.set(section, name, value)
            except ConfigurationError as exc:
                raise ConfigurationError(f"{source}: {exc}") from None
    return cfg


def load_config(path=None, overrides: Sequence[str] = (), seed: Optional[int] = None, env=None) -> RunConfig:
    """config file < SSLSEG_SEED < --seed / --set flags."""
    cfg = default_config()
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigurationError(f"cannot read config file {p}: {exc.strerror}") from None
        parse_config_text(text, cfg, str(p))
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        cfg.set("train", "seed", env[SEED_ENV])
    for item in overrides:
        name, sep, value = item.partition("=")
        section, dot, key = name.strip().partition(".")
        if not sep or not dot:
            raise ConfigurationError(f"--set expects section.key=value, got {item!r}")
        cfg.set(section, key, value.strip())
    if seed is not None:
        cfg.set("train", "seed", str(seed))
    return cfg


def keys_help() -> str:
    lines = ["config keys (file < SSLSEG_SEED < flags):"]
    for k in KEYS:
        lines.append(f"  [{k.section}] {k.name} = {_fmt(k.default)}    {k.help}")
    lines.append("  [augment] <op>.<param> = lo, hi    photometric range override; ops and defaults:")
    for (op, param), (lo, hi) in RANGE_KEYS.items():
        lines.append(f"      {op}.{param} = {lo}, {hi}")
    return "\n".join(lines)


# ----------------------------------------------------------------------------
# Run directory


class RunDir:
    """``<out>/<run-name>/`` owned exclusively through an O_EXCL lock file."""

    def __init__(self, out: str, name: str):
        self.path = Path(out) / name
        self._lock = self.path / LOCK_NAME

    def __enter__(self) -> Path:
        self.path.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self._lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigurationError(f"run directory {self.path} is locked by another invocation ({self._lock})") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(f"{os.getpid()}\n")
        return self.path

    def __exit__(self, *exc) -> None:
        try:
            self._lock.unlink()
        except FileNotFoundError:
            pass


def _data_root(args, cfg: RunConfig) -> Path:
    root = Path(args.data or cfg.get("data", "root"))
    if not (root / "manifest.tsv").is_file():
        raise FileNotFoundError(f"no manifest.tsv under data root {root}")
    return root


def _require(path, what: str) -> Path:
    p = Path(path) if path else None
    if p is None:
        raise ConfigurationError(f"missing {what}")
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _write_eval(path: Path, res: pipeline.EvalResult) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["miou"] + [f"iou_{c}" for c in range(len(res.ious))])
        w.writerow([repr(res.miou)] + [repr(float(v)) for v in res.ious])


# ----------------------------------------------------------------------------
# Subcommands. Each gets (args, cfg, run_dir) and returns an exit code.


def cmd_gen_data(args, cfg: RunConfig, run: Path) -> int:
    spec = cfg.synthetic_spec()
    out = run / "data"
    samples = datahub.generate_dataset(spec, cfg.get("data", "n_train"), cfg.get("data", "n_val"), out)
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def cmd_train_teacher(args, cfg: RunConfig, run: Path) -> int:
    exp = cfg.experiment(run)
    bundle = pipeline.load_bundle(_data_root(args, cfg), exp)
    teacher, log = pipeline.train_teacher(exp, bundle.labeled, bundle.mean, out_dir=run)
    res = pipeline.evaluate(teacher, bundle.val, bundle.mean, exp.eval_batch_size)
    _write_eval(run / "eval.csv", res)
    print(f"teacher val mIoU {res.miou:.4f}; checkpoint {run / 'teacher.ckpt'}")
    return 0


def cmd_pseudo_label(args, cfg: RunConfig, run: Path) -> int:
    exp = cfg.experiment(run)
    root = _data_root(args, cfg)
    teacher, _ = load_checkpoint(_require(args.teacher, "teacher checkpoint (--teacher)"))
    samples = datahub.read_manifest(root / "manifest.tsv", strict=True)
    _, unlabeled = datahub.split(samples, exp.labeled_fraction, exp.seed)
    mean = datahub.read_mean(root / "mean.txt")
    result = generate_semi_dataset(teacher, unlabeled, cfg.tta(), run / "pseudo", mean)
    print(f"pseudo-labeled {len(result.samples)} images into {run / 'pseudo'}")
    if result.errors:
        for sid, msg in result.errors:
            print(f"error: {sid}: {msg}", file=sys.stderr)
        print(f"{len(result.errors)} image(s) could not be read", file=sys.stderr)
        return 2
    return 0


def _load_pseudo(path, num_classes: int) -> datahub.ArraySet:
    if not path:
        raise ConfigurationError("missing pseudo manifest (--pseudo)")
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.tsv"
    if not p.is_file():
        raise ConfigurationError(f"pseudo manifest not found: {p}")
    return datahub.load_arrays(datahub.read_manifest(p, strict=True), num_classes)


def cmd_train_student(args, cfg: RunConfig, run: Path) -> int:
    exp = cfg.experiment(run)
    bundle = pipeline.load_bundle(_data_root(args, cfg), exp)
    pseudo = _load_pseudo(args.pseudo, exp.num_classes)
    teacher, _ = load_checkpoint(_require(args.teacher, "init checkpoint (--teacher)"))
    student, _ = pipeline.train_student(exp, bundle.labeled, pseudo, teacher, bundle.mean, out_dir=run)
    res = pipeline.evaluate(student, bundle.val, bundle.mean, exp.eval_batch_size)
    _write_eval(run / "eval.csv", res)
    print(f"student val mIoU {res.miou:.4f}; checkpoint {run / 'student.ckpt'}")
    return 0


def cmd_iterate(args, cfg: RunConfig, run: Path) -> int:
    exp = cfg.experiment(run)
    bundle = pipeline.load_bundle(_data_root(args, cfg), exp)
    if args.teacher:
        teacher, _ = load_checkpoint(_require(args.teacher, "teacher checkpoint"))
    else:
        teacher, _ = pipeline.train_teacher(exp, bundle.labeled, bundle.mean, out_dir=run)
    it = pipeline.iterate(exp, bundle.labeled, bundle.unlabeled, bundle.val, teacher, bundle.mean, out_dir=run)
    print(f"teacher mIoU {it.teacher_miou:.4f}; rounds " + " ".join(f"{m:.4f}" for m in it.mious))
    return 0


def cmd_eval(args, cfg: RunConfig, run: Path) -> int:
    exp = cfg.experiment(run)
    root = _data_root(args, cfg)
    if args.checkpoint:
        net, _ = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    else:
        net = exp.new_model()
    samples = [s for s in datahub.read_manifest(root / "manifest.tsv", strict=True) if s.split == "val"]
    val = datahub.load_arrays(samples, net.num_classes)
    mean = datahub.read_mean(root / "mean.txt")
    res = pipeline.evaluate(net, val, mean, exp.eval_batch_size)
    _write_eval(run / "eval.csv", res)
    print(f"mIoU {res.miou:.4f} over {len(val)} images")
    return 0


def cmd_bn_stats(args, cfg: RunConfig, run: Path) -> int:
    net, _ = load_checkpoint(_require(args.checkpoint, "checkpoint (--checkpoint)"))
    report = stats_report(net)
    report.write_csv(run / "bn_stats.csv")
    report.write_summary(run / "bn_divergence.csv")
    print(f"divergence {report.divergence!r} over {len(report.layer_divergence)} layers")
    return 0


def cmd_aug_preview(args, cfg: RunConfig, run: Path) -> int:
    exp = cfg.experiment(run)
    root = _data_root(args, cfg)
    samples = [s for s in datahub.read_manifest(root / "manifest.tsv", strict=True) if s.label_path][: args.count]
    mean = datahub.read_mean(root / "mean.txt")
    aug = exp.aug_config(mean)
    pool = photometric_pool(exp.aug_ranges)
    out = run / "preview"
    out.mkdir(exist_ok=True)
    rows = []
    for i, s in enumerate(samples):
        image = datahub.read_image(s.image_path) / 255.0
        label = datahub.read_label(s.label_path, exp.num_classes)
        rng = sample_rng(exp.seed, 9, i)
        policy = sample_policy(exp.n_ops, rng, pool)
        weak_img, _ = apply_weak(image, label, sample_rng(exp.seed, 10, i), aug)
        strong_img, strong_lab = apply_strong(image, label, policy, rng, aug)
        datahub.write_image(out / f"{s.id}_before.ppm", np.round(image * 255).astype(np.uint8))
        for tag, img in (("weak", weak_img), ("strong", strong_img)):
            pixels = np.clip(np.round((img + np.asarray(mean)) * 255), 0, 255).astype(np.uint8)
            datahub.write_image(out / f"{s.id}_{tag}.ppm", pixels)
        datahub.write_label(out / f"{s.id}_strong_label.pgm", strong_lab)
        rows.append((s.id, " ".join(op.name for op in policy)))
    with open(out / "policies.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "policy"])
        w.writerows(rows)
    print(f"wrote {len(rows)} previews to {out}")
    return 0


def cmd_ablate(args, cfg: RunConfig, run: Path) -> int:
    exp = cfg.experiment(run)
    root = _data_root(args, cfg)
    bundle = pipeline.load_bundle(root, exp)
    grids = set(args.grids.split(","))
    unknown = grids - {"bn", "group"}
    if unknown:
        raise ConfigurationError(f"unknown ablation grid(s): {', '.join(sorted(unknown))}")
    teacher, _ = pipeline.train_teacher(exp, bundle.labeled, bundle.mean, out_dir=run)
    pseudo = pipeline.pseudo_label_arrays(teacher, bundle.unlabeled, bundle.mean, exp.tta)
    rows = []
    if "bn" in grids:
        rows += pipeline.bn_ablation(exp, bundle.labeled, pseudo, teacher, bundle.val, bundle.mean, pseudo_loss=args.pseudo_loss)
    if "group" in grids:
        gt = pipeline.ground_truth_for(bundle.unlabeled_samples, exp.num_classes, bundle.unlabeled.ids, root)
        full = datahub.ArraySet(
            bundle.labeled.ids + bundle.unlabeled.ids,
            np.concatenate([bundle.labeled.images, bundle.unlabeled.images]),
            np.concatenate([bundle.labeled.labels, gt]),
        )
        groups = {"labeled-gt": bundle.labeled, "full-gt": full, "unlabeled-pseudo": pseudo}
        rows += pipeline.group_ablation(exp, groups, bundle.val, bundle.mean)
    pipeline.write_ablation_csv(run / "ablation.csv", rows)
    print(f"wrote {len(rows)} ablation rows to {run / 'ablation.csv'}")
    return 0


COMMANDS = {
    "gen-data": (cmd_gen_data, "render the synthetic dataset"),
    "train-teacher": (cmd_train_teacher, "supervised teacher on the labeled split"),
    "pseudo-label": (cmd_pseudo_label, "TTA pseudo labels for the unlabeled split"),
    "train-student": (cmd_train_student, "student from a teacher checkpoint and pseudo labels"),
    "iterate": (cmd_iterate, "self-training rounds with best-model promotion"),
    "eval": (cmd_eval, "single-scale validation mIoU"),
    "bn-stats": (cmd_bn_stats, "weak/strong running-statistic report"),
    "aug-preview": (cmd_aug_preview, "before/after augmentation images"),
    "ablate": (cmd_ablate, "BN-variant and data-group ablation grids"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sslseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, helptext) in COMMANDS.items():
        p = sub.add_parser(
            name,
            help=helptext,
            description=helptext,
            epilog=keys_help(),
            formatter_class=argparse.RawDescriptionHelpFormatter,
        )
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override one config key")
        p.add_argument("--seed", type=int, help="override [train] seed")
        p.add_argument("--out", default="runs", help="output root (default: runs)")
        p.add_argument("--run-name", help="run directory name (default: the subcommand)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name not in ("gen-data", "bn-stats"):
            p.add_argument("--data", help="dataset directory, overrides [data] root")
        if name in ("pseudo-label", "train-student", "iterate"):
            p.add_argument("--teacher", help="teacher checkpoint")
        if name == "train-student":
            p.add_argument("--pseudo", help="pseudo-label manifest or directory")
        if name in ("eval", "bn-stats"):
            p.add_argument("--checkpoint", help="model checkpoint (eval: random init when omitted)")
        if name == "aug-preview":
            p.add_argument("--count", type=int, default=4, help="images to preview")
        if name == "ablate":
            p.add_argument("--grids", default="bn,group", help="comma list of bn, group")
            p.add_argument("--pseudo-loss", default="ce", choices=("ce", "scl"), help="student loss for the BN grid")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set, args.seed)
        handler = COMMANDS[args.command][0]
        with RunDir(args.out, args.run_name or args.command) as run:
            (run / CONFIG_NAME).write_text(cfg.dump(), encoding="utf-8")
            return handler(args, cfg, run)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except (OSError, FormatError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2
    except SslsegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
