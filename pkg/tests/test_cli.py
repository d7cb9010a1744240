import csv
import os

import numpy as np
import pytest

from sslseg import cli
from sslseg.cli import default_config, load_config, main, parse_config_text
from sslseg.errors import ConfigurationError

TINY = [
    "--set", "data.image_size=32",
    "--set", "data.n_train=12",
    "--set", "data.n_val=4",
    "--set", "data.labeled_fraction=0.25",
    "--set", "model.width=4",
    "--set", "augment.crop_size=32",
    "--set", "train.batch_size=2",
    "--set", "train.pseudo_batch_size=2",
    "--set", "train.teacher_iters=4",
    "--set", "train.student_iters=4",
    "--set", "train.rounds=1",
    "--set", "train.log_interval=2",
    "--set", "tta.scales=1.0",
]


def run(tmp_path, *argv):
    return main([*argv, "--out", str(tmp_path / "runs")])


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(out), *TINY]) == 0
    return out / "gen-data" / "data"


@pytest.fixture(scope="module")
def teacher_ckpt(tmp_path_factory, data_dir):
    out = tmp_path_factory.mktemp("teacher")
    assert main(["train-teacher", "--out", str(out), "--data", str(data_dir), *TINY]) == 0
    return out / "train-teacher" / "teacher.ckpt"


class TestConfig:
    def test_dump_round_trip(self):
        cfg = default_config()
        cfg.set("train", "seed", "17")
        cfg.set("augment", "multiply.factor", "0.8, 1.1")
        assert parse_config_text(cfg.dump()) == cfg

    def test_shipped_default_matches(self):
        path = os.path.join(os.path.dirname(__file__), "..", "configs", "default.ini")
        assert load_config(path, env={}) == default_config()

    def test_unknown_key(self):
        with pytest.raises(ConfigurationError, match="unknown config key"):
            parse_config_text("[train]\nlearning_rate = 0.1\n")

    def test_unknown_section(self):
        with pytest.raises(ConfigurationError):
            parse_config_text("[optim]\nlr = 0.1\n")

    def test_bad_value(self):
        with pytest.raises(ConfigurationError):
            parse_config_text("[train]\nteacher_iters = many\n")

    def test_seed_precedence(self, tmp_path):
        path = tmp_path / "c.ini"
        path.write_text("[train]\nseed = 3\n")
        assert load_config(path, env={}).get("train", "seed") == 3
        assert load_config(path, env={"SSLSEG_SEED": "5"}).get("train", "seed") == 5
        assert load_config(path, ["train.seed=6"], env={"SSLSEG_SEED": "5"}).get("train", "seed") == 6
        assert load_config(path, seed=7, env={"SSLSEG_SEED": "5"}).get("train", "seed") == 7

    def test_bad_set_syntax(self):
        with pytest.raises(ConfigurationError):
            load_config(overrides=["seed=3"], env={})


class TestExitCodes:
    def test_unknown_key_exit_1(self, tmp_path, capsys):
        assert run(tmp_path, "gen-data", "--set", "train.nope=1") == 1
        assert "nope" in capsys.readouterr().err

    def test_missing_data_exit_2(self, tmp_path):
        assert run(tmp_path, "eval", "--data", str(tmp_path / "absent")) == 2

    def test_corrupt_checkpoint_exit_2(self, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"not a checkpoint")
        assert run(tmp_path, "bn-stats", "--checkpoint", str(bad)) == 2

    def test_help_lists_keys(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(["train-teacher", "--help"])
        assert info.value.code == 0
        text = capsys.readouterr().out
        for key in cli.KEYS:
            assert f"[{key.section}] {key.name} =" in text
        assert "multiply.factor" in text

    def test_lock_blocks_second_run(self, tmp_path, capsys):
        rundir = tmp_path / "runs" / "gen-data"
        rundir.mkdir(parents=True)
        (rundir / cli.LOCK_NAME).write_text("1\n")
        assert run(tmp_path, "gen-data", *TINY) == 1
        assert "locked" in capsys.readouterr().err

    def test_lock_released(self, tmp_path):
        assert run(tmp_path, "gen-data", *TINY) == 0
        assert not (tmp_path / "runs" / "gen-data" / cli.LOCK_NAME).exists()
        assert run(tmp_path, "gen-data", *TINY) == 0


class TestSubcommands:
    def test_gen_data_writes_config(self, data_dir):
        cfg = load_config(data_dir.parent / "config.ini", env={})
        assert cfg.get("data", "n_train") == 12
        assert (data_dir / "manifest.tsv").is_file() and (data_dir / "mean.txt").is_file()

    def test_teacher_then_eval(self, tmp_path, data_dir, teacher_ckpt):
        teach_eval = read_csv(teacher_ckpt.parent / "eval.csv")
        assert run(tmp_path, "eval", "--data", str(data_dir), "--checkpoint", str(teacher_ckpt), *TINY) == 0
        rows = read_csv(tmp_path / "runs" / "eval" / "eval.csv")
        assert rows[0][:2] == ["miou", "iou_0"] and rows == teach_eval
        assert len(read_csv(teacher_ckpt.parent / "teacher_curve.csv")) == 1 + 3

    def test_pseudo_then_student(self, tmp_path, data_dir, teacher_ckpt):
        assert run(tmp_path, "pseudo-label", "--data", str(data_dir), "--teacher", str(teacher_ckpt), *TINY) == 0
        pseudo = tmp_path / "runs" / "pseudo-label" / "pseudo"
        assert len(list((pseudo / "labels").iterdir())) == 9
        assert run(tmp_path, "train-student", "--data", str(data_dir), "--teacher", str(teacher_ckpt), "--pseudo", str(pseudo), *TINY) == 0
        assert (tmp_path / "runs" / "train-student" / "student.ckpt").is_file()

    def test_student_requires_pseudo(self, tmp_path, data_dir, teacher_ckpt):
        assert run(tmp_path, "train-student", "--data", str(data_dir), "--teacher", str(teacher_ckpt), *TINY) == 1

    def test_iterate(self, tmp_path, data_dir, teacher_ckpt):
        assert run(tmp_path, "iterate", "--data", str(data_dir), "--teacher", str(teacher_ckpt), *TINY) == 0
        rows = read_csv(tmp_path / "runs" / "iterate" / "rounds.csv")
        assert len(rows) == 2 and rows[1][0] == "1"

    def test_bn_stats_weak_only_zero(self, tmp_path, teacher_ckpt):
        assert run(tmp_path, "bn-stats", "--checkpoint", str(teacher_ckpt)) == 0
        out = tmp_path / "runs" / "bn-stats"
        summary = read_csv(out / "bn_divergence.csv")
        divergence = [r for r in summary[1:] if r[0] != "strong_at_init"]
        assert len(divergence) == 5
        assert all(float(v) == 0.0 for row in divergence for v in row[1:])
        assert len(read_csv(out / "bn_stats.csv")) > 1

    def test_aug_preview(self, tmp_path, data_dir):
        assert run(tmp_path, "aug-preview", "--data", str(data_dir), "--count", "2", *TINY) == 0
        out = tmp_path / "runs" / "aug-preview" / "preview"
        assert len(list(out.glob("*.ppm"))) == 6
        assert len(read_csv(out / "policies.csv")) == 3

    def test_ablate(self, tmp_path, data_dir):
        assert run(tmp_path, "ablate", "--data", str(data_dir), *TINY) == 0
        rows = read_csv(tmp_path / "runs" / "ablate" / "ablation.csv")
        grids = {r[0] for r in rows[1:]}
        assert grids == {"bn", "group"}
        assert sum(r[2] == "mean" for r in rows[1:]) == 6 + 9

    def test_ablate_unknown_grid(self, tmp_path, data_dir):
        assert run(tmp_path, "ablate", "--data", str(data_dir), "--grids", "bn,lr", *TINY) == 1


BALANCED = [
    "--set", "data.n_train=0",
    "--set", "data.n_val=50",
    "--set", "data.image_size=32",
    "--set", "data.shapes_min=6",
    "--set", "data.shapes_max=10",
    "--set", "data.size_min=6",
]


def test_random_init_eval_near_chance(tmp_path):
    mious = []
    for seed in range(5):
        assert run(tmp_path, "gen-data", "--run-name", f"d{seed}", "--seed", str(seed), *BALANCED) == 0
        data = tmp_path / "runs" / f"d{seed}" / "data"
        assert run(tmp_path, "eval", "--run-name", f"e{seed}", "--seed", str(seed), "--data", str(data)) == 0
        mious.append(float(read_csv(tmp_path / "runs" / f"e{seed}" / "eval.csv")[1][0]))
    assert abs(np.mean(mious) - 1 / 4) <= 0.15, mious
