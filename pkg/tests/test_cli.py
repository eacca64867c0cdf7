"""Command-line interface: subcommands, artifacts, exit codes."""

import json
import os
import subprocess
import sys

import pytest

from motionprior.cli import EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, main
from motionprior.metrics import read_csv

TINY_CONFIG = """\
# tiny run for CLI tests
mode = vim
n_envs = 4
horizon = 16
minibatches = 2
total_env_steps = 256
eval_every = 4
eval_episodes = 1
final_eval_episodes = 1
"""


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.cfg"
    path.write_text(TINY_CONFIG)
    return str(path)


@pytest.fixture(scope="module")
def train_run(tiny_config, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("cli") / "run")
    code = main(["train", "--config", tiny_config, "--seed", "0",
                 "--out", out, "--quiet"])
    assert code == EXIT_OK
    return out


def _schema_line(path):
    with open(path) as fh:
        return fh.readline()


# ---------------------------------------------------------------------------
# gen-dataset


def test_gen_dataset_writes_all_clips(tmp_path, capsys):
    out = str(tmp_path / "clips")
    assert main(["gen-dataset", "--out", out]) == EXIT_OK
    names = sorted(os.listdir(out))
    assert names == ["backflip.json", "hop.json", "jump_forward.json",
                     "stand.json", "trot_like.json", "walk_fast.json",
                     "walk_slow.json"]
    with open(os.path.join(out, "hop.json")) as fh:
        data = json.load(fh)
    assert data["name"] == "hop"
    assert "wrote 7 clips" in capsys.readouterr().out


# ---------------------------------------------------------------------------
# train


def test_train_writes_run_artifacts(train_run):
    for name in ("config.cfg", "metrics.csv", "eval.csv"):
        assert os.path.exists(os.path.join(train_run, name)), name
    assert _schema_line(os.path.join(train_run, "metrics.csv")).startswith(
        "# schema-version:")
    ckpts = os.listdir(os.path.join(train_run, "checkpoints"))
    assert "ckpt_final.npz" in ckpts


def test_train_single_thread_repeats_byte_identical(tiny_config, tmp_path):
    outs = [str(tmp_path / f"run_{i}") for i in range(2)]
    for out in outs:
        code = main(["train", "--config", tiny_config, "--seed", "7",
                     "--single-thread", "--out", out, "--quiet"])
        assert code == EXIT_OK
    for name in ("metrics.csv", "eval.csv"):
        with open(os.path.join(outs[0], name), "rb") as fh:
            first = fh.read()
        with open(os.path.join(outs[1], name), "rb") as fh:
            second = fh.read()
        assert first == second, f"{name} differs between identical runs"


def test_train_rejects_unknown_mode(tiny_config, tmp_path):
    code = main(["train", "--config", tiny_config, "--mode", "dagger",
                 "--out", str(tmp_path / "x"), "--quiet"])
    assert code == EXIT_VALIDATION


def test_train_missing_config_is_validation_error(tmp_path, capsys):
    code = main(["train", "--config", str(tmp_path / "nope.cfg"),
                 "--quiet"])
    assert code == EXIT_VALIDATION
    assert "error" in capsys.readouterr().err


def test_train_bad_config_value(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("gamma = 1.5\n")
    assert main(["train", "--config", str(cfg), "--quiet"]) \
        == EXIT_VALIDATION


# ---------------------------------------------------------------------------
# eval / export-latents / dump-traj on a trained checkpoint


def test_eval_writes_metrics_table(train_run, tmp_path):
    ckpt = os.path.join(train_run, "checkpoints", "ckpt_final.npz")
    out = str(tmp_path / "eval.csv")
    code = main(["eval", "--checkpoint", ckpt, "--episodes", "1",
                 "--out", out])
    assert code == EXIT_OK
    assert _schema_line(out).startswith("# schema-version:")
    columns, rows = read_csv(out)
    assert "err_x_mean" in columns
    assert len(rows) == 7  # one aggregate row per dataset clip


def test_export_latents_columns(train_run, tmp_path):
    ckpt = os.path.join(train_run, "checkpoints", "ckpt_final.npz")
    out = str(tmp_path / "lat.csv")
    assert main(["export-latents", "--checkpoint", ckpt, "--out", out]) \
        == EXIT_OK
    columns, rows = read_csv(out)
    assert columns[:2] == ["clip", "t"]
    assert columns[2:18] == [f"mu{i}" for i in range(16)]
    assert columns[18:] == [f"sigma{i}" for i in range(16)]
    assert all(float(r["sigma0"]) > 0 for r in rows[:50])


def test_dump_traj(train_run, tmp_path):
    ckpt = os.path.join(train_run, "checkpoints", "ckpt_final.npz")
    out = str(tmp_path / "traj.csv")
    assert main(["dump-traj", "--checkpoint", ckpt, "--clip", "hop",
                 "--out", out]) == EXIT_OK
    columns, rows = read_csv(out)
    assert columns[:3] == ["t", "root_x", "root_z"]
    assert len(rows) > 0
    assert int(rows[0]["t"]) == 1


def test_dump_traj_unknown_clip(train_run, tmp_path):
    ckpt = os.path.join(train_run, "checkpoints", "ckpt_final.npz")
    code = main(["dump-traj", "--checkpoint", ckpt, "--clip", "moonwalk",
                 "--out", str(tmp_path / "t.csv")])
    assert code == EXIT_VALIDATION


# ---------------------------------------------------------------------------
# report


def test_report_command(train_run, tmp_path):
    out = str(tmp_path / "rep")
    assert main(["report", train_run, "--out", out]) == EXIT_OK
    assert os.path.exists(os.path.join(out, "tracking_table.csv"))
    assert os.path.exists(os.path.join(out, "learning_curves.svg"))


# ---------------------------------------------------------------------------
# exit codes and usage errors


def test_unknown_subcommand_exits_1():
    assert main(["frobnicate"]) == EXIT_VALIDATION


def test_unknown_flag_exits_1():
    assert main(["gen-dataset", "--out", "/tmp/x", "--turbo"]) \
        == EXIT_VALIDATION


def test_missing_required_argument_exits_1():
    assert main(["gen-dataset"]) == EXIT_VALIDATION


def test_empty_dataset_dir_is_validation_error(train_run, tmp_path):
    ckpt = os.path.join(train_run, "checkpoints", "ckpt_final.npz")
    empty = tmp_path / "empty"
    empty.mkdir()
    code = main(["eval", "--checkpoint", ckpt, "--dataset", str(empty),
                 "--out", str(tmp_path / "e.csv")])
    assert code == EXIT_VALIDATION


def test_unexpected_failure_exits_2(tmp_path, capsys):
    code = main(["eval", "--checkpoint", str(tmp_path / "missing.npz"),
                 "--out", str(tmp_path / "e.csv")])
    assert code == EXIT_RUNTIME
    assert "failure" in capsys.readouterr().err


def test_module_entry_point_runs():
    proc = subprocess.run(
        [sys.executable, "-m", "motionprior.cli", "--help"],
        capture_output=True, text=True)
    assert proc.returncode == 0
    assert "gen-dataset" in proc.stdout
