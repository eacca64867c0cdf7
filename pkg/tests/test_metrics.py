"""Tracking metrics, CSV schema, and run reporting."""

import os

import numpy as np
import pytest

from motionprior.clips import MotionClip
from motionprior.errors import ValidationError
from motionprior.metrics import (EPISODE_FIELDS, REPORT_COLUMNS,
                                 SCHEMA_VERSION, MetricsTable,
                                 episode_errors, read_csv, report,
                                 tracking_metrics, write_csv)
from motionprior.robot import STAND_JOINTS, foot_fk
from motionprior.trainer import TrainConfig, train


def _tracking_states(clip, start, length, geom, dx=0.0, dz=0.0, dq=0.0):
    """State rows that follow the clip exactly, plus optional offsets."""
    rows = np.zeros((length, 21))
    for k in range(length):
        ref = clip.frame(start + k + 1)
        rows[k, 0] = ref.root_x + dx
        rows[k, 1] = ref.root_z + dz
        rows[k, 2] = ref.pitch
        rows[k, 6:10] = ref.joints + dq
    return rows


def _stand_clip(geom, frames=40):
    poses = np.zeros((frames, 7))
    poses[:, 1] = geom.stand_height()
    poses[:, 3:] = STAND_JOINTS
    return MotionClip(name="stand_ref", source="synthetic", dt=0.02,
                      poses=poses, geom=geom)


# ---------------------------------------------------------------------------
# episode_errors


def test_perfect_tracking_gives_zero_errors(geom):
    clip = _stand_clip(geom)
    states = _tracking_states(clip, 0, 20, geom)
    rec = episode_errors(states, clip, 0, geom)
    for key in ("err_x", "err_z", "err_ori", "err_joint"):
        assert rec[key] == pytest.approx(0.0, abs=1e-12)
    assert rec["err_foot"] == pytest.approx(0.0, abs=1e-9)
    assert rec["ep_len"] == 20


def test_root_offset_errors_are_exact(geom):
    clip = _stand_clip(geom)
    states = _tracking_states(clip, 0, 10, geom, dx=0.25, dz=-0.04)
    rec = episode_errors(states, clip, 0, geom)
    assert rec["err_x"] == pytest.approx(0.25, abs=1e-12)
    assert rec["err_z"] == pytest.approx(0.04, abs=1e-12)


def test_joint_offset_error_is_mean_square(geom):
    # 0.3 rad on every joint -> mean over joints of 0.09 rad^2
    clip = _stand_clip(geom)
    states = _tracking_states(clip, 0, 10, geom, dq=0.3)
    rec = episode_errors(states, clip, 0, geom)
    assert rec["err_joint"] == pytest.approx(0.09, abs=1e-12)
    assert rec["err_foot"] > 0.0


def test_pitch_error_uses_wrapped_angle(geom):
    clip = _stand_clip(geom)
    states = _tracking_states(clip, 0, 5, geom)
    states[:, 2] = 2.0 * np.pi + 0.1  # same orientation plus 0.1 rad
    rec = episode_errors(states, clip, 0, geom)
    assert rec["err_ori"] == pytest.approx(0.1, abs=1e-9)


def test_overrun_raises(geom):
    clip = _stand_clip(geom)  # T = 39
    states = _tracking_states(clip, 0, 10, geom)
    with pytest.raises(ValidationError):
        episode_errors(states, clip, 35, geom)


def test_single_row_matches_batch_of_one(geom):
    clip = _stand_clip(geom)
    states = _tracking_states(clip, 3, 1, geom, dx=0.1)
    rec_1d = episode_errors(states[0], clip, 3, geom)
    rec_2d = episode_errors(states, clip, 3, geom)
    assert rec_1d == rec_2d


# ---------------------------------------------------------------------------
# MetricsTable / tracking_metrics


def _record(err=0.1, ep_len=20):
    return {k: err for k in EPISODE_FIELDS if k.startswith("err_")} | {
        "ep_return": 5.0, "ep_len": ep_len}


def test_aggregate_mean_and_std():
    table = MetricsTable()
    table.add("vim", 0, "hop", _record(err=0.1))
    table.add("vim", 0, "hop", _record(err=0.3))
    rows = table.aggregate()
    assert len(rows) == 1
    row = rows[0]
    assert row["episodes"] == 2
    assert row["err_x_mean"] == pytest.approx(0.2)
    assert row["err_x_std"] == pytest.approx(0.1)


def test_aggregate_groups_by_mode_seed_clip():
    table = MetricsTable()
    table.add("vim", 0, "hop", _record())
    table.add("vim", 1, "hop", _record())
    table.add("gail", 0, "walk", _record())
    keys = {(r["mode"], r["seed"], r["clip"]) for r in table.aggregate()}
    assert keys == {("vim", 0, "hop"), ("vim", 1, "hop"),
                    ("gail", 0, "walk")}


def test_tracking_metrics_builds_table(geom):
    clip = _stand_clip(geom)
    traj = {"clip_id": 0, "start": 0,
            "states": _tracking_states(clip, 0, 8, geom, dx=0.2),
            "ep_return": 7.5}
    table = tracking_metrics([traj], [clip], geom, mode="vim", seed=3)
    assert len(table.episodes) == 1
    row = table.episodes[0]
    assert row["mode"] == "vim" and row["seed"] == 3
    assert row["clip"] == "stand_ref"
    assert row["err_x"] == pytest.approx(0.2, abs=1e-12)
    assert row["ep_return"] == 7.5


def test_tracking_metrics_bad_clip_id(geom):
    clip = _stand_clip(geom)
    traj = {"clip_id": 4, "start": 0,
            "states": _tracking_states(clip, 0, 4, geom)}
    with pytest.raises(ValidationError):
        tracking_metrics([traj], [clip], geom)


# ---------------------------------------------------------------------------
# CSV schema


def test_csv_roundtrip_with_schema_comment(tmp_path):
    path = str(tmp_path / "t.csv")
    write_csv(path, ["a", "b"], [[1, "x"], {"a": 2, "b": "y"}])
    with open(path) as fh:
        assert fh.readline() == f"# schema-version: {SCHEMA_VERSION}\n"
    columns, rows = read_csv(path)
    assert columns == ["a", "b"]
    assert rows == [{"a": "1", "b": "x"}, {"a": "2", "b": "y"}]


def test_read_csv_accepts_plain_header(tmp_path):
    path = str(tmp_path / "plain.csv")
    with open(path, "w") as fh:
        fh.write("a,b\n1,2\n")
    columns, rows = read_csv(path)
    assert columns == ["a", "b"]
    assert rows == [{"a": "1", "b": "2"}]


def test_table_to_csv_roundtrip(tmp_path):
    table = MetricsTable()
    table.add("vim", 0, "hop", _record(err=0.125))
    path = str(tmp_path / "agg.csv")
    table.to_csv(path)
    columns, rows = read_csv(path)
    assert "err_x_mean" in columns
    assert float(rows[0]["err_x_mean"]) == pytest.approx(0.125)


# ---------------------------------------------------------------------------
# report over run directories


@pytest.fixture(scope="module")
def run_dirs(tmp_path_factory):
    base = tmp_path_factory.mktemp("runs")
    dirs = []
    for seed in (0, 1):
        out = str(base / f"run_s{seed}")
        cfg = TrainConfig(mode="vim", seed=seed, n_envs=4, horizon=16,
                          minibatches=2, total_env_steps=256,
                          eval_every=4, eval_episodes=1,
                          final_eval_episodes=1, out_dir=out)
        train(cfg, progress=False)
        dirs.append(out)
    return dirs


def test_report_writes_table_and_curves(run_dirs, tmp_path):
    out = str(tmp_path / "rep")
    result = report(run_dirs, out)
    assert os.path.exists(result["table"])
    assert os.path.exists(result["curves"])
    columns, rows = read_csv(result["table"])
    assert columns == list(REPORT_COLUMNS)
    assert rows, "report table is empty"
    assert all(r["mode"] == "vim" for r in rows)
    assert all(int(r["seeds"]) == 2 for r in rows)


def test_report_is_a_pure_function_of_runs(run_dirs, tmp_path):
    out_a = str(tmp_path / "a")
    out_b = str(tmp_path / "b")
    res_a = report(run_dirs, out_a)
    res_b = report(run_dirs, out_b)
    for key in ("table", "curves"):
        with open(res_a[key], "rb") as fh:
            data_a = fh.read()
        with open(res_b[key], "rb") as fh:
            data_b = fh.read()
        assert data_a == data_b, f"{key} output differs between reruns"


def test_report_rejects_empty_and_missing(tmp_path):
    with pytest.raises(ValidationError):
        report([], str(tmp_path / "out"))
    with pytest.raises(ValidationError):
        report([str(tmp_path / "nope")], str(tmp_path / "out2"))
