"""Evaluation metrics, tabular aggregation, and run reporting.

Per-step tracking errors follow the convention used throughout: absolute
root x / height / wrapped orientation error, joint error in rad^2 per
joint, and mean foot Euclidean error; per-episode values are step means,
aggregates are episode means with std.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .clips import wrap_angle
from .errors import ValidationError
from .robot import foot_fk

SCHEMA_VERSION = 1

EPISODE_FIELDS = ("err_x", "err_z", "err_ori", "err_joint", "err_foot",
                  "ep_return", "ep_len")


def write_csv(path: str, columns, rows):
    """CSV with a schema-version comment line then a header row.

    rows may be dicts (keyed by column) or sequences.
    """
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema-version: {SCHEMA_VERSION}\n")
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            if isinstance(row, dict):
                row = [row.get(c, "") for c in columns]
            writer.writerow(row)


def read_csv(path: str):
    """Read a CSV written by write_csv; returns (columns, list of dicts)."""
    with open(path) as fh:
        first = fh.readline()
        if not first.startswith("#"):
            fh.seek(0)
        reader = csv.reader(fh)
        columns = next(reader)
        rows = [dict(zip(columns, row)) for row in reader]
    return columns, rows


def episode_errors(states, clip, start: int, geom) -> dict:
    """Step-mean tracking errors of one trajectory against its clip.

    states has one row (sim state layout) per control step taken; row k
    is compared to reference frame start + k + 1.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    length = len(states)
    if start + length > clip.T:
        raise ValidationError(
            f"trajectory of {length} steps starting at {start} overruns "
            f"clip horizon {clip.T}")
    sums = np.zeros(5)
    for k, row in enumerate(states):
        ref = clip.frame(start + k + 1)
        dq = row[6:10] - ref.joints
        feet = foot_fk(row[0], row[1], row[2], row[6:10], geom)
        sums[0] += abs(row[0] - ref.root_x)
        sums[1] += abs(row[1] - ref.root_z)
        sums[2] += abs(wrap_angle(row[2] - ref.pitch))
        sums[3] += float((dq * dq).mean())
        sums[4] += float(np.linalg.norm(feet - ref.feet, axis=-1).mean())
    sums /= max(length, 1)
    return {"err_x": sums[0], "err_z": sums[1], "err_ori": sums[2],
            "err_joint": sums[3], "err_foot": sums[4], "ep_len": length}


@dataclass
class MetricsTable:
    """Per-episode tracking rows plus (mode, seed, clip) aggregates.

    Stores the raw episode rows so every aggregate is recomputable.
    """

    episodes: list = field(default_factory=list)

    def add(self, mode: str, seed: int, clip_name: str, record: dict):
        row = {"mode": mode, "seed": seed, "clip": clip_name}
        row.update({k: float(record[k]) for k in EPISODE_FIELDS
                    if k in record})
        self.episodes.append(row)

    def aggregate(self):
        """One row per (mode, seed, clip) with mean and std per metric."""
        groups = {}
        for row in self.episodes:
            groups.setdefault((row["mode"], row["seed"], row["clip"]),
                              []).append(row)
        out = []
        for (mode, seed, clip_name), rows in sorted(groups.items()):
            agg = {"mode": mode, "seed": seed, "clip": clip_name,
                   "episodes": len(rows)}
            for name in EPISODE_FIELDS:
                vals = np.array([r[name] for r in rows if name in r])
                if len(vals) == 0:
                    continue
                agg[f"{name}_mean"] = float(vals.mean())
                agg[f"{name}_std"] = float(vals.std())
            out.append(agg)
        return out

    def to_csv(self, path: str):
        rows = self.aggregate()
        columns = ["mode", "seed", "clip", "episodes"]
        for name in EPISODE_FIELDS:
            columns += [f"{name}_mean", f"{name}_std"]
        write_csv(path, columns, rows)


def tracking_metrics(trajectories, clips, geom, mode: str = "",
                     seed: int = 0) -> MetricsTable:
    """Build a MetricsTable from evaluation trajectories.

    Each trajectory is a dict with clip_id, start, states (steps x 21)
    and optionally ep_return.
    """
    table = MetricsTable()
    for traj in trajectories:
        cid = int(traj["clip_id"])
        if not 0 <= cid < len(clips):
            raise ValidationError(f"trajectory clip_id {cid} has no clip")
        clip = clips[cid]
        rec = episode_errors(traj["states"], clip, int(traj["start"]), geom)
        rec["ep_return"] = float(traj.get("ep_return", np.nan))
        table.add(mode, seed, clip.name, rec)
    return table


# ---------------------------------------------------------------------------
# run-directory reporting


def _read_run(run_dir: str):
    cfg_path = os.path.join(run_dir, "config.cfg")
    if not os.path.exists(cfg_path):
        raise ValidationError(f"{run_dir} has no config.cfg")
    cfg = {}
    with open(cfg_path) as fh:
        for line in fh:
            if "=" in line:
                key, val = line.split("=", 1)
                cfg[key.strip()] = val.strip()
    _, metrics_rows = read_csv(os.path.join(run_dir, "metrics.csv"))
    eval_rows = []
    eval_path = os.path.join(run_dir, "eval.csv")
    if os.path.exists(eval_path):
        _, eval_rows = read_csv(eval_path)
    return {"dir": run_dir, "mode": cfg.get("mode", "?"),
            "seed": int(cfg.get("seed", 0)), "metrics": metrics_rows,
            "eval": eval_rows}


def _final_eval_rows(run):
    if not run["eval"]:
        return []
    last_update = max(int(r["update"]) for r in run["eval"])
    return [r for r in run["eval"] if int(r["update"]) == last_update]


REPORT_COLUMNS = ("mode", "clip", "seeds", "err_x_mean", "err_x_std",
                  "err_z_mean", "err_z_std", "err_ori_mean", "err_ori_std",
                  "err_joint_mean", "err_joint_std", "err_foot_mean",
                  "err_foot_std", "ep_len_mean", "ep_len_std",
                  "ep_return_mean", "ep_return_std")


def report(run_dirs, out_dir: str) -> dict:
    """Aggregate finished runs into a tracking-error table and SVG
    learning curves (mean with a +-1 std band across seeds per mode)."""
    runs = [_read_run(d) for d in sorted(run_dirs)]
    if not runs:
        raise ValidationError("no run directories given")
    os.makedirs(out_dir, exist_ok=True)

    # final-eval table: (mode, clip) aggregated across seeds
    groups = {}
    for run in runs:
        for row in _final_eval_rows(run):
            groups.setdefault((run["mode"], row["clip"]), []).append(row)
    table_rows = []
    for (mode, clip_name), rows in sorted(groups.items()):
        rec = {"mode": mode, "clip": clip_name, "seeds": len(rows)}
        for src, dst in (("err_x", "err_x"), ("err_z", "err_z"),
                         ("err_ori", "err_ori"), ("err_joint", "err_joint"),
                         ("err_foot", "err_foot"), ("ep_len", "ep_len"),
                         ("ep_return", "ep_return")):
            vals = np.array([float(r[src]) for r in rows if r[src] != ""])
            if len(vals):
                rec[f"{dst}_mean"] = f"{vals.mean():.6g}"
                rec[f"{dst}_std"] = f"{vals.std():.6g}"
        table_rows.append(rec)
    table_path = os.path.join(out_dir, "tracking_table.csv")
    write_csv(table_path, REPORT_COLUMNS, table_rows)

    curves_path = os.path.join(out_dir, "learning_curves.svg")
    _plot_curves(runs, curves_path)
    return {"table": table_path, "curves": curves_path}


def _plot_curves(runs, out_path: str):
    import matplotlib
    matplotlib.use("svg")
    # fixed hash salt so element ids (and hence the file bytes) are a pure
    # function of the plotted data
    matplotlib.rcParams["svg.hashsalt"] = "motionprior"
    import matplotlib.pyplot as plt

    by_mode = {}
    for run in runs:
        by_mode.setdefault(run["mode"], []).append(run)
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for mode, mruns in sorted(by_mode.items()):
        series = {"mean_return": [], "eval_err_x": []}
        steps = None
        for run in mruns:
            xs = np.array([float(r["env_steps"]) for r in run["metrics"]])
            for key in series:
                ys = np.array([float(r[key]) if r[key] != "" else np.nan
                               for r in run["metrics"]])
                series[key].append(ys)
            steps = xs if steps is None or len(xs) < len(steps) else steps
        if steps is None or not len(steps):
            continue
        for ax, key, label in ((axes[0], "mean_return", "episode return"),
                               (axes[1], "eval_err_x", "eval |x| error [m]")):
            ys = np.stack([y[:len(steps)] for y in series[key]])
            mean = np.nanmean(ys, axis=0)
            std = np.nanstd(ys, axis=0)
            ax.plot(steps, mean, label=mode)
            ax.fill_between(steps, mean - std, mean + std, alpha=0.25)
            ax.set_xlabel("env steps")
            ax.set_ylabel(label)
    for ax in axes:
        ax.legend(fontsize=8)
        ax.grid(alpha=0.3)
    fig.tight_layout()
    # drop the date stamp so report output is a pure function of its inputs
    fig.savefig(out_path, metadata={"Date": None})
    plt.close(fig)
