"""Command-line front door.

Subcommands: gen-dataset, train, train-downstream, eval, report,
export-latents, dump-traj.  Exit codes: 0 success, 1 validation/usage
error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import metrics as metrics_mod
from .clips import load_clip, save_clip
from .downstream import DownstreamConfig, FrozenPrior, train_downstream
from .errors import ConfigError, MotionPriorError, ValidationError
from .generators import default_dataset
from .metrics import MetricsTable, report, tracking_metrics, write_csv
from .prior import precompute_segment_features
from .rewards import AdvRewardEma, RewardWeights
from .robot import RobotGeometry
from .sim import SimConfig
from .trainer import (TrainConfig, apply_overrides, eval_rollouts,
                      load_config_file, train)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 (not 2) on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(EXIT_VALIDATION)


def _load_clips(path: str | None, geom: RobotGeometry):
    if not path:
        return default_dataset(geom)
    names = sorted(f for f in os.listdir(path) if f.endswith(".json"))
    if not names:
        raise ValidationError(f"no clip files (*.json) under {path}")
    return [load_clip(os.path.join(path, f), geom) for f in names]


def _train_config(args) -> TrainConfig:
    kv = load_config_file(args.config) if args.config else {}
    extra = {}
    if args.seed is not None:
        extra["seed"] = args.seed
    if args.mode is not None:
        extra["mode"] = args.mode
    if args.single_thread:
        extra["single_thread"] = True
    if args.out is not None:
        extra["out_dir"] = args.out
    if getattr(args, "dataset", None):
        extra["dataset"] = args.dataset
    if getattr(args, "steps", None):
        extra["total_env_steps"] = args.steps
    return apply_overrides(TrainConfig, kv, **extra)


def _downstream_config(args) -> DownstreamConfig:
    kv = load_config_file(args.config) if args.config else {}
    extra = {}
    if args.seed is not None:
        extra["seed"] = args.seed
    if args.single_thread:
        extra["single_thread"] = True
    if args.out is not None:
        extra["out_dir"] = args.out
    if args.prior is not None:
        extra["prior_checkpoint"] = args.prior
    if args.task is not None:
        extra["task"] = args.task
    return apply_overrides(DownstreamConfig, kv, **extra)


def _load_prior(checkpoint: str, geom: RobotGeometry) -> FrozenPrior:
    return FrozenPrior(checkpoint, geom)


def cmd_gen_dataset(args) -> int:
    geom = RobotGeometry()
    os.makedirs(args.out, exist_ok=True)
    clips = default_dataset(geom)
    for clip in clips:
        save_clip(os.path.join(args.out, f"{clip.name}.json"), clip)
    print(f"wrote {len(clips)} clips to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _train_config(args)
    geom = RobotGeometry()
    clips = _load_clips(cfg.dataset or None, geom)
    result = train(cfg, clips=clips, geom=geom, progress=not args.quiet)
    print(f"finished: metrics={result['metrics_csv']} "
          f"checkpoint={result['checkpoint']}")
    return EXIT_OK


def cmd_train_downstream(args) -> int:
    cfg = _downstream_config(args)
    result = train_downstream(cfg, progress=not args.quiet)
    print(f"finished: metrics={result['metrics_csv']} "
          f"checkpoint={result['checkpoint']} "
          f"prior_unchanged={result['prior_unchanged']}")
    return EXIT_OK


def cmd_eval(args) -> int:
    geom = RobotGeometry()
    prior = _load_prior(args.checkpoint, geom)
    clips = _load_clips(args.dataset, geom)
    mode = str(prior.meta.get("mode", "vim"))
    seed = int(prior.meta.get("seed", 0))
    cfg = TrainConfig(mode=mode, seed=seed, out_dir=args.out or ".",
                      eval_episodes=args.episodes)
    records = eval_rollouts(prior.nets, clips, geom, SimConfig(), cfg,
                            None, AdvRewardEma(len(clips)), RewardWeights(),
                            episodes_per_clip=args.episodes)
    table = MetricsTable()
    for r in records:
        table.add(mode, seed, r["clip"],
                  {"err_x": r["err_x"], "err_z": r["err_z"],
                   "err_ori": r["err_ori"], "err_joint": r["err_joint"],
                   "err_foot": r["err_foot"], "ep_return": r["ep_return"],
                   "ep_len": r["ep_len"]})
    out = args.out or "eval_metrics.csv"
    table.to_csv(out)
    print(f"wrote {out} ({len(records)} episodes)")
    return EXIT_OK


def cmd_report(args) -> int:
    result = report(args.runs, args.out)
    print(f"wrote {result['table']} and {result['curves']}")
    return EXIT_OK


def cmd_export_latents(args) -> int:
    geom = RobotGeometry()
    prior = _load_prior(args.checkpoint, geom)
    clips = _load_clips(args.dataset, geom)
    d_z = prior.d_z
    columns = (["clip", "t"] + [f"mu{i}" for i in range(d_z)]
               + [f"sigma{i}" for i in range(d_z)])
    rows = []
    for clip in clips:
        seg = precompute_segment_features(clip)
        mu, sigma = prior.nets.encode(seg)
        for t in range(len(seg)):
            rows.append([clip.name, t]
                        + [f"{v:.8g}" for v in mu[t]]
                        + [f"{v:.8g}" for v in sigma[t]])
    write_csv(args.out, columns, rows)
    print(f"wrote {args.out} ({len(rows)} rows)")
    return EXIT_OK


def cmd_dump_traj(args) -> int:
    from .sim import RobotState, reset_rows, step_batch
    geom = RobotGeometry()
    prior = _load_prior(args.checkpoint, geom)
    clips = _load_clips(args.dataset, geom)
    matches = [c for c in clips if c.name == args.clip]
    if not matches:
        raise ValidationError(
            f"no clip named {args.clip!r}; have {[c.name for c in clips]}")
    clip = matches[0]
    seg_table = precompute_segment_features(clip)
    vels = clip.velocities()
    row = reset_rows(clip.poses[0], vels[0], 0.0, geom,
                     np.random.default_rng(0))[0]
    columns = ["t", "root_x", "root_z", "pitch", "vx", "vz", "pitch_rate",
               "q0", "q1", "q2", "q3", "ref_x", "ref_z", "ref_pitch"]
    rows = []
    sim_cfg = SimConfig()
    for t in range(clip.T):
        mu, _ = prior.nets.encode(seg_table[t][None, :])
        action, _ = prior.nets.act(mu[0], RobotState.from_array(row))
        row = step_batch(row[None, :], action[None, :], sim_cfg, geom)[0]
        ref = clip.frame(t + 1)
        rows.append([t + 1] + [f"{v:.8g}" for v in row[:10]]
                    + [f"{ref.root_x:.8g}", f"{ref.root_z:.8g}",
                       f"{ref.pitch:.8g}"])
    write_csv(args.out, columns, rows)
    print(f"wrote {args.out} ({len(rows)} steps)")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="motionprior",
                     description="Motion-prior training and evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--single-thread", action="store_true")
        p.add_argument("--quiet", action="store_true")
        if config:
            p.add_argument("--config", default=None,
                           help="key=value config file")

    p = sub.add_parser("gen-dataset", help="write the synthetic clip set")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_dataset)

    p = sub.add_parser("train", help="train the motion prior")
    common(p)
    p.add_argument("--mode", default=None,
                   choices=["vim", "vim-no-sched", "motion-imitation",
                            "gail"])
    p.add_argument("--out", default=None, help="run directory")
    p.add_argument("--dataset", default=None, help="clip directory")
    p.add_argument("--steps", type=int, default=None,
                   help="override total_env_steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-downstream",
                       help="train a high-level task policy")
    common(p)
    p.add_argument("--task", default=None,
                   choices=["follow", "jump", "combined"])
    p.add_argument("--prior", default=None, help="prior checkpoint path")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_train_downstream)

    p = sub.add_parser("eval", help="tracking metrics for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", default=None)
    p.add_argument("--episodes", type=int, default=4)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="aggregate finished run directories")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("export-latents",
                       help="encoder latent stats per clip frame")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_latents)

    p = sub.add_parser("dump-traj",
                       help="deterministic rollout trace for one clip")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", default=None)
    p.add_argument("--clip", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_traj)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (ConfigError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except MotionPriorError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 — CLI boundary
        print(f"unexpected failure: {type(exc).__name__}: {exc}",
              file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
