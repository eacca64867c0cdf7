"""Hierarchical reuse of a trained motion prior.

A small high-level policy emits latent commands for the frozen low-level
controller to solve planar tasks: tracking a commanded forward speed,
jumping during timed windows, and a combination of both.  The prior's
parameters are never written to — training only touches the high-level
networks — and the trainer asserts bitwise equality before/after.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from . import metrics as metrics_mod
from .errors import ConfigError, ValidationError
from .generators import generate_synthetic_clip
from .nn import (Adam, Mlp, clamp_log_std, gaussian_logprob,
                 load_checkpoint, save_checkpoint)
from .prior import PriorConfig, PriorNetworks, prop_features
from .robot import RobotGeometry
from .sim import SimConfig, reset_rows, step_batch
from .trainer import TrainConfig, gae, _atomic_checkpoint

TASKS = ("follow", "jump", "combined")

JUMP_HEIGHT = 0.45       # root height that counts as a jump
JUMP_BONUS_SCALE = 0.15  # height margin mapped onto the [0, 2] bonus
SPEED_SCALE = 4.0


@dataclass
class TaskObservation:
    """High-level observation: task command plus frozen proprioception
    encoding."""

    task: str
    command: np.ndarray      # follow: [v_cmd]; jump: [countdown]; combined: both
    prop_encoding: np.ndarray

    def vector(self) -> np.ndarray:
        return np.concatenate([self.prop_encoding, self.command])


@dataclass
class DownstreamConfig:
    """High-level task + PPO settings (key=value config compatible)."""

    task: str = "follow"
    prior_checkpoint: str = ""
    random_prior: bool = False   # ablation: untrained low level
    seed: int = 0
    n_envs: int = 16
    horizon: int = 64
    total_env_steps: int = 500_000
    episode_steps: int = 300
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    epochs: int = 4
    minibatches: int = 8
    lr: float = 3e-4
    lr_decay: bool = True        # linear decay to 10% over training
    value_coef: float = 0.5
    ent_coef: float = 0.003
    max_grad_norm: float = 1.0
    hidden: int = 128
    init_log_std: float = -1.0
    v_cmd_min: float = 0.0
    v_cmd_max: float = 1.2
    jump_interval: float = 3.0   # seconds between jump-window starts
    jump_window: float = 0.5     # window length, seconds
    resample_s: float = 3.0      # combined task: command refresh period
    reset_noise: float = 0.02
    eval_every: int = 25
    eval_episodes: int = 3
    checkpoint_every: int = 200
    single_thread: bool = False
    out_dir: str = "runs/downstream"

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; choose from {TASKS}")
        if not 0.0 < self.clip_eps < 1.0:
            raise ConfigError("clip_eps must lie in (0, 1)")
        if (self.n_envs * self.horizon) % self.minibatches != 0:
            raise ConfigError("n_envs * horizon must divide into minibatches")
        if self.v_cmd_min > self.v_cmd_max:
            raise ConfigError("v_cmd_min must not exceed v_cmd_max")

    @property
    def cmd_dim(self) -> int:
        return 2 if self.task == "combined" else 1


class FrozenPrior:
    """Read-only wrapper around a trained prior checkpoint.

    Exposes the proprioception encoding and the deterministic low-level
    action for a latent command; never exposes gradients.
    """

    def __init__(self, checkpoint_path: str, geom: RobotGeometry,
                 random_init: bool = False, seed: int = 0):
        if random_init:
            self.meta = {"d_z": 16, "mode": "vim"}
            pcfg = PriorConfig()
            self.nets = PriorNetworks(pcfg, 1, geom, seed=seed)
        else:
            params, _, _, meta = load_checkpoint(checkpoint_path)
            self.meta = meta
            pcfg = PriorConfig(alpha=float(meta.get("alpha", 0.95)),
                               beta=float(meta.get("beta", 1e-3)),
                               d_z=int(meta["d_z"]),
                               init_log_std=float(meta.get("init_log_std",
                                                           -1.6)))
            n_clips = len(meta.get("clip_names", [])) or 1
            self.nets = PriorNetworks(pcfg, n_clips, geom, seed=0)
            self.nets.load_params(params)
        self.d_z = self.nets.cfg.d_z
        self.prop_out = self.nets.cfg.prop_out
        self._snapshot = {k: v.copy() for k, v in self.nets.params().items()}

    def unchanged(self) -> bool:
        """Bitwise check that no prior parameter moved."""
        now = self.nets.params()
        return all(np.array_equal(self._snapshot[k], now[k])
                   for k in self._snapshot)

    def prop_encoding(self, state_rows: np.ndarray) -> np.ndarray:
        out, _ = self.nets.prop.forward(prop_features(state_rows))
        return out

    def act(self, prop_enc: np.ndarray, z: np.ndarray) -> np.ndarray:
        """Deterministic low-level action for latent command rows z."""
        z = np.atleast_2d(np.asarray(z, dtype=float))
        if z.shape[1] != self.d_z:
            raise ValidationError(
                f"latent dim {z.shape[1]} != checkpoint d_z {self.d_z}")
        raw, _ = self.nets.policy.forward(
            np.concatenate([prop_enc, z], axis=1))
        return self.nets.squash_action(raw)


class HighLevelPolicy:
    """Gaussian policy over latent commands plus a value head."""

    def __init__(self, obs_dim: int, d_z: int, cfg: DownstreamConfig,
                 rng: np.random.Generator):
        h = cfg.hidden
        self.pi = Mlp([obs_dim, h, h, d_z], rng=rng, out_scale=0.01)
        self.vf = Mlp([obs_dim, h, h, 1], rng=rng)
        self.log_std = np.full(d_z, cfg.init_log_std)
        self.d_z = d_z

    def params(self) -> dict:
        out = {}
        out.update(self.pi.named_params("hl_pi"))
        out.update(self.vf.named_params("hl_vf"))
        out["hl_log_std"] = self.log_std
        return out

    def load_params(self, params: dict):
        own = self.params()
        if set(own) != set(params):
            raise ValidationError("high-level checkpoint names do not match")
        for k, v in params.items():
            own[k][...] = v


def high_level_act(policy: HighLevelPolicy, obs: TaskObservation,
                   rng: np.random.Generator | None = None):
    """Latent command for one observation; deterministic when rng is None."""
    x = obs.vector()[None, :]
    mean, _ = policy.pi.forward(x)
    if rng is None:
        return mean[0]
    std = np.exp(clamp_log_std(policy.log_std))
    return mean[0] + std * rng.standard_normal(policy.d_z)


def _speed_reward(v_cmd: float, vx: float) -> float:
    err = v_cmd - vx
    return float(np.exp(-SPEED_SCALE * err * err))


def _jump_bonus(root_z: float) -> float:
    return float(np.clip(2.0 * max(0.0, root_z - JUMP_HEIGHT)
                         / JUMP_BONUS_SCALE, 0.0, 2.0))


def task_reward(task: str, state_row: np.ndarray, command: np.ndarray,
                in_window: bool = False) -> float:
    """Per-step downstream task reward.

    follow: speed tracking only.  jump / combined: speed tracking outside
    jump windows, plus the height bonus inside them.
    """
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}")
    vx = float(state_row[3])
    if task == "follow":
        return _speed_reward(float(command[0]), vx)
    # jump tracks a zero speed command between windows; combined carries
    # its own commanded speed in the first command slot
    v_cmd = float(command[0]) if task == "combined" else 0.0
    r = _speed_reward(v_cmd, vx)
    if in_window:
        r += _jump_bonus(float(state_row[1]))
    return r


class TaskEnv:
    """Vectorized downstream-task environments over a frozen prior."""

    def __init__(self, prior: FrozenPrior, geom: RobotGeometry,
                 sim_cfg: SimConfig, cfg: DownstreamConfig,
                 rng: np.random.Generator):
        self.prior = prior
        self.geom = geom
        self.sim_cfg = sim_cfg
        self.cfg = cfg
        self.rng = rng
        stand = generate_synthetic_clip("stand", geom, duration=1.0)
        self.reset_pose = stand.poses[0]
        self.reset_vel = np.zeros(7)
        n = cfg.n_envs
        self.states = np.zeros((n, 21))
        self.t = np.zeros(n, dtype=int)
        self.v_cmd = np.zeros(n)
        self.ep_ret = np.zeros(n)
        self.airborne_peak = np.zeros(n)   # max root_z while airborne in window
        self.window_jumped = np.zeros(n, dtype=bool)
        self.jump_attempts = 0
        self.jump_successes = 0
        for i in range(n):
            self.reset_env(i)

    def _sample_cmd(self) -> float:
        return float(self.rng.uniform(self.cfg.v_cmd_min, self.cfg.v_cmd_max))

    def reset_env(self, i: int):
        self.states[i] = reset_rows(self.reset_pose, self.reset_vel,
                                    self.cfg.reset_noise, self.geom,
                                    self.rng)[0]
        self.t[i] = 0
        self.v_cmd[i] = self._sample_cmd()
        self.ep_ret[i] = 0.0
        self.airborne_peak[i] = 0.0
        self.window_jumped[i] = False

    def in_window(self, i: int) -> bool:
        if self.cfg.task == "follow":
            return False
        dt = self.sim_cfg.control_dt
        phase = (self.t[i] * dt) % self.cfg.jump_interval
        return phase < self.cfg.jump_window

    def countdown(self, i: int) -> float:
        dt = self.sim_cfg.control_dt
        phase = (self.t[i] * dt) % self.cfg.jump_interval
        return 0.0 if phase < self.cfg.jump_window \
            else self.cfg.jump_interval - phase

    def command(self, i: int) -> np.ndarray:
        if self.cfg.task == "follow":
            return np.array([self.v_cmd[i]])
        if self.cfg.task == "jump":
            return np.array([self.countdown(i)])
        return np.array([self.v_cmd[i], self.countdown(i)])

    def obs_matrix(self) -> np.ndarray:
        prop = self.prior.prop_encoding(self.states)
        cmds = np.stack([self.command(i) for i in range(len(self.states))])
        return np.concatenate([prop, cmds], axis=1), prop

    def fallen(self, row: np.ndarray) -> bool:
        return row[1] < 0.15 or abs(row[2]) > 1.2

    def step(self, z: np.ndarray, prop: np.ndarray):
        """Advance all envs; returns rewards, dones, speed errors."""
        cfg = self.cfg
        actions = self.prior.act(prop, z)
        nxt = step_batch(self.states, actions, self.sim_cfg, self.geom)
        n = len(nxt)
        rewards = np.zeros(n)
        dones = np.zeros(n)
        sp_err = np.zeros(n)
        finished_rets = []
        for i in range(n):
            in_win = self.in_window(i)
            was_in_win = in_win
            rewards[i] = task_reward(cfg.task, nxt[i], self.command(i),
                                     in_window=in_win)
            target = self.v_cmd[i] if cfg.task != "jump" else 0.0
            sp_err[i] = abs(target - nxt[i][3])
            # jump success bookkeeping: both feet airborne above threshold
            if cfg.task != "follow":
                airborne = nxt[i][14] == 0.0 and nxt[i][15] == 0.0
                if in_win and airborne and nxt[i][1] > JUMP_HEIGHT:
                    self.window_jumped[i] = True
                dt = self.sim_cfg.control_dt
                phase = ((self.t[i] + 1) * dt) % cfg.jump_interval
                window_closed = was_in_win and phase >= cfg.jump_window
                if window_closed:
                    self.jump_attempts += 1
                    self.jump_successes += int(self.window_jumped[i])
                    self.window_jumped[i] = False
            self.ep_ret[i] += rewards[i]
            self.t[i] += 1
            fell = self.fallen(nxt[i])
            done = fell or self.t[i] >= cfg.episode_steps
            if cfg.task == "combined" and not done:
                if (self.t[i] * self.sim_cfg.control_dt) % cfg.resample_s \
                        < self.sim_cfg.control_dt / 2:
                    self.v_cmd[i] = self._sample_cmd()
            if done:
                dones[i] = 1.0
                finished_rets.append(self.ep_ret[i])
                self.reset_env(i)
            else:
                self.states[i] = nxt[i]
        return rewards, dones, sp_err, finished_rets


METRICS_COLUMNS = (
    "update", "env_steps", "mean_return", "speed_err", "jump_success",
    "loss_pi", "loss_v", "entropy", "clip_frac",
    "eval_speed_err", "eval_return", "eval_jump_success",
)


def _ppo_step(policy: HighLevelPolicy, opt: Adam, cfg: DownstreamConfig,
              obs, z_taken, logp_old, adv, rets, rng):
    """Epoch/minibatch loop of the clipped surrogate on the high level."""
    n_total = len(obs)
    mb_size = n_total // cfg.minibatches
    stats = {"loss_pi": 0.0, "loss_v": 0.0, "entropy": 0.0, "clip_frac": 0.0}
    count = 0
    log_std = clamp_log_std(policy.log_std)
    for _ in range(cfg.epochs):
        order = rng.permutation(n_total)
        for mb in range(cfg.minibatches):
            idx = order[mb * mb_size:(mb + 1) * mb_size]
            m = len(idx)
            mean, pi_tape = policy.pi.forward(obs[idx])
            log_std = clamp_log_std(policy.log_std)
            std = np.exp(log_std)
            var = std * std
            logp = gaussian_logprob(mean, log_std, z_taken[idx])
            ratio = np.exp(logp - logp_old[idx])
            adv_mb = adv[idx]
            clipped = np.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps)
            loss_pi = -float(np.minimum(ratio * adv_mb,
                                        clipped * adv_mb).mean())
            v, vf_tape = policy.vf.forward(obs[idx])
            verr = v[:, 0] - rets[idx]
            loss_v = 0.5 * cfg.value_coef * float((verr * verr).mean())
            entropy = float(np.sum(log_std)
                            + 0.5 * policy.d_z * np.log(2 * np.pi * np.e))
            active = (ratio * adv_mb) <= (clipped * adv_mb)
            dlogp = -(adv_mb * ratio * active) / m
            dmean = dlogp[:, None] * (z_taken[idx] - mean) / var
            dlog_std = (dlogp[:, None]
                        * ((z_taken[idx] - mean) ** 2 / var - 1.0)).sum(0)
            dlog_std -= cfg.ent_coef
            pi_grads, _ = policy.pi.backward(pi_tape, dmean)
            dv = (cfg.value_coef * verr / m)[:, None]
            vf_grads, _ = policy.vf.backward(vf_tape, dv)
            grads = {}
            grads.update(policy.pi.grads_to_named(pi_grads, "hl_pi"))
            grads.update(policy.vf.grads_to_named(vf_grads, "hl_vf"))
            grads["hl_log_std"] = dlog_std
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > cfg.max_grad_norm:
                for g in grads.values():
                    g *= cfg.max_grad_norm / norm
            opt.step(grads)
            stats["loss_pi"] += loss_pi
            stats["loss_v"] += loss_v
            stats["entropy"] += entropy
            stats["clip_frac"] += float((ratio != clipped).mean())
            count += 1
    return {k: v / count for k, v in stats.items()}


def eval_downstream(policy: HighLevelPolicy, prior: FrozenPrior,
                    geom: RobotGeometry, sim_cfg: SimConfig,
                    cfg: DownstreamConfig, commands=None) -> dict:
    """Deterministic episodes (mean latents, fixed reset seeds) at fixed
    commanded speeds; returns mean abs speed error, mean episode return,
    and jump success rate.

    Speed error compares the command against the achieved speed — mean
    forward velocity over the episode — because instantaneous vx swings
    within every gait cycle (stance vs swing) even under perfect
    reference tracking; falls still count fully, since a fallen robot
    accrues zero velocity for the rest of its episode.
    """
    if commands is None:
        commands = [0.3, 0.6, 1.0] if cfg.task != "jump" else [0.0]
    errs, rets = [], []
    attempts = successes = 0
    for ep in range(cfg.eval_episodes):
        env = TaskEnv(prior, geom, sim_cfg, cfg,
                      np.random.default_rng([12345, ep]))
        env.v_cmd[:] = np.resize(np.asarray(commands, dtype=float),
                                 cfg.n_envs)
        cmds = env.v_cmd.copy()
        env.jump_attempts = env.jump_successes = 0
        vx_sum = np.zeros(cfg.n_envs)
        ret_sum = np.zeros(cfg.n_envs)
        for _ in range(cfg.episode_steps):
            obs, prop = env.obs_matrix()
            mean, _ = policy.pi.forward(obs)
            rew, dones, sp_err, fin = env.step(mean, prop)
            env.v_cmd[:] = cmds  # pin commands through mid-episode resets
            vx_sum += env.states[:, 3]
            ret_sum += rew
        errs.extend(np.abs(cmds - vx_sum / cfg.episode_steps))
        rets.extend(ret_sum)
        attempts += env.jump_attempts
        successes += env.jump_successes
    success = successes / attempts if attempts else float("nan")
    return {"speed_err": float(np.mean(errs)),
            "ep_return": float(np.mean(rets)),
            "jump_success": success}


def train_downstream(cfg: DownstreamConfig, geom: RobotGeometry | None = None,
                     sim_cfg: SimConfig | None = None,
                     prior: FrozenPrior | None = None,
                     progress: bool = False) -> dict:
    """PPO over the high-level policy with the prior frozen throughout."""
    geom = geom or RobotGeometry()
    sim_cfg = sim_cfg or SimConfig()
    if prior is None:
        if not cfg.prior_checkpoint and not cfg.random_prior:
            raise ConfigError("need prior_checkpoint (or random_prior=true)")
        prior = FrozenPrior(cfg.prior_checkpoint, geom,
                            random_init=cfg.random_prior, seed=cfg.seed)
    os.makedirs(cfg.out_dir, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    obs_dim = prior.prop_out + cfg.cmd_dim
    policy = HighLevelPolicy(obs_dim, prior.d_z, cfg, rng)
    opt = Adam(policy.params(), lr=cfg.lr)
    env = TaskEnv(prior, geom, sim_cfg, cfg, rng)

    from .trainer import config_text
    with open(os.path.join(cfg.out_dir, "config.cfg"), "w") as fh:
        fh.write(config_text(cfg))
    metrics_path = os.path.join(cfg.out_dir, "metrics.csv")
    mfh = open(metrics_path, "w", newline="")
    mfh.write(f"# schema-version: {metrics_mod.SCHEMA_VERSION}\n")
    mcsv = csv.writer(mfh)
    mcsv.writerow(METRICS_COLUMNS)

    n, h = cfg.n_envs, cfg.horizon
    steps_per_update = n * h
    n_updates = max(1, -(-cfg.total_env_steps // steps_per_update))
    log_std_clamped = lambda: clamp_log_std(policy.log_std)
    last_eval = {"speed_err": float("nan"), "ep_return": float("nan"),
                 "jump_success": float("nan")}
    last_ret = float("nan")
    result = {"out_dir": cfg.out_dir}
    try:
        for update in range(1, n_updates + 1):
            if cfg.lr_decay:
                frac = (update - 1) / max(1, n_updates - 1)
                opt.lr = cfg.lr * (1.0 - 0.9 * frac)
            obs_buf = np.zeros((n, h, obs_dim))
            z_buf = np.zeros((n, h, prior.d_z))
            logp_buf = np.zeros((n, h))
            val_buf = np.zeros((n, h))
            rew_buf = np.zeros((n, h))
            done_buf = np.zeros((n, h))
            sp_sum, sp_count = 0.0, 0
            fin_rets = []
            for k in range(h):
                obs, prop = env.obs_matrix()
                mean, _ = policy.pi.forward(obs)
                std = np.exp(log_std_clamped())
                z = mean + std * rng.standard_normal((n, prior.d_z))
                logp = gaussian_logprob(mean, log_std_clamped(), z)
                v, _ = policy.vf.forward(obs)
                rew, dones, sp_err, rets = env.step(z, prop)
                obs_buf[:, k] = obs
                z_buf[:, k] = z
                logp_buf[:, k] = logp
                val_buf[:, k] = v[:, 0]
                rew_buf[:, k] = rew
                done_buf[:, k] = dones
                sp_sum += float(sp_err.sum())
                sp_count += n
                fin_rets.extend(rets)
            obs, _ = env.obs_matrix()
            boot, _ = policy.vf.forward(obs)
            adv, rets_arr = gae(rew_buf, val_buf, done_buf, boot[:, 0],
                                cfg.gamma, cfg.lam)
            flat_obs = obs_buf.reshape(-1, obs_dim)
            flat_adv = adv.reshape(-1)
            flat_adv = (flat_adv - flat_adv.mean()) / (flat_adv.std() + 1e-8)
            stats = _ppo_step(policy, opt, cfg, flat_obs,
                              z_buf.reshape(-1, prior.d_z),
                              logp_buf.reshape(-1), flat_adv,
                              rets_arr.reshape(-1), rng)
            if fin_rets:
                last_ret = float(np.mean(fin_rets))
            env_steps = update * steps_per_update
            js = (env.jump_successes / env.jump_attempts
                  if env.jump_attempts else float("nan"))
            if update % cfg.eval_every == 0 or update == n_updates:
                last_eval = eval_downstream(policy, prior, geom, sim_cfg, cfg)
                result["eval"] = last_eval
            fmt = lambda x: "" if isinstance(x, float) and np.isnan(x) \
                else (f"{x:.6g}" if isinstance(x, float) else str(x))
            mcsv.writerow([fmt(v) for v in (
                update, env_steps, last_ret, sp_sum / sp_count, js,
                stats["loss_pi"], stats["loss_v"], stats["entropy"],
                stats["clip_frac"], last_eval["speed_err"],
                last_eval["ep_return"], last_eval["jump_success"])])
            mfh.flush()
            if progress and (update % 10 == 0 or update == n_updates):
                print(f"downstream {update}/{n_updates} ret={last_ret:.1f} "
                      f"sperr={sp_sum / sp_count:.3f} "
                      f"eval={last_eval['speed_err']:.3f}", flush=True)
            if update % cfg.checkpoint_every == 0 or update == n_updates:
                meta = {"task": cfg.task, "d_z": prior.d_z,
                        "obs_dim": obs_dim, "update": update,
                        "env_steps": env_steps, "seed": cfg.seed}
                _atomic_checkpoint(
                    os.path.join(cfg.out_dir, "high_level.npz"),
                    policy.params(), opt.moments(), meta)
    finally:
        mfh.close()
    if not prior.unchanged():
        raise ValidationError("frozen prior parameters changed during "
                              "downstream training")
    result["metrics_csv"] = metrics_path
    result["checkpoint"] = os.path.join(cfg.out_dir, "high_level.npz")
    result["prior_unchanged"] = True
    return result
