"""PPO training loop for the motion prior.

Ties the pieces together: vectorized rollouts with per-episode clip
sampling, GAE, the clipped surrogate with the autoregressive latent KL
term, discriminator co-training, reward-mode switching, checkpoints, and
a metrics CSV stream.

Everything runs in one process: environments are stepped as numpy
batches, which makes rollout collection "parallel across envs" in the
vectorized sense while staying bitwise reproducible.  The
``single_thread`` flag is accepted (and recorded) for interface parity:
it additionally pins evaluation to the same serial path used everywhere
else, so runs with it set are byte-identical given config + seed.
"""

from __future__ import annotations

import csv
import dataclasses
import os
from dataclasses import dataclass, field

import numpy as np

from . import metrics as metrics_mod
from .clips import MotionClip, wrap_angle
from .discriminator import (DiscConfig, DiscriminatorBank,
                            disc_obs_from_state_rows, make_feature)
from .errors import ConfigError, MotionPriorError, SimulationDiverged
from .generators import default_dataset
from .nn import (LOG_STD_MAX, LOG_STD_MIN, Adam, clamp_log_std,
                 gaussian_logprob, save_checkpoint)
from .prior import (PriorConfig, PriorNetworks, ar_kl_grads, ar_kl_loss,
                    precompute_segment_features, prop_features)
from .rewards import MODES, AdvRewardEma, RewardWeights, total_reward
from .robot import RobotGeometry, foot_fk
from .sim import RobotState, SimConfig, reset_rows, step_batch

METRICS_COLUMNS = (
    "update", "env_steps", "mean_return", "mean_ep_len", "episodes",
    "r_ori", "r_pos_xy", "r_pos_z", "r_joint", "r_adv", "sched_style",
    "reward_total", "loss_pi", "loss_v", "kl_ar", "entropy", "clip_frac",
    "grad_norm", "disc_loss", "diverged",
    "eval_err_x", "eval_err_z", "eval_err_ori", "eval_err_joint",
    "eval_err_foot", "eval_ep_len", "eval_return", "eval_frac_full",
)

EVAL_COLUMNS = (
    "update", "env_steps", "clip", "episodes", "err_x", "err_z", "err_ori",
    "err_joint", "err_foot", "ep_len", "ep_return", "frac_full",
)


@dataclass
class TrainConfig:
    """PPO + reward-mode hyperparameters; all fields settable from a
    plain key=value config file."""

    mode: str = "vim"
    seed: int = 0
    n_envs: int = 16
    horizon: int = 64
    total_env_steps: int = 200_000
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    epochs: int = 4
    minibatches: int = 8
    lr: float = 3e-4
    lr_decay: bool = True
    final_eval_episodes: int = 8
    value_coef: float = 0.5
    ent_coef: float = 0.003
    max_grad_norm: float = 1.0
    reset_noise: float = 0.05
    start_margin: int = 40
    disc_steps: int = 2
    disc_lr: float = 1e-3
    gp_coef: float = 5.0
    eval_every: int = 25
    eval_episodes: int = 4
    checkpoint_every: int = 200
    single_thread: bool = False
    alpha: float = 0.95
    beta: float = 1e-3
    d_z: int = 16
    init_log_std: float = -1.6
    out_dir: str = "runs/run"
    dataset: str = ""

    def __post_init__(self):
        self.mode = self.mode.replace("-", "_")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; choose from {MODES}")
        for name in ("n_envs", "horizon", "total_env_steps", "epochs",
                     "minibatches", "eval_every", "eval_episodes",
                     "final_eval_episodes",
                     "checkpoint_every", "start_margin", "disc_steps", "d_z"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be a positive integer")
        if not 0.0 < self.clip_eps < 1.0:
            raise ConfigError("clip_eps must lie in (0, 1)")
        for name in ("gamma", "lam"):
            if not 0.0 < getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in (0, 1]")
        for name in ("lr", "disc_lr"):
            if getattr(self, name) <= 0.0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("alpha must lie in (0, 1)")
        if self.beta < 0.0:
            raise ConfigError("beta must be non-negative")
        if (self.n_envs * self.horizon) % self.minibatches != 0:
            raise ConfigError("n_envs * horizon must divide into minibatches")

    def prior_config(self) -> PriorConfig:
        return PriorConfig(alpha=self.alpha, beta=self.beta, d_z=self.d_z,
                           init_log_std=self.init_log_std)


def load_config_file(path: str) -> dict:
    """Parse a plain key=value file ('#' comments, blank lines skipped)."""
    out = {}
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def _coerce(kind, text, key):
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r}") from exc


def apply_overrides(cls, kv: dict, **extra):
    """Build a config dataclass from string key/value pairs + overrides."""
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    hints = {"str": str, "int": int, "float": float, "bool": bool}
    values = {}
    for key, text in kv.items():
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        kind = hints.get(types[key], str) if isinstance(types[key], str) else types[key]
        values[key] = _coerce(kind, text, key)
    values.update(extra)
    return cls(**values)


def config_text(cfg) -> str:
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in dataclasses.fields(cfg)]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# rollout machinery


@dataclass
class RolloutBuffer:
    """n_envs x horizon arrays for one PPO update."""

    clip_id: np.ndarray      # (n, h) int
    t: np.ndarray            # (n, h) int, reference index of the state
    states: np.ndarray       # (n, h, 21)
    seg_feats: np.ndarray    # (n, h, 28)
    z_prev: np.ndarray       # (n, h, d_z)
    eps: np.ndarray          # (n, h, d_z) latent noise, z = mu + sigma*eps
    z: np.ndarray            # (n, h, d_z)
    actions: np.ndarray      # (n, h, 4)
    logp: np.ndarray         # (n, h)
    values: np.ndarray       # (n, h)
    rewards: np.ndarray      # (n, h) total reward
    dones: np.ndarray        # (n, h) 1.0 at termination or clip end
    breakdown: dict          # name -> (n, h) per-term reward arrays
    bootstrap: np.ndarray    # (n,) value of the state after the last step

    @property
    def n_transitions(self) -> int:
        return self.logp.size


class VecEnv:
    """Vectorized imitation environments, one clip episode per env.

    Holds the simulator states plus per-env clip/time/latent bookkeeping;
    all stochastic decisions are drawn from the single generator passed
    in, so stepping order fully determines the run.
    """

    def __init__(self, clips, geom: RobotGeometry, sim_cfg: SimConfig,
                 cfg: TrainConfig, rng: np.random.Generator):
        if not clips:
            raise ConfigError("need at least one motion clip")
        self.clips = list(clips)
        self.geom = geom
        self.sim_cfg = sim_cfg
        self.cfg = cfg
        self.rng = rng
        self.seg_tables = [precompute_segment_features(c) for c in self.clips]
        self.vel_tables = [c.velocities() for c in self.clips]
        n = cfg.n_envs
        self.states = np.zeros((n, 21))
        self.clip_id = np.zeros(n, dtype=int)
        self.t = np.zeros(n, dtype=int)
        self.start = np.zeros(n, dtype=int)
        self.z_prev = np.zeros((n, cfg.d_z))
        self.ep_len = np.zeros(n, dtype=int)
        self.ep_ret = np.zeros(n)
        self.diverged_count = 0
        for i in range(n):
            self.reset_env(i)

    def sample_start(self, clip: MotionClip) -> int:
        hi = max(clip.T - self.cfg.start_margin, 0)
        return int(self.rng.integers(0, hi + 1))

    def reset_env(self, i: int):
        cid = int(self.rng.integers(0, len(self.clips)))
        clip = self.clips[cid]
        s = self.sample_start(clip)
        row = reset_rows(clip.poses[s], self.vel_tables[cid][s],
                         self.cfg.reset_noise, self.geom, self.rng)[0]
        self.states[i] = row
        self.clip_id[i] = cid
        self.t[i] = s
        self.start[i] = s
        self.z_prev[i] = 0.0
        self.ep_len[i] = 0
        self.ep_ret[i] = 0.0

    def seg_rows(self) -> np.ndarray:
        return np.stack([self.seg_tables[c][t]
                         for c, t in zip(self.clip_id, self.t)])

    def step(self, actions: np.ndarray):
        """Advance every env one control step; returns next rows or, for
        envs whose simulation diverged, a freshly reset row with the
        done flag forced."""
        try:
            nxt = step_batch(self.states, actions, self.sim_cfg, self.geom)
            bad = np.zeros(len(nxt), dtype=bool)
        except SimulationDiverged:
            nxt = np.empty_like(self.states)
            bad = np.zeros(len(nxt), dtype=bool)
            for i in range(len(nxt)):
                try:
                    nxt[i] = step_batch(self.states[i:i + 1], actions[i:i + 1],
                                        self.sim_cfg, self.geom)[0]
                except SimulationDiverged:
                    nxt[i] = self.states[i]
                    bad[i] = True
                    self.diverged_count += 1
        return nxt, bad


class _Forward:
    """Cached intermediate values of one acting/update forward pass."""

    __slots__ = ("enc_tape", "enc_out", "mu", "sigma", "sig_mask", "z",
                 "prop_tape", "prop_out", "pol_tape", "raw", "tanh_raw",
                 "mean", "critic_tape", "value", "log_std")


def _policy_forward(nets: PriorNetworks, seg, states_or_pf, clip_ids, eps,
                    *, pf_ready=False):
    """Encoder -> latent -> prop -> policy -> critic, keeping tapes."""
    f = _Forward()
    d_z = nets.cfg.d_z
    f.enc_out, f.enc_tape = nets.encoder.forward(seg)
    f.mu = f.enc_out[:, :d_z]
    raw_log = f.enc_out[:, d_z:]
    f.sigma = np.exp(clamp_log_std(raw_log))
    f.sig_mask = (raw_log > LOG_STD_MIN) & (raw_log < LOG_STD_MAX)
    f.z = f.mu + f.sigma * eps
    pf = states_or_pf if pf_ready else prop_features(states_or_pf)
    f.prop_out, f.prop_tape = nets.prop.forward(pf)
    f.raw, f.pol_tape = nets.policy.forward(
        np.concatenate([f.prop_out, f.z], axis=1))
    f.tanh_raw = np.tanh(f.raw)
    f.mean = nets.action_mid + nets.action_half * f.tanh_raw
    critic_in = np.concatenate(
        [f.prop_out, f.z, nets.embeddings[clip_ids]], axis=1)
    f.value, f.critic_tape = nets.critic.forward(critic_in)
    f.value = f.value[:, 0]
    f.log_std = clamp_log_std(nets.log_std)
    return f


def _disc_scores(bank: DiscriminatorBank, clip_ids, feats):
    out = np.zeros(len(feats))
    for cid in np.unique(clip_ids):
        sel = clip_ids == cid
        out[sel] = bank.score(int(cid), feats[sel])
    return out


def collect_rollouts(nets: PriorNetworks, envs: VecEnv, cfg: TrainConfig,
                     bank: DiscriminatorBank | None, ema: AdvRewardEma,
                     weights: RewardWeights) -> tuple:
    """Run n_envs x horizon control steps and fill a RolloutBuffer.

    Returns (buffer, episode stats dict, transitions_by_clip for the
    discriminator bank).
    """
    n, h, d_z = cfg.n_envs, cfg.horizon, cfg.d_z
    rng = envs.rng
    buf = RolloutBuffer(
        clip_id=np.zeros((n, h), dtype=int),
        t=np.zeros((n, h), dtype=int),
        states=np.zeros((n, h, 21)),
        seg_feats=np.zeros((n, h, nets.encoder.sizes[0])),
        z_prev=np.zeros((n, h, d_z)),
        eps=np.zeros((n, h, d_z)),
        z=np.zeros((n, h, d_z)),
        actions=np.zeros((n, h, 4)),
        logp=np.zeros((n, h)),
        values=np.zeros((n, h)),
        rewards=np.zeros((n, h)),
        dones=np.zeros((n, h)),
        breakdown={k: np.zeros((n, h)) for k in
                   ("r_ori", "r_pos_xy", "r_pos_z", "r_joint", "r_adv",
                    "sched_style")},
        bootstrap=np.zeros(n),
    )
    done_lens, done_rets = [], []
    use_adv = cfg.mode != "motion_imitation"
    trans_by_clip = {i: [] for i in range(len(envs.clips))}
    for k in range(h):
        seg = envs.seg_rows()
        eps = rng.standard_normal((n, d_z))
        fwd = _policy_forward(nets, seg, envs.states, envs.clip_id, eps)
        std = np.exp(fwd.log_std)
        actions = fwd.mean + std * rng.standard_normal((n, 4))
        logp = gaussian_logprob(fwd.mean, fwd.log_std, actions)

        buf.clip_id[:, k] = envs.clip_id
        buf.t[:, k] = envs.t
        buf.states[:, k] = envs.states
        buf.seg_feats[:, k] = seg
        buf.z_prev[:, k] = envs.z_prev
        buf.eps[:, k] = eps
        buf.z[:, k] = fwd.z
        buf.actions[:, k] = actions
        buf.logp[:, k] = logp
        buf.values[:, k] = fwd.value

        prev_rows = envs.states.copy()
        nxt, bad = envs.step(actions)
        feet = foot_fk(nxt[:, 0], nxt[:, 1], nxt[:, 2], nxt[:, 6:10],
                       envs.geom)
        if use_adv and bank is not None:
            obs_prev = disc_obs_from_state_rows(prev_rows)
            obs_next = disc_obs_from_state_rows(nxt)
            feats = make_feature(obs_prev, obs_next)
            d_out = _disc_scores(bank, envs.clip_id, feats)
        else:
            feats = None
            d_out = np.ones(n)
        for i in range(n):
            cid = int(envs.clip_id[i])
            clip = envs.clips[cid]
            t_next = int(envs.t[i]) + 1
            ref = clip.frame(t_next)
            state_next = RobotState.from_array(nxt[i])
            term = (bool(bad[i]) or _terminated(nxt[i], ref, envs.sim_cfg))
            br = total_reward(state_next, ref, float(d_out[i]),
                              ema.get(cid), weights, mode=cfg.mode,
                              state_feet=feet[i], terminated=term)
            if use_adv:
                ema.update(cid, br.r_adv)
                trans_by_clip[cid].append(feats[i])
            done = term or t_next >= clip.T
            buf.rewards[i, k] = br.total
            buf.dones[i, k] = float(done)
            buf.breakdown["r_ori"][i, k] = br.r_ori
            buf.breakdown["r_pos_xy"][i, k] = br.r_pos_xy
            buf.breakdown["r_pos_z"][i, k] = br.r_pos_z
            buf.breakdown["r_joint"][i, k] = br.r_joint
            buf.breakdown["r_adv"][i, k] = br.r_adv
            buf.breakdown["sched_style"][i, k] = br.scheduled_style
            envs.ep_len[i] += 1
            envs.ep_ret[i] += br.total
            if done:
                done_lens.append(envs.ep_len[i])
                done_rets.append(envs.ep_ret[i])
                envs.reset_env(i)
            else:
                envs.states[i] = nxt[i]
                envs.t[i] = t_next
                envs.z_prev[i] = fwd.z[i]
    # bootstrap values for unfinished tails
    seg = envs.seg_rows()
    eps = rng.standard_normal((n, d_z))
    fwd = _policy_forward(nets, seg, envs.states, envs.clip_id, eps)
    buf.bootstrap[:] = fwd.value
    stats = {"episodes": len(done_lens),
             "mean_ep_len": float(np.mean(done_lens)) if done_lens else float("nan"),
             "mean_return": float(np.mean(done_rets)) if done_rets else float("nan")}
    trans = {cid: np.stack(rows) for cid, rows in trans_by_clip.items() if rows}
    return buf, stats, trans


def _terminated(row, ref, sim_cfg: SimConfig) -> bool:
    ex = row[0] - ref.root_x
    ez = row[1] - ref.root_z
    if ex * ex + ez * ez > sim_cfg.pos_err_max ** 2:
        return True
    return abs(wrap_angle(row[2] - ref.pitch)) > sim_cfg.ori_err_max


def gae(rewards, values, dones, bootstrap, gamma: float, lam: float):
    """Generalized advantage estimation along the last axis.

    delta_t = r_t + gamma V_{t+1} (1 - done_t) - V_t,
    A_t = delta_t + gamma lam (1 - done_t) A_{t+1}; returns = A + V.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=float)
    squeeze = rewards.ndim == 1
    if squeeze:
        rewards, values, dones = rewards[None], values[None], dones[None]
        bootstrap = np.atleast_1d(np.asarray(bootstrap, dtype=float))
    h = rewards.shape[-1]
    adv = np.zeros_like(rewards)
    next_v = np.asarray(bootstrap, dtype=float)
    next_a = np.zeros(rewards.shape[0])
    for k in range(h - 1, -1, -1):
        notdone = 1.0 - dones[:, k]
        delta = rewards[:, k] + gamma * next_v * notdone - values[:, k]
        next_a = delta + gamma * lam * notdone * next_a
        adv[:, k] = next_a
        next_v = values[:, k]
    rets = adv + values
    if squeeze:
        return adv[0], rets[0]
    return adv, rets


# ---------------------------------------------------------------------------
# PPO update


def _flat_norm(grads: dict) -> float:
    total = 0.0
    for g in grads.values():
        total += float((g * g).sum())
    return float(np.sqrt(total))


def ppo_update(buf: RolloutBuffer, nets: PriorNetworks, opt: Adam,
               cfg: TrainConfig, rng: np.random.Generator,
               bank: DiscriminatorBank | None = None,
               transitions: dict | None = None) -> dict:
    """Clipped-surrogate PPO epoch loop with end-to-end encoder gradients.

    The latent command is recomputed inside the update as
    z = mu + sigma * eps with the rollout's stored noise, so surrogate and
    value gradients flow through the reference motion encoder alongside
    the autoregressive KL term.  Ends with a discriminator bank update.
    """
    pcfg = nets.cfg
    n_total = buf.n_transitions
    flat = lambda a: a.reshape(n_total, *a.shape[2:])
    states = flat(buf.states)
    pf_all = prop_features(states)
    seg = flat(buf.seg_feats)
    eps = flat(buf.eps)
    z_prev = flat(buf.z_prev)
    actions = flat(buf.actions)
    logp_old = flat(buf.logp)
    clip_ids = flat(buf.clip_id)
    adv, rets = gae(buf.rewards, buf.values, buf.dones, buf.bootstrap,
                    cfg.gamma, cfg.lam)
    adv = adv.reshape(n_total)
    rets = rets.reshape(n_total)
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)

    stats = {"loss_pi": 0.0, "loss_v": 0.0, "kl_ar": 0.0, "entropy": 0.0,
             "clip_frac": 0.0, "grad_norm": 0.0}
    count = 0
    mb_size = n_total // cfg.minibatches
    for _ in range(cfg.epochs):
        order = rng.permutation(n_total)
        for mb in range(cfg.minibatches):
            idx = order[mb * mb_size:(mb + 1) * mb_size]
            f = _policy_forward(nets, seg[idx], pf_all[idx], clip_ids[idx],
                                eps[idx], pf_ready=True)
            std = np.exp(f.log_std)
            var = std * std
            a, mu_a = actions[idx], f.mean
            logp = gaussian_logprob(mu_a, f.log_std, a)
            ratio = np.exp(logp - logp_old[idx])
            adv_mb = adv[idx]
            clipped = np.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps)
            per_sample = np.minimum(ratio * adv_mb, clipped * adv_mb)
            loss_pi = -per_sample.mean()
            verr = f.value - rets[idx]
            loss_v = 0.5 * cfg.value_coef * float((verr * verr).mean())
            kl_rows = ar_kl_loss(f.mu, f.sigma, z_prev[idx], pcfg)
            loss_kl = float(kl_rows.mean())
            entropy = float(np.sum(f.log_std)
                            + 0.5 * len(std) * np.log(2.0 * np.pi * np.e))
            loss = loss_pi + loss_v + loss_kl - cfg.ent_coef * entropy
            if not np.isfinite(loss):
                _dump_minibatch(cfg.out_dir, seg[idx], pf_all[idx], a,
                                adv_mb, rets[idx], logp, logp_old[idx])
                raise MotionPriorError(
                    f"non-finite loss {loss}; minibatch dumped to "
                    f"{cfg.out_dir}/diverged_minibatch.npz")
            m = len(idx)
            # --- backward pass ---
            active = (ratio * adv_mb) <= (clipped * adv_mb)
            dlogp = -(adv_mb * ratio * active) / m
            dmean = dlogp[:, None] * (a - mu_a) / var
            dlog_std = (dlogp[:, None] * ((a - mu_a) ** 2 / var - 1.0)).sum(0)
            dlog_std -= cfg.ent_coef  # entropy bonus per dimension
            draw = dmean * nets.action_half * (1.0 - f.tanh_raw ** 2)
            pol_grads, dpol_in = nets.policy.backward(f.pol_tape, draw)
            dprop = dpol_in[:, :pcfg.prop_out].copy()
            dz = dpol_in[:, pcfg.prop_out:].copy()
            # critic
            dv = (cfg.value_coef * verr / m)[:, None]
            cr_grads, dcr_in = nets.critic.backward(f.critic_tape, dv)
            dprop += dcr_in[:, :pcfg.prop_out]
            dz += dcr_in[:, pcfg.prop_out:pcfg.prop_out + pcfg.d_z]
            demb_rows = dcr_in[:, pcfg.prop_out + pcfg.d_z:]
            demb = np.zeros_like(nets.embeddings)
            np.add.at(demb, clip_ids[idx], demb_rows)
            # latent KL + reparameterized latent path into the encoder
            dmu_kl, dsig_kl = ar_kl_grads(f.mu, f.sigma, z_prev[idx], pcfg)
            dmu = dz + dmu_kl / m
            dsigma = dz * eps[idx] + dsig_kl / m
            denc = np.concatenate(
                [dmu, dsigma * f.sigma * f.sig_mask], axis=1)
            enc_grads, _ = nets.encoder.backward(f.enc_tape, denc)
            prop_grads, _ = nets.prop.backward(f.prop_tape, dprop)
            grads = {}
            grads.update(nets.encoder.grads_to_named(enc_grads, "enc"))
            grads.update(nets.prop.grads_to_named(prop_grads, "prop"))
            grads.update(nets.policy.grads_to_named(pol_grads, "pol"))
            grads.update(nets.critic.grads_to_named(cr_grads, "critic"))
            grads["embed"] = demb
            grads["log_std"] = dlog_std
            gnorm = _flat_norm(grads)
            if gnorm > cfg.max_grad_norm:
                scale = cfg.max_grad_norm / gnorm
                for g in grads.values():
                    g *= scale
            opt.step(grads)
            stats["loss_pi"] += float(loss_pi)
            stats["loss_v"] += loss_v
            stats["kl_ar"] += loss_kl
            stats["entropy"] += entropy
            stats["clip_frac"] += float((ratio != clipped).mean())
            stats["grad_norm"] += gnorm
            count += 1
    for key in stats:
        stats[key] /= count
    stats["disc_loss"] = float("nan")
    if bank is not None and transitions:
        disc_stats = bank.update(transitions, cfg.disc_steps)
        if disc_stats:
            stats["disc_loss"] = float(np.mean(
                [s["loss"] for s in disc_stats.values()]))
    return stats


def _dump_minibatch(out_dir, seg, pf, actions, adv, rets, logp, logp_old):
    os.makedirs(out_dir, exist_ok=True)
    np.savez(os.path.join(out_dir, "diverged_minibatch.npz"),
             seg=seg, prop=pf, actions=actions, adv=adv, rets=rets,
             logp=logp, logp_old=logp_old)


# ---------------------------------------------------------------------------
# evaluation rollouts


def eval_rollouts(nets: PriorNetworks, clips, geom: RobotGeometry,
                  sim_cfg: SimConfig, cfg: TrainConfig,
                  bank: DiscriminatorBank | None, ema: AdvRewardEma,
                  weights: RewardWeights, episodes_per_clip: int = 4):
    """Deterministic evaluation episodes (mean action, z = mu, noise-free
    resets) with start indices evenly spread over the valid range.

    Returns one record dict per episode.
    """
    records = []
    use_adv = cfg.mode != "motion_imitation"
    for cid, clip in enumerate(clips):
        seg_table = precompute_segment_features(clip)
        vels = clip.velocities()
        hi = max(clip.T - cfg.start_margin, 0)
        if episodes_per_clip == 1:
            starts = np.array([0])
        else:
            starts = np.unique(np.round(
                np.linspace(0, hi, episodes_per_clip)).astype(int))
        m = len(starts)
        states = np.stack([
            reset_rows(clip.poses[s], vels[s], 0.0, geom,
                       np.random.default_rng(0))[0] for s in starts])
        t = starts.copy()
        alive = np.ones(m, dtype=bool)
        terminated_early = np.zeros(m, dtype=bool)
        sums = np.zeros((m, 6))  # ex, ez, eori, ejoint, efoot, return
        steps = np.zeros(m, dtype=int)
        while alive.any():
            act_idx = np.flatnonzero(alive)
            seg = seg_table[t[act_idx]]
            fwd = _policy_forward(nets, seg, states[act_idx],
                                  np.full(len(act_idx), cid),
                                  np.zeros((len(act_idx), cfg.d_z)))
            # z = mu exactly: eps is zero
            nxt = step_batch(states[act_idx], fwd.mean, sim_cfg, geom)
            feet = foot_fk(nxt[:, 0], nxt[:, 1], nxt[:, 2], nxt[:, 6:10], geom)
            if use_adv and bank is not None:
                feats = make_feature(disc_obs_from_state_rows(states[act_idx]),
                                     disc_obs_from_state_rows(nxt))
                d_out = bank.score(cid, feats)
            else:
                d_out = np.ones(len(act_idx))
            for j, i in enumerate(act_idx):
                t_next = int(t[i]) + 1
                ref = clip.frame(t_next)
                row = nxt[j]
                term = _terminated(row, ref, sim_cfg)
                br = total_reward(RobotState.from_array(row), ref,
                                  float(d_out[j]), ema.get(cid), weights,
                                  mode=cfg.mode, state_feet=feet[j],
                                  terminated=term)
                dq = row[6:10] - ref.joints
                sums[i, 0] += abs(row[0] - ref.root_x)
                sums[i, 1] += abs(row[1] - ref.root_z)
                sums[i, 2] += abs(wrap_angle(row[2] - ref.pitch))
                sums[i, 3] += float((dq * dq).mean())
                sums[i, 4] += float(np.linalg.norm(feet[j] - ref.feet,
                                                   axis=-1).mean())
                sums[i, 5] += br.total
                steps[i] += 1
                if term:
                    terminated_early[i] = True
                    alive[i] = False
                elif t_next >= clip.T:
                    alive[i] = False
                else:
                    states[i] = row
                    t[i] = t_next
        for i in range(m):
            ln = max(int(steps[i]), 1)
            records.append({
                "clip_id": cid, "clip": clip.name, "start": int(starts[i]),
                "ep_len": int(steps[i]),
                "full": not terminated_early[i],
                "err_x": sums[i, 0] / ln, "err_z": sums[i, 1] / ln,
                "err_ori": sums[i, 2] / ln, "err_joint": sums[i, 3] / ln,
                "err_foot": sums[i, 4] / ln, "ep_return": sums[i, 5],
            })
    return records


def _eval_summary(records):
    if not records:
        return {k: float("nan") for k in
                ("err_x", "err_z", "err_ori", "err_joint", "err_foot",
                 "ep_len", "ep_return", "frac_full")}
    get = lambda k: float(np.mean([r[k] for r in records]))
    return {"err_x": get("err_x"), "err_z": get("err_z"),
            "err_ori": get("err_ori"), "err_joint": get("err_joint"),
            "err_foot": get("err_foot"), "ep_len": get("ep_len"),
            "ep_return": get("ep_return"),
            "frac_full": float(np.mean([r["full"] for r in records]))}


# ---------------------------------------------------------------------------
# training driver


def _fmt(x):
    if isinstance(x, float):
        return "" if np.isnan(x) else f"{x:.6g}"
    return str(x)


def _atomic_checkpoint(path, params, moments, meta):
    tmp = path[:-len(".npz")] + ".tmp.npz"
    save_checkpoint(tmp, params, moments, rng_state=None, meta=meta)
    os.replace(tmp, path)


def train(cfg: TrainConfig, clips=None, geom: RobotGeometry | None = None,
          sim_cfg: SimConfig | None = None,
          progress: bool = False) -> dict:
    """Full training run: alternate rollout collection and PPO updates,
    writing metrics.csv / eval.csv / checkpoints under cfg.out_dir."""
    geom = geom or RobotGeometry()
    sim_cfg = sim_cfg or SimConfig()
    if clips is None:
        clips = default_dataset(geom) if not cfg.dataset else None
    if clips is None:
        from .clips import load_clip
        names = sorted(f for f in os.listdir(cfg.dataset)
                       if f.endswith(".json"))
        clips = [load_clip(os.path.join(cfg.dataset, f), geom)
                 for f in names]
    os.makedirs(cfg.out_dir, exist_ok=True)
    ckpt_dir = os.path.join(cfg.out_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, "config.cfg"), "w") as fh:
        fh.write(config_text(cfg))

    rng = np.random.default_rng(cfg.seed)
    pcfg = cfg.prior_config()
    nets = PriorNetworks(pcfg, len(clips), geom, seed=cfg.seed)
    opt = Adam(nets.params(), lr=cfg.lr)
    bank = None
    if cfg.mode != "motion_imitation":
        bank = DiscriminatorBank(
            clips, DiscConfig(lr=cfg.disc_lr, gp_coef=cfg.gp_coef),
            seed=cfg.seed)
    ema = AdvRewardEma(len(clips))
    weights = RewardWeights()
    envs = VecEnv(clips, geom, sim_cfg, cfg, rng)

    steps_per_update = cfg.n_envs * cfg.horizon
    n_updates = max(1, -(-cfg.total_env_steps // steps_per_update))
    meta_base = {"d_z": cfg.d_z, "mode": cfg.mode,
                 "clip_names": [c.name for c in clips],
                 "alpha": cfg.alpha, "beta": cfg.beta,
                 "init_log_std": cfg.init_log_std, "seed": cfg.seed}

    metrics_path = os.path.join(cfg.out_dir, "metrics.csv")
    eval_path = os.path.join(cfg.out_dir, "eval.csv")
    mfh = open(metrics_path, "w", newline="")
    efh = open(eval_path, "w", newline="")
    mfh.write(f"# schema-version: {metrics_mod.SCHEMA_VERSION}\n")
    efh.write(f"# schema-version: {metrics_mod.SCHEMA_VERSION}\n")
    mcsv = csv.writer(mfh)
    ecsv = csv.writer(efh)
    mcsv.writerow(METRICS_COLUMNS)
    ecsv.writerow(EVAL_COLUMNS)

    last_eval = _eval_summary([])
    last_len, last_ret = float("nan"), float("nan")
    result = {"out_dir": cfg.out_dir, "updates": n_updates}
    try:
        for update in range(1, n_updates + 1):
            if cfg.lr_decay:
                frac = (update - 1) / max(1, n_updates - 1)
                opt.lr = cfg.lr * (1.0 - 0.9 * frac)
            buf, roll_stats, trans = collect_rollouts(
                nets, envs, cfg, bank, ema, weights)
            stats = ppo_update(buf, nets, opt, cfg, rng, bank, trans)
            env_steps = update * steps_per_update
            if roll_stats["episodes"]:
                last_len = roll_stats["mean_ep_len"]
                last_ret = roll_stats["mean_return"]
            if update % cfg.eval_every == 0 or update == n_updates:
                n_ep = (max(cfg.eval_episodes, cfg.final_eval_episodes)
                        if update == n_updates else cfg.eval_episodes)
                records = eval_rollouts(nets, clips, geom, sim_cfg, cfg,
                                        bank, ema, weights, n_ep)
                last_eval = _eval_summary(records)
                by_clip = {}
                for r in records:
                    by_clip.setdefault(r["clip"], []).append(r)
                for name in sorted(by_clip):
                    s = _eval_summary(by_clip[name])
                    ecsv.writerow([update, env_steps, name,
                                   len(by_clip[name])] +
                                  [_fmt(s[k]) for k in
                                   ("err_x", "err_z", "err_ori", "err_joint",
                                    "err_foot", "ep_len", "ep_return",
                                    "frac_full")])
                efh.flush()
                result["eval"] = last_eval
                result["eval_records"] = records
            row = {
                "update": update, "env_steps": env_steps,
                "mean_return": last_ret, "mean_ep_len": last_len,
                "episodes": roll_stats["episodes"],
                "r_ori": float(buf.breakdown["r_ori"].mean()),
                "r_pos_xy": float(buf.breakdown["r_pos_xy"].mean()),
                "r_pos_z": float(buf.breakdown["r_pos_z"].mean()),
                "r_joint": float(buf.breakdown["r_joint"].mean()),
                "r_adv": float(buf.breakdown["r_adv"].mean()),
                "sched_style": float(buf.breakdown["sched_style"].mean()),
                "reward_total": float(buf.rewards.mean()),
                "loss_pi": stats["loss_pi"], "loss_v": stats["loss_v"],
                "kl_ar": stats["kl_ar"], "entropy": stats["entropy"],
                "clip_frac": stats["clip_frac"],
                "grad_norm": stats["grad_norm"],
                "disc_loss": stats["disc_loss"],
                "diverged": envs.diverged_count,
                "eval_err_x": last_eval["err_x"],
                "eval_err_z": last_eval["err_z"],
                "eval_err_ori": last_eval["err_ori"],
                "eval_err_joint": last_eval["err_joint"],
                "eval_err_foot": last_eval["err_foot"],
                "eval_ep_len": last_eval["ep_len"],
                "eval_return": last_eval["ep_return"],
                "eval_frac_full": last_eval["frac_full"],
            }
            mcsv.writerow([_fmt(row[c]) for c in METRICS_COLUMNS])
            mfh.flush()
            if progress and (update % 10 == 0 or update == n_updates):
                print(f"update {update}/{n_updates} steps={env_steps} "
                      f"ret={last_ret:.2f} len={last_len:.1f} "
                      f"evalx={last_eval['err_x']:.3f}", flush=True)
            if update % cfg.checkpoint_every == 0 or update == n_updates:
                meta = dict(meta_base, update=update, env_steps=env_steps)
                _atomic_checkpoint(
                    os.path.join(ckpt_dir, f"ckpt_{update:06d}.npz"),
                    nets.params(), opt.moments(), meta)
                _atomic_checkpoint(os.path.join(ckpt_dir, "ckpt_final.npz"),
                                   nets.params(), opt.moments(), meta)
    finally:
        mfh.close()
        efh.close()
    result["metrics_csv"] = metrics_path
    result["eval_csv"] = eval_path
    result["checkpoint"] = os.path.join(ckpt_dir, "ckpt_final.npz")
    return result
