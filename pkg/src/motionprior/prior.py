"""The motion prior: reference encoder, latent bottleneck, policy, critic.

The reference motion encoder maps a segment of four future reference
frames (offsets +1, +2, +10, +30) to a Gaussian over latent commands.
A KL term ties each step's Gaussian to an autoregressive prior centered
at alpha * z_{t-1}, keeping the latent space temporally consistent.  The
low-level policy consumes the proprioception encoding plus the sampled
latent; the critic additionally sees a learnable per-clip embedding.

Segment features are relativized against the reference frame at the
current step t (translation and pitch removed), so latents do not depend
on absolute world position.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .clips import SEGMENT_OFFSETS, MotionClip, MotionSegment
from .errors import ShapeError, ValidationError
from .nn import Adam, Mlp, clamp_log_std, gaussian_sample
from .sim import RobotState

SEG_FEAT_DIM = 4 * 7   # per future frame: dx, z, dpitch, 4 joints
PROP_FEAT_DIM = 20     # z, sin/cos pitch, 3 vels, 4 q, 4 qd, 2 contact, 4 last act


@dataclass
class PriorConfig:
    alpha: float = 0.95
    beta: float = 1e-3          # KL coefficient
    d_z: int = 16
    resample_every: int = 1     # control steps between latent redraws
    embed_dim: int = 8
    encoder_hidden: tuple = (256, 256)
    prop_hidden: tuple = (128,)
    prop_out: int = 64
    policy_hidden: tuple = (256, 256)
    critic_hidden: tuple = (256, 256)
    init_log_std: float = -1.6

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValidationError("alpha must be in (0, 1)")
        if self.beta < 0.0:
            raise ValidationError("beta must be >= 0")


@dataclass
class LatentCommand:
    z: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    z_prev: np.ndarray


def segment_features(clip: MotionClip, t: int) -> np.ndarray:
    """Encoder input for step t: future frames relative to frame t."""
    if not 0 <= t <= clip.T:
        raise IndexError(f"step {t} outside [0, {clip.T}]")
    base = clip.poses[t]
    feats = np.empty(SEG_FEAT_DIM)
    for i, k in enumerate(SEGMENT_OFFSETS):
        row = clip.poses[min(t + k, clip.T)]
        feats[7 * i + 0] = row[0] - base[0]
        feats[7 * i + 1] = row[1]
        feats[7 * i + 2] = row[2] - base[2]
        feats[7 * i + 3:7 * i + 7] = row[3:7]
    return feats


def precompute_segment_features(clip: MotionClip) -> np.ndarray:
    """Segment features for every step of a clip, shape (T+1, SEG_FEAT_DIM)."""
    n = len(clip)
    idx = np.arange(n)
    feats = np.empty((n, SEG_FEAT_DIM))
    base = clip.poses
    for i, k in enumerate(SEGMENT_OFFSETS):
        rows = clip.poses[np.minimum(idx + k, clip.T)]
        feats[:, 7 * i + 0] = rows[:, 0] - base[:, 0]
        feats[:, 7 * i + 1] = rows[:, 1]
        feats[:, 7 * i + 2] = rows[:, 2] - base[:, 2]
        feats[:, 7 * i + 3:7 * i + 7] = rows[:, 3:7]
    return feats


def segment_features_from_segment(segment: MotionSegment, base_pose) -> np.ndarray:
    """Features from an explicit MotionSegment plus the frame-t pose row."""
    feats = np.empty(SEG_FEAT_DIM)
    for i, fr in enumerate(segment.frames):
        feats[7 * i + 0] = fr.root_x - base_pose[0]
        feats[7 * i + 1] = fr.root_z
        feats[7 * i + 2] = fr.pitch - base_pose[2]
        feats[7 * i + 3:7 * i + 7] = fr.joints
    return feats


def prop_features(state_rows: np.ndarray) -> np.ndarray:
    """Proprioception features from state rows (see sim.STATE_DIM layout)."""
    s = np.atleast_2d(np.asarray(state_rows, dtype=float))
    out = np.empty((len(s), PROP_FEAT_DIM))
    out[:, 0] = s[:, 1]
    out[:, 1] = np.sin(s[:, 2])
    out[:, 2] = np.cos(s[:, 2])
    out[:, 3:6] = s[:, 3:6]
    out[:, 6:14] = s[:, 6:14]
    out[:, 14:16] = s[:, 14:16]
    out[:, 16:20] = s[:, 16:20]
    return out


def ar_kl_loss(mu, sigma, z_prev, cfg: PriorConfig):
    """KL between N(mu, sigma^2) and the AR prior N(alpha z_prev, (1-alpha^2) I),
    scaled by cfg.beta.  Batched inputs give one loss per row."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    z_prev = np.asarray(z_prev, dtype=float)
    if mu.shape != sigma.shape or mu.shape != z_prev.shape:
        raise ShapeError("mu, sigma, z_prev must share a shape")
    var_p = 1.0 - cfg.alpha * cfg.alpha
    diff = mu - cfg.alpha * z_prev
    term = (np.log(np.sqrt(var_p) / sigma)
            + (sigma * sigma + diff * diff) / (2.0 * var_p) - 0.5)
    return cfg.beta * term.sum(axis=-1)


def ar_kl_grads(mu, sigma, z_prev, cfg: PriorConfig):
    """d loss / d mu and d loss / d sigma for the AR-KL term."""
    var_p = 1.0 - cfg.alpha * cfg.alpha
    diff = np.asarray(mu, dtype=float) - cfg.alpha * np.asarray(z_prev, dtype=float)
    dmu = cfg.beta * diff / var_p
    dsigma = cfg.beta * (np.asarray(sigma, dtype=float) / var_p - 1.0 / np.asarray(sigma, dtype=float))
    return dmu, dsigma


def next_latent(mu, sigma, z_prev, step_index: int, cfg: PriorConfig,
                rng: np.random.Generator) -> LatentCommand:
    """Sample the latent command for one control step.

    Redraws every cfg.resample_every steps; otherwise carries z_prev
    forward.  z_prev is the zero vector at episode start.
    """
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    z_prev = np.asarray(z_prev, dtype=float)
    if step_index % cfg.resample_every == 0:
        z, _ = gaussian_sample(mu, sigma, rng)
    else:
        z = z_prev.copy()
    return LatentCommand(z=z, mu=mu.copy(), sigma=sigma.copy(), z_prev=z_prev.copy())


class PriorNetworks:
    """Parameter container for encoder, prop encoder, policy, critic,
    per-clip embeddings, and the policy log-std."""

    def __init__(self, cfg: PriorConfig, n_clips: int, geom, seed: int = 0):
        self.cfg = cfg
        self.n_clips = n_clips
        self.geom = geom
        rng = np.random.default_rng(seed)
        d_z = cfg.d_z
        self.encoder = Mlp([SEG_FEAT_DIM, *cfg.encoder_hidden, 2 * d_z], rng=rng)
        self.prop = Mlp([PROP_FEAT_DIM, *cfg.prop_hidden, cfg.prop_out], rng=rng)
        self.policy = Mlp([cfg.prop_out + d_z, *cfg.policy_hidden, 4],
                          rng=rng, out_scale=0.01)
        self.critic = Mlp([cfg.prop_out + d_z + cfg.embed_dim,
                           *cfg.critic_hidden, 1], rng=rng)
        self.embeddings = 0.1 * rng.standard_normal((n_clips, cfg.embed_dim))
        self.log_std = np.full(4, cfg.init_log_std)
        lo, hi = geom.limits_low, geom.limits_high
        self.action_mid = (lo + hi) / 2.0
        self.action_half = (hi - lo) / 2.0

    def params(self) -> dict:
        out = {}
        out.update(self.encoder.named_params("enc"))
        out.update(self.prop.named_params("prop"))
        out.update(self.policy.named_params("pol"))
        out.update(self.critic.named_params("critic"))
        out["embed"] = self.embeddings
        out["log_std"] = self.log_std
        return out

    def load_params(self, params: dict):
        own = self.params()
        if set(own) != set(params):
            raise ValidationError("checkpoint parameter names do not match")
        for k, v in params.items():
            if own[k].shape != v.shape:
                raise ValidationError(
                    f"checkpoint shape mismatch for {k}: {v.shape} vs {own[k].shape}")
            own[k][...] = v

    # --- single-shot operations (the trainer drives the Mlps directly) ---

    def encode(self, seg_feats):
        """(mu, sigma) of the latent Gaussian for segment feature row(s)."""
        out, _ = self.encoder.forward(seg_feats)
        mu = out[..., :self.cfg.d_z]
        sigma = np.exp(clamp_log_std(out[..., self.cfg.d_z:]))
        return mu, sigma

    def squash_action(self, raw):
        """Bounded map of the policy output into the joint-limit box."""
        return self.action_mid + self.action_half * np.tanh(raw)

    def act(self, z, state: RobotState):
        """Action distribution (mean within joint limits, log_std)."""
        z = z.z if isinstance(z, LatentCommand) else np.asarray(z, dtype=float)
        pf = prop_features(state.to_array()[None, :])
        enc, _ = self.prop.forward(pf)
        raw, _ = self.policy.forward(np.concatenate([enc, z[None, :]], axis=1))
        return self.squash_action(raw[0]), self.log_std.copy()

    def critic_value(self, state: RobotState, z, clip_id: int) -> float:
        z = z.z if isinstance(z, LatentCommand) else np.asarray(z, dtype=float)
        if not 0 <= clip_id < self.n_clips:
            raise IndexError(f"clip_id {clip_id} outside [0, {self.n_clips})")
        pf = prop_features(state.to_array()[None, :])
        enc, _ = self.prop.forward(pf)
        inp = np.concatenate([enc[0], z, self.embeddings[clip_id]])
        val, _ = self.critic.forward(inp)
        return float(val[0])


def make_optimizer(nets: PriorNetworks, lr: float) -> Adam:
    return Adam(nets.params(), lr=lr)
