"""Per-clip LSGAN discriminators feeding the adversarial style reward.

One discriminator per reference motion separates expert transitions
(consecutive clip frames, velocities by finite differences) from policy
transitions.  Targets are +1 for expert and -1 for policy; an optional
gradient penalty on expert samples (coefficient 5 by default, 0 recovers
the bare objective) stabilizes training at small scale.

Transition features concatenate, for each endpoint: joints (4), joint
velocities (4), root height (1), pitch sin/cos (2), root linear velocity
(2).  Root x is excluded so rewards are translation invariant.  Expert
and policy features go through byte-identical code.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .clips import MotionClip
from .errors import ConfigError, ShapeError, ValidationError
from .nn import Adam, Mlp, act_prime, act_second

OBS_DIM = 13
FEATURE_DIM = 2 * OBS_DIM


def disc_obs(joints, joint_vels, root_z, pitch, vx, vz) -> np.ndarray:
    """The 13 per-endpoint numbers seen by a discriminator.

    The same code path builds observations for both expert and policy
    transitions; batched inputs give (n, 13), scalars give (13,).
    """
    single = np.asarray(root_z).ndim == 0
    joints = np.atleast_2d(np.asarray(joints, dtype=float))
    joint_vels = np.atleast_2d(np.asarray(joint_vels, dtype=float))
    n = len(joints)
    out = np.empty((n, OBS_DIM))
    out[:, 0:4] = joints
    out[:, 4:8] = joint_vels
    out[:, 8] = root_z
    out[:, 9] = np.sin(pitch)
    out[:, 10] = np.cos(pitch)
    out[:, 11] = vx
    out[:, 12] = vz
    return out[0] if single else out


def disc_obs_from_state_rows(rows: np.ndarray) -> np.ndarray:
    """Observations from simulator state rows (n, STATE_DIM)."""
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    return disc_obs(rows[:, 6:10], rows[:, 10:14], rows[:, 1], rows[:, 2],
                    rows[:, 3], rows[:, 4])


def disc_obs_from_clip(clip: MotionClip) -> np.ndarray:
    """Observations for every clip frame, velocities by finite differences."""
    vel = clip.velocities()
    return disc_obs(clip.poses[:, 3:7], vel[:, 3:7], clip.poses[:, 1],
                    clip.poses[:, 2], vel[:, 0], vel[:, 1])


def make_feature(obs, obs_next) -> np.ndarray:
    """Transition feature: concatenation of the two endpoint observations."""
    obs = np.asarray(obs, dtype=float)
    obs_next = np.asarray(obs_next, dtype=float)
    if obs.shape != obs_next.shape or obs.shape[-1] != OBS_DIM:
        raise ShapeError(f"endpoint obs must both be (..., {OBS_DIM})")
    return np.concatenate([obs, obs_next], axis=-1)


def expert_features(clip: MotionClip) -> np.ndarray:
    """All T expert transition features of a clip."""
    obs = disc_obs_from_clip(clip)
    return make_feature(obs[:-1], obs[1:])


def lsgan_grads(mlp: Mlp, expert_x: np.ndarray, policy_x: np.ndarray,
                gp_coef: float):
    """Loss value and exact parameter gradients of the LSGAN objective
    plus the expert-side gradient penalty.

    The penalty term gp * mean ||d D / d x||^2 needs derivatives of an
    input gradient wrt parameters; this runs a forward-over-reverse pass
    (a JVP of the net in the direction of the input gradient) and
    backpropagates through it.
    """
    ne, npo = len(expert_x), len(policy_x)
    if ne == 0 or npo == 0:
        raise ValidationError("both LSGAN batches must be non-empty")
    de, tape_e = mlp.forward(expert_x)
    dp, tape_p = mlp.forward(policy_x)
    loss = float(np.mean((de - 1.0) ** 2) + np.mean((dp + 1.0) ** 2))
    grads_e, _ = mlp.backward(tape_e, 2.0 * (de - 1.0) / ne)
    grads_p, _ = mlp.backward(tape_p, 2.0 * (dp + 1.0) / npo)
    grads = [(gw1 + gw2, gb1 + gb2)
             for (gw1, gb1), (gw2, gb2) in zip(grads_e, grads_p)]
    if gp_coef > 0.0:
        gp_val, gp_grads = _gradient_penalty_grads(mlp, tape_e, gp_coef)
        loss += gp_val
        grads = [(gw + pw, gb + pb)
                 for (gw, gb), (pw, pb) in zip(grads, gp_grads)]
    return loss, grads, float(de.mean()), float(dp.mean())


def _gradient_penalty_grads(mlp: Mlp, tape, gp_coef: float):
    """Value and parameter gradients of gp * mean ||grad_x D||^2 over the
    batch recorded in `tape`."""
    acts, pres = tape
    n = len(acts[0])
    L = mlp.n_layers
    name = mlp.activation
    W = mlp.weights
    phi1 = [act_prime(name, pres[l], acts[l + 1]) if l < L - 1 else None
            for l in range(L)]
    phi2 = [act_second(name, pres[l], acts[l + 1]) if l < L - 1 else None
            for l in range(L)]

    # reverse pass for the input gradient g0 (scalar output => seed ones)
    g = np.ones((n, 1))
    for l in reversed(range(L)):
        if l != L - 1:
            g = g * phi1[l]
        g = g @ W[l].T
    g0 = g
    gp_val = gp_coef * float(np.mean((g0 * g0).sum(axis=1)))

    # forward JVP in the (constant) direction v = g0
    u = [g0]                   # u_0 .. u_L
    zeta = [None] * (L + 1)    # zeta_1 .. zeta_L at index l+1
    for l in range(L):
        zt = u[l] @ W[l]
        zeta[l + 1] = zt
        u.append(zt if l == L - 1 else phi1[l] * zt)

    # backprop through the JVP graph; d(loss)/d u_L = 2 gp / n per sample
    dW = [np.zeros_like(w) for w in W]
    db = [np.zeros_like(b) for b in mlp.biases]
    dz_direct = [None] * L     # gradients hitting z_l via the phi'' terms
    du = np.full((n, 1), 2.0 * gp_coef / n)
    for l in reversed(range(L)):
        if l == L - 1:
            dzeta = du
        else:
            dzeta = phi1[l] * du
            dz_direct[l] = phi2[l] * zeta[l + 1] * du
        dW[l] += u[l].T @ dzeta
        if l > 0:
            du = dzeta @ W[l].T
    # propagate the phi'' contributions down the primal graph
    da = None
    for l in reversed(range(L - 1)):
        dz = dz_direct[l].copy()
        if da is not None:
            dz += phi1[l] * da
        dW[l] += acts[l].T @ dz
        db[l] += dz.sum(axis=0)
        da = dz @ W[l].T
    return gp_val, list(zip(dW, db))


def disc_loss(mlp: Mlp, expert_batch: np.ndarray, policy_batch: np.ndarray,
              gp_coef: float = 5.0) -> float:
    """Scalar training objective (LSGAN MSE targets +-1 plus penalty)."""
    loss, _, _, _ = lsgan_grads(mlp, np.atleast_2d(expert_batch),
                                np.atleast_2d(policy_batch), gp_coef)
    return loss


@dataclass
class DiscConfig:
    hidden: tuple = (128, 128)
    activation: str = "tanh"
    lr: float = 1e-3
    gp_coef: float = 5.0
    batch_size: int = 128
    replay_size: int = 20000
    std_floor: float = 0.05


class DiscriminatorBank:
    """One discriminator, expert buffer, and policy replay per clip."""

    def __init__(self, clips: list, cfg: DiscConfig | None = None, seed: int = 0):
        self.cfg = cfg or DiscConfig()
        self.n = len(clips)
        self.nets = []
        self.optims = []
        self.rngs = []
        self.expert = []
        self.norm_mean = []
        self.norm_std = []
        self.replay = []
        self.replay_len = np.zeros(self.n, dtype=int)
        self.replay_pos = np.zeros(self.n, dtype=int)
        for i, clip in enumerate(clips):
            rng = np.random.default_rng([seed, i])
            net = Mlp([FEATURE_DIM, *self.cfg.hidden, 1],
                      activation=self.cfg.activation, rng=rng)
            feats = expert_features(clip) if isinstance(clip, MotionClip) else np.asarray(clip, dtype=float)
            if len(feats) == 0:
                raise ValidationError(f"clip {i} yields no expert transitions")
            self.nets.append(net)
            self.optims.append(Adam(net.named_params(f"disc{i}"), lr=self.cfg.lr))
            self.rngs.append(rng)
            self.expert.append(feats)
            self.norm_mean.append(feats.mean(axis=0))
            self.norm_std.append(np.maximum(feats.std(axis=0), self.cfg.std_floor))
            self.replay.append(np.zeros((self.cfg.replay_size, FEATURE_DIM)))

    def normalize(self, clip_id: int, feats: np.ndarray) -> np.ndarray:
        return (feats - self.norm_mean[clip_id]) / self.norm_std[clip_id]

    def score(self, clip_id: int, feats: np.ndarray) -> np.ndarray:
        """Raw discriminator outputs for transition features (n, 26)."""
        out, _ = self.nets[clip_id].forward(self.normalize(clip_id, np.atleast_2d(feats)))
        return out[:, 0]

    def add_policy_transitions(self, clip_id: int, feats: np.ndarray):
        feats = np.atleast_2d(feats)
        for row in feats:
            self.replay[clip_id][self.replay_pos[clip_id]] = row
            self.replay_pos[clip_id] = (self.replay_pos[clip_id] + 1) % self.cfg.replay_size
        self.replay_len[clip_id] = min(self.replay_len[clip_id] + len(feats),
                                       self.cfg.replay_size)

    def update_clip(self, clip_id: int, steps: int) -> dict:
        """Adam steps on fresh expert/replay minibatches for one clip."""
        if self.replay_len[clip_id] == 0:
            raise ConfigError(f"no policy transitions buffered for clip {clip_id}")
        rng = self.rngs[clip_id]
        net, opt = self.nets[clip_id], self.optims[clip_id]
        bs = self.cfg.batch_size
        last = {}
        for _ in range(steps):
            ei = rng.integers(0, len(self.expert[clip_id]), bs)
            pi = rng.integers(0, self.replay_len[clip_id], bs)
            xe = self.normalize(clip_id, self.expert[clip_id][ei])
            xp = self.normalize(clip_id, self.replay[clip_id][pi])
            loss, grads, mean_e, mean_p = lsgan_grads(net, xe, xp, self.cfg.gp_coef)
            opt.step(net.grads_to_named(grads, f"disc{clip_id}"))
            last = {"loss": loss, "mean_expert": mean_e, "mean_policy": mean_p}
        return last

    def update(self, transitions_by_clip: dict, steps_per_update: int) -> dict:
        """Buffer fresh policy transitions, then train each touched clip.

        transitions_by_clip maps clip_id -> (n, 26) feature arrays.
        Clips without rollout data are untouched.  Returns per-clip stats.
        """
        stats = {}
        for clip_id in sorted(transitions_by_clip):
            feats = transitions_by_clip[clip_id]
            if len(feats) == 0:
                continue
            if not 0 <= clip_id < self.n:
                raise ConfigError(f"no expert buffer for clip {clip_id}")
            self.add_policy_transitions(clip_id, feats)
            stats[clip_id] = self.update_clip(clip_id, steps_per_update)
        return stats

    def params(self) -> dict:
        out = {}
        for i, net in enumerate(self.nets):
            out.update(net.named_params(f"disc{i}"))
            out[f"disc{i}.norm_mean"] = self.norm_mean[i]
            out[f"disc{i}.norm_std"] = self.norm_std[i]
        return out


def update_bank(bank: DiscriminatorBank, transitions_by_clip: dict,
                steps_per_update: int) -> dict:
    return bank.update(transitions_by_clip, steps_per_update)
