"""Imitation reward terms and the style scheduling mixer.

Functionality rewards track the root pose (orientation, horizontal,
vertical); style rewards track joint angles / feet and the per-clip
discriminator score.  The scheduler raises the joint-tracking weight
whenever the running mean adversarial reward says the "coach" is not yet
satisfied.  All exp-based terms live in (0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .clips import RefPose, wrap_angle
from .errors import ConfigError, ValidationError

MODES = ("vim", "vim_no_sched", "motion_imitation", "gail")

ORI_SCALE = 10.0
POS_XY_SCALE = 20.0
POS_Z_SCALE = 80.0
JOINT_SCALE = 5.0
FOOT_SCALE = 20.0


@dataclass(frozen=True)
class RewardWeights:
    w_func_ori: float = 0.3
    w_func_pos_xy: float = 0.3
    w_func_pos_z: float = 0.4
    w_style_adv: float = 0.5
    w_style_joint: float = 0.5

    def __post_init__(self):
        for name in ("w_func_ori", "w_func_pos_xy", "w_func_pos_z",
                     "w_style_adv", "w_style_joint"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")


@dataclass
class RewardBreakdown:
    r_ori: float
    r_pos_xy: float
    r_pos_z: float
    r_joint: float
    r_adv: float
    mean_adv: float
    scheduled_style: float
    total: float
    terminated: bool = False


def functionality_reward(state, ref: RefPose, w: RewardWeights):
    """(r_ori, r_pos_xy, r_pos_z, weighted sum) for root pose tracking."""
    dpitch = wrap_angle(state.pitch - ref.pitch)
    r_ori = float(np.exp(-ORI_SCALE * dpitch * dpitch))
    dx = state.root_x - ref.root_x
    r_xy = float(np.exp(-POS_XY_SCALE * dx * dx))
    dz = state.root_z - ref.root_z
    r_z = float(np.exp(-POS_Z_SCALE * dz * dz))
    total = w.w_func_ori * r_ori + w.w_func_pos_xy * r_xy + w.w_func_pos_z * r_z
    return r_ori, r_xy, r_z, total


def joint_style_reward(state, ref: RefPose, geom=None, state_feet=None) -> float:
    """exp(-5 sum dq^2) + exp(-20 sum |dfoot|^2); range (0, 2].

    Robot feet come from FK: pass them precomputed via state_feet or give
    the geometry to derive them here.
    """
    dq = np.asarray(state.joints, dtype=float) - ref.joints
    feet = state_feet
    if feet is None:
        if geom is None:
            raise ValidationError(
                "joint_style_reward needs state_feet or a geometry")
        from .robot import foot_fk
        feet = foot_fk(state.root_x, state.root_z, state.pitch, state.joints, geom)
    dfoot = np.asarray(feet, dtype=float) - ref.feet
    return float(np.exp(-JOINT_SCALE * (dq * dq).sum())
                 + np.exp(-FOOT_SCALE * (dfoot * dfoot).sum()))


def adversarial_style_reward(d_out: float) -> float:
    """clamp(1 - (1 - D)^2 / 4, 0, 1)."""
    r = 1.0 - 0.25 * (1.0 - d_out) ** 2
    return float(np.clip(r, 0.0, 1.0))


def schedule_style_reward(r_adv: float, r_joint: float, mean_adv: float,
                          w: RewardWeights) -> float:
    """w_adv r_adv + w_joint r_joint + w_adv (1 - mean_adv) r_joint."""
    if not 0.0 <= mean_adv <= 1.0:
        raise ValidationError(f"mean_adv={mean_adv} outside [0, 1]")
    return (w.w_style_adv * r_adv + w.w_style_joint * r_joint
            + w.w_style_adv * (1.0 - mean_adv) * r_joint)


def total_reward(state, ref: RefPose, d_out: float, mean_adv: float,
                 w: RewardWeights, mode: str = "vim", geom=None,
                 state_feet=None, terminated: bool = False) -> RewardBreakdown:
    """Per-step reward in one of the four reward-configuration modes.

    vim: functionality + scheduled style.
    vim_no_sched: functionality + w_adv r_adv + w_joint r_joint.
    motion_imitation: functionality + w_joint r_joint (no adversarial).
    gail: adversarial only.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown reward mode {mode!r}; choose from {MODES}")
    r_ori, r_xy, r_z, func = functionality_reward(state, ref, w)
    r_joint = joint_style_reward(state, ref, geom=geom, state_feet=state_feet)
    r_adv = adversarial_style_reward(d_out)
    scheduled = schedule_style_reward(r_adv, r_joint, mean_adv, w)
    if mode == "vim":
        total = func + scheduled
    elif mode == "vim_no_sched":
        total = func + w.w_style_adv * r_adv + w.w_style_joint * r_joint
    elif mode == "motion_imitation":
        total = func + w.w_style_joint * r_joint
    else:  # gail
        total = w.w_style_adv * r_adv
    return RewardBreakdown(r_ori=r_ori, r_pos_xy=r_xy, r_pos_z=r_z,
                           r_joint=r_joint, r_adv=r_adv, mean_adv=mean_adv,
                           scheduled_style=scheduled, total=total,
                           terminated=terminated)


class AdvRewardEma:
    """Per-clip exponential moving average of the adversarial reward.

    Initialized at 0 and updated once per policy transition with decay
    0.99; owned by the trainer and updated single-threaded.
    """

    def __init__(self, n_clips: int, decay: float = 0.99):
        self.decay = decay
        self.values = np.zeros(n_clips)

    def get(self, clip_id: int) -> float:
        return float(self.values[clip_id])

    def update(self, clip_id, r_adv):
        """Update one clip (scalars) or many (arrays of equal length)."""
        clip_id = np.atleast_1d(np.asarray(clip_id, dtype=int))
        r_adv = np.atleast_1d(np.asarray(r_adv, dtype=float))
        for cid, r in zip(clip_id, r_adv):
            self.values[cid] = self.decay * self.values[cid] + (1.0 - self.decay) * r
