"""Deterministic planar simulator: trunk + four PD-driven joints.

Massless-leg model: the trunk is a rigid body under gravity and penalty
ground contact applied at the foot points; each joint integrates its own
reflected inertia and feels the contact reflection J^T F.  Integration
is semi-implicit Euler at cfg.substeps per control step.  Everything is
float64 and bit-deterministic for identical inputs.

Batched state layout (STATE_DIM columns):
  0 root_x  1 root_z  2 pitch  3 vx  4 vz  5 pitch_rate
  6:10 joints  10:14 joint_vels  14:16 foot_contact  16:20 last_action
  20 time
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import SimulationDiverged, ValidationError
from .robot import RobotGeometry, foot_fk, foot_jacobians

STATE_DIM = 21


@dataclass
class SimConfig:
    control_dt: float = 0.02
    substeps: int = 10
    gravity: float = -9.81
    contact_kn: float = 4000.0     # penalty stiffness [N/m]
    contact_cn: float = 50.0       # penalty damping [N s/m]
    friction_mu: float = 1.0
    friction_ct: float = 1000.0    # tangential damping inside the cone [N s/m]
    kp: float = 300.0
    kd: float = 8.0
    joint_damping: float = 0.2
    leg_inertia: float = 0.05      # reflected inertia per joint [kg m^2]
    pos_err_max: float = 0.5       # episode termination bounds
    ori_err_max: float = 0.8

    def __post_init__(self):
        if self.substeps < 1:
            raise ValidationError("substeps must be >= 1")
        for name in ("contact_kn", "contact_cn", "kp", "kd", "leg_inertia"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")


@dataclass
class RobotState:
    root_x: float
    root_z: float
    pitch: float
    vx: float
    vz: float
    pitch_rate: float
    joints: np.ndarray
    joint_vels: np.ndarray
    foot_contact: np.ndarray      # 2 booleans
    last_action: np.ndarray
    time: float = 0.0

    def to_array(self) -> np.ndarray:
        row = np.empty(STATE_DIM)
        row[0:6] = (self.root_x, self.root_z, self.pitch,
                    self.vx, self.vz, self.pitch_rate)
        row[6:10] = self.joints
        row[10:14] = self.joint_vels
        row[14:16] = self.foot_contact.astype(float)
        row[16:20] = self.last_action
        row[20] = self.time
        return row

    @staticmethod
    def from_array(row: np.ndarray) -> "RobotState":
        return RobotState(
            root_x=float(row[0]), root_z=float(row[1]), pitch=float(row[2]),
            vx=float(row[3]), vz=float(row[4]), pitch_rate=float(row[5]),
            joints=row[6:10].copy(), joint_vels=row[10:14].copy(),
            foot_contact=row[14:16] > 0.5, last_action=row[16:20].copy(),
            time=float(row[20]))


def pd_torque(target, q, qdot, kp, kd, torque_limit):
    """tau = clamp(kp (target - q) - kd qdot, +-torque_limit)."""
    tau = kp * (np.asarray(target, dtype=float) - q) - kd * np.asarray(qdot, dtype=float)
    return np.clip(tau, -torque_limit, torque_limit)


def contact_forces(feet, feet_vel, cfg: SimConfig):
    """Penalty normal force and cone-clamped tangential force per foot.

    feet, feet_vel: (..., 2, 2).  Returns (fn, ft) each (..., 2); the
    world contact force vector on a foot is (ft, fn).
    """
    foot_z = feet[..., 1]
    in_contact = foot_z < 0.0
    fn_raw = -cfg.contact_kn * foot_z - cfg.contact_cn * feet_vel[..., 1]
    fn = np.where(in_contact, np.maximum(0.0, fn_raw), 0.0)
    bound = cfg.friction_mu * fn
    ft = np.clip(-cfg.friction_ct * feet_vel[..., 0], -bound, bound)
    return fn, ft


def step_batch(states: np.ndarray, actions: np.ndarray, cfg: SimConfig,
               geom: RobotGeometry, collect_forces: bool = False):
    """Advance a batch of states one control step.

    Returns the new (n, STATE_DIM) array; with collect_forces also an
    (n, substeps, 2, 2) array of per-foot (ft, fn) at every substep.
    """
    s = np.array(states, dtype=float)
    if s.ndim == 1:
        s = s[None, :]
    actions = np.asarray(actions, dtype=float)
    if actions.ndim == 1:
        actions = actions[None, :]
    n = len(s)
    h = cfg.control_dt / cfg.substeps
    m, inertia = geom.trunk_mass, geom.trunk_inertia
    lo, hi = geom.limits_low, geom.limits_high
    forces = np.zeros((n, cfg.substeps, 2, 2)) if collect_forces else None

    x, z, pitch = s[:, 0], s[:, 1], s[:, 2]
    vx, vz, wr = s[:, 3], s[:, 4], s[:, 5]
    q, qd = s[:, 6:10], s[:, 10:14]

    for k in range(cfg.substeps):
        tau = pd_torque(actions, q, qd, cfg.kp, cfg.kd, geom.torque_limit)
        feet = foot_fk(x, z, pitch, q, geom)
        dpitch, dhip, dknee = foot_jacobians(pitch, q, geom)
        feet_vel = np.empty_like(feet)
        for ax in (0, 1):
            feet_vel[..., ax] = ((vx if ax == 0 else vz)[:, None]
                                 + wr[:, None] * dpitch[..., ax]
                                 + qd[:, 0::2] * dhip[..., ax]
                                 + qd[:, 1::2] * dknee[..., ax])
        fn, ft = contact_forces(feet, feet_vel, cfg)
        if collect_forces:
            forces[:, k, :, 0] = ft
            forces[:, k, :, 1] = fn

        acc_x = ft.sum(axis=1) / m
        acc_z = fn.sum(axis=1) / m + cfg.gravity
        torque = (((feet[..., 0] - x[:, None]) * fn
                   - (feet[..., 1] - z[:, None]) * ft).sum(axis=1))
        acc_pitch = torque / inertia
        # Only the normal component reflects into the joints: with near
        # massless legs the tangential damper through the leg Jacobian is
        # too stiff for the explicit substep and would oscillate.
        tau_contact = np.empty_like(q)
        tau_contact[:, 0::2] = dhip[..., 1] * fn
        tau_contact[:, 1::2] = dknee[..., 1] * fn
        qdd = (tau + tau_contact - cfg.joint_damping * qd) / cfg.leg_inertia

        vx = vx + acc_x * h
        vz = vz + acc_z * h
        wr = wr + acc_pitch * h
        qd = qd + qdd * h
        x = x + vx * h
        z = z + vz * h
        pitch = pitch + wr * h
        q = q + qd * h
        over, under = q > hi, q < lo
        q = np.clip(q, lo, hi)
        qd = np.where(over, np.minimum(qd, 0.0), qd)
        qd = np.where(under, np.maximum(qd, 0.0), qd)

    out = np.empty_like(s)
    out[:, 0], out[:, 1], out[:, 2] = x, z, pitch
    out[:, 3], out[:, 4], out[:, 5] = vx, vz, wr
    out[:, 6:10], out[:, 10:14] = q, qd
    feet = foot_fk(x, z, pitch, q, geom)
    out[:, 14:16] = (feet[..., 1] <= 0.0).astype(float)
    out[:, 16:20] = actions
    out[:, 20] = s[:, 20] + cfg.control_dt
    if not np.all(np.isfinite(out)):
        env, col = np.argwhere(~np.isfinite(out))[0]
        names = ("root_x", "root_z", "pitch", "vx", "vz", "pitch_rate")
        label = names[col] if col < 6 else f"state[{col}]"
        raise SimulationDiverged(label, out[env, col])
    if collect_forces:
        return out, forces
    return out


def step(state: RobotState, action, cfg: SimConfig, geom: RobotGeometry) -> RobotState:
    """Single-robot control step (pure function of its inputs)."""
    if not np.all(np.isfinite(np.asarray(action, dtype=float))):
        raise ValidationError("action must be finite")
    row = step_batch(state.to_array()[None, :], np.asarray(action)[None, :],
                     cfg, geom)[0]
    return RobotState.from_array(row)


def reset_rows(ref_rows: np.ndarray, vel_rows: np.ndarray, noise_scale: float,
               geom: RobotGeometry, rng: np.random.Generator) -> np.ndarray:
    """Batch reset from reference pose/velocity rows (k, 7) -> (k, STATE_DIM).

    Uniform noise of +-noise_scale on joints and +-noise_scale/2 on root
    position; velocities taken from the clip finite differences.
    """
    ref_rows = np.atleast_2d(np.asarray(ref_rows, dtype=float))
    vel_rows = np.atleast_2d(np.asarray(vel_rows, dtype=float))
    k = len(ref_rows)
    out = np.zeros((k, STATE_DIM))
    out[:, 0:2] = ref_rows[:, 0:2]
    out[:, 2] = ref_rows[:, 2]
    out[:, 3:6] = vel_rows[:, 0:3]
    out[:, 6:10] = ref_rows[:, 3:7]
    out[:, 10:14] = vel_rows[:, 3:7]
    if noise_scale > 0:
        out[:, 0:2] += rng.uniform(-noise_scale / 2, noise_scale / 2, (k, 2))
        out[:, 6:10] += rng.uniform(-noise_scale, noise_scale, (k, 4))
        out[:, 6:10] = np.clip(out[:, 6:10], geom.limits_low, geom.limits_high)
    feet = foot_fk(out[:, 0], out[:, 1], out[:, 2], out[:, 6:10], geom)
    out[:, 14:16] = (feet[..., 1] <= 0.0).astype(float)
    out[:, 16:20] = out[:, 6:10]
    return out


def reset_from_reference(ref, ref_vel, noise_scale: float, geom: RobotGeometry,
                         rng: np.random.Generator | None = None) -> RobotState:
    """Reset a single robot from a RefPose and finite-difference velocities."""
    if noise_scale < 0:
        raise ValidationError("noise_scale must be >= 0")
    rng = rng or np.random.default_rng(0)
    ref_row = np.array([ref.root_x, ref.root_z, ref.pitch, *ref.joints])
    row = reset_rows(ref_row[None, :], np.asarray(ref_vel, dtype=float)[None, :],
                     noise_scale, geom, rng)[0]
    return RobotState.from_array(row)


def check_termination(state: RobotState, ref, cfg: SimConfig):
    """None to continue, else 'position' or 'orientation'."""
    from .clips import wrap_angle
    dx = state.root_x - ref.root_x
    dz = state.root_z - ref.root_z
    if np.hypot(dx, dz) > cfg.pos_err_max:
        return "position"
    if abs(wrap_angle(state.pitch - ref.pitch)) > cfg.ori_err_max:
        return "orientation"
    return None
