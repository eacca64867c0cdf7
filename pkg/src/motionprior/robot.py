"""Planar robot geometry and foot forward kinematics.

The robot is a rigid trunk with two massless two-link legs (front and
rear).  Joint order everywhere in the package is
(front-hip, front-knee, rear-hip, rear-knee).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import SchemaError, ValidationError

# Nominal crouched stance used by the synthetic clip generators.
STAND_JOINTS = np.array([0.3, -0.6, 0.3, -0.6])


@dataclass(frozen=True)
class RobotGeometry:
    l1: float = 0.2           # upper link length [m]
    l2: float = 0.2           # lower link length [m]
    d: float = 0.15           # hip offset from trunk center along trunk axis [m]
    trunk_mass: float = 10.0  # [kg]
    trunk_inertia: float = 0.45  # about COM [kg m^2]
    # (low, high) per joint, order (f-hip, f-knee, r-hip, r-knee)
    joint_limits: tuple = ((-2.0, 2.0), (-2.5, 2.5), (-2.0, 2.0), (-2.5, 2.5))
    torque_limit: float = 40.0  # [Nm]

    def __post_init__(self):
        if self.l1 <= 0 or self.l2 <= 0:
            raise ValidationError("link lengths must be positive")
        if self.trunk_mass <= 0 or self.trunk_inertia <= 0:
            raise ValidationError("trunk mass/inertia must be positive")

    @property
    def limits_low(self) -> np.ndarray:
        return np.array([lo for lo, _ in self.joint_limits])

    @property
    def limits_high(self) -> np.ndarray:
        return np.array([hi for _, hi in self.joint_limits])

    def stand_height(self) -> float:
        """Root height with feet on the ground in the nominal stance."""
        hip, knee = STAND_JOINTS[0], STAND_JOINTS[1]
        return self.l1 * np.cos(hip) + self.l2 * np.cos(hip + knee)


def load_robot(path) -> RobotGeometry:
    """Load robot geometry from its JSON description."""
    try:
        with open(path) as f:
            raw = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise SchemaError(f"cannot read robot file {path}: {e}") from e
    try:
        return RobotGeometry(
            l1=float(raw["l1"]),
            l2=float(raw["l2"]),
            d=float(raw["d"]),
            trunk_mass=float(raw["trunk_mass"]),
            trunk_inertia=float(raw["trunk_inertia"]),
            joint_limits=tuple(tuple(map(float, jl)) for jl in raw["joint_limits"]),
            torque_limit=float(raw["torque_limit"]),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise SchemaError(f"bad robot file {path}: {e}") from e


def save_robot(path, geom: RobotGeometry) -> None:
    data = {
        "l1": geom.l1,
        "l2": geom.l2,
        "d": geom.d,
        "trunk_mass": geom.trunk_mass,
        "trunk_inertia": geom.trunk_inertia,
        "joint_limits": [list(jl) for jl in geom.joint_limits],
        "torque_limit": geom.torque_limit,
    }
    Path(path).write_text(json.dumps(data, indent=2))


def hip_positions(root_x, root_z, pitch, geom: RobotGeometry):
    """World positions of the two hips; inputs may be scalars or arrays.

    Returns (hx, hz) each with shape broadcast(inputs) + (2,), front first.
    """
    root_x = np.asarray(root_x, dtype=float)
    root_z = np.asarray(root_z, dtype=float)
    pitch = np.asarray(pitch, dtype=float)
    sgn = np.array([1.0, -1.0]) * geom.d
    cp, sp = np.cos(pitch)[..., None], np.sin(pitch)[..., None]
    hx = root_x[..., None] + cp * sgn
    hz = root_z[..., None] + sp * sgn
    return hx, hz


def foot_fk(root_x, root_z, pitch, joints, geom: RobotGeometry) -> np.ndarray:
    """Foot world positions for the planar two-link legs.

    foot = hip + l1*(sin psi1, -cos psi1) + l2*(sin psi2, -cos psi2) with
    psi1 = pitch + theta_hip, psi2 = psi1 + theta_knee and
    hip = root + R(pitch)*(+-d, 0).

    joints has trailing dimension 4; returns shape (..., 2, 2) giving
    [[front_x, front_z], [rear_x, rear_z]].
    """
    joints = np.asarray(joints, dtype=float)
    hx, hz = hip_positions(root_x, root_z, pitch, geom)
    pitch = np.asarray(pitch, dtype=float)
    hip_ang = joints[..., 0::2]
    knee_ang = joints[..., 1::2]
    psi1 = pitch[..., None] + hip_ang
    psi2 = psi1 + knee_ang
    fx = hx + geom.l1 * np.sin(psi1) + geom.l2 * np.sin(psi2)
    fz = hz - geom.l1 * np.cos(psi1) - geom.l2 * np.cos(psi2)
    return np.stack([fx, fz], axis=-1)


def foot_jacobians(pitch, joints, geom: RobotGeometry):
    """Partials of foot positions wrt pitch and the leg's two joints.

    Returns (dfoot_dpitch, dfoot_dhip, dfoot_dknee), each (..., 2, 2)
    where the middle axis indexes the leg and the last axis is (x, z).
    Used for foot velocities and the contact torque reflection J^T F.
    """
    joints = np.asarray(joints, dtype=float)
    pitch = np.asarray(pitch, dtype=float)
    hip_ang = joints[..., 0::2]
    knee_ang = joints[..., 1::2]
    psi1 = pitch[..., None] + hip_ang
    psi2 = psi1 + knee_ang
    c1, s1 = np.cos(psi1), np.sin(psi1)
    c2, s2 = np.cos(psi2), np.sin(psi2)
    # d foot / d knee = l2 * (cos psi2, sin psi2)
    dknee = np.stack([geom.l2 * c2, geom.l2 * s2], axis=-1)
    # d foot / d hip = l1 * (cos psi1, sin psi1) + d foot / d knee
    dhip = np.stack([geom.l1 * c1, geom.l1 * s1], axis=-1) + dknee
    # d hip position / d pitch = R'(pitch) * (+-d, 0) = (+-d)(-sin, cos)
    sgn = np.array([1.0, -1.0]) * geom.d
    cp, sp = np.cos(pitch)[..., None], np.sin(pitch)[..., None]
    dhip_pos = np.stack([-sp * sgn, cp * sgn], axis=-1)
    dpitch = dhip_pos + dhip
    return dpitch, dhip, dknee
