"""Synthetic reference motion generators.

These stand in for mocap / generative / trajectory-optimized sources and
emit planar analogs of a diverse skill list: walking, a trot-like gait,
hopping, a forward jump, and a backflip.  Templates are kinematic but
respect ballistics during flight phases so the clips are trackable by
the simulator.

Conventions: the nominal stance is STAND_JOINTS with root height
geom.stand_height(); stance phases keep feet exactly on the ground by
deriving root height from the leg-reach closed form; flight phases are
ballistic arcs whose apex lands exactly on a frame.
"""

from __future__ import annotations

import math

import numpy as np

from .clips import MotionClip
from .errors import ValidationError
from .robot import STAND_JOINTS, RobotGeometry

G = 9.81

KINDS = ("stand", "walk", "trot_like", "hop", "jump_forward", "backflip")


def _check_range(name, value, lo, hi):
    if not (lo <= value <= hi):
        raise ValidationError(f"{name}={value} outside [{lo}, {hi}]")


def _grid(duration: float, dt: float):
    n = int(round(duration / dt)) + 1
    return np.arange(n) * dt


def _reach(c: float, geom: RobotGeometry) -> float:
    """Vertical hip-to-foot distance in the symmetric crouch pose.

    The crouch parameterization hip = 0.3 + c, knee = -0.6 - 2c keeps the
    foot directly below the hip, so reach = (l1 + l2) * cos(0.3 + c).
    """
    return (geom.l1 + geom.l2) * math.cos(STAND_JOINTS[0] + c)


def _crouch_joints(c):
    """Joint vector for symmetric crouch depth c (c = 0 is the stance)."""
    c = np.asarray(c, dtype=float)
    hip = STAND_JOINTS[0] + c
    knee = STAND_JOINTS[1] - 2.0 * c
    return np.stack([hip, knee, hip, knee], axis=-1)


def _fold_joints(f):
    """Leg fold used mid-flight; shortens the leg without foot x-offset."""
    f = np.asarray(f, dtype=float)
    hip = STAND_JOINTS[0] + f
    knee = STAND_JOINTS[1] - 2.0 * f
    return np.stack([hip, knee, hip, knee], axis=-1)


def _smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def _leg_ik(px, pz, geom):
    """Hip/knee angles placing the foot at (px, pz) relative to the hip.

    Trunk is assumed level (pitch 0); px forward, pz down-negative.  Picks
    the backward-bent knee branch (knee angle <= 0, matching STAND_JOINTS).
    Targets beyond the leg's reach are pulled back to just inside it.
    """
    l1, l2 = geom.l1, geom.l2
    r = math.hypot(px, pz)
    r_max = 0.999 * (l1 + l2)
    if r > r_max:
        px, pz = px * r_max / r, pz * r_max / r
        r = r_max
    r = max(r, 1e-6)
    cos_inner = (l1 * l1 + l2 * l2 - r * r) / (2.0 * l1 * l2)
    inner = math.acos(min(1.0, max(-1.0, cos_inner)))
    knee = inner - math.pi
    beta = math.atan2(l2 * math.sin(-knee), l1 + l2 * math.cos(knee))
    hip = math.atan2(px, -pz) + beta
    return hip, knee


def _foot_cycle(phase, duty, half_stride, z0, lift):
    """Foot position relative to the hip over one gait cycle.

    During stance (phase < duty) the foot is pinned to the ground and the
    hip passes over it, so the relative x sweeps front-to-back linearly;
    during swing it returns along a cosine with a sinusoidal lift.
    """
    phase = phase % 1.0
    if phase < duty:
        u = phase / duty
        return half_stride * (1.0 - 2.0 * u), -z0
    u = (phase - duty) / (1.0 - duty)
    px = half_stride * (2.0 * _smoothstep(u) - 1.0)
    return px, -z0 + lift * math.sin(math.pi * u)


def _stand(geom, duration=2.0, dt=0.02):
    _check_range("duration", duration, 0.8, 60.0)
    t = _grid(duration, dt)
    poses = np.zeros((len(t), 7))
    poses[:, 1] = geom.stand_height()
    poses[:, 3:7] = STAND_JOINTS
    return poses


def _walk(geom, speed=1.0, duration=2.0, dt=0.02, trot=False):
    _check_range("speed", speed, 0.0, 2.0)
    _check_range("duration", duration, 0.8, 60.0)
    t = _grid(duration, dt)
    # In-phase legs (the planar trot analog) keep support symmetric; the
    # alternating walk trades that for longer double-support via high duty.
    duty = 0.60 if trot else 0.75
    period = 0.35 if trot else 0.45
    offset = 0.0 if trot else 0.5
    z0 = _reach(0.25, geom)
    half_stride = 0.5 * speed * duty * period
    lift = 0.04 + 0.02 * speed
    poses = np.zeros((len(t), 7))
    poses[:, 0] = speed * t
    poses[:, 1] = z0
    for i, ti in enumerate(t):
        ph = ti / period
        fx, fz = _foot_cycle(ph, duty, half_stride, z0, lift)
        rx, rz = _foot_cycle(ph + offset, duty, half_stride, z0, lift)
        poses[i, 3:5] = _leg_ik(fx, fz, geom)
        poses[i, 5:7] = _leg_ik(rx, rz, geom)
    return poses


def _hop(geom, speed=0.4, duration=2.0, dt=0.02, hop_height=0.08):
    _check_range("speed", speed, 0.0, 2.0)
    _check_range("duration", duration, 0.8, 60.0)
    _check_range("hop_height", hop_height, 0.02, 0.3)
    z0 = geom.stand_height()
    ts = 0.24
    v0 = math.sqrt(2.0 * G * hop_height)
    tf = 2.0 * v0 / G
    period = ts + tf
    t = _grid(duration, dt)
    poses = np.zeros((len(t), 7))
    poses[:, 0] = speed * t
    half = 0.5 * speed * ts  # feet stay world-fixed through the stance
    for i, ti in enumerate(t):
        tau = ti % period
        if tau < ts:
            u = tau / ts
            c = 0.3 * math.sin(math.pi * u)
            fx = half * (1.0 - 2.0 * u)
            poses[i, 1] = _reach(c, geom)
            poses[i, 3:5] = _leg_ik(fx, -poses[i, 1], geom)
            poses[i, 5:7] = poses[i, 3:5]
        else:
            tau_f = tau - ts
            f = 0.35 * math.sin(math.pi * tau_f / tf)
            fx = half * (2.0 * _smoothstep(tau_f / tf) - 1.0)
            poses[i, 1] = z0 + v0 * tau_f - 0.5 * G * tau_f * tau_f
            poses[i, 3:5] = _leg_ik(fx, -_reach(f, geom), geom)
            poses[i, 5:7] = poses[i, 3:5]
    return poses


def _ballistic_phases(geom, apex_height, dt, distance, flip):
    """Stand / launch-crouch / flight / landing-crouch / stand pose rows.

    The flight apex falls exactly on a frame so max(root_z) == apex_height.
    """
    z0 = geom.stand_height()
    if not apex_height > z0 + 0.02:
        raise ValidationError(
            f"apex_height={apex_height} must exceed stand height + 0.02 = {z0 + 0.02:.3f}")
    _check_range("apex_height", apex_height, 0.0, 1.5)
    t_apex = max(dt, round(math.sqrt(2.0 * (apex_height - z0) / G) / dt) * dt)
    tf = 2.0 * t_apex
    z_takeoff = apex_height - 0.5 * G * t_apex * t_apex
    n_stand = int(round(0.4 / dt))
    n_crouch = int(round(0.3 / dt))
    n_flight = int(round(tf / dt))
    rows = []
    # lead-in stand
    for _ in range(n_stand):
        rows.append([0.0, z0, 0.0, *STAND_JOINTS])
    # launch crouch: dip then rise to the takeoff height, feet on ground
    for k in range(n_crouch):
        u = k / n_crouch
        z = z0 - 0.06 * math.sin(math.pi * u) + (z_takeoff - z0) * u
        c = math.acos(min(1.0, z / (geom.l1 + geom.l2))) - STAND_JOINTS[0]
        rows.append([0.0, z, 0.0, *_crouch_joints(c)])
    # flight
    for k in range(n_flight + 1):
        tau = k * dt
        u = tau / tf
        z = apex_height - 0.5 * G * (tau - t_apex) ** 2
        x = distance * u
        pitch = -2.0 * math.pi * float(_smoothstep(u)) if flip else 0.0
        f = 0.85 * math.sin(math.pi * u) if flip else 0.4 * math.sin(math.pi * u)
        rows.append([x, z, pitch, *_fold_joints(f)])
    end_pitch = -2.0 * math.pi if flip else 0.0
    # landing crouch back up to the stand, feet on ground
    for k in range(1, n_crouch + 1):
        u = k / n_crouch
        z = z_takeoff + (z0 - z_takeoff) * u - 0.06 * math.sin(math.pi * u)
        c = math.acos(min(1.0, z / (geom.l1 + geom.l2))) - STAND_JOINTS[0]
        rows.append([distance, z, end_pitch, *_crouch_joints(c)])
    for _ in range(n_stand):
        rows.append([distance, z0, end_pitch, *STAND_JOINTS])
    return np.array(rows)


def _jump_forward(geom, apex_height=0.6, jump_distance=0.5, dt=0.02):
    _check_range("jump_distance", jump_distance, 0.0, 1.5)
    return _ballistic_phases(geom, apex_height, dt, jump_distance, flip=False)


def _backflip(geom, apex_height=0.6, jump_distance=0.0, dt=0.02):
    _check_range("jump_distance", jump_distance, 0.0, 1.0)
    return _ballistic_phases(geom, apex_height, dt, jump_distance, flip=True)


_GENERATORS = {
    "stand": (_stand, "synthetic"),
    "walk": (_walk, "mocap_like"),
    "trot_like": (lambda geom, **kw: _walk(geom, trot=True, **kw), "mocap_like"),
    "hop": (_hop, "synthetic"),
    "jump_forward": (_jump_forward, "optimized"),
    "backflip": (_backflip, "optimized"),
}


def generate_synthetic_clip(kind: str, geom: RobotGeometry | None = None,
                            name: str | None = None, **params) -> MotionClip:
    """Generate one synthetic reference clip.

    kind is one of KINDS; params are generator-specific gait parameters
    (speed, duration, dt, hop_height, apex_height, jump_distance) and are
    validated against their documented ranges.
    """
    if kind not in _GENERATORS:
        raise ValidationError(f"unknown clip kind {kind!r}; choose from {KINDS}")
    geom = geom or RobotGeometry()
    dt = params.get("dt", 0.02)
    _check_range("dt", dt, 1e-4, 0.1)
    gen, source = _GENERATORS[kind]
    poses = gen(geom, **params)
    return MotionClip(name=name or kind, source=source, dt=dt, poses=poses,
                      geom=geom)


def default_dataset(geom: RobotGeometry | None = None) -> list[MotionClip]:
    """The fixed seven-clip generator menu used by `gen-dataset`."""
    geom = geom or RobotGeometry()
    return [
        generate_synthetic_clip("stand", geom, duration=2.0),
        generate_synthetic_clip("walk", geom, name="walk_slow", speed=0.5, duration=4.0),
        generate_synthetic_clip("walk", geom, name="walk_fast", speed=1.0, duration=4.0),
        generate_synthetic_clip("trot_like", geom, speed=0.8, duration=4.0),
        generate_synthetic_clip("hop", geom, speed=0.4, duration=3.0),
        generate_synthetic_clip("jump_forward", geom, apex_height=0.6),
        generate_synthetic_clip("backflip", geom, apex_height=0.6),
    ]
