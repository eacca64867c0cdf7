"""Reference motion clips: file format, segments, resampling.

A clip is a fixed-rate sequence of reference poses for the trunk and the
four leg joints.  Pitch is stored *unwrapped* so that flips accumulate to
-2*pi instead of aliasing to 0; wrapping happens only when errors are
computed.  Foot positions are always derived by forward kinematics at
load time and never trusted from disk.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import SchemaError, ValidationError
from .robot import RobotGeometry, foot_fk

# Offsets of the future reference frames handed to the encoder.
SEGMENT_OFFSETS = (1, 2, 10, 30)

# Columns of MotionClip.poses.
POSE_FIELDS = ("root_x", "root_z", "pitch", "j0", "j1", "j2", "j3")

SOURCES = ("mocap_like", "synthetic", "optimized")

MIN_FRAMES = SEGMENT_OFFSETS[-1] + 1  # a segment must exist at t = 0
MAX_ROOT_STEP = 0.5  # continuity bound on per-frame root displacement [m]


def wrap_angle(a):
    """Wrap angle(s) to (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    out = -((-a + np.pi) % (2.0 * np.pi) - np.pi)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class RefPose:
    """One reference frame: trunk pose, joint angles, FK-derived feet."""

    root_x: float
    root_z: float
    pitch: float
    joints: np.ndarray        # (4,)
    feet: np.ndarray          # (2, 2) [[front_x, front_z], [rear_x, rear_z]]

    @property
    def root(self) -> np.ndarray:
        return np.array([self.root_x, self.root_z])


class MotionClip:
    """A named, fixed-rate sequence of reference poses.

    Frame data lives in `poses`, shape (T+1, 7) with columns POSE_FIELDS,
    and `feet`, shape (T+1, 2, 2), recomputed from FK.  Clips are
    immutable after construction and safe to share across workers.
    """

    def __init__(self, name: str, source: str, dt: float, poses: np.ndarray,
                 geom: RobotGeometry):
        poses = np.asarray(poses, dtype=float)
        self.name = name
        self.source = source
        self.dt = float(dt)
        self.poses = poses
        self.geom = geom
        self._validate()
        self.feet = foot_fk(poses[:, 0], poses[:, 1], poses[:, 2],
                            poses[:, 3:7], geom)
        self.poses.setflags(write=False)
        self.feet.setflags(write=False)

    def _validate(self):
        if self.source not in SOURCES:
            raise ValidationError(f"unknown clip source {self.source!r}")
        if not self.dt > 0:
            raise ValidationError(f"clip dt must be > 0, got {self.dt}")
        if self.poses.ndim != 2 or self.poses.shape[1] != 7:
            raise ValidationError(f"pose array must be (n, 7), got {self.poses.shape}")
        n = len(self.poses)
        if n < MIN_FRAMES:
            raise ValidationError(f"clip needs >= {MIN_FRAMES} frames, got {n}")
        if not np.all(np.isfinite(self.poses)):
            bad = int(np.argwhere(~np.isfinite(self.poses))[0, 0])
            raise ValidationError(f"non-finite value at frame {bad}")
        lo, hi = self.geom.limits_low, self.geom.limits_high
        joints = self.poses[:, 3:7]
        viol = (joints < lo - 1e-9) | (joints > hi + 1e-9)
        if viol.any():
            bad = int(np.argwhere(viol.any(axis=1))[0, 0])
            raise ValidationError(f"joint limit violated at frame {bad}")
        step = np.linalg.norm(np.diff(self.poses[:, 0:2], axis=0), axis=1)
        if (step >= MAX_ROOT_STEP).any():
            bad = int(np.argmax(step >= MAX_ROOT_STEP))
            raise ValidationError(
                f"root jumps {step[bad]:.3f} m between frames {bad} and {bad + 1}")

    def __len__(self) -> int:
        return len(self.poses)

    @property
    def T(self) -> int:
        """Index of the last frame."""
        return len(self.poses) - 1

    @property
    def duration(self) -> float:
        return self.T * self.dt

    def frame(self, t: int) -> RefPose:
        row = self.poses[t]
        return RefPose(root_x=row[0], root_z=row[1], pitch=row[2],
                       joints=row[3:7].copy(), feet=self.feet[t].copy())

    def frame_velocity(self, t: int) -> np.ndarray:
        """Finite-difference velocity of frame t, shape (7,).

        Forward difference, backward at the last frame.
        """
        if t >= self.T:
            return (self.poses[self.T] - self.poses[self.T - 1]) / self.dt
        return (self.poses[t + 1] - self.poses[t]) / self.dt

    def velocities(self) -> np.ndarray:
        """Finite-difference velocities for every frame, shape (T+1, 7)."""
        v = np.empty_like(self.poses)
        v[:-1] = np.diff(self.poses, axis=0) / self.dt
        v[-1] = v[-2]
        return v


@dataclass(frozen=True)
class MotionSegment:
    """Future reference frames at offsets +1, +2, +10, +30 from step t.

    Offsets past the clip end are clamped to the final frame.
    """

    frames: tuple                 # 4 RefPose in offset order
    clip_id: int
    t: int


def extract_segment(clip: MotionClip, t: int, clip_id: int = 0) -> MotionSegment:
    """Segment of future frames for control step t (0 <= t <= T)."""
    if not 0 <= t <= clip.T:
        raise IndexError(f"step {t} outside [0, {clip.T}]")
    frames = tuple(clip.frame(min(t + k, clip.T)) for k in SEGMENT_OFFSETS)
    return MotionSegment(frames=frames, clip_id=clip_id, t=t)


def load_clip(path, geom: RobotGeometry) -> MotionClip:
    """Load and validate a clip JSON file.

    Feet are recomputed from FK regardless of anything stored on disk.
    """
    try:
        with open(path) as f:
            raw = json.load(f)
    except OSError as e:
        raise SchemaError(f"cannot read clip file {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise SchemaError(
            f"clip file {path} is not valid JSON (line {e.lineno}): {e.msg}") from e
    for key in ("name", "source", "dt", "frames"):
        if key not in raw:
            raise SchemaError(f"clip file {path} missing key {key!r}")
    frames = raw["frames"]
    if not isinstance(frames, list) or not frames:
        raise SchemaError(f"clip file {path}: 'frames' must be a non-empty list")
    for i, fr in enumerate(frames):
        if not isinstance(fr, list) or len(fr) != 7:
            raise SchemaError(
                f"clip file {path}: frame {i} must be a list of 7 numbers")
    return MotionClip(name=str(raw["name"]), source=str(raw["source"]),
                      dt=float(raw["dt"]), poses=np.array(frames, dtype=float),
                      geom=geom)


def save_clip(path, clip: MotionClip) -> None:
    data = {
        "name": clip.name,
        "source": clip.source,
        "dt": clip.dt,
        "frames": [[float(v) for v in row] for row in clip.poses],
    }
    Path(path).write_text(json.dumps(data))


def resample_clip(clip: MotionClip, target_dt: float) -> MotionClip:
    """Resample to a new frame interval.

    Root and joints interpolate linearly; pitch interpolates along the
    shortest arc so values stored near +-pi do not sweep through zero.
    Resampling at the original dt returns a bit-exact copy.
    """
    if not target_dt > 0:
        raise ValidationError(f"target_dt must be > 0, got {target_dt}")
    if target_dt == clip.dt:
        return MotionClip(clip.name, clip.source, clip.dt, clip.poses.copy(),
                          clip.geom)
    out = resample_poses(clip.poses, clip.dt, target_dt)
    return MotionClip(clip.name, clip.source, target_dt, out, clip.geom)


def resample_poses(poses: np.ndarray, dt: float, target_dt: float) -> np.ndarray:
    """Interpolation core behind resample_clip, on a raw (n, 7) array.

    Pitch (column 2) follows the shortest arc between bracketing frames;
    everything else is linear.
    """
    poses = np.asarray(poses, dtype=float)
    last = len(poses) - 1
    n_out = int(round(last * dt / target_dt)) + 1
    out = np.empty((n_out, 7))
    for i in range(n_out):
        t = i * target_dt
        idx = min(int(t / dt), last - 1)
        frac = min(max(t / dt - idx, 0.0), 1.0)
        p0, p1 = poses[idx], poses[idx + 1]
        out[i] = p0 + frac * (p1 - p0)
        out[i, 2] = p0[2] + frac * wrap_angle(p1[2] - p0[2])
    return out
