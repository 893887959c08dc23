"""Goals and rewards for the two hardest task levels.

Level 3 asks for a goal position, level 4 for a full goal pose.  Rewards are
negative normalized errors: position error splits into a horizontal part
scaled by d_xy and a vertical part scaled by d_z; orientation error is the
normalized geodesic angle of the relative rotation.  Returns accumulate the
per-tick reward at the cube observation rate (10 Hz by default), so absolute
return magnitudes are a convention of this package, not a universal scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import quat_conjugate, quat_from_axis_angle, quat_from_yaw, quat_mul, quat_normalize


@dataclass(frozen=True)
class Pose:
    position: np.ndarray
    orientation: np.ndarray  # unit quaternion (w, x, y, z)

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))
        object.__setattr__(self, "orientation", np.asarray(self.orientation, dtype=float))
        if self.position.shape != (3,) or self.orientation.shape != (4,):
            raise ValueError("pose needs a 3-vector position and 4-vector quaternion")
        if abs(np.linalg.norm(self.orientation) - 1.0) > 1e-9:
            raise ValueError("orientation quaternion must be unit norm")


@dataclass(frozen=True)
class TaskSpec:
    """Task definition: level, goal, and reward normalization ranges.

    d_xy and d_z are the error ranges used to normalize the planar and
    vertical position errors.  Level 3 ignores the goal orientation.
    """

    level: int
    goal: Pose
    d_xy: float = 0.39
    d_z: float = 0.27
    episode_duration: float = 60.0
    control_rate_hz: float = 1000.0
    reward_rate_hz: float = 10.0

    def __post_init__(self):
        if self.level not in (3, 4):
            raise ValueError("level must be 3 or 4")
        if self.d_xy <= 0 or self.d_z <= 0:
            raise ValueError("normalization ranges must be positive")
        if self.episode_duration <= 0 or self.control_rate_hz <= 0 or self.reward_rate_hz <= 0:
            raise ValueError("durations and rates must be positive")


@dataclass(frozen=True)
class StepReward:
    r: float
    e_xy_norm: float
    e_z: float
    err_rot: float


def reward_l3(cube_pos: np.ndarray, goal_pos: np.ndarray, spec: TaskSpec) -> float:
    """Position reward: -(0.5 ||e_xy|| / d_xy + 0.5 |e_z| / d_z), always <= 0."""
    e = np.asarray(goal_pos, dtype=float) - np.asarray(cube_pos, dtype=float)
    e_xy = math.hypot(e[0], e[1])
    return -(0.5 * e_xy / spec.d_xy + 0.5 * abs(e[2]) / spec.d_z)


def orientation_error(q_actual: np.ndarray, q_goal: np.ndarray) -> float:
    """Normalized magnitude of the rotation taking actual to goal, in [0, 1].

    err = 2 atan2(||q_xyz||, |q_w|) / pi of q = q_goal * conj(q_actual);
    0 for identical orientations, 0.5 for a 90 degree rotation, 1 for 180.
    """
    rel = quat_mul(np.asarray(q_goal, dtype=float), quat_conjugate(np.asarray(q_actual, dtype=float)))
    xyz = math.sqrt(rel[1] ** 2 + rel[2] ** 2 + rel[3] ** 2)
    return 2.0 * math.atan2(xyz, abs(rel[0])) / math.pi


def reward_l4(cube: Pose, goal: Pose, spec: TaskSpec) -> float:
    """Pose reward: (r3 - err_rot) / 2."""
    r3 = reward_l3(cube.position, goal.position, spec)
    return 0.5 * (r3 - orientation_error(cube.orientation, goal.orientation))


def step_reward(position: np.ndarray, orientation: np.ndarray, spec: TaskSpec) -> StepReward:
    """Reward plus its components for one cube pose sample."""
    e = np.asarray(spec.goal.position, dtype=float) - np.asarray(position, dtype=float)
    e_xy = math.hypot(e[0], e[1])
    err_rot = orientation_error(orientation, spec.goal.orientation)
    r3 = -(0.5 * e_xy / spec.d_xy + 0.5 * abs(e[2]) / spec.d_z)
    r = r3 if spec.level == 3 else 0.5 * (r3 - err_rot)
    return StepReward(r=r, e_xy_norm=e_xy, e_z=float(e[2]), err_rot=err_rot)


def episode_return(log, spec: TaskSpec) -> float:
    """Re-evaluate an episode's return from its cube pose trajectory.

    `log` is anything exposing cube_positions (T, 3) and cube_orientations
    (T, 4) sampled at the reward rate.  The result is the plain sum of the
    per-tick rewards, which doubles as an independent check on rewards that
    were accumulated online.
    """
    positions = np.asarray(log.cube_positions, dtype=float)
    orientations = np.asarray(log.cube_orientations, dtype=float)
    return float(
        sum(step_reward(p, o, spec).r for p, o in zip(positions, orientations))
    )


@dataclass(frozen=True)
class GoalWorkspace:
    """Sampling region for goals: a cylinder above the floor."""

    arena_radius: float = 0.195
    radius_factor: float = 0.8
    z_min: float = 0.0325
    z_max: float = 0.15
    max_tilt: float = 0.0  # rad; 0 keeps level-4 goals yaw-only

    def __post_init__(self):
        if self.z_min > self.z_max or self.arena_radius <= 0:
            raise ValueError("bad goal workspace bounds")


def sample_goal(
    level: int, rng: np.random.Generator, workspace: GoalWorkspace | None = None
) -> Pose:
    """Uniform goal in the workspace cylinder; level 4 adds a random yaw.

    The draw order is fixed (radius, angle, height, then orientation), so a
    given rng state always produces the same goal.
    """
    ws = workspace if workspace is not None else GoalWorkspace()
    r_max = ws.arena_radius * ws.radius_factor
    r = r_max * math.sqrt(rng.uniform())
    ang = rng.uniform(0.0, 2.0 * math.pi)
    z = rng.uniform(ws.z_min, ws.z_max)
    pos = np.array([r * math.cos(ang), r * math.sin(ang), z])
    if level == 3:
        quat = np.array([1.0, 0.0, 0.0, 0.0])
    elif level == 4:
        yaw = rng.uniform(-math.pi, math.pi)
        quat = quat_from_yaw(yaw)
        if ws.max_tilt > 0.0:
            tilt_dir = rng.uniform(0.0, 2.0 * math.pi)
            tilt = rng.uniform(0.0, ws.max_tilt)
            axis = np.array([math.cos(tilt_dir), math.sin(tilt_dir), 0.0])
            quat = quat_mul(quat_from_axis_angle(axis, tilt), quat)
        quat = quat_normalize(quat)
    else:
        raise ValueError("level must be 3 or 4")
    return Pose(position=pos, orientation=quat)


def relative_goal(
    start: Pose,
    delta_theta: float,
    rng: np.random.Generator,
    offset_xy: float = 0.05,
    lift_max: float = 0.04,
    axis_tilt_max: float = 0.12,
) -> Pose:
    """Goal displaced from `start` by a rotation of exactly delta_theta.

    The rotation axis is near vertical (polar angle up to axis_tilt_max, so
    the cube's resulting tilt stays small), the sign of the yaw is random,
    and the position moves offset_xy horizontally in a random direction plus
    a random lift in [0, lift_max].  The geodesic angle between start and
    goal orientations equals delta_theta exactly, by construction.
    """
    beta = rng.uniform(0.0, axis_tilt_max)
    phi = rng.uniform(0.0, 2.0 * math.pi)
    sign = 1.0 if rng.uniform() < 0.5 else -1.0
    axis = np.array(
        [math.sin(beta) * math.cos(phi), math.sin(beta) * math.sin(phi), math.cos(beta)]
    )
    rot = quat_from_axis_angle(axis, sign * delta_theta)
    ang = rng.uniform(0.0, 2.0 * math.pi)
    lift = rng.uniform(0.0, lift_max)
    pos = start.position + np.array(
        [offset_xy * math.cos(ang), offset_xy * math.sin(ang), lift]
    )
    return Pose(position=pos, orientation=quat_normalize(quat_mul(rot, start.orientation)))
