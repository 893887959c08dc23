"""Cartesian impedance controller (CIC).

Superimposes four torque terms on top of gravity compensation:

  tau1  impedance pulling every fingertip toward a common reference point
        inside the cube, with the reference shifted toward the goal;
  tau2  surface-normal squeeze forces through the Jacobian transpose;
  tau3  minimum-norm torques canceling the net force of tau2 so the squeeze
        does not translate the cube;
  tau4  minimum-norm torques realizing a moment proportional to the
        orientation error (level 4 only).

Damping of the impedance law is zero by design; robustness against the
resulting noise sensitivity comes from a first-order low-pass on the
observed cube pose.  A Reach phase drives the fingertips to pre-grasp
points first; the impedance term then closes the fingers onto the cube by
itself, so there is no separate grasp phase.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..geometry import (
    quat_mul,
    quat_conjugate,
    quat_rotate,
    quat_slerp,
    quat_to_axis_angle,
)
from ..kinematics import forward_kinematics, gravity_compensation, jacobian
from ..tasks import TaskSpec
from .common import (
    FALLBACK_LAMBDA,
    COND_FALLBACK,
    MANIPULATE,
    REACH,
    approach_path,
    clamp_torque,
    inverse_transpose,
    joint_pd_torque,
    max_tip_error,
)


@dataclass
class CicParams:
    """Gains of the four torque terms; K/K1/K2/K3 and x_r_offset are the
    tuner-exposed set."""

    K: float = 200.0  # impedance stiffness, N/m equivalent (diagonal)
    K1: float = 0.6  # goal-shift gain (diagonal, dimensionless)
    K2: float = 0.4  # surface-normal force magnitude, N
    K3: float = 0.05  # rotation-moment gain, N*m
    M_approx: float = 0.004  # diagonal joint-space inertia, kg*m^2
    x_r_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))  # cube frame
    lam: float = 1e-4
    control_rate_hz: float = 100.0
    filter_cutoff_hz: float = 2.0
    pregrasp_offset: float = 0.010
    reach_kp: float = 5.0  # joint-space reach PD
    reach_kd: float = 0.5
    reach_duration: float = 2.5
    reach_tolerance: float = 0.012
    reach_timeout: float = 4.0
    onset_duration: float = 1.5  # s to ramp the gains in after Reach
    fold_gravity_into_tau2: bool = False  # term bookkeeping only; net torque identical

    def __post_init__(self):
        if self.K < 0 or self.K1 < 0 or self.K3 < 0:
            raise ValueError("K, K1 and K3 must be non-negative")
        self.x_r_offset = np.asarray(self.x_r_offset, dtype=float)
        if np.linalg.norm(self.x_r_offset) >= 0.0325:
            raise ValueError("x_r_offset must stay inside the cube")


@dataclass
class CicState:
    """Value-threaded controller state."""

    phase: str = REACH
    phase_start: float = 0.0
    filtered_pos: np.ndarray | None = None
    filtered_quat: np.ndarray | None = None
    reach_path = None
    pre_tips: np.ndarray | None = None
    fallback_count: int = 0
    tick_count: int = 0


def shift_reference(x_r: np.ndarray, cube_center: np.ndarray, goal_pos: np.ndarray,
                    k1) -> np.ndarray:
    """Reference point shifted toward the goal: x_r + K1 (x_g - x_c)."""
    k1 = np.asarray(k1, dtype=float)
    delta = np.asarray(goal_pos, dtype=float) - np.asarray(cube_center, dtype=float)
    if k1.ndim == 2:
        return np.asarray(x_r, dtype=float) + k1 @ delta
    return np.asarray(x_r, dtype=float) + k1 * delta


def tau1_impedance(models, obs, x_r_world: np.ndarray, params: CicParams):
    """Impedance term: per finger M(q) * Jinv_damped * (K * (x_r - x)).

    Task-space inertia is identity, damping zero, so the commanded task
    acceleration is K * xbar directly.

    Returns:
        (tau (9,), flagged) where flagged is True if any finger hit the
        singularity fallback.
    """
    q = obs.joint_state.q
    tau = np.zeros(9)
    flagged = False
    for i, m in enumerate(models):
        qi = q[3 * i : 3 * i + 3]
        xbar = x_r_world - obs.fingertips.pos[i]
        accel = params.K * xbar
        J = jacobian(m, qi)
        JJt = J @ J.T
        if np.linalg.cond(JJt) > COND_FALLBACK:
            dq = J.T @ np.linalg.solve(JJt + (params.lam + FALLBACK_LAMBDA) * np.eye(3), accel)
            flagged = True
        else:
            dq = J.T @ np.linalg.solve(JJt + params.lam * np.eye(3), accel)
        tau[3 * i : 3 * i + 3] = params.M_approx * dq
    return tau, flagged


def tau2_surface_force(models, obs, grasp, k2: float) -> np.ndarray:
    """Squeeze term: per finger J^T (K2 * d_i), d_i the inward face normal
    rotated to the world frame at the observed cube orientation."""
    normals = grasp.normals_world(obs.cube.orientation)
    by_finger = np.empty((3, 3))
    for f in range(3):
        by_finger[f] = normals[grasp.finger_assignment[f]]
    q = obs.joint_state.q
    tau = np.zeros(9)
    for i, m in enumerate(models):
        J = jacobian(m, q[3 * i : 3 * i + 3])
        tau[3 * i : 3 * i + 3] = J.T @ (k2 * by_finger[i])
    return tau


def nullify_torques(jacobians: np.ndarray, forces: np.ndarray):
    """Minimum-norm tau (9,) with sum_i J_i^{-T} tau_i = -sum_i forces_i.

    Args:
        jacobians: (3, 3, 3) per-finger Jacobians.
        forces: (3, 3) per-finger world forces whose net must be canceled.

    Returns:
        (tau (9,), flagged)
    """
    blocks = []
    flagged = False
    for i in range(3):
        Jit, f = inverse_transpose(jacobians[i], FALLBACK_LAMBDA)
        flagged = flagged or f
        blocks.append(Jit)
    A = np.hstack(blocks)  # 3 x 9
    b = -forces.sum(axis=0)
    AAt = A @ A.T
    if np.linalg.cond(AAt) > COND_FALLBACK:
        tau = A.T @ np.linalg.solve(AAt + FALLBACK_LAMBDA * np.eye(3), b)
        flagged = True
    else:
        tau = A.T @ np.linalg.solve(AAt, b)
    return tau, flagged


def rotation_torques(jacobians: np.ndarray, moment_arms: np.ndarray, omega: np.ndarray):
    """Minimum-norm tau (9,) with sum_i S(r_i) J_i^{-T} tau_i = omega.

    Args:
        jacobians: (3, 3, 3) per-finger Jacobians.
        moment_arms: (3, 3) unit arms r_i.
        omega: (3,) target moment.

    Returns:
        (tau (9,), flagged)
    """
    blocks = []
    flagged = False
    for i in range(3):
        Jit, f = inverse_transpose(jacobians[i], FALLBACK_LAMBDA)
        flagged = flagged or f
        r = moment_arms[i]
        S = np.array([
            [0.0, -r[2], r[1]],
            [r[2], 0.0, -r[0]],
            [-r[1], r[0], 0.0],
        ])
        blocks.append(S @ Jit)
    A = np.hstack(blocks)  # 3 x 9
    AAt = A @ A.T
    if np.linalg.cond(AAt) > COND_FALLBACK:
        tau = A.T @ np.linalg.solve(AAt + FALLBACK_LAMBDA * np.eye(3), omega)
        flagged = True
    else:
        tau = A.T @ np.linalg.solve(AAt, omega)
    return tau, flagged


def tau3_nullify(models, obs, grasp, k2: float):
    """Cancel the net force of the tau2 squeeze."""
    normals = grasp.normals_world(obs.cube.orientation)
    forces = np.empty((3, 3))
    q = obs.joint_state.q
    jacs = np.empty((3, 3, 3))
    for f in range(3):
        forces[f] = k2 * normals[grasp.finger_assignment[f]]
        jacs[f] = jacobian(models[f], q[3 * f : 3 * f + 3])
    return nullify_torques(jacs, forces)


def rotation_error_vector(q_actual: np.ndarray, q_goal: np.ndarray):
    """(axis, angle) of the rotation taking q_actual to q_goal."""
    rel = quat_mul(q_goal, quat_conjugate(q_actual))
    return quat_to_axis_angle(rel)


def tau4_rotation(models, obs, x_r_world: np.ndarray, q_goal: np.ndarray, k3: float):
    """Moment term: realize omega = K3 * phi * axis through the fingertips.

    Moment arms are the unit vectors from the reference point to the
    fingertips.  Zero torque when the rotation error is below 1e-6 rad.
    """
    axis, phi = rotation_error_vector(obs.cube.orientation, q_goal)
    if phi < 1e-6 or k3 == 0.0:
        return np.zeros(9), False
    arms = np.empty((3, 3))
    jacs = np.empty((3, 3, 3))
    q = obs.joint_state.q
    for f in range(3):
        xbar = x_r_world - obs.fingertips.pos[f]
        n = np.linalg.norm(xbar)
        if n < 1e-9:
            return np.zeros(9), True
        arms[f] = -xbar / n
        jacs[f] = jacobian(models[f], q[3 * f : 3 * f + 3])
    omega = k3 * phi * axis
    return rotation_torques(jacs, arms, omega)


def _filter_pose(state: CicState, obs, alpha: float):
    """First-order low-pass on the observed cube pose."""
    if state.filtered_pos is None:
        state.filtered_pos = np.array(obs.cube.position)
        state.filtered_quat = np.array(obs.cube.orientation)
    else:
        state.filtered_pos = (1.0 - alpha) * state.filtered_pos + alpha * obs.cube.position
        state.filtered_quat = quat_slerp(state.filtered_quat, obs.cube.orientation, alpha)
    return state.filtered_pos, state.filtered_quat


def cic_tick(obs, grasp, task: TaskSpec, params: CicParams, state: CicState, models):
    """One 100 Hz control step; returns (torque (9,), state)."""
    now = obs.time
    dt = 1.0 / params.control_rate_hz
    alpha = 1.0 - math.exp(-2.0 * math.pi * params.filter_cutoff_hz * dt)
    pos_f, quat_f = _filter_pose(state, obs, alpha)

    if state.reach_path is None:
        state.reach_path, q_pre, _ = approach_path(
            models, grasp, obs.cube.position, obs.cube.orientation,
            obs.joint_state.q, params.pregrasp_offset, 0.0,
        )
        state.pre_tips = np.stack(
            [forward_kinematics(m, q_pre[3 * i : 3 * i + 3]) for i, m in enumerate(models)]
        )
        state.phase_start = now

    if state.phase == REACH:
        elapsed = now - state.phase_start
        err = max_tip_error(obs, state.pre_tips)
        done = elapsed >= params.reach_duration and err < params.reach_tolerance
        if done or elapsed > params.reach_timeout:
            state.phase = MANIPULATE
            state.phase_start = now
        else:
            s = min(1.0, elapsed / params.reach_duration)
            q_t = state.reach_path.q_at(s * s * (3.0 - 2.0 * s))
            tau = joint_pd_torque(models, obs, q_t, params.reach_kp, params.reach_kd)
            state.tick_count += 1
            return clamp_torque(tau, 0.397), state

    x_r = pos_f + quat_rotate(quat_f, params.x_r_offset)
    x_r_hat = shift_reference(x_r, pos_f, task.goal.position, params.K1)

    tau1, f1 = tau1_impedance(models, obs, x_r_hat, params)
    tau2 = tau2_surface_force(models, obs, grasp, params.K2)
    tau3, f3 = tau3_nullify(models, obs, grasp, params.K2)
    k3 = 0.0 if task.level == 3 else params.K3
    tau4, f4 = tau4_rotation(models, obs, x_r, task.goal.orientation, k3)
    if f1 or f3 or f4:
        state.fallback_count += 1

    grav = np.zeros(9)
    q = obs.joint_state.q
    for i, m in enumerate(models):
        grav[3 * i : 3 * i + 3] = gravity_compensation(m, q[3 * i : 3 * i + 3])
    # every term is linear in its gain, so one onset ramp on their sum is an
    # exact simultaneous gain ramp.  Striking at full stiffness from the
    # pre-grasp standoff punts the cube off the workspace center before the
    # second and third fingers engage
    if params.onset_duration > 0.0:
        s = min(1.0, (now - state.phase_start) / params.onset_duration)
        ramp = s * s * (3.0 - 2.0 * s)
    else:
        ramp = 1.0
    if params.fold_gravity_into_tau2:
        tau2 = tau2 + grav
        tau = ramp * (tau1 + tau2 + tau3 + tau4) + (1.0 - ramp) * grav
    else:
        tau = ramp * (tau1 + tau2 + tau3 + tau4) + grav

    state.tick_count += 1
    return clamp_torque(tau, 0.397), state


class CicController:
    """Episode-facing wrapper: owns params, state and the grasp choice."""

    def __init__(self, models, task: TaskSpec, grasp=None, params: CicParams | None = None):
        self.models = models
        self.task = task
        self.params = params if params is not None else CicParams()
        self.grasp = grasp
        self.state = CicState()
        self.control_rate_hz = self.params.control_rate_hz

    def reset(self, obs, grasp=None):
        if grasp is not None:
            self.grasp = grasp
        if self.grasp is None:
            raise ValueError("CIC needs a grasp before the first tick")
        self.state = CicState()

    def tick(self, obs) -> np.ndarray:
        tau, self.state = cic_tick(obs, self.grasp, self.task, self.params, self.state, self.models)
        return tau
