"""Cartesian position controller (CPC).

Fingertip PID on Cartesian error, mapped to joint torques through the damped
pseudo-inverse, plus gravity compensation and an exponential gain schedule
that raises the PD gains while the fingertip error stagnates.  A three-phase
machine sequences the episode: Reach pre-grasp points, Grasp by closing onto
squeeze targets, then Move by carrying the targets along the interpolation
from the grasp-time cube pose to the goal pose.

The PID output is treated as a Cartesian force that the damped pseudo-inverse
turns into joint velocities-scale torques; with that map the useful gain
range sits around kp of a few units rather than the hundreds a plain
Jacobian-transpose force map would need, and the shipped defaults are tuned
for it.  All gains are exposed to the tuner.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..geometry import quat_slerp, rotation_angle_between
from ..kinematics import damped_pinv_solve, forward_kinematics, gravity_compensation, jacobian
from ..tasks import TaskSpec
from .common import (
    COND_FALLBACK,
    FALLBACK_LAMBDA,
    GRASP,
    MOVE,
    REACH,
    approach_path,
    clamp_torque,
    contact_press_weights,
    joint_pd_torque,
    max_tip_error,
    squeeze_points,
)


@dataclass
class CpcParams:
    """Gains and motion parameters; kp/ki/kd/gain_* and approach_speed are
    the tuner-exposed set."""

    kp: float = 400.0  # N/m
    ki: float = 5.0  # N/(m s)
    kd: float = 20.0  # N s/m
    gain_growth_rate: float = 0.5  # 1/s
    gain_clip: float = 3.0
    lam: float = 1e-4  # damping for the near-singular fallback solve
    approach_speed: float = 0.02  # m/s of carry interpolation
    rotation_speed: float = 0.35  # rad/s of carry interpolation
    control_rate_hz: float = 200.0
    schedule_interval: float = 0.5  # s between gain-schedule updates
    stagnation_threshold: float = 1e-3  # m of error decrease per interval
    tip_radius: float = 0.0075  # m, fingertip sphere radius
    pregrasp_offset: float = 0.008  # m of clearance beyond a kissing tip
    squeeze_depth: float = 0.005  # m of commanded interference past kissing
    grasp_ramp: float = 0.8  # s to close from pre-grasp onto the squeeze points
    reach_kp: float = 3.0  # joint-space approach gains
    reach_kd: float = 0.35
    reach_duration: float = 1.6  # s to traverse the approach path
    reach_tolerance: float = 0.004  # m, max tip error ending the approach
    reach_timeout: float = 3.0
    grasp_timeout: float = 2.0
    integral_limit: float = 0.05  # m s, componentwise anti-windup clamp
    lead_max: float = 0.0015  # m the carry reference may lead the observed cube
    lead_rot_max: float = 0.25  # rad of allowed rotational lead
    anchor_radius: float = 0.004  # m to goal at which the reference pins to it
    anchor_angle: float = 0.1  # rad to goal orientation for the rotational pin

    def __post_init__(self):
        if self.kp <= 0:
            raise ValueError("kp must be positive")
        if self.gain_clip < 1.0:
            raise ValueError("gain_clip must be at least 1")
        if self.gain_growth_rate < 0:
            raise ValueError("gain_growth_rate must be non-negative")


@dataclass
class CpcState:
    """Value-threaded controller state (mutated in place each tick)."""

    phase: str = REACH
    integral_error: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    gain_multiplier: float = 1.0
    tick_count: int = 0
    fallback_count: int = 0
    phase_start: float = 0.0
    q_pre: np.ndarray | None = None
    q_squeeze: np.ndarray | None = None
    q_grasp_entry: np.ndarray | None = None
    press_depths: np.ndarray | None = None
    reach_path: object | None = None
    pre_tips: np.ndarray | None = None
    move_start_pos: np.ndarray | None = None
    move_start_quat: np.ndarray | None = None
    move_start_time: float = 0.0
    move_duration: float = 0.0
    sched_window_start: float = 0.0
    sched_best: float = math.inf
    sched_prev_best: float = math.inf


def update_gain_schedule(state: CpcState, params: CpcParams, error_stagnant: bool) -> CpcState:
    """One scheduling-interval update of the gain multiplier.

    Stagnant error grows the multiplier by exp(rate * interval) up to the
    clip; an error that resumed decreasing resets it to one.
    """
    if error_stagnant:
        state.gain_multiplier = min(
            state.gain_multiplier * math.exp(params.gain_growth_rate * params.schedule_interval),
            params.gain_clip,
        )
    else:
        state.gain_multiplier = 1.0
    return state


def _enter_phase(state: CpcState, phase: str, now: float):
    state.phase = phase
    state.phase_start = now
    state.integral_error[:] = 0.0
    state.gain_multiplier = 1.0
    state.sched_window_start = now
    state.sched_best = math.inf
    state.sched_prev_best = math.inf


def cpc_tick(obs, grasp, task: TaskSpec, params: CpcParams, state: CpcState, models):
    """One 200 Hz control step; returns (torque (9,), state)."""
    now = obs.time
    dt = 1.0 / params.control_rate_hz
    cube = obs.cube

    if state.q_pre is None:
        state.press_depths = (
            contact_press_weights(grasp) * params.squeeze_depth - params.tip_radius
        )
        state.reach_path, state.q_pre, state.q_squeeze = approach_path(
            models, grasp, cube.position, cube.orientation, obs.joint_state.q,
            params.tip_radius + params.pregrasp_offset,
            state.press_depths,
        )
        state.pre_tips = np.stack(
            [forward_kinematics(m, state.q_pre[3 * i : 3 * i + 3]) for i, m in enumerate(models)]
        )
        state.phase_start = now
        state.sched_window_start = now

    # phase machine ------------------------------------------------------
    if state.phase == REACH:
        # tip-level gate: a loose joint gate lets one finger enter the close
        # far behind the others, and the first pair to land spins the cube
        tip_err = max_tip_error(obs, state.pre_tips)
        duration = max(params.reach_duration, 1e-9)
        elapsed = now - state.phase_start
        if (elapsed >= duration and tip_err < params.reach_tolerance) or (
            elapsed > params.reach_timeout
        ):
            _enter_phase(state, GRASP, now)
            state.q_grasp_entry = np.array(obs.joint_state.q)
        else:
            s = min(1.0, elapsed / duration)
            s = s * s * (3.0 - 2.0 * s)
            q_target = state.reach_path.q_at(s)
            tau = joint_pd_torque(models, obs, q_target, params.reach_kp, params.reach_kd)
            state.tick_count += 1
            return clamp_torque(tau, 0.397), state
    if state.phase == GRASP:
        s = min(1.0, (now - state.phase_start) / max(params.grasp_ramp, 1e-9))
        closed = sum(c.in_contact for c in obs.contacts) >= 2
        if (s >= 1.0 and closed) or (now - state.phase_start > params.grasp_timeout):
            state.move_start_pos = np.array(cube.position)
            state.move_start_quat = np.array(cube.orientation)
            state.move_start_time = now
            dist = float(np.linalg.norm(task.goal.position - state.move_start_pos))
            if task.level == 4:
                ang = rotation_angle_between(state.move_start_quat, task.goal.orientation)
            else:
                ang = 0.0
            state.move_duration = max(
                dist / params.approach_speed, ang / params.rotation_speed, 1e-9
            )
            _enter_phase(state, MOVE, now)
        else:
            # close along the IK branch: a Cartesian pull this large can walk
            # the yaw joint onto its hard stop, where the transpose map has no
            # torque left in the pressing direction and the finger pins open
            w = s * s * (3.0 - 2.0 * s)
            q_target = (1.0 - w) * state.q_grasp_entry + w * state.q_squeeze
            tau = joint_pd_torque(models, obs, q_target, params.reach_kp, params.reach_kd)
            state.tick_count += 1
            return clamp_torque(tau, 0.397), state
    hold = False
    if state.phase == MOVE:
        s = min(1.0, (now - state.move_start_time) / state.move_duration)
        pos = (1.0 - s) * state.move_start_pos + s * task.goal.position
        # a purely clock-driven reference walks away from a lagging cube and
        # the fingers let go of it; clamp its lead over the observed pose
        lead = pos - cube.position
        lead_norm = float(np.linalg.norm(lead))
        if lead_norm > params.lead_max:
            pos = cube.position + lead * (params.lead_max / lead_norm)
        # a cube-relative reference never comes to rest: contact friction is
        # viscous, so the tip-cube-target formation can creep as a unit with
        # zero restoring force.  Near the goal, pin the reference to the goal
        # itself; world-fixed tips brake the cube instead of traveling with it
        pos_hold = (
            float(np.linalg.norm(task.goal.position - cube.position)) <= params.anchor_radius
        )
        if pos_hold:
            pos = np.asarray(task.goal.position, dtype=float)
        hold = pos_hold
        if task.level == 4:
            rot_hold = (
                rotation_angle_between(cube.orientation, task.goal.orientation)
                <= params.anchor_angle
            )
            quat = quat_slerp(state.move_start_quat, task.goal.orientation, s)
            ang = rotation_angle_between(cube.orientation, quat)
            if ang > params.lead_rot_max:
                quat = quat_slerp(cube.orientation, quat, params.lead_rot_max / ang)
            if rot_hold:
                quat = np.asarray(task.goal.orientation, dtype=float)
            hold = pos_hold and rot_hold
        else:
            quat = state.move_start_quat
        targets = squeeze_points(grasp, pos, quat, state.press_depths)
        err = max_tip_error(obs, targets)

    # gain schedule ------------------------------------------------------
    # suspended during the anchored hold: the schedule exists to un-stick
    # fingers en route, and resetting the multiplier mid-hold slackens the
    # press enough for the cube to slip back out of the anchor basin
    if hold:
        state.sched_best = math.inf
        state.sched_window_start = now
    else:
        state.sched_best = min(state.sched_best, err)
        if now - state.sched_window_start >= params.schedule_interval - 1e-9:
            stagnant = (state.sched_prev_best - state.sched_best) < params.stagnation_threshold
            update_gain_schedule(state, params, stagnant)
            state.sched_prev_best = state.sched_best
            state.sched_best = math.inf
            state.sched_window_start = now

    # PID through the damped map ------------------------------------------
    e = targets - obs.fingertips.pos
    if state.phase == MOVE:
        # integral action only once the grasp is set; windup during the
        # close would inflate the squeeze into a cube-spinning couple
        state.integral_error += e * dt
    np.clip(
        state.integral_error, -params.integral_limit, params.integral_limit,
        out=state.integral_error,
    )
    gm = state.gain_multiplier
    q = obs.joint_state.q
    tau = np.empty(9)
    for i, m in enumerate(models):
        qi = q[3 * i : 3 * i + 3]
        force = gm * (params.kp * e[i] - params.kd * obs.fingertips.vel[i]) + params.ki * state.integral_error[i]
        J = jacobian(m, qi)
        cond = np.linalg.cond(J)
        if not np.isfinite(cond) or cond > COND_FALLBACK:
            t = damped_pinv_solve(J, force, max(params.lam, FALLBACK_LAMBDA))
            state.fallback_count += 1
        else:
            t = J.T @ force
        g = gravity_compensation(m, qi)
        # direction-preserving saturation: hard clamping would distort the
        # commanded force direction and turn the carry into pure squeeze
        head = 0.39 - float(np.max(np.abs(g)))
        peak = float(np.max(np.abs(t)))
        if peak > head > 0.0:
            t = t * (head / peak)
        tau[3 * i : 3 * i + 3] = t + g

    state.tick_count += 1
    return clamp_torque(tau, 0.397), state


class CpcController:
    """Episode-facing wrapper: owns params, state and the grasp choice."""

    def __init__(self, models, task: TaskSpec, grasp=None, params: CpcParams | None = None):
        self.models = models
        self.task = task
        self.params = params if params is not None else CpcParams()
        self.grasp = grasp
        self.state = CpcState()
        self.control_rate_hz = self.params.control_rate_hz

    def reset(self, obs, grasp=None):
        if grasp is not None:
            self.grasp = grasp
        if self.grasp is None:
            raise ValueError("CPC needs a grasp before the first tick")
        self.state = CpcState()

    def tick(self, obs) -> np.ndarray:
        tau, self.state = cpc_tick(obs, self.grasp, self.task, self.params, self.state, self.models)
        return tau
