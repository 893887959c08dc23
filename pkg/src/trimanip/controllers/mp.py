"""Grasp-and-motion-planning controller (MP).

Plans once at episode start: pick a grasp (heuristic candidates first, then
random force-closure samples), run an RRT over cube poses with the grasp
held fixed, smooth the path, and precompute joint configurations for every
waypoint.  Execution is a joint-space PD trajectory follower that never
looks at the cube pose; after the plan finishes, straight-line waypoints
toward the goal are appended from fresh cube observations until the
position error is small or the refinement budget runs out.

The planning space is cube position plus yaw; start and goal tilt are
blended by a swing interpolation tied to yaw progress, so upright-cube
tasks plan in 4 dimensions instead of full SE(3).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from ..geometry import (
    quat_from_yaw,
    quat_mul,
    quat_slerp,
    swing_twist_z,
    yaw_of_quat,
)
from ..grasps import (
    _VERTICAL_FACES,
    _face_vectors,
    Contact,
    Grasp,
    SamplingExhausted,
    assign_fingers,
    check_reachability,
    sample_force_closure_grasp,
)
from ..kinematics import ik_solve
from ..tasks import Pose
from .common import (
    clamp_torque,
    gravity_only,
    max_tip_error,
    pre_grasp_points,
    reach_torque,
    squeeze_points,
)


class PlanTimeout(Exception):
    """RRT iteration budget exhausted for one grasp; try the next."""


class PlanningFailed(Exception):
    """All grasp candidates and the sampling budget were exhausted."""


class IkFailedOnAppend(Exception):
    """Refinement IK failed; .plan carries the best plan built so far."""

    def __init__(self, plan):
        super().__init__("IK failed while appending refinement waypoints")
        self.plan = plan


@dataclass(frozen=True)
class TaskSpaceNode:
    """A cube pose plus the joint configuration realizing the grasp there."""

    cube_pose: Pose
    joint_config: np.ndarray  # (9,)


@dataclass(frozen=True)
class MotionPlan:
    """An executable waypoint sequence for one grasp.

    squeeze_configs are per-waypoint joint targets pressed slightly into the
    cube faces; execution tracks those to keep grip while joint_config keeps
    the exact-contact configuration the validity invariants are stated on.
    """

    grasp: Grasp
    waypoints: tuple[TaskSpaceNode, ...]
    waypoint_dwell: float
    squeeze_configs: np.ndarray | None = None  # (n_waypoints, 9)

    def __post_init__(self):
        if len(self.waypoints) == 0:
            raise ValueError("a plan needs at least one waypoint")
        if self.waypoint_dwell <= 0:
            raise ValueError("waypoint_dwell must be positive")


@dataclass
class MpParams:
    """Planner and execution knobs; waypoint_dwell and goal_append_step are
    the tuner-exposed pair."""

    waypoint_dwell: float = 0.2
    goal_append_step: float = 0.01
    pd_kp: float = 4.0
    pd_kd: float = 0.1
    rrt_step: float = 0.02  # m per extension
    rrt_rot_step: float = 0.2  # rad per extension
    rrt_goal_bias: float = 0.2
    rrt_max_iters: int = 1500
    orientation_weight: float = 0.1  # m per rad in the tree metric
    smoothing_attempts: int = 50
    max_sampled_grasps: int = 20
    squeeze_depth: float = 0.006
    pregrasp_offset: float = 0.035
    approach_kp: float = 4.0
    approach_kd: float = 0.4
    approach_tolerance: float = 0.012
    approach_timeout: float = 2.5
    close_duration: float = 0.8
    settle_duration: float = 0.4
    refine_tolerance: float = 0.005
    refine_rounds: int = 3
    control_rate_hz: float = 500.0
    lam: float = 1e-4
    sample_radius: float = 0.165
    sample_z: tuple[float, float] = (0.03, 0.16)
    yaw_margin: float = 0.4

    def __post_init__(self):
        if self.waypoint_dwell <= 0 or self.goal_append_step <= 0:
            raise ValueError("dwell and append step must be positive")
        if not 0.0 <= self.rrt_goal_bias <= 1.0:
            raise ValueError("rrt_goal_bias must lie in [0, 1]")
        if min(self.pd_kp, self.pd_kd, self.rrt_step, self.rrt_rot_step) <= 0:
            raise ValueError("PD gains and RRT steps must be positive")


def pd_torque(q_target: np.ndarray, q: np.ndarray, dq: np.ndarray,
              kp: float, kd: float) -> np.ndarray:
    """Joint-space PD law, pre-clamp and without gravity terms."""
    return kp * (np.asarray(q_target) - np.asarray(q)) - kd * np.asarray(dq)


# ---------------------------------------------------------------------------
# planning space
# ---------------------------------------------------------------------------


def _wrap(a: float) -> float:
    return math.atan2(math.sin(a), math.cos(a))


@dataclass(frozen=True)
class _PlanFrame:
    """Fixed data of one planning problem: endpoints split into yaw and
    swing so a (position, yaw-offset) pair maps back to a full pose."""

    start_pos: np.ndarray
    goal_pos: np.ndarray
    start_yaw: float
    dyaw: float
    start_swing: np.ndarray
    goal_swing: np.ndarray

    def orientation_at(self, pos: np.ndarray, u: float) -> np.ndarray:
        if abs(self.dyaw) > 1e-9:
            s = min(1.0, max(0.0, u / self.dyaw))
        else:
            span = float(np.linalg.norm(self.goal_pos - self.start_pos))
            if span < 1e-12:
                s = 1.0
            else:
                s = min(1.0, max(0.0, float(
                    np.linalg.norm(pos - self.start_pos)) / span))
        swing = quat_slerp(self.start_swing, self.goal_swing, s)
        return quat_mul(swing, quat_from_yaw(self.start_yaw + u))


def _make_frame(start: Pose, goal: Pose) -> _PlanFrame:
    start_swing, _ = swing_twist_z(start.orientation)
    goal_swing, _ = swing_twist_z(goal.orientation)
    start_yaw = yaw_of_quat(start.orientation)
    goal_yaw = yaw_of_quat(goal.orientation)
    return _PlanFrame(
        start_pos=np.asarray(start.position, dtype=float),
        goal_pos=np.asarray(goal.position, dtype=float),
        start_yaw=start_yaw,
        dyaw=_wrap(goal_yaw - start_yaw),
        start_swing=start_swing,
        goal_swing=goal_swing,
    )


class _PoseStandIn:
    """Minimal cube-like object for reachability checks at a planned pose."""

    __slots__ = ("position", "orientation")

    def __init__(self, position, orientation):
        self.position = position
        self.orientation = orientation


def _validate(grasp, frame: _PlanFrame, pos: np.ndarray, u: float, models,
              q_init: np.ndarray | None) -> np.ndarray | None:
    """Joint config (9,) realizing the grasp at (pos, u), or None."""
    if pos[2] < 0.02 or pos[2] > 0.25:
        return None
    if math.hypot(pos[0], pos[1]) > 0.19:
        return None
    quat = frame.orientation_at(pos, u)
    feas = check_reachability(grasp, _PoseStandIn(pos, quat), models, q_init=q_init)
    if not feas.reachable:
        return None
    return feas.ik_solutions.reshape(9)


# ---------------------------------------------------------------------------
# RRT
# ---------------------------------------------------------------------------


def _metric(dp: np.ndarray, du: float, w: float) -> float:
    return float(np.linalg.norm(dp)) + w * abs(du)


def _segment_count(dp: np.ndarray, du: float, params: MpParams) -> int:
    return max(
        1,
        int(math.ceil(max(
            float(np.linalg.norm(dp)) / params.rrt_step,
            abs(du) / params.rrt_rot_step,
        ))),
    )


def _shortcut(path, grasp, frame, models, rng, params: MpParams):
    """Greedy shortcut smoothing; every surviving node stays validated."""
    for _ in range(params.smoothing_attempts):
        if len(path) < 3:
            break
        i = int(rng.integers(0, len(path) - 2))
        j = int(rng.integers(i + 2, len(path)))
        pa, ua, qa = path[i]
        pb, ub, _ = path[j]
        n = _segment_count(pb - pa, ub - ua, params)
        if n >= j - i:
            continue
        inter = []
        q_prev = qa
        ok = True
        for k in range(1, n):
            t = k / n
            p = pa + t * (pb - pa)
            u = ua + t * (ub - ua)
            q = _validate(grasp, frame, p, u, models, q_prev)
            if q is None:
                ok = False
                break
            inter.append((p, u, q))
            q_prev = q
        if ok:
            path = path[: i + 1] + inter + path[j:]
    return path


def rrt_plan(start: Pose, goal: Pose, grasp: Grasp, models, rng,
             params: MpParams) -> list[TaskSpaceNode]:
    """Plan a grasp-maintaining waypoint path from start to goal pose.

    Tree nodes are (position, yaw-offset) pairs validated by grasp
    reachability; tilt follows the swing interpolation of the frame.  Greedy
    shortcutting runs on the extracted path.  Raises PlanTimeout when the
    iteration budget is exhausted, which callers treat as "try another
    grasp".
    """
    frame = _make_frame(start, goal)
    w = params.orientation_weight
    q0 = _validate(grasp, frame, frame.start_pos, 0.0, models, None)
    if q0 is None:
        raise PlanTimeout("start pose is not valid for this grasp")

    goal_dp = frame.goal_pos - frame.start_pos
    if _metric(goal_dp, frame.dyaw, w) < 1e-9:
        return [TaskSpaceNode(cube_pose=start, joint_config=q0)]

    nodes = [(frame.start_pos.copy(), 0.0, q0, -1)]  # pos, u, q, parent
    u_lo = min(0.0, frame.dyaw) - params.yaw_margin
    u_hi = max(0.0, frame.dyaw) + params.yaw_margin
    goal_idx = -1

    for _ in range(params.rrt_max_iters):
        if rng.random() < params.rrt_goal_bias:
            sample_p, sample_u = frame.goal_pos, frame.dyaw
        else:
            r = params.sample_radius * math.sqrt(rng.random())
            az = rng.uniform(0.0, 2.0 * math.pi)
            sample_p = np.array([
                r * math.cos(az),
                r * math.sin(az),
                rng.uniform(*params.sample_z),
            ])
            sample_u = rng.uniform(u_lo, u_hi)

        best_i, best_d = 0, math.inf
        for i, (p, u, _, _) in enumerate(nodes):
            d = _metric(sample_p - p, sample_u - u, w)
            if d < best_d:
                best_d, best_i = d, i
        near_p, near_u, near_q, _ = nodes[best_i]

        dp = sample_p - near_p
        n = float(np.linalg.norm(dp))
        if n > params.rrt_step:
            dp = dp * (params.rrt_step / n)
        du = max(-params.rrt_rot_step, min(params.rrt_rot_step, sample_u - near_u))
        if _metric(dp, du, w) < 1e-12:
            continue
        new_p = near_p + dp
        new_u = near_u + du
        q = _validate(grasp, frame, new_p, new_u, models, near_q)
        if q is None:
            continue
        nodes.append((new_p, new_u, q, best_i))

        gdp = frame.goal_pos - new_p
        gdu = frame.dyaw - new_u
        if (np.linalg.norm(gdp) <= params.rrt_step + 1e-12
                and abs(gdu) <= params.rrt_rot_step + 1e-12):
            qg = _validate(grasp, frame, frame.goal_pos, frame.dyaw, models, q)
            if qg is not None:
                nodes.append((frame.goal_pos.copy(), frame.dyaw, qg, len(nodes) - 1))
                goal_idx = len(nodes) - 1
                break
    if goal_idx < 0:
        raise PlanTimeout("RRT iteration budget exhausted")

    path = []
    i = goal_idx
    while i >= 0:
        p, u, q, parent = nodes[i]
        path.append((p, u, q))
        i = parent
    path.reverse()
    path = _shortcut(path, grasp, frame, models, rng, params)

    waypoints = []
    last = len(path) - 1
    for k, (p, u, q) in enumerate(path):
        if k == 0:
            pose = start
        elif k == last:
            pose = goal
        else:
            pose = Pose(position=p, orientation=frame.orientation_at(p, u))
        waypoints.append(TaskSpaceNode(cube_pose=pose, joint_config=q))
    return waypoints


# ---------------------------------------------------------------------------
# grasp candidate iteration
# ---------------------------------------------------------------------------


def _build_grasp(contacts, cube, models, side: float) -> Grasp:
    g = Grasp(contacts=tuple(contacts), finger_assignment=(0, 1, 2), cube_side=side)
    pts = g.contact_points_world(cube.position, cube.orientation)
    assignment = assign_fingers(pts, cube.position, models)
    return Grasp(contacts=tuple(contacts), finger_assignment=assignment, cube_side=side)


def _center_variants(cube, models, side: float):
    """All four center-of-three contact sets (one vertical face left free)."""
    h = 0.5 * side
    for free in _VERTICAL_FACES:
        contacts = []
        for face in _VERTICAL_FACES:
            if face == free:
                continue
            out, inward = _face_vectors(face)
            contacts.append(Contact(face_id=face, point=out * h, normal=inward))
        yield _build_grasp(contacts, cube, models, side)


def _opposite_variants(cube, models, side: float):
    """All four two-on-one-face, one-opposite contact sets."""
    h = 0.5 * side
    opposite = {"+x": "-x", "-x": "+x", "+y": "-y", "-y": "+y"}
    for doubled in _VERTICAL_FACES:
        out_d, in_d = _face_vectors(doubled)
        other_axis = 1 - int(np.argmax(np.abs(out_d)))
        offset = np.zeros(3)
        offset[other_axis] = side / 4.0
        out_o, in_o = _face_vectors(opposite[doubled])
        contacts = [
            Contact(face_id=doubled, point=out_d * h + offset, normal=in_d),
            Contact(face_id=doubled, point=out_d * h - offset, normal=in_d),
            Contact(face_id=opposite[doubled], point=out_o * h, normal=in_o),
        ]
        yield _build_grasp(contacts, cube, models, side)


def compute_squeeze_configs(waypoints, grasp: Grasp, models,
                            depth: float) -> np.ndarray:
    """Per-waypoint joint targets pressed depth meters into the faces.

    Falls back to the exact-contact configuration for any finger whose
    pressed target is not reachable.
    """
    out = np.empty((len(waypoints), 9))
    for k, node in enumerate(waypoints):
        targets = squeeze_points(
            grasp, node.cube_pose.position, node.cube_pose.orientation, depth
        )
        q = node.joint_config.copy()
        for i, m in enumerate(models):
            res = ik_solve(m, targets[i], q_init=node.joint_config[3 * i : 3 * i + 3])
            if res.converged:
                q[3 * i : 3 * i + 3] = res.q
        out[k] = q
    return out


def plan_with_grasps(start: Pose, goal: Pose, cube, models, rng,
                     params: MpParams) -> MotionPlan:
    """Iterate grasp candidates until one admits a plan.

    Candidate order: the four center-of-three face variants, the four
    two-on-opposite-faces variants, then random force-closure samples up to
    the sampling budget.  The first grasp whose RRT succeeds wins.
    """
    side = getattr(cube, "cube_side", 0.065)

    def candidates():
        yield from _center_variants(cube, models, side)
        yield from _opposite_variants(cube, models, side)
        for _ in range(params.max_sampled_grasps):
            try:
                yield sample_force_closure_grasp(cube, rng, models=models)
            except SamplingExhausted:
                return

    for grasp in candidates():
        feas = check_reachability(grasp, cube, models)
        if not feas.reachable:
            continue
        try:
            waypoints = rrt_plan(start, goal, grasp, models, rng, params)
        except PlanTimeout:
            continue
        squeeze = compute_squeeze_configs(waypoints, grasp, models, params.squeeze_depth)
        return MotionPlan(
            grasp=grasp,
            waypoints=tuple(waypoints),
            waypoint_dwell=params.waypoint_dwell,
            squeeze_configs=squeeze,
        )
    raise PlanningFailed("no grasp candidate admitted a plan")


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------


@dataclass
class MpExecState:
    """Waypoint scheduling state; a pure function of time once started."""

    base_index: int = 0
    start_time: float | None = None
    current_index: int = 0
    finished: bool = False


def execute_plan(plan: MotionPlan, obs, params: MpParams, state: MpExecState,
                 models):
    """Joint PD toward the scheduled waypoint; open-loop in cube pose.

    Reads only obs.time and obs.joint_state, so perturbing the cube
    observation cannot change the output.
    """
    if state.start_time is None:
        state.start_time = obs.time
    idx = state.base_index + int((obs.time - state.start_time) / plan.waypoint_dwell)
    if idx >= len(plan.waypoints):
        idx = len(plan.waypoints) - 1
        state.finished = True
    state.current_index = idx
    if plan.squeeze_configs is not None:
        target = plan.squeeze_configs[idx]
    else:
        target = plan.waypoints[idx].joint_config
    js = obs.joint_state
    tau = pd_torque(target, js.q, js.dq, params.pd_kp, params.pd_kd)
    tau = tau + gravity_only(models, obs)
    return clamp_torque(tau, 0.397), state


def refine_to_goal(plan: MotionPlan, obs_cube, goal: Pose, models,
                   params: MpParams, match_orientation: bool = False) -> MotionPlan:
    """Append straight-line waypoints from the observed cube to the goal.

    Spacing is goal_append_step; orientation is held at the observed value
    unless match_orientation blends it toward the goal orientation.  Raises
    IkFailedOnAppend carrying the best extended plan when IK fails mid-way.
    """
    cur = np.asarray(obs_cube.position, dtype=float)
    err = float(np.linalg.norm(cur - goal.position))
    if err < params.refine_tolerance:
        return plan
    n = max(1, int(math.ceil(err / params.goal_append_step)))
    ori_start = np.asarray(obs_cube.orientation, dtype=float)
    ori_end = goal.orientation if match_orientation else ori_start

    new_nodes = []
    q_prev = plan.waypoints[-1].joint_config
    failed = False
    for k in range(1, n + 1):
        t = k / n
        pos = cur + t * (np.asarray(goal.position) - cur)
        quat = quat_slerp(ori_start, ori_end, t)
        feas = check_reachability(plan.grasp, _PoseStandIn(pos, quat), models, q_init=q_prev)
        if not feas.reachable:
            failed = True
            break
        q = feas.ik_solutions.reshape(9)
        new_nodes.append(TaskSpaceNode(
            cube_pose=Pose(position=pos, orientation=quat), joint_config=q
        ))
        q_prev = q

    if not new_nodes and failed:
        raise IkFailedOnAppend(plan)
    squeeze = compute_squeeze_configs(new_nodes, plan.grasp, models, params.squeeze_depth)
    merged = replace(
        plan,
        waypoints=plan.waypoints + tuple(new_nodes),
        squeeze_configs=(
            np.vstack([plan.squeeze_configs, squeeze])
            if plan.squeeze_configs is not None else None
        ),
    )
    if failed:
        raise IkFailedOnAppend(merged)
    return merged


# ---------------------------------------------------------------------------
# episode-facing wrapper
# ---------------------------------------------------------------------------

_APPROACH = "Approach"
_CLOSE = "Close"
_EXECUTE = "Execute"
_SETTLE = "Settle"
_HOLD = "Hold"


class MpController:
    """Plan at reset, then follow the waypoints with joint PD.

    Phases: Approach pre-grasp points in task space, Close onto the first
    waypoint's squeeze configuration, Execute the plan open-loop, Settle,
    then up to refine_rounds of observe-append-execute refinement, and Hold.
    """

    def __init__(self, models, task, grasp=None, params: MpParams | None = None):
        self.models = models
        self.task = task
        self.params = params if params is not None else MpParams()
        self.grasp = grasp
        self.plan: MotionPlan | None = None
        self.control_rate_hz = self.params.control_rate_hz
        self._phase = _APPROACH
        self._phase_start = 0.0
        self._exec = MpExecState()
        self._rounds = 0
        self._approach_targets = None

    def reset(self, obs, grasp=None, rng=None):
        if rng is None:
            rng = np.random.default_rng(0)
        if grasp is not None:
            self.grasp = grasp
        start = Pose(
            position=np.array(obs.cube.position),
            orientation=np.array(obs.cube.orientation),
        )
        if self.grasp is not None:
            waypoints = rrt_plan(start, self.task.goal, self.grasp, self.models, rng, self.params)
            squeeze = compute_squeeze_configs(
                waypoints, self.grasp, self.models, self.params.squeeze_depth
            )
            self.plan = MotionPlan(
                grasp=self.grasp,
                waypoints=tuple(waypoints),
                waypoint_dwell=self.params.waypoint_dwell,
                squeeze_configs=squeeze,
            )
        else:
            self.plan = plan_with_grasps(
                start, self.task.goal, obs.cube, self.models, rng, self.params
            )
            self.grasp = self.plan.grasp
        first = self.plan.waypoints[0].cube_pose
        self._approach_targets = pre_grasp_points(
            self.grasp, first.position, first.orientation, self.params.pregrasp_offset
        )
        self._phase = _APPROACH
        self._phase_start = obs.time
        self._exec = MpExecState()
        self._rounds = 0

    def _hold_torque(self, obs):
        if self.plan.squeeze_configs is not None:
            target = self.plan.squeeze_configs[-1]
        else:
            target = self.plan.waypoints[-1].joint_config
        js = obs.joint_state
        tau = pd_torque(target, js.q, js.dq, self.params.pd_kp, self.params.pd_kd)
        return clamp_torque(tau + gravity_only(self.models, obs), 0.397)

    def tick(self, obs) -> np.ndarray:
        p = self.params
        now = obs.time
        if self._phase == _APPROACH:
            err = max_tip_error(obs, self._approach_targets)
            if err < p.approach_tolerance or now - self._phase_start > p.approach_timeout:
                self._phase = _CLOSE
                self._phase_start = now
            else:
                tau = reach_torque(
                    self.models, obs, self._approach_targets,
                    p.approach_kp, p.approach_kd, p.lam,
                )
                return clamp_torque(tau, 0.397)
        if self._phase == _CLOSE:
            if now - self._phase_start > p.close_duration:
                self._phase = _EXECUTE
                self._exec = MpExecState()
            else:
                target = (
                    self.plan.squeeze_configs[0]
                    if self.plan.squeeze_configs is not None
                    else self.plan.waypoints[0].joint_config
                )
                js = obs.joint_state
                tau = pd_torque(target, js.q, js.dq, p.pd_kp, p.pd_kd)
                return clamp_torque(tau + gravity_only(self.models, obs), 0.397)
        if self._phase == _EXECUTE:
            tau, self._exec = execute_plan(self.plan, obs, p, self._exec, self.models)
            if self._exec.finished:
                self._phase = _SETTLE
                self._phase_start = now
            return tau
        if self._phase == _SETTLE:
            if now - self._phase_start > p.settle_duration:
                err = float(np.linalg.norm(obs.cube.position - self.task.goal.position))
                if self._rounds < p.refine_rounds and err >= p.refine_tolerance:
                    self._rounds += 1
                    old_len = len(self.plan.waypoints)
                    try:
                        self.plan = refine_to_goal(
                            self.plan, obs.cube, self.task.goal, self.models, p,
                            match_orientation=self.task.level == 4,
                        )
                    except IkFailedOnAppend as e:
                        self.plan = e.plan
                        self._rounds = p.refine_rounds
                    if len(self.plan.waypoints) > old_len:
                        self._phase = _EXECUTE
                        self._exec = MpExecState(base_index=old_len)
                    else:
                        self._phase = _HOLD
                else:
                    self._phase = _HOLD
            return self._hold_torque(obs)
        return self._hold_torque(obs)
