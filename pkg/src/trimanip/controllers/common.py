"""Helpers shared by the controllers: torque maps, reach machinery, grasps."""

from __future__ import annotations

import math

import numpy as np

from ..geometry import quat_to_matrix
from ..kinematics import (
    FingerModel,
    damped_pinv_solve,
    gravity_compensation,
    jacobian,
)

REACH = "Reach"
GRASP = "Grasp"
MOVE = "Move"
MANIPULATE = "Manipulate"

COND_FALLBACK = 1e8  # Jacobian condition number that triggers safe damping
FALLBACK_LAMBDA = 1e-3


def clamp_torque(tau: np.ndarray, tau_max: float) -> np.ndarray:
    return np.clip(tau, -tau_max, tau_max)


def force_to_torque(
    J: np.ndarray, force: np.ndarray, lam: float
) -> tuple[np.ndarray, bool]:
    """Map a fingertip force through the damped pseudo-inverse.

    Near-singular Jacobians (condition number beyond COND_FALLBACK) switch to
    a stiffer damping instead of failing; the second return value flags that
    the fallback fired.
    """
    cond = np.linalg.cond(J)
    if not np.isfinite(cond) or cond > COND_FALLBACK:
        return damped_pinv_solve(J, force, max(lam, FALLBACK_LAMBDA)), True
    return damped_pinv_solve(J, force, lam), False


def inverse_transpose(J: np.ndarray, lam: float) -> tuple[np.ndarray, bool]:
    """J^-T, or its damped counterpart (J lam-pinv)^T when J is near singular."""
    cond = np.linalg.cond(J)
    if not np.isfinite(cond) or cond > COND_FALLBACK:
        Jp = J.T @ np.linalg.inv(J @ J.T + max(lam, FALLBACK_LAMBDA) * np.eye(3))
        return Jp.T, True
    return np.linalg.inv(J).T, False


def pre_grasp_points(grasp, cube_position, cube_orientation, offset: float) -> np.ndarray:
    """World points a little outside each contact, ordered by finger."""
    R = quat_to_matrix(np.asarray(cube_orientation, dtype=float))
    p = np.asarray(cube_position, dtype=float)
    off = np.broadcast_to(np.asarray(offset, dtype=float), (len(grasp.contacts),))
    pts = np.empty((3, 3))
    for finger, ci in enumerate(grasp.finger_assignment):
        c = grasp.contacts[ci]
        pts[finger] = p + R @ (c.point - off[ci] * c.normal)
    return pts


def squeeze_points(grasp, cube_position, cube_orientation, depth) -> np.ndarray:
    """World targets pushed a little into the cube, ordered by finger.

    depth may be a scalar or a per-contact array.
    """
    return pre_grasp_points(grasp, cube_position, cube_orientation, -np.asarray(depth))


def contact_press_weights(grasp, floor: float = 0.3, reg: float = 0.1) -> np.ndarray:
    """Per-contact press scale that balances the net normal force.

    An unpaired contact normal (tripod grasps have one) is reacted only by
    the other fingers' contact friction, so pressing it as hard as the
    opposed pair drags the cube sideways for the whole hold.  Solved as a
    box-constrained least squares over weights in [floor, 1]: minimize the
    net normal force with a mild pull toward full press, so symmetric
    grasps keep weight 1 everywhere and unpaired normals drop to the floor.
    """
    from scipy.optimize import lsq_linear

    N = np.stack([c.normal for c in grasp.contacts], axis=1)
    n = N.shape[1]
    A = np.vstack([N, reg * np.eye(n)])
    b = np.concatenate([np.zeros(3), reg * np.ones(n)])
    return lsq_linear(A, b, bounds=(floor, 1.0)).x


def anchored_squeeze_targets(
    grasp, ref_position, ref_orientation, cube_position, cube_orientation, depth
) -> np.ndarray:
    """Squeeze targets pressing on the observed cube, slide-anchored to a
    reference pose.

    Targets that track the observed pose in full let the grasp surf: any
    unbalanced press component is reacted by contact friction alone, and
    fingers that velocity-match the cube provide none, so cube and fingers
    drift off together.  The component along each contact normal follows
    the observed face (constant commanded interference); the tangential
    part follows the slowly advancing carry reference, which the drift then
    has to drag through the fingers' position gains.
    """
    ref = squeeze_points(grasp, ref_position, ref_orientation, depth)
    obs_pts = squeeze_points(grasp, cube_position, cube_orientation, depth)
    R = quat_to_matrix(np.asarray(cube_orientation, dtype=float))
    out = np.empty((3, 3))
    for finger, ci in enumerate(grasp.finger_assignment):
        n = R @ grasp.contacts[ci].normal
        d = obs_pts[finger] - ref[finger]
        out[finger] = ref[finger] + n * float(n @ d)
    return out


def reach_torque(
    models: tuple[FingerModel, ...],
    obs,
    targets: np.ndarray,
    kp: float,
    kd: float,
    lam: float,
) -> tuple[np.ndarray, bool]:
    """Cartesian P-D toward per-finger targets, plus gravity compensation.

    The Cartesian force kp * (target - tip) - kd * tip_vel goes through the
    damped pseudo-inverse per finger.  This is the approach-phase workhorse
    for both reactive controllers.
    """
    q = obs.joint_state.q
    tips = obs.fingertips.pos
    vels = obs.fingertips.vel
    tau = np.empty(9)
    flagged = False
    for i, m in enumerate(models):
        qi = q[3 * i : 3 * i + 3]
        f = kp * (targets[i] - tips[i]) - kd * vels[i]
        J = jacobian(m, qi)
        t, flag = force_to_torque(J, f, lam)
        flagged = flagged or flag
        tau[3 * i : 3 * i + 3] = t + gravity_compensation(m, qi)
    return tau, flagged


def pregrasp_configs(
    models,
    grasp,
    cube_position,
    cube_orientation,
    offset: float,
    depth: float,
    q_contact: np.ndarray | None = None,
):
    """Joint configs for the approach point and the pressed grasp.

    Both are solved on the same IK branch: the squeeze configuration first
    (warm-started from a contact solution when available), then the
    pre-grasp configuration warm-started from the squeeze one.  Approaching
    in joint space through q_pre avoids the elbow-branch flip that traps a
    Cartesian servo at the yaw limit when a pre-grasp point falls outside
    the finger's reachable cone.

    Returns:
        (q_pre (9,), q_squeeze (9,))
    """
    from ..kinematics import ik_solve

    sq = squeeze_points(grasp, cube_position, cube_orientation, depth)
    pre = pre_grasp_points(grasp, cube_position, cube_orientation, offset)
    q_p = np.empty(9)
    q_s = np.empty(9)
    for i, m in enumerate(models):
        warm = None if q_contact is None else q_contact[3 * i : 3 * i + 3]
        rs = ik_solve(m, sq[i], q_init=warm)
        q_s[3 * i : 3 * i + 3] = rs.q
        rp = ik_solve(m, pre[i], q_init=rs.q)
        q_p[3 * i : 3 * i + 3] = rp.q
    return q_p, q_s


def _box_signed_distance(p_local: np.ndarray, half: float) -> float:
    """Signed distance from a cube-frame point to the box (negative inside)."""
    d = np.abs(p_local) - half
    outside = float(np.linalg.norm(np.maximum(d, 0.0)))
    return outside if outside > 0.0 else float(np.max(d))


def _push_to_clearance(p_local: np.ndarray, half: float, clearance: float) -> np.ndarray:
    """Lift a cube-frame point to the given clearance above the box top.

    Repaired samples always come from swing legs whose endpoints sit above
    the safe altitude, so the vertical exit both clears the box and keeps
    the sample's horizontal position.  Keeping xy keeps the finger's base
    azimuth, hence the IK yaw branch, aligned with the neighboring
    waypoints; a sideways exit near the workspace center lands under a
    finger base where the yaw is ill-conditioned and IK hops branches,
    which re-breaks the path next to every inserted fix.
    """
    out = np.asarray(p_local, dtype=float).copy()
    out[2] = max(out[2], half + clearance)
    return out


def _repair_finger_path(
    model,
    polyline: list[np.ndarray],
    center: np.ndarray,
    R: np.ndarray,
    half: float,
    clearance: float,
    samples: int = 60,
    max_inserts: int = 16,
) -> list[np.ndarray]:
    """Rework waypoints until the joint-lerp tip path clears the box.

    Joint-space interpolation between distant configs bows the fingertip
    through Cartesian space unpredictably; each round finds the tip sample
    with the worst clearance to the cube box, pushes it out to the target
    clearance, and inserts the IK solution there, which straightens the
    offending span.  A violation sitting on an interior waypoint itself
    cannot be fixed by insertion, so that waypoint is replaced instead.
    The endpoints are never moved (they are the path's contract).  Best
    effort: stops early if IK cannot track the pushed point or if an
    endpoint itself violates.

    Returns:
        list of 3-dof configs, first and last identical to the input's.
    """
    from ..kinematics import forward_kinematics, ik_solve

    pts = [np.asarray(q, dtype=float) for q in polyline]
    for _ in range(max_inserts):
        worst = (0.0, None, None)  # (violation, segment index, local fraction)
        per_seg = max(8, samples // (len(pts) - 1))
        for j in range(len(pts) - 1):
            for t in np.linspace(0.0, 1.0, per_seg):
                q = (1.0 - t) * pts[j] + t * pts[j + 1]
                local = R.T @ (forward_kinematics(model, q) - center)
                violation = clearance - _box_signed_distance(local, half)
                if violation > worst[0]:
                    worst = (violation, j, t)
        if worst[1] is None:
            break
        _, j, t = worst
        q_bad = (1.0 - t) * pts[j] + t * pts[j + 1]
        local = R.T @ (forward_kinematics(model, q_bad) - center)
        target = R @ _push_to_clearance(local, half, clearance) + center
        r = ik_solve(model, target, q_init=q_bad)
        if not r.converged:
            break
        at_knot = t < 1e-9 or t > 1.0 - 1e-9
        if at_knot:
            k = j if t < 0.5 else j + 1
            if k == 0 or k == len(pts) - 1:
                break
            pts[k] = r.q
        else:
            pts.insert(j + 1, r.q)
    return pts


def _resample_polyline(pts: list[np.ndarray], n: int) -> np.ndarray:
    """Resample a joint polyline at n points uniform in cumulative joint arc."""
    P = np.asarray(pts, dtype=float)
    seg = np.linalg.norm(np.diff(P, axis=0), axis=1)
    seg = np.maximum(seg, 1e-12)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    s = np.linspace(0.0, cum[-1], n)
    out = np.empty((n, P.shape[1]))
    for k, sk in enumerate(s):
        j = min(int(np.searchsorted(cum, sk, side="right") - 1), len(seg) - 1)
        t = (sk - cum[j]) / seg[j]
        out[k] = (1.0 - t) * P[j] + t * P[j + 1]
    return out


class JointPath:
    """Piecewise-linear joint trajectory with tip-distance-weighted timing."""

    def __init__(self, models, waypoints: np.ndarray):
        from ..kinematics import forward_kinematics

        self.waypoints = np.asarray(waypoints, dtype=float)
        if self.waypoints.ndim != 2 or self.waypoints.shape[0] < 2:
            raise ValueError("need at least two joint waypoints")
        tips = np.array(
            [
                [forward_kinematics(m, w[3 * i : 3 * i + 3]) for i, m in enumerate(models)]
                for w in self.waypoints
            ]
        )
        legs = np.linalg.norm(np.diff(tips, axis=0), axis=2).max(axis=1)
        legs = np.maximum(legs, 1e-9)
        self.cum = np.concatenate([[0.0], np.cumsum(legs)]) / np.sum(legs)

    def q_at(self, s: float) -> np.ndarray:
        """Joint target at normalized progress s in [0, 1]."""
        s = min(max(s, 0.0), 1.0)
        j = int(np.searchsorted(self.cum, s, side="right") - 1)
        j = min(j, len(self.cum) - 2)
        t = (s - self.cum[j]) / (self.cum[j + 1] - self.cum[j])
        return (1.0 - t) * self.waypoints[j] + t * self.waypoints[j + 1]


def approach_path(
    models,
    grasp,
    cube_position,
    cube_orientation,
    q_now: np.ndarray,
    offset: float,
    depth: float,
    stage_clearance: float = 0.05,
    spacing: float = 0.015,
):
    """Collision-safe approach from the current config to the pre-grasp one.

    Two parts per finger: the swing from the current config to a staging
    point directly above the pre-grasp point, repaired until the
    joint-interpolated tip path clears the cube; then a vertical Cartesian
    descent converted to joint waypoints by IK chained forward down the
    drop.  Descending on the pre-grasp point's own vertical keeps the base
    azimuth, hence the yaw joint, constant for the whole descent, so the
    IK chain cannot run into the yaw limit and hop to another elbow branch
    mid-descent, and the drop line inherits the pre-grasp point's own
    standoff from the cube faces.

    Returns:
        (path: JointPath, q_pre (9,), q_squeeze (9,))
    """
    from ..kinematics import ik_solve

    q_now = np.asarray(q_now, dtype=float)
    sq_pts = squeeze_points(grasp, cube_position, cube_orientation, depth)
    pre = pre_grasp_points(grasp, cube_position, cube_orientation, offset)

    half = max(float(np.max(np.abs(c.point))) for c in grasp.contacts)
    center = np.asarray(cube_position, dtype=float)
    R = quat_to_matrix(np.asarray(cube_orientation, dtype=float))
    clearance = 0.0075 + 0.005  # tip radius plus margin
    z_safe = center[2] + half + stage_clearance
    stage = pre.copy()
    stage[:, 2] = np.maximum(pre[:, 2], z_safe)

    # one IK family end to end: chain forward home -> stage -> descent -> pre,
    # then solve the squeeze from the pre config.  Mixing solve directions
    # hands the reach and the close solutions on opposite yaw branches, and
    # the closing joint lerp then swings the arm around with the tip dragging
    # across the cube
    n = max(1, math.ceil(float(np.max(np.linalg.norm(pre - stage, axis=1))) / spacing))
    cart = [stage + (pre - stage) * (k / n) for k in range(n + 1)]
    q_pre = np.empty(9)
    q_sq = np.empty(9)
    per_finger = []
    for i, m in enumerate(models):
        warm = q_now[3 * i : 3 * i + 3]
        descent = []
        for j in range(len(cart)):
            warm = ik_solve(m, cart[j][i], q_init=warm).q
            descent.append(warm)
        q_pre[3 * i : 3 * i + 3] = descent[-1]
        q_sq[3 * i : 3 * i + 3] = ik_solve(m, sq_pts[i], q_init=descent[-1]).q
        full = _repair_finger_path(
            m, [q_now[3 * i : 3 * i + 3]] + descent, center, R, half, clearance
        )
        per_finger.append(_resample_polyline(full, 40))
    waypoints = np.hstack(per_finger)
    return JointPath(models, waypoints), q_pre, q_sq


def joint_pd_torque(models, obs, q_target: np.ndarray, kp: float, kd: float) -> np.ndarray:
    """Joint-space PD toward q_target plus gravity compensation."""
    js = obs.joint_state
    return kp * (np.asarray(q_target) - js.q) - kd * js.dq + gravity_only(models, obs)


def max_tip_error(obs, targets: np.ndarray) -> float:
    return float(np.max(np.linalg.norm(targets - obs.fingertips.pos, axis=1)))


def gravity_only(models, obs) -> np.ndarray:
    q = obs.joint_state.q
    return np.concatenate(
        [gravity_compensation(m, q[3 * i : 3 * i + 3]) for i, m in enumerate(models)]
    )


def resolve_grasp(kind: str, cube, task, models, rng: np.random.Generator, mp_params=None):
    """Instantiate a grasp-strategy name at the episode's start pose.

    TG, CG and OG call their heuristics directly.  PG runs the grasp-and-plan
    search and keeps the grasp the planner settled on, which is how the
    reactive controllers get to borrow the planner's grasp choice.
    """
    from ..grasps import center_of_three_grasp, opposite_faces_grasp, triangle_grasp

    if kind == "TG":
        return triangle_grasp(cube, task.goal, models)
    if kind == "CG":
        return center_of_three_grasp(cube, task.goal, task.level, models)
    if kind == "OG":
        return opposite_faces_grasp(cube, models)
    if kind == "PG":
        from .mp import MpParams, plan_with_grasps

        params = mp_params if mp_params is not None else MpParams()
        start = _cube_pose(cube)
        plan = plan_with_grasps(start, task.goal, cube, models, rng, params)
        return plan.grasp
    raise ValueError(f"unknown grasp strategy {kind!r}")


def _cube_pose(cube):
    from ..tasks import Pose

    return Pose(position=np.array(cube.position), orientation=np.array(cube.orientation))
