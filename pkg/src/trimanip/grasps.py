"""Grasp heuristics, force-closure testing and reachability checks.

Grasps live in the cube frame: each contact names a face, a point on that
face and the inward unit normal.  A finger assignment maps fingers to
contacts.  Three heuristics are provided:

* TG, the triangle grasp: contacts on three vertical faces whose horizontal
  projections form an equilateral triangle.
* CG, the center grasp: contacts at three vertical face centers, with the
  free face chosen from the goal (position goals leave the goal-facing side
  free; pose goals pick the pair best aligned with the rotation axis).
* OG, the opposed grasp: two contacts on one vertical face, one on the
  opposite center, the pair picked by inverse-kinematics margin.

Force closure discretizes each friction cone into m edges and asks whether
the contact wrenches positively span 6-D wrench space, via a linear
feasibility program.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .geometry import quat_rotate, quat_to_axis_angle, quat_to_matrix, quat_conjugate, quat_mul, tilt_of_quat
from .kinematics import FingerModel, default_finger_models, forward_kinematics, chain_points, ik_solve

DEFAULT_MU = 0.5
TILT_TOLERANCE = math.radians(15.0)
IK_TOLERANCE = 2e-3  # m


class CubeTilted(Exception):
    """Cube is too far from upright for a vertical-face heuristic."""


class DegenerateGrasp(Exception):
    """Contacts are collinear with identical normals; closure is undefined."""


class SamplingExhausted(Exception):
    """Rejection sampling hit its attempt budget without a valid grasp."""


_FACES = {
    "+x": (0, 1.0),
    "-x": (0, -1.0),
    "+y": (1, 1.0),
    "-y": (1, -1.0),
    "+z": (2, 1.0),
    "-z": (2, -1.0),
}
_VERTICAL_FACES = ("+x", "-x", "+y", "-y")


def _face_vectors(face_id: str) -> tuple[np.ndarray, np.ndarray]:
    """(outward normal, inward normal) of a face in the cube frame."""
    axis, sign = _FACES[face_id]
    n = np.zeros(3)
    n[axis] = sign
    return n, -n


@dataclass(frozen=True)
class Contact:
    face_id: str
    point: np.ndarray  # cube frame
    normal: np.ndarray  # cube frame, unit, pointing into the cube

    def __post_init__(self):
        object.__setattr__(self, "point", np.asarray(self.point, dtype=float))
        object.__setattr__(self, "normal", np.asarray(self.normal, dtype=float))
        if self.face_id not in _FACES:
            raise ValueError(f"unknown face {self.face_id!r}")


@dataclass(frozen=True)
class Grasp:
    """Three cube-frame contacts plus the finger-to-contact permutation."""

    contacts: tuple[Contact, Contact, Contact]
    finger_assignment: tuple[int, int, int]
    cube_side: float = 0.065

    def __post_init__(self):
        if len(self.contacts) != 3:
            raise ValueError("a grasp has exactly three contacts")
        if sorted(self.finger_assignment) != [0, 1, 2]:
            raise ValueError("finger_assignment must be a permutation of (0, 1, 2)")
        h = 0.5 * self.cube_side
        for c in self.contacts:
            axis, sign = _FACES[c.face_id]
            if abs(c.point[axis] - sign * h) > 1e-9:
                raise ValueError(f"contact point is not on face {c.face_id}")
            if np.max(np.abs(c.point)) > h + 1e-9:
                raise ValueError("contact point lies outside the cube")
            inward = _face_vectors(c.face_id)[1]
            if np.linalg.norm(c.normal - inward) > 1e-9:
                raise ValueError("contact normal must point into the cube")
        pts = [c.point for c in self.contacts]
        for i, j in ((0, 1), (0, 2), (1, 2)):
            if np.linalg.norm(pts[i] - pts[j]) < 1e-9:
                raise ValueError("two contacts share the same point")

    # -- frame helpers ---------------------------------------------------

    def contact_points_world(self, cube_position, cube_orientation) -> np.ndarray:
        """(3, 3) contact points in the world, ordered by contact index."""
        R = quat_to_matrix(np.asarray(cube_orientation, dtype=float))
        p = np.asarray(cube_position, dtype=float)
        return np.stack([p + R @ c.point for c in self.contacts])

    def normals_world(self, cube_orientation) -> np.ndarray:
        """(3, 3) inward contact normals in the world, by contact index."""
        R = quat_to_matrix(np.asarray(cube_orientation, dtype=float))
        return np.stack([R @ c.normal for c in self.contacts])

    def points_by_finger(self, cube_position, cube_orientation) -> np.ndarray:
        """(3, 3) world contact points, row i = finger i's target."""
        pts = self.contact_points_world(cube_position, cube_orientation)
        return pts[list(self.finger_assignment)]


@dataclass(frozen=True)
class GraspFeasibility:
    reachable: bool
    in_force_closure: bool
    ik_solutions: np.ndarray | None  # (3, 3) by finger, present iff reachable
    residuals: np.ndarray  # (3,) IK position residuals by finger


# ---------------------------------------------------------------------------
# finger assignment
# ---------------------------------------------------------------------------


def assign_fingers(
    contact_points_world: np.ndarray,
    cube_position: np.ndarray,
    models: tuple[FingerModel, ...],
) -> tuple[int, int, int]:
    """Match fingers to contacts by the yaw each contact asks of the finger.

    The yaw joint swings the arm plane about the vertical base axis, so a
    contact is workable for a finger only while the horizontal direction
    from the finger base to the point stays inside the +-pi/2 yaw range;
    azimuth around the cube center is a poor proxy for that.  Minimizes the
    summed |yaw| demand with a steep penalty near the yaw stops, where the
    pre-grasp offset can push the approach point past the reachable cone.
    Ties resolve to the lexicographically first permutation, so the result
    is deterministic.
    """
    del cube_position  # reachability depends on the finger bases alone
    pts = np.asarray(contact_points_world, dtype=float)
    yaw_need = np.empty((3, 3))
    for f, m in enumerate(models):
        for c in range(3):
            v = m.base_rot.T @ (pts[c] - m.base_pos)
            yaw_need[f, c] = abs(math.atan2(v[1], v[0]))
    best = None
    best_cost = math.inf
    for perm in itertools.permutations(range(3)):
        cost = 0.0
        for finger, contact in enumerate(perm):
            y = yaw_need[finger, contact]
            cost += y + (10.0 if y > 1.35 else 0.0)
        if cost < best_cost - 1e-12:
            best_cost = cost
            best = perm
    return best


def _require_upright(orientation, tolerance: float):
    tilt = tilt_of_quat(np.asarray(orientation, dtype=float))
    if tilt > tolerance:
        raise CubeTilted(f"cube tilt {math.degrees(tilt):.1f} deg exceeds tolerance")


def _goal_facing_face(cube_position, cube_orientation, goal_position) -> str:
    """Vertical face whose outward normal best aligns with cube->goal.

    Falls back to +x when the goal sits (horizontally) on the cube center.
    """
    R = quat_to_matrix(np.asarray(cube_orientation, dtype=float))
    d = np.asarray(goal_position, dtype=float) - np.asarray(cube_position, dtype=float)
    d_cube = R.T @ d
    d_cube[2] = 0.0
    n = np.linalg.norm(d_cube)
    if n < 1e-9:
        return "+x"
    d_cube /= n
    scores = [float(_face_vectors(f)[0] @ d_cube) for f in _VERTICAL_FACES]
    return _VERTICAL_FACES[int(np.argmax(scores))]


def _opposite(face_id: str) -> str:
    return ("-" if face_id[0] == "+" else "+") + face_id[1]


def _adjacent_pair(face_id: str) -> tuple[str, str]:
    return ("+y", "-y") if face_id[1] == "x" else ("+x", "-x")


# ---------------------------------------------------------------------------
# heuristics
# ---------------------------------------------------------------------------


def triangle_grasp(cube, goal, models=None, tilt_tolerance: float = TILT_TOLERANCE) -> Grasp:
    """Equilateral triangle of contacts on three vertical faces, mid-height.

    One contact sits centered on the face opposite the goal-facing side; the
    other two sit on the adjacent face pair, both offset toward the goal
    side by (sqrt(3) - 1) h, which makes the horizontal projections exactly
    equilateral with side length s.
    """
    _require_upright(cube.orientation, tilt_tolerance)
    if models is None:
        models = default_finger_models()
    h = 0.5 * _side_of(cube)
    free = _goal_facing_face(cube.position, cube.orientation, goal.position)
    single = _opposite(free)
    pair = _adjacent_pair(free)
    t = (math.sqrt(3.0) - 1.0) * h
    axis_free, sign_free = _FACES[free]
    single_pt = np.zeros(3)
    single_pt[axis_free] = -sign_free * h
    contacts = [Contact(single, single_pt, _face_vectors(single)[1])]
    for face in pair:
        axis, sign = _FACES[face]
        pt = np.zeros(3)
        pt[axis] = sign * h
        pt[axis_free] = sign_free * t
        contacts.append(Contact(face, pt, _face_vectors(face)[1]))
    return _with_assignment(contacts, cube, models)


def center_of_three_grasp(
    cube, goal, task_level: int, models=None, tilt_tolerance: float = TILT_TOLERANCE
) -> Grasp:
    """Contacts at three vertical face centers.

    Position goals (level 3) leave the goal-facing face free so the cube can
    be pushed toward the goal.  Pose goals (level 4) give two fingers the
    opposite-face pair whose connecting line best aligns with the goal
    rotation axis; the third finger takes the remaining face for which an
    upward fingertip motion torques the cube in the desired direction.
    """
    _require_upright(cube.orientation, tilt_tolerance)
    if models is None:
        models = default_finger_models()
    if task_level not in (3, 4):
        raise ValueError("task_level must be 3 or 4")
    h = 0.5 * _side_of(cube)
    R = quat_to_matrix(np.asarray(cube.orientation, dtype=float))

    if task_level == 3:
        free = _goal_facing_face(cube.position, cube.orientation, goal.position)
        faces = [f for f in _VERTICAL_FACES if f != free]
    else:
        rel = quat_mul(
            np.asarray(goal.orientation, dtype=float),
            quat_conjugate(np.asarray(cube.orientation, dtype=float)),
        )
        axis, angle = quat_to_axis_angle(rel)
        # candidate pair lines are the cube-frame x and y axes in the world
        score_x = abs(float((R @ np.array([1.0, 0.0, 0.0])) @ axis))
        score_y = abs(float((R @ np.array([0.0, 1.0, 0.0])) @ axis))
        pair = ("+x", "-x") if score_x >= score_y else ("+y", "-y")
        rest = _adjacent_pair(pair[0])
        # upward-movement rule: prefer the face where lifting the fingertip
        # produces a moment along the desired rotation
        rotvec = angle * axis
        best_face = rest[0]
        best_score = -math.inf
        for f in rest:
            ax, sign = _FACES[f]
            pt = np.zeros(3)
            pt[ax] = sign * h
            r_w = R @ pt
            m = np.cross(r_w, np.array([0.0, 0.0, 1.0]))
            score = float(m @ rotvec)
            if score > best_score + 1e-12:
                best_score = score
                best_face = f
        faces = [pair[0], pair[1], best_face]

    contacts = []
    for f in faces:
        ax, sign = _FACES[f]
        pt = np.zeros(3)
        pt[ax] = sign * h
        contacts.append(Contact(f, pt, _face_vectors(f)[1]))
    return _with_assignment(contacts, cube, models)


def opposite_faces_grasp(cube, models=None, tilt_tolerance: float = TILT_TOLERANCE) -> Grasp:
    """Two contacts on one vertical face, one centered on the opposite face.

    The doubled face carries contacts at +/- s/4 along its horizontal axis.
    Among the four (face, opposite) candidates the one with the best summed
    IK convergence margin wins, so the choice adapts to where the cube sits
    relative to the finger bases.
    """
    _require_upright(cube.orientation, tilt_tolerance)
    if models is None:
        models = default_finger_models()
    h = 0.5 * _side_of(cube)
    s4 = 0.5 * h  # s/4
    best = None
    best_score = -math.inf
    for doubled in _VERTICAL_FACES:
        single = _opposite(doubled)
        ax, sign = _FACES[doubled]
        other = 1 - ax  # horizontal axis of the face
        contacts = []
        for off in (s4, -s4):
            pt = np.zeros(3)
            pt[ax] = sign * h
            pt[other] = off
            contacts.append(Contact(doubled, pt, _face_vectors(doubled)[1]))
        pt = np.zeros(3)
        pt[ax] = -sign * h
        contacts.append(Contact(single, pt, _face_vectors(single)[1]))
        grasp = _with_assignment(contacts, cube, models)
        feas = check_reachability(grasp, cube, models)
        score = float(np.sum(np.maximum(0.0, IK_TOLERANCE - feas.residuals)))
        if score > best_score + 1e-12:
            best_score = score
            best = grasp
    return best


def _side_of(cube) -> float:
    # CubeState does not carry geometry; grasps default to the rig's cube.
    return getattr(cube, "cube_side", 0.065)


def _with_assignment(contacts, cube, models) -> Grasp:
    tentative = Grasp(
        contacts=tuple(contacts),
        finger_assignment=(0, 1, 2),
        cube_side=_side_of(cube),
    )
    pts = tentative.contact_points_world(cube.position, cube.orientation)
    assignment = assign_fingers(pts, cube.position, models)
    return Grasp(
        contacts=tentative.contacts, finger_assignment=assignment, cube_side=tentative.cube_side
    )


# ---------------------------------------------------------------------------
# force closure
# ---------------------------------------------------------------------------


def grasp_wrenches(grasp: Grasp, mu: float, m_edges: int = 8) -> np.ndarray:
    """(6, 3 m) matrix of friction-cone edge wrenches in the cube frame."""
    cols = []
    for c in grasp.contacts:
        n = c.normal
        a = np.array([0.0, 0.0, 1.0]) if abs(n[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        t1 = np.cross(n, a)
        t1 /= np.linalg.norm(t1)
        t2 = np.cross(n, t1)
        for j in range(m_edges):
            th = 2.0 * math.pi * j / m_edges
            f = n + mu * (math.cos(th) * t1 + math.sin(th) * t2)
            f /= np.linalg.norm(f)
            cols.append(np.concatenate([f, np.cross(c.point, f)]))
    return np.stack(cols, axis=1)


def is_force_closure(grasp: Grasp, mu: float = DEFAULT_MU, m_edges: int = 8) -> bool:
    """True iff the contact wrenches positively span 6-D wrench space.

    Positive spanning is equivalent to the wrench matrix having full rank 6
    together with a strictly positive null combination, checked here as
    feasibility of { W lam = 0, lam >= 1 }.
    """
    if mu <= 0.0:
        raise ValueError("friction coefficient must be positive")
    normals = [c.normal for c in grasp.contacts]
    pts = np.stack([c.point for c in grasp.contacts])
    same_normals = all(np.linalg.norm(n - normals[0]) < 1e-12 for n in normals)
    if same_normals and np.linalg.matrix_rank(pts - pts[0], tol=1e-12) <= 1:
        raise DegenerateGrasp("collinear contacts with identical normals")
    W = grasp_wrenches(grasp, mu, m_edges)
    if np.linalg.matrix_rank(W) < 6:
        return False
    n = W.shape[1]
    res = linprog(
        c=np.zeros(n),
        A_eq=W,
        b_eq=np.zeros(6),
        bounds=[(1.0, None)] * n,
        method="highs",
    )
    return bool(res.status == 0)


def sample_force_closure_grasp(
    cube,
    rng: np.random.Generator,
    mu: float = DEFAULT_MU,
    models: tuple[FingerModel, ...] | None = None,
    max_attempts: int = 1000,
    inset: float = 0.8,
    info: dict | None = None,
) -> Grasp:
    """Rejection-sample a random reachable force-closure grasp.

    Each attempt draws one of the five reachable faces (four vertical plus
    the top) per finger and a uniform point on it, shrunk toward the face
    center by `inset` to stay clear of edges.  Candidates must pass the
    force-closure test and the reachability check.  If `info` is given, the
    number of attempts is stored under "attempts".
    """
    if models is None:
        models = default_finger_models()
    faces = ("+x", "-x", "+y", "-y", "+z")
    h = 0.5 * _side_of(cube)
    for attempt in range(1, max_attempts + 1):
        contacts = []
        for _ in range(3):
            face = faces[int(rng.integers(len(faces)))]
            ax, sign = _FACES[face]
            uv = rng.uniform(-inset * h, inset * h, size=2)
            pt = np.zeros(3)
            pt[ax] = sign * h
            others = [k for k in range(3) if k != ax]
            pt[others[0]] = uv[0]
            pt[others[1]] = uv[1]
            contacts.append(Contact(face, pt, _face_vectors(face)[1]))
        pts = np.stack([c.point for c in contacts])
        if min(
            np.linalg.norm(pts[i] - pts[j]) for i, j in ((0, 1), (0, 2), (1, 2))
        ) < 1e-6:
            continue
        grasp = _with_assignment(contacts, cube, models)
        try:
            if not is_force_closure(grasp, mu):
                continue
        except DegenerateGrasp:
            continue
        feas = check_reachability(grasp, cube, models)
        if not feas.reachable:
            continue
        if info is not None:
            info["attempts"] = attempt
        return grasp
    raise SamplingExhausted(f"no force-closure grasp found in {max_attempts} attempts")


# ---------------------------------------------------------------------------
# reachability
# ---------------------------------------------------------------------------


def check_reachability(
    grasp: Grasp,
    cube,
    models: tuple[FingerModel, ...] | None = None,
    mu: float = DEFAULT_MU,
    q_init: np.ndarray | None = None,
) -> GraspFeasibility:
    """IK feasibility of a grasp at a given cube pose.

    Reachable means every finger's damped least-squares IK lands within
    2 mm of its assigned world contact point, inside joint limits (enforced
    by clamping), with the whole finger above the floor.  Force closure is
    evaluated alongside so callers get both verdicts in one place.
    """
    if models is None:
        models = default_finger_models()
    targets = grasp.points_by_finger(cube.position, cube.orientation)
    sols = np.zeros((3, 3))
    residuals = np.zeros(3)
    reachable = True
    q_init = None if q_init is None else np.asarray(q_init, dtype=float).reshape(3, 3)
    for i, m in enumerate(models):
        res = ik_solve(m, targets[i], q_init=None if q_init is None else q_init[i])
        sols[i] = res.q
        residuals[i] = res.residual
        if res.residual > IK_TOLERANCE:
            reachable = False
            continue
        pts = chain_points(m, res.q)
        if pts[3, 2] < 0.005 or pts[2, 2] < 0.0:
            reachable = False
    try:
        closure = is_force_closure(grasp, mu)
    except DegenerateGrasp:
        closure = False
    return GraspFeasibility(
        reachable=reachable,
        in_force_closure=closure,
        ik_solutions=sols if reachable else None,
        residuals=residuals,
    )
