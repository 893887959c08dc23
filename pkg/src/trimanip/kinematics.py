"""Kinematics of a 3-DoF finger: yaw joint followed by two pitch joints.

Chain convention
----------------
* The base pose places joint 1 (yaw, about the base z axis) at ``base_pos``.
* Link 1 runs a fixed length down the base z axis to joint 2; q1 spins the
  arm plane about that axis.
* Joints 2 and 3 pitch about the (yawed) base y axis.  A link at pitch angle
  ``t`` points along ``sin(t) * x1 - cos(t) * z_b`` where ``x1`` is the yawed
  base x axis; at q = 0 the finger hangs straight down and positive pitch
  swings the fingertip toward base-local +x.

All public functions take/return numpy arrays.  The ``_*_scalar`` helpers are
the single source of truth for the chain and are reused by the simulator's
inner loop, which works on plain floats for speed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import rot_z

TAU_MAX = 0.397  # per-joint actuator torque limit [N m]


class SingularSystem(Exception):
    """Raised by the undamped pseudo-inverse when J J^T is near singular."""


# ---------------------------------------------------------------------------
# scalar chain core (shared with the simulator inner loop)
# ---------------------------------------------------------------------------


def _chain_scalar(bp, bR, L, q):
    """Joint-2 origin, joint-3 origin and fingertip as float triples."""
    bx, by, bz = bp
    r00, r01, r02, r10, r11, r12, r20, r21, r22 = bR
    L1, L2, L3 = L
    q1, q2, q3 = q
    c1 = math.cos(q1)
    s1 = math.sin(q1)
    ux = r00 * c1 + r01 * s1
    uy = r10 * c1 + r11 * s1
    uz = r20 * c1 + r21 * s1
    q23 = q2 + q3
    s2 = math.sin(q2)
    c2 = math.cos(q2)
    s23 = math.sin(q23)
    c23 = math.cos(q23)
    a2 = L2 * s2
    b2 = L1 + L2 * c2
    a3 = a2 + L3 * s23
    b3 = b2 + L3 * c23
    o2 = (bx - L1 * r02, by - L1 * r12, bz - L1 * r22)
    o3 = (bx + a2 * ux - b2 * r02, by + a2 * uy - b2 * r12, bz + a2 * uz - b2 * r22)
    tip = (bx + a3 * ux - b3 * r02, by + a3 * uy - b3 * r12, bz + a3 * uz - b3 * r22)
    return o2, o3, tip


def _tip_scalar(bp, bR, L, q):
    return _chain_scalar(bp, bR, L, q)[2]


def _jacobian_scalar(bR, L, q):
    """Row-major 3x3 fingertip Jacobian as a 9-tuple of floats."""
    r00, r01, r02, r10, r11, r12, r20, r21, r22 = bR
    _, L2, L3 = L
    q1, q2, q3 = q
    c1 = math.cos(q1)
    s1 = math.sin(q1)
    ux = r00 * c1 + r01 * s1
    uy = r10 * c1 + r11 * s1
    uz = r20 * c1 + r21 * s1
    vx = r01 * c1 - r00 * s1
    vy = r11 * c1 - r10 * s1
    vz = r21 * c1 - r20 * s1
    q23 = q2 + q3
    s2 = math.sin(q2)
    c2 = math.cos(q2)
    s23 = math.sin(q23)
    c23 = math.cos(q23)
    a = L2 * s2 + L3 * s23  # radial extension
    ga = L2 * c2 + L3 * c23  # d(radial)/dq2
    # tip = b + a*u - (L1 + L2 c2 + L3 c23)*w with w = base z column
    return (
        a * vx, ga * ux + a * r02, L3 * (c23 * ux + s23 * r02),
        a * vy, ga * uy + a * r12, L3 * (c23 * uy + s23 * r12),
        a * vz, ga * uz + a * r22, L3 * (c23 * uz + s23 * r22),
    )


def _gravity_scalar(bR, L, m, q, g):
    """dU/dq of the link potential, with point masses at link midpoints.

    Applying this as motor torque holds the arm static: the equations of
    motion carry -dU/dq, so the two cancel exactly.
    """
    r00, r01, r02, r10, r11, r12, r20, r21, r22 = bR
    _, L2, L3 = L
    _, m2, m3 = m
    q1, q2, q3 = q
    gx, gy, gz = g
    c1 = math.cos(q1)
    s1 = math.sin(q1)
    gu = gx * (r00 * c1 + r01 * s1) + gy * (r10 * c1 + r11 * s1) + gz * (r20 * c1 + r21 * s1)
    gv = gx * (r01 * c1 - r00 * s1) + gy * (r11 * c1 - r10 * s1) + gz * (r21 * c1 - r20 * s1)
    gw = gx * r02 + gy * r12 + gz * r22
    q23 = q2 + q3
    s2 = math.sin(q2)
    c2 = math.cos(q2)
    s23 = math.sin(q23)
    c23 = math.cos(q23)
    # radial coordinates of the link-2 and link-3 midpoints
    a_m2 = 0.5 * L2 * s2
    a_m3 = L2 * s2 + 0.5 * L3 * s23
    t1 = -(m2 * a_m2 + m3 * a_m3) * gv
    t2 = -(m2 * 0.5 * L2 * c2 + m3 * (L2 * c2 + 0.5 * L3 * c23)) * gu - (
        m2 * 0.5 * L2 * s2 + m3 * (L2 * s2 + 0.5 * L3 * s23)
    ) * gw
    t3 = -m3 * 0.5 * L3 * (c23 * gu + s23 * gw)
    return t1, t2, t3


# ---------------------------------------------------------------------------
# finger model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FingerModel:
    """Geometry and inertial description of one finger.

    Attributes:
        base_pos: world position of the yaw joint (3,).
        base_rot: world orientation of the base frame (3, 3).
        link_lengths: lengths of the three links in meters (3,).
        joint_limits: per-joint (lo, hi) position limits in radians (3, 2).
        link_masses: point masses at the link midpoints in kg (3,).
        joint_inertia: diagonal joint-space inertia in kg m^2 (3,).
    """

    base_pos: np.ndarray
    base_rot: np.ndarray
    link_lengths: np.ndarray
    joint_limits: np.ndarray
    link_masses: np.ndarray
    joint_inertia: np.ndarray
    # flattened float caches used by the scalar helpers
    _bp: tuple = field(init=False, repr=False, compare=False)
    _bR: tuple = field(init=False, repr=False, compare=False)
    _L: tuple = field(init=False, repr=False, compare=False)
    _m: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        for name in ("base_pos", "base_rot", "link_lengths", "joint_limits", "link_masses", "joint_inertia"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.base_pos.shape != (3,) or self.base_rot.shape != (3, 3):
            raise ValueError("base pose must be a 3-vector and a 3x3 matrix")
        R = self.base_rot
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9) or np.linalg.det(R) < 0.0:
            raise ValueError("base_rot must be a proper rotation")
        if self.link_lengths.shape != (3,) or np.any(self.link_lengths <= 0.0):
            raise ValueError("link lengths must be three positive values")
        if self.joint_limits.shape != (3, 2) or np.any(self.joint_limits[:, 0] >= self.joint_limits[:, 1]):
            raise ValueError("joint limits must be three (lo, hi) pairs with lo < hi")
        if np.any(self.link_masses <= 0.0) or np.any(self.joint_inertia <= 0.0):
            raise ValueError("masses and joint inertias must be positive")
        object.__setattr__(self, "_bp", tuple(self.base_pos))
        object.__setattr__(self, "_bR", tuple(self.base_rot.ravel()))
        object.__setattr__(self, "_L", tuple(self.link_lengths))
        object.__setattr__(self, "_m", tuple(self.link_masses))

    def clamp(self, q: np.ndarray) -> np.ndarray:
        return np.clip(q, self.joint_limits[:, 0], self.joint_limits[:, 1])


def default_finger_models(
    radius: float = 0.0455,
    height: float = 0.29,
    link_lengths: tuple[float, float, float] = (0.16, 0.16, 0.16),
    link_masses: tuple[float, float, float] = (0.08, 0.08, 0.08),
    joint_inertia: float = 0.004,
) -> tuple[FingerModel, FingerModel, FingerModel]:
    """Three identical fingers 120 degrees apart, base x axes facing center."""
    limits = np.array([[-0.5 * math.pi, 0.5 * math.pi], [-math.pi, math.pi], [-math.pi, math.pi]])
    models = []
    for i in range(3):
        phi = 2.0 * math.pi * i / 3.0
        pos = np.array([radius * math.cos(phi), radius * math.sin(phi), height])
        rot = rot_z(phi + math.pi)
        models.append(
            FingerModel(
                base_pos=pos,
                base_rot=rot,
                link_lengths=np.asarray(link_lengths, dtype=float),
                joint_limits=limits.copy(),
                link_masses=np.asarray(link_masses, dtype=float),
                joint_inertia=np.full(3, joint_inertia),
            )
        )
    return tuple(models)


# ---------------------------------------------------------------------------
# numpy-facing operations
# ---------------------------------------------------------------------------


def forward_kinematics(model: FingerModel, q: np.ndarray) -> np.ndarray:
    """World fingertip position for joint angles q (3,)."""
    return np.array(_tip_scalar(model._bp, model._bR, model._L, tuple(q)))


def chain_points(model: FingerModel, q: np.ndarray) -> np.ndarray:
    """Stacked (4, 3) world positions: base, joint 2, joint 3, fingertip."""
    o2, o3, tip = _chain_scalar(model._bp, model._bR, model._L, tuple(q))
    return np.array([model._bp, o2, o3, tip])


def jacobian(model: FingerModel, q: np.ndarray) -> np.ndarray:
    """3x3 fingertip position Jacobian d(tip)/dq."""
    return np.array(_jacobian_scalar(model._bR, model._L, tuple(q))).reshape(3, 3)


def gravity_compensation(
    model: FingerModel, q: np.ndarray, gravity: np.ndarray = (0.0, 0.0, -9.81)
) -> np.ndarray:
    """Joint torques that statically cancel the link weights."""
    return np.array(_gravity_scalar(model._bR, model._L, model._m, tuple(q), tuple(gravity)))


def fingertip_state(
    models: tuple[FingerModel, ...], q: np.ndarray, dq: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """World positions and velocities of all fingertips.

    Args:
        models: the three finger models.
        q: stacked joint angles (9,).
        dq: stacked joint velocities (9,).

    Returns:
        (positions, velocities), each (3, 3) with one row per finger.
    """
    q = np.asarray(q, dtype=float).reshape(3, 3)
    dq = np.asarray(dq, dtype=float).reshape(3, 3)
    pos = np.empty((3, 3))
    vel = np.empty((3, 3))
    for i, m in enumerate(models):
        pos[i] = forward_kinematics(m, q[i])
        vel[i] = jacobian(m, q[i]) @ dq[i]
    return pos, vel


def damped_pinv_solve(J: np.ndarray, dx: np.ndarray, lam: float = 1e-4) -> np.ndarray:
    """Damped least-squares map  J^T (J J^T + lam I)^-1 dx.

    With lam = 0 this is the exact right pseudo-inverse of a full-row-rank J;
    in that case a near-singular J J^T (condition number above 1e12) raises
    SingularSystem instead of returning garbage.
    """
    J = np.asarray(J, dtype=float)
    dx = np.asarray(dx, dtype=float)
    if lam < 0.0:
        raise ValueError("damping must be non-negative")
    JJt = J @ J.T
    A = JJt + lam * np.eye(J.shape[0])
    if lam == 0.0:
        cond = np.linalg.cond(JJt)
        if not np.isfinite(cond) or cond > 1e12:
            raise SingularSystem(f"J J^T condition {cond:.3e} exceeds 1e12 with zero damping")
    return J.T @ np.linalg.solve(A, dx)


@dataclass(frozen=True)
class IkResult:
    q: np.ndarray
    residual: float
    converged: bool


_IK_WARM_STARTS = (
    (0.0, 0.9, -1.8),
    (0.0, 0.5, -1.0),
    (0.0, 1.3, -2.4),
    (0.5, 0.9, -1.8),
    (-0.5, 0.9, -1.8),
)


def ik_solve(
    model: FingerModel,
    target: np.ndarray,
    q_init: np.ndarray | None = None,
    max_iters: int = 80,
    tol: float = 1e-5,
    lam: float = 1e-6,
    step_cap: float = 0.5,
) -> IkResult:
    """Damped least-squares inverse kinematics for the fingertip position.

    Iterates from q_init (when given) and then from a fixed set of warm
    starts, keeping the best solution.  Joint limits are enforced by
    clamping at every iterate, so the result is always feasible.
    """
    target = np.asarray(target, dtype=float)
    seeds = []
    if q_init is not None:
        seeds.append(np.asarray(q_init, dtype=float))
    seeds.extend(np.array(s) for s in _IK_WARM_STARTS)
    best_q = None
    best_res = math.inf
    for seed in seeds:
        q = model.clamp(seed.copy())
        for _ in range(max_iters):
            err = target - forward_kinematics(model, q)
            res = float(np.linalg.norm(err))
            if res < tol:
                break
            J = jacobian(model, q)
            step = damped_pinv_solve(J, err, lam=max(lam, 1e-8))
            n = float(np.linalg.norm(step))
            if n > step_cap:
                step *= step_cap / n
            q = model.clamp(q + step)
        res = float(np.linalg.norm(target - forward_kinematics(model, q)))
        if res < best_res:
            best_res = res
            best_q = q
        if best_res < tol:
            break
    return IkResult(q=best_q, residual=best_res, converged=best_res < 2e-3)
