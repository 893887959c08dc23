"""Rotation and quaternion helpers.

Quaternions are numpy arrays ``(w, x, y, z)`` and are kept unit-norm by the
constructors here.  Rotation matrices are 3x3 arrays acting on column vectors.
"""

from __future__ import annotations

import math

import numpy as np

_EPS = 1e-12


def normalize(v: np.ndarray) -> np.ndarray:
    """Return ``v / ||v||``.  Raises ValueError on (near-)zero input."""
    v = np.asarray(v, dtype=float)
    n = float(np.linalg.norm(v))
    if n < _EPS:
        raise ValueError("cannot normalize near-zero vector")
    return v / n


def skew(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix S such that S @ u == cross(v, u)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = float(np.linalg.norm(q))
    if n < _EPS:
        raise ValueError("cannot normalize near-zero quaternion")
    q = q / n
    # Canonical sign: w >= 0 avoids double-cover ambiguity in logs/tests.
    if q[0] < 0.0:
        q = -q
    return q


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vector v by quaternion q (q assumed unit)."""
    w, x, y, z = q
    u = np.array([x, y, z])
    uv = np.cross(u, v)
    return np.asarray(v, dtype=float) + 2.0 * (w * uv + np.cross(u, uv))


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method; returns the canonical (w >= 0) unit quaternion."""
    R = np.asarray(R, dtype=float)
    t = np.trace(R)
    if t > 0.0:
        s = math.sqrt(t + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    else:
        i = int(np.argmax(np.diag(R)))
        if i == 0:
            s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
            q = np.array(
                [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
            )
        elif i == 1:
            s = math.sqrt(1.0 - R[0, 0] + R[1, 1] - R[2, 2]) * 2.0
            q = np.array(
                [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
            )
        else:
            s = math.sqrt(1.0 - R[0, 0] - R[1, 1] + R[2, 2]) * 2.0
            q = np.array(
                [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
            )
    return quat_normalize(q)


def quat_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = normalize(axis)
    h = 0.5 * angle
    s = math.sin(h)
    return quat_normalize(np.array([math.cos(h), s * axis[0], s * axis[1], s * axis[2]]))


def quat_to_axis_angle(q: np.ndarray) -> tuple[np.ndarray, float]:
    """Axis and angle in [0, pi] of a unit quaternion.  Identity maps to +z, 0."""
    q = quat_normalize(q)
    w = min(1.0, max(-1.0, float(q[0])))
    angle = 2.0 * math.acos(w)
    s = math.sqrt(max(0.0, 1.0 - w * w))
    if s < 1e-9:
        return np.array([0.0, 0.0, 1.0]), 0.0
    return np.array([q[1] / s, q[2] / s, q[3] / s]), angle


def quat_from_yaw(yaw: float) -> np.ndarray:
    return np.array([math.cos(0.5 * yaw), 0.0, 0.0, math.sin(0.5 * yaw)])


def quat_slerp(q0: np.ndarray, q1: np.ndarray, t: float) -> np.ndarray:
    q0 = quat_normalize(q0)
    q1 = quat_normalize(q1)
    dot = float(np.dot(q0, q1))
    if dot < 0.0:
        q1 = -q1
        dot = -dot
    if dot > 1.0 - 1e-10:
        return quat_normalize(q0 + t * (q1 - q0))
    theta = math.acos(min(1.0, dot))
    s = math.sin(theta)
    return quat_normalize(
        (math.sin((1.0 - t) * theta) / s) * q0 + (math.sin(t * theta) / s) * q1
    )


def swing_twist_z(q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Decompose q = swing * twist where twist is a rotation about world z.

    Returns (swing, twist).  The twist carries the yaw content, the swing the
    residual tilt.  For q with zero z-component the twist is identity.
    """
    q = quat_normalize(q)
    w, _, _, z = q
    n = math.hypot(w, z)
    if n < 1e-12:
        # Pure 180-degree tilt about a horizontal axis: no well-defined yaw.
        twist = np.array([1.0, 0.0, 0.0, 0.0])
    else:
        twist = np.array([w / n, 0.0, 0.0, z / n])
    swing = quat_mul(q, quat_conjugate(twist))
    return quat_normalize(swing), twist


def yaw_of_quat(q: np.ndarray) -> float:
    """Yaw angle of the twist-about-z component, in (-pi, pi]."""
    _, twist = swing_twist_z(q)
    return 2.0 * math.atan2(twist[3], twist[0])


def tilt_of_quat(q: np.ndarray) -> float:
    """Angle between the rotated z axis and world z, in [0, pi]."""
    z_axis = quat_rotate(q, np.array([0.0, 0.0, 1.0]))
    return math.acos(min(1.0, max(-1.0, float(z_axis[2]))))


def rotation_angle_between(q_a: np.ndarray, q_b: np.ndarray) -> float:
    """Geodesic angle of the relative rotation q_a -> q_b, in [0, pi]."""
    rel = quat_mul(q_b, quat_conjugate(q_a))
    _, angle = quat_to_axis_angle(rel)
    return angle
