"""Deterministic desk-scale physics for three fingers and a cube.

Bodies
------
* Three 3-DoF fingers (diagonal joint-space inertia, viscous joint damping,
  torque-limited motors, gravity on the link masses).
* One rigid cube with isotropic inertia (m s^2 / 6) I, so the gyroscopic
  term vanishes and angular integration is a plain Euler step.
* A fixed floor at z = 0.

Contacts are penalty springs with damping and regularized Coulomb friction:
the tangential force is -mu * f_n * v_t / max(||v_t||, v_reg), which
saturates at mu * f_n and is dissipative by construction.  Fingertips are
spheres; fingertip-cube contact uses the closest point on the box, and the
cube meets the floor through whichever of its eight corners dip below it.

Integration is fixed-step semi-implicit Euler (velocities first, then
positions).  One guard is applied to the contact damper: its discrete
coefficient is capped at (effective mass / dt) per contact, the largest
value for which the explicit damping update cannot overshoot and inject
energy at the configured time step.  With the default damping of 50 N s/m
and the 94 g cube this cap is active, and it is what keeps a resting cube
resting instead of chattering.

Everything in the hot loop is plain float arithmetic; numpy appears only at
the observation boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .kinematics import (
    TAU_MAX,
    FingerModel,
    _chain_scalar,
    _gravity_scalar,
    _jacobian_scalar,
    default_finger_models,
    ik_solve,
)


class NumericalBlowup(Exception):
    """State magnitudes left the trusted range; the episode is unusable."""


@dataclass(frozen=True)
class WorldConfig:
    """Physics constants.  Defaults model the small tri-finger rig."""

    cube_side: float = 0.065
    cube_mass: float = 0.094
    friction_mu: float = 0.5
    contact_stiffness: float = 2000.0
    contact_damping: float = 50.0
    friction_vreg: float = 1e-3
    tip_radius: float = 0.0075
    dt: float = 1e-3
    gravity: tuple[float, float, float] = (0.0, 0.0, -9.81)
    tau_max: float = TAU_MAX
    arena_radius: float = 0.195
    joint_damping: float = 0.01
    # internal PD used when step() receives position commands
    position_kp: float = 3.0
    position_kd: float = 0.06
    blowup_limit: float = 1e3

    def __post_init__(self):
        if self.dt <= 0 or self.cube_side <= 0 or self.cube_mass <= 0:
            raise ValueError("dt, cube_side and cube_mass must be positive")
        if self.contact_stiffness <= 0 or self.contact_damping < 0 or self.friction_mu < 0:
            raise ValueError("contact parameters out of range")


@dataclass(frozen=True)
class ObservationModel:
    """How the world is perceived.

    "ideal" returns ground truth.  "realistic" returns the true joint and
    fingertip states (fast proprioception) but samples the cube pose at
    cube_rate_hz with zero-order hold and additive Gaussian noise, the way
    an external object tracker behaves.
    """

    kind: str = "ideal"
    cube_rate_hz: float = 10.0
    position_noise: float = 1e-3
    orientation_noise: float = 0.01  # rad, axis-angle magnitude

    def __post_init__(self):
        if self.kind not in ("ideal", "realistic"):
            raise ValueError(f"unknown observation model {self.kind!r}")
        if self.cube_rate_hz <= 0:
            raise ValueError("cube_rate_hz must be positive")


@dataclass(frozen=True)
class CubeState:
    position: np.ndarray
    orientation: np.ndarray  # unit quaternion (w, x, y, z)
    lin_vel: np.ndarray
    ang_vel: np.ndarray  # world frame


@dataclass(frozen=True)
class JointState:
    q: np.ndarray
    dq: np.ndarray
    tau: np.ndarray  # torques actually applied at the last step


@dataclass(frozen=True)
class FingertipState:
    pos: np.ndarray  # (3, 3), row per finger
    vel: np.ndarray  # (3, 3)


@dataclass(frozen=True)
class ContactRecord:
    finger_index: int
    in_contact: bool
    contact_point: np.ndarray
    normal_force: float
    tangential_force: np.ndarray  # force the fingertip exerts on the cube
    penetration: float = 0.0


@dataclass(frozen=True)
class Observation:
    time: float
    joint_state: JointState
    fingertips: FingertipState
    cube: CubeState
    contacts: tuple[ContactRecord, ContactRecord, ContactRecord]


_HOME_TIP_RADIUS = 0.11
_HOME_TIP_HEIGHT = 0.09


class TriFingerWorld:
    """Simulation state plus stepping, observation and reset."""

    def __init__(
        self,
        models: tuple[FingerModel, ...] | None = None,
        config: WorldConfig | None = None,
        observation: ObservationModel | None = None,
        seed: int = 0,
    ):
        self.models = tuple(models) if models is not None else default_finger_models()
        if len(self.models) != 3:
            raise ValueError("exactly three fingers are required")
        self.config = config if config is not None else WorldConfig()
        self.observation_model = observation if observation is not None else ObservationModel()
        self._rng = np.random.default_rng(seed)

        cfg = self.config
        # discrete stability caps for the contact damper (see module docstring)
        m_tip_eff = min(m.joint_inertia.min() for m in self.models) / (
            max(float(m.link_lengths.sum()) for m in self.models) ** 2
        )
        self._cd_cube = min(cfg.contact_damping, 0.25 * cfg.cube_mass / cfg.dt)
        self._cd_tip = min(cfg.contact_damping, m_tip_eff / cfg.dt, 0.25 * cfg.cube_mass / cfg.dt)
        self._cd_tip_floor = min(cfg.contact_damping, m_tip_eff / cfg.dt)

        # flattened per-finger caches for the scalar loop
        self._fingers = []
        for m in self.models:
            self._fingers.append(
                (
                    m._bp,
                    m._bR,
                    m._L,
                    m._m,
                    tuple(m.joint_inertia),
                    tuple(m.joint_limits[:, 0]),
                    tuple(m.joint_limits[:, 1]),
                )
            )
        self._home_q = self._compute_home()
        self.reset()

    # ------------------------------------------------------------------
    # setup
    # ------------------------------------------------------------------

    def _compute_home(self) -> list[float]:
        """Joint angles placing tips on a ring above and outside the cube."""
        home = []
        for m in self.models:
            phi = math.atan2(m.base_pos[1], m.base_pos[0])
            target = np.array(
                [
                    _HOME_TIP_RADIUS * math.cos(phi),
                    _HOME_TIP_RADIUS * math.sin(phi),
                    _HOME_TIP_HEIGHT,
                ]
            )
            res = ik_solve(m, target)
            if not res.converged:
                raise ValueError("finger geometry cannot reach the home ring")
            home.extend(float(v) for v in res.q)
        return home

    def reset(
        self,
        cube_position: np.ndarray | None = None,
        cube_orientation: np.ndarray | None = None,
        q: np.ndarray | None = None,
    ) -> Observation:
        cfg = self.config
        if cube_position is None:
            # rest in static floor equilibrium so a zero-command world is quiet
            sag = cfg.cube_mass * abs(cfg.gravity[2]) / (4.0 * cfg.contact_stiffness)
            cube_position = (0.0, 0.0, 0.5 * cfg.cube_side - sag)
        if cube_orientation is None:
            cube_orientation = (1.0, 0.0, 0.0, 0.0)
        self._cp = [float(v) for v in cube_position]
        n = math.sqrt(sum(float(v) * float(v) for v in cube_orientation))
        self._cq = [float(v) / n for v in cube_orientation]
        self._cv = [0.0, 0.0, 0.0]
        self._cw = [0.0, 0.0, 0.0]
        if q is None:
            self._q = list(self._home_q)
        else:
            q = np.asarray(q, dtype=float).ravel()
            if q.shape != (9,):
                raise ValueError("q must have shape (9,)")
            self._q = [float(v) for v in q]
        self._dq = [0.0] * 9
        self._tau = [0.0] * 9
        self._t = 0.0
        self._step_count = 0
        self._contacts = [
            (False, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0) for _ in range(3)
        ]
        self._obs_next_sample = 0.0
        self._obs_cube_cache = None
        return self.observe()

    # ------------------------------------------------------------------
    # stepping
    # ------------------------------------------------------------------

    def step(self, command, mode: str = "torque") -> None:
        """Advance one time step.

        Args:
            command: 9 joint torques [N m] or, with mode="position", 9 joint
                position targets [rad] tracked by the internal PD (gains
                position_kp/position_kd plus gravity compensation).
            mode: "torque" or "position".
        """
        cfg = self.config
        dt = cfg.dt
        gx, gy, gz = cfg.gravity
        cmd = [float(v) for v in command]
        if len(cmd) != 9:
            raise ValueError("command must have 9 entries")
        for v in cmd:
            if not math.isfinite(v):
                raise ValueError("command contains non-finite values")
        if mode not in ("torque", "position"):
            raise ValueError(f"unknown command mode {mode!r}")

        q = self._q
        dq = self._dq
        tau_lim = cfg.tau_max
        mu = cfg.friction_mu
        k_c = cfg.contact_stiffness
        vreg = cfg.friction_vreg
        r_tip = cfg.tip_radius
        h = 0.5 * cfg.cube_side

        cx, cy, cz = self._cp
        qw, qx, qy, qz = self._cq
        cvx, cvy, cvz = self._cv
        cwx, cwy, cwz = self._cw
        # cube rotation matrix, row major
        R00 = 1.0 - 2.0 * (qy * qy + qz * qz)
        R01 = 2.0 * (qx * qy - qw * qz)
        R02 = 2.0 * (qx * qz + qw * qy)
        R10 = 2.0 * (qx * qy + qw * qz)
        R11 = 1.0 - 2.0 * (qx * qx + qz * qz)
        R12 = 2.0 * (qy * qz - qw * qx)
        R20 = 2.0 * (qx * qz - qw * qy)
        R21 = 2.0 * (qy * qz + qw * qx)
        R22 = 1.0 - 2.0 * (qx * qx + qy * qy)

        cube_fx = 0.0
        cube_fy = 0.0
        cube_fz = 0.0
        cube_tx = 0.0
        cube_ty = 0.0
        cube_tz = 0.0
        contacts = []
        new_dq = [0.0] * 9

        for i, (bp, bR, L, lm, inertia, lo, hi) in enumerate(self._fingers):
            j = 3 * i
            qi = (q[j], q[j + 1], q[j + 2])
            d1, d2_, d3 = dq[j], dq[j + 1], dq[j + 2]
            _, _, tip = _chain_scalar(bp, bR, L, qi)
            J = _jacobian_scalar(bR, L, qi)
            tvx = J[0] * d1 + J[1] * d2_ + J[2] * d3
            tvy = J[3] * d1 + J[4] * d2_ + J[5] * d3
            tvz = J[6] * d1 + J[7] * d2_ + J[8] * d3
            g1, g2, g3 = _gravity_scalar(bR, L, lm, qi, cfg.gravity)

            if mode == "position":
                t1 = cfg.position_kp * (cmd[j] - qi[0]) - cfg.position_kd * d1 + g1
                t2 = cfg.position_kp * (cmd[j + 1] - qi[1]) - cfg.position_kd * d2_ + g2
                t3 = cfg.position_kp * (cmd[j + 2] - qi[2]) - cfg.position_kd * d3 + g3
            else:
                t1, t2, t3 = cmd[j], cmd[j + 1], cmd[j + 2]
            t1 = min(tau_lim, max(-tau_lim, t1))
            t2 = min(tau_lim, max(-tau_lim, t2))
            t3 = min(tau_lim, max(-tau_lim, t3))
            self._tau[j] = t1
            self._tau[j + 1] = t2
            self._tau[j + 2] = t3

            px, py, pz = tip
            # fingertip force accumulator
            Fx = 0.0
            Fy = 0.0
            Fz = 0.0

            # fingertip vs cube -------------------------------------------------
            rx = px - cx
            ry = py - cy
            rz = pz - cz
            sx = R00 * rx + R10 * ry + R20 * rz
            sy = R01 * rx + R11 * ry + R21 * rz
            sz = R02 * rx + R12 * ry + R22 * rz
            clx = -h if sx < -h else (h if sx > h else sx)
            cly = -h if sy < -h else (h if sy > h else sy)
            clz = -h if sz < -h else (h if sz > h else sz)
            ex = sx - clx
            ey = sy - cly
            ez = sz - clz
            dist2 = ex * ex + ey * ey + ez * ez
            rec = None
            if dist2 < r_tip * r_tip:
                if dist2 > 1e-16:
                    dist = math.sqrt(dist2)
                    nlx = ex / dist
                    nly = ey / dist
                    nlz = ez / dist
                    pen = r_tip - dist
                else:
                    # sphere center inside the box: exit through nearest face
                    dxf = h - abs(sx)
                    dyf = h - abs(sy)
                    dzf = h - abs(sz)
                    if dxf <= dyf and dxf <= dzf:
                        nlx = 1.0 if sx >= 0.0 else -1.0
                        nly = 0.0
                        nlz = 0.0
                        pen = r_tip + dxf
                        clx = math.copysign(h, sx)
                    elif dyf <= dzf:
                        nlx = 0.0
                        nly = 1.0 if sy >= 0.0 else -1.0
                        nlz = 0.0
                        pen = r_tip + dyf
                        cly = math.copysign(h, sy)
                    else:
                        nlx = 0.0
                        nly = 0.0
                        nlz = 1.0 if sz >= 0.0 else -1.0
                        pen = r_tip + dzf
                        clz = math.copysign(h, sz)
                # world-frame outward normal and contact point
                nx = R00 * nlx + R01 * nly + R02 * nlz
                ny = R10 * nlx + R11 * nly + R12 * nlz
                nz = R20 * nlx + R21 * nly + R22 * nlz
                pcx = cx + R00 * clx + R01 * cly + R02 * clz
                pcy = cy + R10 * clx + R11 * cly + R12 * clz
                pcz = cz + R20 * clx + R21 * cly + R22 * clz
                # cube surface velocity at the contact point
                ax = pcx - cx
                ay = pcy - cy
                az = pcz - cz
                vcx = cvx + cwy * az - cwz * ay
                vcy = cvy + cwz * ax - cwx * az
                vcz = cvz + cwx * ay - cwy * ax
                vrx = tvx - vcx
                vry = tvy - vcy
                vrz = tvz - vcz
                vn = vrx * nx + vry * ny + vrz * nz
                fn = k_c * pen - self._cd_tip * vn
                if fn > 0.0:
                    vtx = vrx - vn * nx
                    vty = vry - vn * ny
                    vtz = vrz - vn * nz
                    vt = math.sqrt(vtx * vtx + vty * vty + vtz * vtz)
                    scale = mu * fn / (vt if vt > vreg else vreg)
                    ffx = -scale * vtx
                    ffy = -scale * vty
                    ffz = -scale * vtz
                    Fx += fn * nx + ffx
                    Fy += fn * ny + ffy
                    Fz += fn * nz + ffz
                    cube_fx -= fn * nx + ffx
                    cube_fy -= fn * ny + ffy
                    cube_fz -= fn * nz + ffz
                    cube_tx += ay * (-fn * nz - ffz) - az * (-fn * ny - ffy)
                    cube_ty += az * (-fn * nx - ffx) - ax * (-fn * nz - ffz)
                    cube_tz += ax * (-fn * ny - ffy) - ay * (-fn * nx - ffx)
                    rec = (True, pcx, pcy, pcz, fn, -ffx, -ffy, -ffz, pen)
            contacts.append(rec if rec is not None else (False, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0))

            # fingertip vs floor ------------------------------------------------
            if pz < r_tip:
                pen = r_tip - pz
                fn = k_c * pen - self._cd_tip_floor * tvz
                if fn > 0.0:
                    vt = math.sqrt(tvx * tvx + tvy * tvy)
                    scale = mu * fn / (vt if vt > vreg else vreg)
                    Fx -= scale * tvx
                    Fy -= scale * tvy
                    Fz += fn

            # joint dynamics ----------------------------------------------------
            tc1 = J[0] * Fx + J[3] * Fy + J[6] * Fz
            tc2 = J[1] * Fx + J[4] * Fy + J[7] * Fz
            tc3 = J[2] * Fx + J[5] * Fy + J[8] * Fz
            cv = cfg.joint_damping
            new_dq[j] = d1 + dt * (t1 - g1 + tc1 - cv * d1) / inertia[0]
            new_dq[j + 1] = d2_ + dt * (t2 - g2 + tc2 - cv * d2_) / inertia[1]
            new_dq[j + 2] = d3 + dt * (t3 - g3 + tc3 - cv * d3) / inertia[2]

        # cube vs floor: any of the eight corners that dip below z = 0 ---------
        # (tracking only one body-frame face would let a toppled cube fall
        # straight through)
        for sxc, syc, szc in (
            (-h, -h, -h), (-h, h, -h), (h, -h, -h), (h, h, -h),
            (-h, -h, h), (-h, h, h), (h, -h, h), (h, h, h),
        ):
            ax = R00 * sxc + R01 * syc + R02 * szc
            ay = R10 * sxc + R11 * syc + R12 * szc
            az = R20 * sxc + R21 * syc + R22 * szc
            wz = cz + az
            if wz < 0.0:
                vx = cvx + cwy * az - cwz * ay
                vy = cvy + cwz * ax - cwx * az
                vz = cvz + cwx * ay - cwy * ax
                fn = -k_c * wz - self._cd_cube * vz
                if fn > 0.0:
                    vt = math.sqrt(vx * vx + vy * vy)
                    scale = mu * fn / (vt if vt > vreg else vreg)
                    fx = -scale * vx
                    fy = -scale * vy
                    cube_fx += fx
                    cube_fy += fy
                    cube_fz += fn
                    cube_tx += ay * fn - az * fy
                    cube_ty += az * fx - ax * fn
                    cube_tz += ax * fy - ay * fx

        # integrate cube --------------------------------------------------------
        m_c = cfg.cube_mass
        inv_I = 6.0 / (m_c * cfg.cube_side * cfg.cube_side)
        cvx += dt * (cube_fx / m_c + gx)
        cvy += dt * (cube_fy / m_c + gy)
        cvz += dt * (cube_fz / m_c + gz)
        cwx += dt * cube_tx * inv_I
        cwy += dt * cube_ty * inv_I
        cwz += dt * cube_tz * inv_I
        self._cv = [cvx, cvy, cvz]
        self._cw = [cwx, cwy, cwz]
        self._cp = [cx + dt * cvx, cy + dt * cvy, cz + dt * cvz]
        hw = 0.5 * dt
        nqw = qw + hw * (-cwx * qx - cwy * qy - cwz * qz)
        nqx = qx + hw * (cwx * qw + cwy * qz - cwz * qy)
        nqy = qy + hw * (cwy * qw + cwz * qx - cwx * qz)
        nqz = qz + hw * (cwz * qw + cwx * qy - cwy * qx)
        qn = math.sqrt(nqw * nqw + nqx * nqx + nqy * nqy + nqz * nqz)
        self._cq = [nqw / qn, nqx / qn, nqy / qn, nqz / qn]

        # integrate fingers -----------------------------------------------------
        for i in range(3):
            _, _, _, _, _, lo, hi = self._fingers[i]
            for k in range(3):
                idx = 3 * i + k
                v = new_dq[idx]
                pos = q[idx] + dt * v
                if pos < lo[k]:
                    pos = lo[k]
                    if v < 0.0:
                        v = 0.0
                elif pos > hi[k]:
                    pos = hi[k]
                    if v > 0.0:
                        v = 0.0
                q[idx] = pos
                dq[idx] = v

        self._contacts = contacts
        self._t += dt
        self._step_count += 1

        lim = cfg.blowup_limit
        if (
            abs(cvx) > lim
            or abs(cvy) > lim
            or abs(cvz) > lim
            or abs(self._cp[2]) > lim
            or max(abs(v) for v in dq) > 100.0 * lim
        ):
            raise NumericalBlowup(f"state diverged at t={self._t:.3f}s")

    # ------------------------------------------------------------------
    # observation and queries
    # ------------------------------------------------------------------

    @property
    def time(self) -> float:
        return self._t

    @property
    def step_count(self) -> int:
        return self._step_count

    def joint_state(self) -> JointState:
        return JointState(
            q=np.array(self._q), dq=np.array(self._dq), tau=np.array(self._tau)
        )

    def cube_state(self) -> CubeState:
        return CubeState(
            position=np.array(self._cp),
            orientation=np.array(self._cq),
            lin_vel=np.array(self._cv),
            ang_vel=np.array(self._cw),
        )

    def fingertip_state(self) -> FingertipState:
        pos = np.empty((3, 3))
        vel = np.empty((3, 3))
        for i, (bp, bR, L, _, _, _, _) in enumerate(self._fingers):
            j = 3 * i
            qi = (self._q[j], self._q[j + 1], self._q[j + 2])
            pos[i] = _chain_scalar(bp, bR, L, qi)[2]
            J = _jacobian_scalar(bR, L, qi)
            d1, d2_, d3 = self._dq[j], self._dq[j + 1], self._dq[j + 2]
            vel[i] = (
                J[0] * d1 + J[1] * d2_ + J[2] * d3,
                J[3] * d1 + J[4] * d2_ + J[5] * d3,
                J[6] * d1 + J[7] * d2_ + J[8] * d3,
            )
        return FingertipState(pos=pos, vel=vel)

    def contact_records(self) -> tuple[ContactRecord, ContactRecord, ContactRecord]:
        out = []
        for i, rec in enumerate(self._contacts):
            flag, px, py, pz, fn, fx, fy, fz, pen = rec
            out.append(
                ContactRecord(
                    finger_index=i,
                    in_contact=flag,
                    contact_point=np.array([px, py, pz]),
                    normal_force=fn,
                    tangential_force=np.array([fx, fy, fz]),
                    penetration=pen,
                )
            )
        return tuple(out)

    def _observed_cube(self) -> CubeState:
        model = self.observation_model
        if model.kind == "ideal":
            return self.cube_state()
        if self._obs_cube_cache is None or self._t >= self._obs_next_sample - 1e-12:
            true = self.cube_state()
            pos = true.position + self._rng.normal(0.0, model.position_noise, 3)
            rotvec = self._rng.normal(0.0, model.orientation_noise, 3)
            angle = float(np.linalg.norm(rotvec))
            if angle > 1e-12:
                axis = rotvec / angle
                s = math.sin(0.5 * angle)
                dq = np.array([math.cos(0.5 * angle), s * axis[0], s * axis[1], s * axis[2]])
            else:
                dq = np.array([1.0, 0.0, 0.0, 0.0])
            w, x, y, z = dq
            ow, ox, oy, oz = true.orientation
            quat = np.array(
                [
                    w * ow - x * ox - y * oy - z * oz,
                    w * ox + x * ow + y * oz - z * oy,
                    w * oy - x * oz + y * ow + z * ox,
                    w * oz + x * oy - y * ox + z * ow,
                ]
            )
            quat /= np.linalg.norm(quat)
            self._obs_cube_cache = CubeState(
                position=pos,
                orientation=quat,
                lin_vel=true.lin_vel,
                ang_vel=true.ang_vel,
            )
            self._obs_next_sample = self._t + 1.0 / model.cube_rate_hz
        return self._obs_cube_cache

    def observe(self) -> Observation:
        return Observation(
            time=self._t,
            joint_state=self.joint_state(),
            fingertips=self.fingertip_state(),
            cube=self._observed_cube(),
            contacts=self.contact_records(),
        )

    def mechanical_energy(self) -> float:
        """Kinetic plus gravitational plus contact-spring energy [J].

        Contact springs are part of the mechanical system here; including
        their stored energy is what makes the total non-increasing under
        zero commands.
        """
        cfg = self.config
        h = 0.5 * cfg.cube_side
        e = 0.0
        gz = -cfg.gravity[2]
        for i, (bp, bR, L, lm, inertia, _, _) in enumerate(self._fingers):
            j = 3 * i
            qi = (self._q[j], self._q[j + 1], self._q[j + 2])
            o2, o3, tip = _chain_scalar(bp, bR, L, qi)
            for k in range(3):
                e += 0.5 * inertia[k] * self._dq[j + k] ** 2
            mids_z = (
                0.5 * (bp[2] + o2[2]),
                0.5 * (o2[2] + o3[2]),
                0.5 * (o3[2] + tip[2]),
            )
            for mk, zk in zip(lm, mids_z):
                e += mk * gz * zk
            if tip[2] < cfg.tip_radius:
                e += 0.5 * cfg.contact_stiffness * (cfg.tip_radius - tip[2]) ** 2
        m_c = cfg.cube_mass
        e += 0.5 * m_c * sum(v * v for v in self._cv)
        I_c = m_c * cfg.cube_side * cfg.cube_side / 6.0
        e += 0.5 * I_c * sum(w * w for w in self._cw)
        e += m_c * gz * self._cp[2]
        # cube-floor and tip-cube springs
        for rec in self._contacts:
            if rec[0]:
                e += 0.5 * cfg.contact_stiffness * rec[8] ** 2
        qw, qx, qy, qz = self._cq
        R20 = 2.0 * (qx * qz - qw * qy)
        R21 = 2.0 * (qy * qz + qw * qx)
        R22 = 1.0 - 2.0 * (qx * qx + qy * qy)
        for sxc, syc in ((-h, -h), (-h, h), (h, -h), (h, h)):
            wz = self._cp[2] + R20 * sxc + R21 * syc - R22 * h
            if wz < 0.0:
                e += 0.5 * cfg.contact_stiffness * wz * wz
        return e


def detect_drop(
    times: np.ndarray,
    in_contact: np.ndarray,
    cube_positions: np.ndarray,
    goal_position: np.ndarray,
    window: float = 0.5,
    distance: float = 0.05,
) -> bool:
    """Decide whether the cube was dropped during an episode.

    A drop is a span longer than `window` seconds, after the first instant
    at which all three fingers touched the cube simultaneously, in which no
    finger touches the cube and the cube stays farther than `distance` from
    the goal position.  Releasing the cube at the goal therefore does not
    count, and neither does the approach phase before the grasp existed.

    Args:
        times: (T,) sample times, strictly increasing.
        in_contact: (T, 3) boolean contact flags per finger.
        cube_positions: (T, 3) cube center positions.
        goal_position: (3,) goal position.
    """
    times = np.asarray(times, dtype=float)
    in_contact = np.asarray(in_contact, dtype=bool)
    cube_positions = np.asarray(cube_positions, dtype=float)
    goal_position = np.asarray(goal_position, dtype=float)
    if times.ndim != 1 or in_contact.shape != (times.size, 3):
        raise ValueError("times and in_contact shapes are inconsistent")
    grasped = np.all(in_contact, axis=1)
    if not grasped.any():
        return False
    start = int(np.argmax(grasped))
    free = ~in_contact.any(axis=1)
    far = np.linalg.norm(cube_positions - goal_position, axis=1) > distance
    bad = free & far
    run_start = None
    for k in range(start, times.size):
        if bad[k]:
            if run_start is None:
                run_start = times[k]
            elif times[k] - run_start > window:
                return True
        else:
            run_start = None
    return False
