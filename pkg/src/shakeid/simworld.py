"""Forward-dynamics simulator for a 4-DOF serial arm under PD control.

The arm is a fixed-geometry revolute chain; link inertial parameters and
joint damping are runtime data so that system identification can search
over them.  Dynamics are evaluated with a recursive Newton-Euler pass
for the bias torques and a composite-rigid-body assembly for the joint
mass matrix.  Every routine is vectorized over a leading batch axis so
that swarms of candidate models or thousands of payload rollouts run as
one array program.

A "pseudo-real" world is the same simulator with perturbed link masses,
extra damping and an unmodeled Coulomb/viscous friction term; it stands
in for a physical robot when generating target data.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .rigidbody import (
    InertialParams,
    Pose,
    batch_wrench,
    cross3,
    rotation_about_axis,
    skew,
    transform_mhi,
    transform_params,
)
from .objects import CompositeObject, composite_inertia

__all__ = [
    "LinkSpec",
    "RobotModel",
    "JointState",
    "FrictionModel",
    "Perturbation",
    "SimConfig",
    "JointCommands",
    "RolloutRecord",
    "World",
    "ArmParams",
    "SingularMassMatrix",
    "Diverged",
    "InvalidPerturbation",
    "forward_dynamics",
    "mass_matrix",
    "bias_torque",
    "pd_torque",
    "make_pseudo_real",
    "default_surrogate_perturbation",
    "rollout_batch",
    "forward_kinematics",
    "batch_accelerations",
    "payload_in_link_frame",
    "total_energy",
]

VELOCITY_DIVERGE_LIMIT = 1e3  # rad/s
_COND_LIMIT = 1e12


class SingularMassMatrix(RuntimeError):
    """Mass matrix conditioning exceeded 1e12 (degenerate link parameters)."""


class Diverged(RuntimeError):
    """A joint velocity exceeded 1e3 rad/s (unstable gains or timestep)."""


class InvalidPerturbation(ValueError):
    """Perturbed link masses must stay positive."""


# ---------------------------------------------------------------------------
# Model description
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LinkSpec:
    """One link: inertial parameters in the link frame (origin at the
    joint), the joint rotation axis, and the fixed offset of this joint's
    origin in the parent frame."""

    inertial: InertialParams
    joint_axis: np.ndarray
    offset: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.joint_axis, dtype=float).reshape(3)
        n = np.linalg.norm(a)
        if n == 0:
            raise ValueError("joint axis must be nonzero")
        object.__setattr__(self, "joint_axis", a / n)
        object.__setattr__(self, "offset", np.asarray(self.offset, dtype=float).reshape(3))


@dataclass(frozen=True)
class RobotModel:
    """4-link serial arm with PD gains and joint damping."""

    links: tuple
    joint_damping: np.ndarray
    kp: np.ndarray
    kd: np.ndarray
    gravity: np.ndarray = (0.0, 0.0, -9.81)
    torque_limit: float = 30.0
    ee_offset: np.ndarray = (0.05, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "links", tuple(self.links))
        if len(self.links) != 4:
            raise ValueError("RobotModel expects exactly 4 links")
        for name in ("joint_damping", "kp", "kd"):
            v = np.asarray(getattr(self, name), dtype=float).reshape(4)
            if np.any(v < 0):
                raise ValueError(f"{name} must be non-negative")
            object.__setattr__(self, name, v)
        if any(l.inertial.mass <= 0 for l in self.links):
            raise ValueError("link masses must be positive")
        object.__setattr__(self, "gravity", np.asarray(self.gravity, dtype=float).reshape(3))
        object.__setattr__(self, "ee_offset", np.asarray(self.ee_offset, dtype=float).reshape(3))
        object.__setattr__(self, "torque_limit", float(self.torque_limit))

    @property
    def link_masses(self) -> np.ndarray:
        return np.array([l.inertial.mass for l in self.links])

    def with_link_masses(self, masses) -> "RobotModel":
        """Rescale link masses density-style: first moment and inertia scale
        with the mass so the geometry is preserved."""
        masses = np.asarray(masses, dtype=float).reshape(4)
        if np.any(masses <= 0):
            raise InvalidPerturbation("link masses must stay positive")
        links = []
        for spec, m_new in zip(self.links, masses):
            p = spec.inertial
            s = m_new / p.mass
            links.append(replace(spec, inertial=InertialParams(m_new, p.com, s * p.inertia)))
        return replace(self, links=tuple(links))

    def with_joint_damping(self, damping) -> "RobotModel":
        return replace(self, joint_damping=np.asarray(damping, dtype=float).reshape(4))

    def with_sysid_vector(self, zeta) -> "RobotModel":
        """Apply an 8-vector [damping(4), link masses(4)]."""
        zeta = np.asarray(zeta, dtype=float).reshape(8)
        return self.with_link_masses(zeta[4:]).with_joint_damping(zeta[:4])

    def sysid_vector(self) -> np.ndarray:
        return np.concatenate([self.joint_damping, self.link_masses])

    @staticmethod
    def default() -> "RobotModel":
        """Desk-scale stand-in for a humanoid's 4-DOF arm: yaw shoulder plus
        three pitch joints, link lengths 0.10/0.25/0.25/0.05 m."""

        def box_inertial(mass, com, dims):
            a, b, c = dims
            i_com = mass / 12.0 * np.diag([b * b + c * c, a * a + c * c, a * a + b * b])
            com = np.asarray(com, dtype=float)
            i_origin = i_com + mass * (np.dot(com, com) * np.eye(3) - np.outer(com, com))
            return InertialParams(mass, com, i_origin)

        # wrist inertia includes the gripper assembly and reflected rotor
        # inertia; a bare-box value would leave the joint so light that
        # acceleration-level corrections become numerically brittle
        wrist_com = np.array([0.04, 0.0, 0.0])
        wrist_inertia = np.diag([5e-4, 9e-4, 9e-4]) + 0.35 * (
            np.dot(wrist_com, wrist_com) * np.eye(3) - np.outer(wrist_com, wrist_com)
        )
        links = (
            LinkSpec(box_inertial(0.8, (0, 0, 0.05), (0.06, 0.06, 0.10)), (0, 0, 1), (0, 0, 0)),
            LinkSpec(box_inertial(0.6, (0.125, 0, 0), (0.25, 0.05, 0.05)), (0, 1, 0), (0, 0, 0.10)),
            LinkSpec(box_inertial(0.4, (0.125, 0, 0), (0.25, 0.05, 0.05)), (0, 1, 0), (0.25, 0, 0)),
            LinkSpec(InertialParams(0.35, wrist_com, wrist_inertia), (0, 1, 0), (0.25, 0, 0)),
        )
        return RobotModel(
            links=links,
            joint_damping=(0.05, 0.05, 0.03, 0.01),
            kp=(150.0, 150.0, 80.0, 20.0),
            kd=(6.0, 6.0, 2.0, 0.3),
        )

    def to_json(self, path=None):
        d = {
            "links": [
                {
                    "inertial": l.inertial.to_dict(),
                    "joint_axis": l.joint_axis.tolist(),
                    "offset": l.offset.tolist(),
                }
                for l in self.links
            ],
            "joint_damping": self.joint_damping.tolist(),
            "kp": self.kp.tolist(),
            "kd": self.kd.tolist(),
            "gravity": self.gravity.tolist(),
            "torque_limit": self.torque_limit,
            "ee_offset": self.ee_offset.tolist(),
        }
        if path is None:
            return d
        with open(path, "w") as f:
            json.dump(d, f, indent=1)
        return d

    @staticmethod
    def from_json(source) -> "RobotModel":
        if isinstance(source, dict):
            d = source
        else:
            with open(source) as f:
                d = json.load(f)
        links = tuple(
            LinkSpec(InertialParams.from_dict(l["inertial"]), l["joint_axis"], l["offset"])
            for l in d["links"]
        )
        return RobotModel(
            links=links,
            joint_damping=d["joint_damping"],
            kp=d["kp"],
            kd=d["kd"],
            gravity=d["gravity"],
            torque_limit=d["torque_limit"],
            ee_offset=d["ee_offset"],
        )


@dataclass(frozen=True)
class JointState:
    q: np.ndarray
    qdot: np.ndarray

    def __post_init__(self):
        for name in ("q", "qdot"):
            v = np.asarray(getattr(self, name), dtype=float).reshape(4)
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{name} must be finite")
            object.__setattr__(self, name, v)


@dataclass(frozen=True)
class FrictionModel:
    """Unmodeled joint friction: Coulomb (smoothed sign) plus extra viscous."""

    coulomb: np.ndarray = (0.0, 0.0, 0.0, 0.0)
    viscous_extra: np.ndarray = (0.0, 0.0, 0.0, 0.0)
    stiction_blend: float = 0.05

    def __post_init__(self):
        for name in ("coulomb", "viscous_extra"):
            v = np.asarray(getattr(self, name), dtype=float).reshape(4)
            if np.any(v < 0):
                raise ValueError(f"{name} must be non-negative")
            object.__setattr__(self, name, v)
        if self.stiction_blend <= 0:
            raise ValueError("stiction_blend must be positive")

    @property
    def is_zero(self) -> bool:
        return not (np.any(self.coulomb) or np.any(self.viscous_extra))

    def torque(self, qdot: np.ndarray) -> np.ndarray:
        return -self.coulomb * np.tanh(qdot / self.stiction_blend) - self.viscous_extra * qdot


@dataclass(frozen=True)
class Perturbation:
    mass_scale: np.ndarray = (1.0, 1.0, 1.0, 1.0)
    damping_offset: np.ndarray = (0.0, 0.0, 0.0, 0.0)
    friction: FrictionModel = field(default_factory=FrictionModel)

    def __post_init__(self):
        for name in ("mass_scale", "damping_offset"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(4))


def default_surrogate_perturbation() -> Perturbation:
    """Planted reality gap used throughout the tests and demos.

    Friction is proximal-heavy: the big geared base joints drag, the
    light distal bearings barely do.  (A large Coulomb term on the
    low-inertia wrist would chatter at the control rate, which no
    smooth residual model can or should represent.)
    """
    return Perturbation(
        mass_scale=(1.12, 0.88, 1.10, 0.86),
        damping_offset=(0.04, 0.05, 0.03, 0.015),
        friction=FrictionModel(
            coulomb=(0.10, 0.08, 0.04, 0.004),
            viscous_extra=(0.02, 0.015, 0.008, 0.001),
            stiction_blend=0.1,
        ),
    )


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1e-3
    integrator: str = "semi-implicit-euler"
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.dt <= 0.01):
            raise ValueError("dt must be in (0, 0.01]")
        if self.integrator not in ("semi-implicit-euler", "rk4"):
            raise ValueError(f"unknown integrator {self.integrator!r}")


@dataclass(frozen=True)
class JointCommands:
    """Joint-space tracking commands sampled at the control rate."""

    dt: float
    q_des: np.ndarray
    qdot_des: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q_des, dtype=float)
        qd = np.asarray(self.qdot_des, dtype=float)
        if q.shape != qd.shape or q.ndim != 2 or q.shape[1] != 4:
            raise ValueError("q_des and qdot_des must both be (N, 4)")
        object.__setattr__(self, "q_des", q)
        object.__setattr__(self, "qdot_des", qd)

    def __len__(self):
        return self.q_des.shape[0]

    @staticmethod
    def hold(q, duration: float, dt: float) -> "JointCommands":
        n = int(round(duration / dt))
        q = np.asarray(q, dtype=float).reshape(4)
        return JointCommands(dt, np.tile(q, (n, 1)), np.zeros((n, 4)))


@dataclass
class RolloutRecord:
    """Time series produced by one simulated trajectory execution."""

    dt: float
    t: np.ndarray
    q: np.ndarray
    qdot: np.ndarray
    tau: np.ndarray
    ee_pos: np.ndarray
    payload_label: str = "Free"

    def __len__(self):
        return self.q.shape[0]

    @property
    def initial_state(self) -> JointState:
        return JointState(self.q[0], self.qdot[0])

    def to_csv(self, path) -> None:
        header = ["t"] + [f"q{i}" for i in range(1, 5)] + [f"qd{i}" for i in range(1, 5)]
        header += [f"tau{i}" for i in range(1, 5)] + ["ex", "ey", "ez"]
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(header)
            for k in range(len(self)):
                row = [self.t[k], *self.q[k], *self.qdot[k], *self.tau[k], *self.ee_pos[k]]
                w.writerow([f"{v:.17g}" for v in row])

    @staticmethod
    def from_csv(path, payload_label: str = "Free") -> "RolloutRecord":
        data = np.genfromtxt(path, delimiter=",", skip_header=1)
        data = np.atleast_2d(data)
        t = data[:, 0]
        dt = float(t[1] - t[0]) if len(t) > 1 else 1e-3
        return RolloutRecord(
            dt=dt, t=t, q=data[:, 1:5], qdot=data[:, 5:9], tau=data[:, 9:13],
            ee_pos=data[:, 13:16], payload_label=payload_label,
        )

    def to_npz(self, path) -> None:
        np.savez_compressed(
            path, dt=self.dt, t=self.t, q=self.q, qdot=self.qdot, tau=self.tau,
            ee_pos=self.ee_pos, payload_label=self.payload_label,
        )

    @staticmethod
    def from_npz(path) -> "RolloutRecord":
        z = np.load(path, allow_pickle=False)
        return RolloutRecord(
            dt=float(z["dt"]), t=z["t"], q=z["q"], qdot=z["qdot"], tau=z["tau"],
            ee_pos=z["ee_pos"], payload_label=str(z["payload_label"]),
        )


# ---------------------------------------------------------------------------
# Batched numeric core
# ---------------------------------------------------------------------------

class ArmParams:
    """Batched numeric view of one or more structurally identical arms.

    Geometry (axes, offsets, gravity, gains) is shared; link masses,
    first moments, inertia tensors and damping carry a batch axis B.
    """

    def __init__(self, axes, offsets, ee_offset, gravity, kp, kd, torque_limit, m, h, I, damping):
        self.axes = axes          # (4, 3)
        self.offsets = offsets    # (4, 3)
        self.ee_offset = ee_offset
        self.gravity = gravity
        self.kp = kp
        self.kd = kd
        self.torque_limit = torque_limit
        self.m = m                # (B, 4)
        self.h = h                # (B, 4, 3)
        self.I = I                # (B, 4, 3, 3)
        self.damping = damping    # (B, 4)
        # fixed Rodrigues terms per joint
        self._skews = [skew(axes[j]) for j in range(4)]
        self._skews2 = [self._skews[j] @ self._skews[j] for j in range(4)]

    @property
    def batch(self) -> int:
        return self.m.shape[0]

    @staticmethod
    def from_models(models) -> "ArmParams":
        base = models[0]
        m = np.array([[l.inertial.mass for l in mod.links] for mod in models])
        h = np.array([[l.inertial.first_moment for l in mod.links] for mod in models])
        I = np.array([[l.inertial.inertia for l in mod.links] for mod in models])
        damping = np.array([mod.joint_damping for mod in models])
        return ArmParams(
            axes=np.array([l.joint_axis for l in base.links]),
            offsets=np.array([l.offset for l in base.links]),
            ee_offset=base.ee_offset,
            gravity=base.gravity,
            kp=base.kp,
            kd=base.kd,
            torque_limit=base.torque_limit,
            m=m, h=h, I=I, damping=damping,
        )

    @staticmethod
    def from_model(model: RobotModel) -> "ArmParams":
        return ArmParams.from_models([model])

    def tile(self, batch: int) -> "ArmParams":
        if self.batch == batch:
            return self
        if self.batch != 1:
            raise ValueError("can only tile a batch-1 parameter set")
        return ArmParams(
            self.axes, self.offsets, self.ee_offset, self.gravity, self.kp, self.kd,
            self.torque_limit,
            np.repeat(self.m, batch, axis=0), np.repeat(self.h, batch, axis=0),
            np.repeat(self.I, batch, axis=0), np.repeat(self.damping, batch, axis=0),
        )

    def with_payload(self, m_p, h_p, I_p) -> "ArmParams":
        """Add payload parameters (expressed in the last link frame) to link 4.

        Accepts scalars/(3,)/(3,3) or batched arrays matching the batch.
        """
        m_p = np.atleast_1d(np.asarray(m_p, dtype=float))
        h_p = np.asarray(h_p, dtype=float).reshape(-1, 3)
        I_p = np.asarray(I_p, dtype=float).reshape(-1, 3, 3)
        batch = max(self.batch, m_p.shape[0])
        out = self.tile(batch) if self.batch != batch else self
        m = out.m.copy()
        h = out.h.copy()
        I = out.I.copy()
        m[:, 3] = m[:, 3] + m_p
        h[:, 3] = h[:, 3] + h_p
        I[:, 3] = I[:, 3] + I_p
        return ArmParams(
            out.axes, out.offsets, out.ee_offset, out.gravity, out.kp, out.kd,
            out.torque_limit, m, h, I, out.damping,
        )


def _rot_vec(R, v):
    """(B,3,3) @ (B,3) -> (B,3)."""
    return (R @ v[..., None])[..., 0]


def _rotT_vec(R, v):
    """R^T @ v for batched R."""
    return (v[..., None, :] @ R)[..., 0, :]


def _joint_rotations(params: ArmParams, q: np.ndarray):
    """Per-joint rotation matrices, link frame -> parent frame.  q: (B, 4)."""
    rs = []
    eye = np.eye(3)
    for j in range(4):
        c = np.cos(q[:, j])[:, None, None]
        s = np.sin(q[:, j])[:, None, None]
        rs.append(eye + s * params._skews[j] + (1.0 - c) * params._skews2[j])
    return rs


def _forward_pass(params: ArmParams, q, qd, qdd, rotations=None):
    """Propagate angular velocity/acceleration and gravity-augmented origin
    acceleration down the chain.  Returns per-link (w, wd, a) in link frames
    plus the rotation list."""
    B = q.shape[0]
    rs = rotations if rotations is not None else _joint_rotations(params, q)
    w_p = np.zeros((B, 3))
    wd_p = np.zeros((B, 3))
    a_p = np.broadcast_to(-params.gravity, (B, 3))
    ws, wds, accs = [], [], []
    for j in range(4):
        R = rs[j]
        p = params.offsets[j]
        axis = params.axes[j]
        w_par = _rotT_vec(R, w_p)
        wd_par = _rotT_vec(R, wd_p)
        qd_a = qd[:, j:j + 1] * axis
        w = w_par + qd_a
        wd = wd_par + cross3(w_par, qd_a) + qdd[:, j:j + 1] * axis
        a_join = a_p + cross3(wd_p, p) + cross3(w_p, cross3(w_p, np.broadcast_to(p, (B, 3))))
        a = _rotT_vec(R, a_join)
        ws.append(w)
        wds.append(wd)
        accs.append(a)
        w_p, wd_p, a_p = w, wd, a
    return ws, wds, accs, rs


def _rnea(params: ArmParams, q, qd, qdd, rotations=None):
    """Joint torques for the rigid-body chain (gravity included, no damping)."""
    ws, wds, accs, rs = _forward_pass(params, q, qd, qdd, rotations)
    B = q.shape[0]
    tau = np.zeros((B, 4))
    f_child = None
    n_child = None
    for j in range(3, -1, -1):
        F, N = batch_wrench(params.m[:, j], params.h[:, j], params.I[:, j], accs[j], ws[j], wds[j])
        if f_child is not None:
            Rc = rs[j + 1]
            pc = params.offsets[j + 1]
            f_rot = _rot_vec(Rc, f_child)
            n_rot = _rot_vec(Rc, n_child)
            F = F + f_rot
            N = N + n_rot + cross3(np.broadcast_to(pc, (B, 3)), f_rot)
        tau[:, j] = N @ params.axes[j]
        f_child, n_child = F, N
    return tau, rs


def _crba(params: ArmParams, rotations):
    """Joint mass matrix via composite-rigid-body assembly."""
    B = rotations[0].shape[0]
    comp_m = [None] * 4
    comp_h = [None] * 4
    comp_I = [None] * 4
    comp_m[3], comp_h[3], comp_I[3] = params.m[:, 3], params.h[:, 3], params.I[:, 3]
    for j in range(2, -1, -1):
        mc, hc, Ic = transform_mhi(
            comp_m[j + 1], comp_h[j + 1], comp_I[j + 1], rotations[j + 1], params.offsets[j + 1]
        )
        comp_m[j] = params.m[:, j] + mc
        comp_h[j] = params.h[:, j] + hc
        comp_I[j] = params.I[:, j] + Ic
    H = np.zeros((B, 4, 4))
    for i in range(3, -1, -1):
        axis = params.axes[i]
        nf = comp_I[i] @ axis
        ff = cross3(axis, comp_h[i])
        H[:, i, i] = nf @ axis
        f, n = ff, nf
        for j in range(i - 1, -1, -1):
            R = rotations[j + 1]
            p = params.offsets[j + 1]
            f_rot = _rot_vec(R, f)
            n = _rot_vec(R, n) + cross3(np.broadcast_to(p, f_rot.shape), f_rot)
            f = f_rot
            hij = n @ params.axes[j]
            H[:, j, i] = hij
            H[:, i, j] = hij
    return H


def forward_kinematics(params: ArmParams, q: np.ndarray, rotations=None):
    """World rotation/origin per link and the end-effector position.

    Returns (R_world list, origin list, ee_pos) with batch axis leading.
    """
    rs = rotations if rotations is not None else _joint_rotations(params, q)
    B = q.shape[0]
    R_w = np.broadcast_to(np.eye(3), (B, 3, 3))
    o_w = np.zeros((B, 3))
    Rs_world, origins = [], []
    for j in range(4):
        o_w = o_w + _rot_vec(R_w, np.broadcast_to(params.offsets[j], (B, 3)))
        R_w = R_w @ rs[j]
        Rs_world.append(R_w)
        origins.append(o_w)
    ee = o_w + _rot_vec(R_w, np.broadcast_to(params.ee_offset, (B, 3)))
    return Rs_world, origins, ee


def _accelerations(params: ArmParams, q, qd, tau, friction=None, hook=None, t=0.0):
    """Batched joint accelerations plus the rotation list (for reuse).

    ``hook`` is a residual correction in torque units, added to the
    actuation before the mass-matrix solve.
    """
    bias, rs = _rnea(params, q, qd, np.zeros_like(q))
    applied = tau + params.damping * (-qd)
    if friction is not None:
        applied = applied + friction.torque(qd)
    if hook is not None:
        applied = applied + hook(q, qd, tau, t)
    H = _crba(params, rs)
    qdd = np.linalg.solve(H, (applied - bias)[..., None])[..., 0]
    return qdd, rs, H


def mass_matrix(model: RobotModel, q) -> np.ndarray:
    """Joint-space mass matrix at configuration q (4,)."""
    params = ArmParams.from_model(model)
    q = np.asarray(q, dtype=float).reshape(1, 4)
    return _crba(params, _joint_rotations(params, q))[0]


def bias_torque(model: RobotModel, state: JointState) -> np.ndarray:
    """Coriolis/centrifugal plus gravity torque (no damping)."""
    params = ArmParams.from_model(model)
    tau, _ = _rnea(params, state.q[None], state.qdot[None], np.zeros((1, 4)))
    return tau[0]


def payload_in_link_frame(model: RobotModel, payload) -> tuple:
    """Express a payload in the last-link frame as (m, h, I).

    ``payload`` is a CompositeObject (grasp pose applied) or
    InertialParams already expressed in the end-effector frame.
    """
    if isinstance(payload, CompositeObject):
        params_ee = transform_params(composite_inertia(payload), payload.grasp_pose)
    elif isinstance(payload, InertialParams):
        params_ee = payload
    else:
        raise TypeError("payload must be CompositeObject or InertialParams")
    in_link4 = transform_params(params_ee, Pose.from_translation(model.ee_offset))
    return in_link4.mass, in_link4.first_moment, in_link4.inertia


def forward_dynamics(model: RobotModel, state: JointState, tau, payload=None) -> np.ndarray:
    """Joint accelerations q̈ solving M(q) q̈ = τ - C(q, q̇)q̇ - g(q) - d∘q̇.

    Raises :class:`SingularMassMatrix` when the mass matrix conditioning
    exceeds 1e12.
    """
    params = ArmParams.from_model(model)
    if payload is not None:
        params = params.with_payload(*payload_in_link_frame(model, payload))
    q = state.q[None]
    qd = state.qdot[None]
    tau = np.asarray(tau, dtype=float).reshape(1, 4)
    bias, rs = _rnea(params, q, qd, np.zeros((1, 4)))
    H = _crba(params, rs)[0]
    cond = np.linalg.cond(H)
    if not np.isfinite(cond) or cond > _COND_LIMIT:
        raise SingularMassMatrix(f"mass matrix condition number {cond:.3e}")
    rhs = tau[0] - bias[0] - params.damping[0] * state.qdot
    return np.linalg.solve(H, rhs)


def pd_torque(kp, kd, q_des, qdot_des, state: JointState, torque_limit=np.inf) -> np.ndarray:
    """PD tracking torque, clamped to the symmetric torque limit."""
    tau = np.asarray(kp) * (np.asarray(q_des) - state.q) + np.asarray(kd) * (
        np.asarray(qdot_des) - state.qdot
    )
    return np.clip(tau, -torque_limit, torque_limit)


# ---------------------------------------------------------------------------
# Rollouts
# ---------------------------------------------------------------------------

def rollout_batch(
    params: ArmParams,
    commands: JointCommands,
    config: SimConfig,
    friction: FrictionModel = None,
    hook=None,
    initial_q=None,
    initial_qd=None,
    record_ee: bool = True,
):
    """Track joint commands with PD control for a batch of worlds.

    Returns a dict with q/qdot/tau (B, N, 4) arrays, the end-effector
    path when requested, and a boolean ``diverged`` mask.  Diverged
    worlds are frozen at their last finite state instead of poisoning
    the batch.
    """
    if friction is not None and friction.is_zero:
        friction = None
    dt = config.dt
    if abs(commands.dt - dt) > 1e-12:
        raise ValueError("commands must be sampled at the simulation dt")
    n = len(commands)
    B = params.batch
    q = np.tile(commands.q_des[0], (B, 1)) if initial_q is None else np.array(initial_q, dtype=float).reshape(B, 4)
    qd = np.zeros((B, 4)) if initial_qd is None else np.array(initial_qd, dtype=float).reshape(B, 4)
    out_q = np.empty((B, n, 4))
    out_qd = np.empty((B, n, 4))
    out_tau = np.empty((B, n, 4))
    alive = np.ones(B, dtype=bool)
    zeros4 = np.zeros((B, 4))

    def control(qq, qqd, k):
        tau = params.kp * (commands.q_des[k] - qq) + params.kd * (commands.qdot_des[k] - qqd)
        return np.clip(tau, -params.torque_limit, params.torque_limit)

    for k in range(n):
        t = k * dt
        tau = control(q, qd, k)
        out_q[:, k] = q
        out_qd[:, k] = qd
        out_tau[:, k] = tau
        if k == n - 1:
            break
        if config.integrator == "semi-implicit-euler":
            rs = _joint_rotations(params, q)
            bias, _ = _rnea(params, q, qd, zeros4, rotations=rs)
            applied = tau - params.damping * qd
            if friction is not None:
                applied = applied + friction.torque(qd)
            if hook is not None:
                applied = applied + hook(q, qd, tau, t)
            H = _crba(params, rs)
            qdd = np.linalg.solve(H, (applied - bias)[..., None])[..., 0]
            qd_new = qd + dt * qdd
            q_new = q + dt * qd_new
        else:  # rk4, torque of stage states against the same command sample
            def deriv(qq, qqd, ts):
                tt = control(qq, qqd, k)
                qdd, _, _ = _accelerations(params, qq, qqd, tt, friction, hook, ts)
                return qqd, qdd

            k1q, k1v = deriv(q, qd, t)
            k2q, k2v = deriv(q + 0.5 * dt * k1q, qd + 0.5 * dt * k1v, t + 0.5 * dt)
            k3q, k3v = deriv(q + 0.5 * dt * k2q, qd + 0.5 * dt * k2v, t + 0.5 * dt)
            k4q, k4v = deriv(q + dt * k3q, qd + dt * k3v, t + dt)
            q_new = q + dt / 6.0 * (k1q + 2 * k2q + 2 * k3q + k4q)
            qd_new = qd + dt / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)

        bad = (np.abs(qd_new).max(axis=1) > VELOCITY_DIVERGE_LIMIT) | ~np.isfinite(
            qd_new
        ).all(axis=1) | ~np.isfinite(q_new).all(axis=1)
        alive_now = alive & ~bad
        q = np.where(alive_now[:, None], q_new, q)
        qd = np.where(alive_now[:, None], qd_new, qd)
        alive = alive_now
        if not alive.any():
            for kk in range(k + 1, n):
                out_q[:, kk] = q
                out_qd[:, kk] = qd
                out_tau[:, kk] = control(q, qd, kk)
            break

    out = {
        "q": out_q,
        "qdot": out_qd,
        "tau": out_tau,
        "diverged": ~alive,
        "t": np.arange(n) * dt,
    }
    if record_ee:
        # FK depends only on geometry and q; evaluate once over all samples
        _, _, ee = forward_kinematics(params, out_q.reshape(B * n, 4))
        out["ee_pos"] = ee.reshape(B, n, 3)
    return out


class World:
    """A simulator: model dynamics, optional unmodeled friction (the
    pseudo-real case) and an optional residual correction hook.

    ``residual_hook(q, qd, tau, t)`` returns a torque-unit correction
    added to the actuation before the mass-matrix solve; the resulting
    joint-acceleration change is ``M(q)^-1 @ hook(...)``."""

    def __init__(self, model: RobotModel, friction: FrictionModel = None, residual_hook=None):
        self.model = model
        self.friction = friction
        self.residual_hook = residual_hook

    def with_model(self, model: RobotModel) -> "World":
        return World(model, self.friction, self.residual_hook)

    def with_hook(self, hook) -> "World":
        return World(self.model, self.friction, hook)

    def rollout(
        self,
        commands: JointCommands,
        config: SimConfig = SimConfig(),
        payload=None,
        initial_state: JointState = None,
        label: str = None,
    ) -> RolloutRecord:
        params = ArmParams.from_model(self.model)
        payload_label = "Free"
        if payload is not None:
            params = params.with_payload(*payload_in_link_frame(self.model, payload))
            payload_label = payload.label if isinstance(payload, CompositeObject) else "custom"
        init_q = initial_state.q[None] if initial_state is not None else None
        init_qd = initial_state.qdot[None] if initial_state is not None else None
        out = rollout_batch(
            params, commands, config, friction=self.friction, hook=self.residual_hook,
            initial_q=init_q, initial_qd=init_qd,
        )
        if out["diverged"][0]:
            raise Diverged("joint velocity exceeded 1e3 rad/s during rollout")
        return RolloutRecord(
            dt=config.dt, t=out["t"], q=out["q"][0], qdot=out["qdot"][0],
            tau=out["tau"][0], ee_pos=out["ee_pos"][0],
            payload_label=label if label is not None else payload_label,
        )


def make_pseudo_real(model: RobotModel, perturbation: Perturbation) -> World:
    """Perturbed stand-in for the physical robot.

    Link masses are rescaled, damping offset, and a Coulomb/viscous
    friction term is added that no setting of the identifiable
    parameters can represent.
    """
    masses = model.link_masses * perturbation.mass_scale
    if np.any(masses <= 0):
        raise InvalidPerturbation("perturbed link masses must be positive")
    perturbed = model.with_link_masses(masses).with_joint_damping(
        model.joint_damping + perturbation.damping_offset
    )
    friction = None if perturbation.friction.is_zero else perturbation.friction
    return World(perturbed, friction=friction)


def batch_accelerations(model: RobotModel, q, qd, tau, friction: FrictionModel = None) -> np.ndarray:
    """Joint accelerations evaluated pointwise at (N, 4) state/torque arrays.

    Vectorizes over the leading axis (time or batch); no integration.
    """
    params = ArmParams.from_model(model)
    q = np.atleast_2d(np.asarray(q, dtype=float))
    qd = np.atleast_2d(np.asarray(qd, dtype=float))
    tau = np.atleast_2d(np.asarray(tau, dtype=float))
    bias, rs = _rnea(params, q, qd, np.zeros_like(q))
    applied = tau - params.damping * qd
    if friction is not None and not friction.is_zero:
        applied = applied + friction.torque(qd)
    H = _crba(params, rs)
    return np.linalg.solve(H, (applied - bias)[..., None])[..., 0]


def total_energy(model: RobotModel, state: JointState, payload=None) -> float:
    """Kinetic plus gravitational potential energy of the arm."""
    params = ArmParams.from_model(model)
    if payload is not None:
        params = params.with_payload(*payload_in_link_frame(model, payload))
    q = state.q[None]
    rs = _joint_rotations(params, q)
    H = _crba(params, rs)[0]
    kinetic = 0.5 * state.qdot @ H @ state.qdot
    Rs, origins, _ = forward_kinematics(params, q, rs)
    potential = 0.0
    for j in range(4):
        com_w = origins[j][0] + Rs[j][0] @ (params.h[0, j] / params.m[0, j])
        potential -= params.m[0, j] * np.dot(params.gravity, com_w)
    return float(kinetic + potential)
