"""Rigid-body inertial algebra.

A rigid body is fully described (for dynamics) by ten parameters: mass,
first mass moment (mass times center of mass) and the six unique entries
of the rotational inertia tensor.  This module provides the linear
regressor that maps those parameters to the Newton-Euler wrench, frame
transforms for the parameter vector, and the physical-consistency audit
(non-negative mass, positive-semidefinite inertia, eigenvalue triangle
inequality).

Parameter vector convention (first-moment form, length 10)::

    phi = [m, m*cx, m*cy, m*cz, Ixx, Ixy, Ixz, Iyy, Iyz, Izz]

with the inertia tensor taken about the body reference-frame origin.
All functions are pure and broadcast over leading batch axes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "InertialParams",
    "BodyKinematics",
    "Wrench",
    "ConsistencyReport",
    "Pose",
    "InvalidRotation",
    "skew",
    "rotation_about_axis",
    "regressor_matrix",
    "newton_euler_wrench",
    "consistency_check",
    "count_triangle_violations",
    "transform_params",
]

PARAM_NAMES = ("m", "hx", "hy", "hz", "Ixx", "Ixy", "Ixz", "Iyy", "Iyz", "Izz")


class InvalidRotation(ValueError):
    """Rotation matrix is not orthonormal with determinant +1."""


def skew(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric cross-product matrix, batched over leading axes.

    ``skew(a) @ b == cross(a, b)`` for 3-vectors ``a``, ``b``.
    """
    v = np.asarray(v, dtype=float)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    o = np.zeros_like(x)
    return np.stack(
        [
            np.stack([o, -z, y], axis=-1),
            np.stack([z, o, -x], axis=-1),
            np.stack([-y, x, o], axis=-1),
        ],
        axis=-2,
    )


def cross3(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cross product over the trailing axis, without np.cross overhead."""
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    out[..., 0] = a1 * b2 - a2 * b1
    out[..., 1] = a2 * b0 - a0 * b2
    out[..., 2] = a0 * b1 - a1 * b0
    return out


def _inertia_from_unique(u6: np.ndarray) -> np.ndarray:
    """Unique entries [Ixx, Ixy, Ixz, Iyy, Iyz, Izz] -> symmetric 3x3."""
    u6 = np.asarray(u6, dtype=float)
    ixx, ixy, ixz, iyy, iyz, izz = (u6[..., k] for k in range(6))
    return np.stack(
        [
            np.stack([ixx, ixy, ixz], axis=-1),
            np.stack([ixy, iyy, iyz], axis=-1),
            np.stack([ixz, iyz, izz], axis=-1),
        ],
        axis=-2,
    )


def _inertia_to_unique(I: np.ndarray) -> np.ndarray:
    I = np.asarray(I, dtype=float)
    return np.stack(
        [I[..., 0, 0], I[..., 0, 1], I[..., 0, 2], I[..., 1, 1], I[..., 1, 2], I[..., 2, 2]],
        axis=-1,
    )


@dataclass(frozen=True)
class Pose:
    """Rigid transform: ``x_parent = rotation @ x_local + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_translation(t) -> "Pose":
        return Pose(np.eye(3), np.asarray(t, dtype=float))

    @staticmethod
    def from_axis_angle(axis, angle: float, translation=(0.0, 0.0, 0.0)) -> "Pose":
        return Pose(rotation_about_axis(np.asarray(axis, float), float(angle)), translation)

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @staticmethod
    def from_dict(d: dict) -> "Pose":
        return Pose(np.array(d["rotation"], dtype=float), np.array(d["translation"], dtype=float))


def rotation_about_axis(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation about a (not necessarily unit) axis."""
    a = np.asarray(axis, dtype=float)
    n = np.linalg.norm(a)
    if n == 0.0:
        raise ValueError("rotation axis must be nonzero")
    a = a / n
    K = skew(a)
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


@dataclass(frozen=True)
class InertialParams:
    """Ten-parameter description of one rigid body.

    Attributes
    ----------
    mass : float
        Body mass [kg].
    com : (3,) array
        Center of mass in the body reference frame [m].
    inertia : (3, 3) array
        Rotational inertia about the body reference-frame *origin*
        (not the COM), symmetric [kg m^2].
    """

    mass: float
    com: np.ndarray
    inertia: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mass", float(self.mass))
        object.__setattr__(self, "com", np.asarray(self.com, dtype=float).reshape(3))
        I = np.asarray(self.inertia, dtype=float).reshape(3, 3)
        I = 0.5 * (I + I.T)  # symmetric by construction
        object.__setattr__(self, "inertia", I)

    @property
    def first_moment(self) -> np.ndarray:
        """m * com."""
        return self.mass * self.com

    def to_vector(self) -> np.ndarray:
        """phi = [m, m*c, Ixx, Ixy, Ixz, Iyy, Iyz, Izz]."""
        return np.concatenate(([self.mass], self.first_moment, _inertia_to_unique(self.inertia)))

    @staticmethod
    def from_vector(phi: np.ndarray) -> "InertialParams":
        phi = np.asarray(phi, dtype=float).reshape(10)
        m = phi[0]
        com = phi[1:4] / m if abs(m) > 1e-12 else np.zeros(3)
        return InertialParams(m, com, _inertia_from_unique(phi[4:10]))

    def com_frame_inertia(self) -> np.ndarray:
        """Inertia about the COM, same axes (generalized parallel-axis shift)."""
        c = self.com
        return self.inertia - self.mass * (np.dot(c, c) * np.eye(3) - np.outer(c, c))

    def to_dict(self) -> dict:
        u = _inertia_to_unique(self.inertia)
        return {
            "mass": self.mass,
            "com": self.com.tolist(),
            "inertia": {"ixx": u[0], "iyy": u[3], "izz": u[5], "ixy": u[1], "iyz": u[4], "izx": u[2]},
        }

    @staticmethod
    def from_dict(d: dict) -> "InertialParams":
        i = d["inertia"]
        u = np.array([i["ixx"], i["ixy"], i["izx"], i["iyy"], i["iyz"], i["izz"]], dtype=float)
        return InertialParams(d["mass"], np.array(d["com"], dtype=float), _inertia_from_unique(u))


@dataclass(frozen=True)
class BodyKinematics:
    """Kinematic state of a body frame for the regressor.

    ``lin_acc`` is gravity-augmented: it contains ``a - g`` so a body at
    rest in gravity has ``lin_acc = -g`` and static poses stay
    informative for mass and first moment.
    """

    lin_acc: np.ndarray
    ang_vel: np.ndarray
    ang_acc: np.ndarray

    def __post_init__(self):
        for name in ("lin_acc", "ang_vel", "ang_acc"):
            v = np.asarray(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{name} must be finite")
            object.__setattr__(self, name, v)


@dataclass(frozen=True)
class Wrench:
    force: np.ndarray
    torque: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "force", np.asarray(self.force, dtype=float))
        object.__setattr__(self, "torque", np.asarray(self.torque, dtype=float))

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.force, self.torque], axis=-1)


def _inertia_apply_columns(v: np.ndarray) -> np.ndarray:
    """Matrix K(v) with K(v) @ [Ixx,Ixy,Ixz,Iyy,Iyz,Izz] == I @ v, batched."""
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    o = np.zeros_like(x)
    return np.stack(
        [
            np.stack([x, y, z, o, o, o], axis=-1),
            np.stack([o, x, o, y, z, o], axis=-1),
            np.stack([o, o, x, o, y, z], axis=-1),
        ],
        axis=-2,
    )


def regressor_matrix(kin: BodyKinematics) -> np.ndarray:
    """6x10 regressor Y with ``Y @ phi`` the Newton-Euler wrench.

    Rows are [fx, fy, fz, nx, ny, nz] about the body-frame origin;
    columns follow the first-moment parameter order.  Inputs broadcast:
    kinematics arrays of shape (..., 3) yield a (..., 6, 10) stack.
    """
    return _regressor(kin.lin_acc, kin.ang_vel, kin.ang_acc)


def _regressor(a: np.ndarray, w: np.ndarray, wd: np.ndarray) -> np.ndarray:
    a, w, wd = np.broadcast_arrays(np.asarray(a, float), np.asarray(w, float), np.asarray(wd, float))
    batch = a.shape[:-1]
    Y = np.zeros(batch + (6, 10))
    sw = skew(w)
    # f = m*a + (skew(wd) + skew(w)@skew(w)) @ h
    Y[..., 0:3, 0] = a
    Y[..., 0:3, 1:4] = skew(wd) + sw @ sw
    # n = (K(wd) + skew(w) @ K(w)) @ vec(I) + h x a,  h x a = -skew(a) @ h
    Y[..., 3:6, 1:4] = -skew(a)
    Y[..., 3:6, 4:10] = _inertia_apply_columns(wd) + sw @ _inertia_apply_columns(w)
    return Y


def newton_euler_wrench(params: InertialParams, kin: BodyKinematics) -> Wrench:
    """Direct Newton-Euler wrench about the body-frame origin.

    f = m a + wd x h + w x (w x h)
    n = I wd + w x (I w) + h x a
    """
    a, w, wd = kin.lin_acc, kin.ang_vel, kin.ang_acc
    h = params.first_moment
    I = params.inertia
    f = params.mass * a + np.cross(wd, h) + np.cross(w, np.cross(w, h))
    n = I @ wd + np.cross(w, I @ w) + np.cross(h, a)
    return Wrench(f, n)


def batch_wrench(m, h, I, a, w, wd):
    """Newton-Euler wrench with explicit batched parameter arrays.

    Shapes: m (...,), h (..., 3), I (..., 3, 3), kinematics (..., 3).
    Returns force and torque arrays of shape (..., 3).
    """
    f = m[..., None] * a + cross3(wd, h) + cross3(w, cross3(w, h))
    Iw = (I @ w[..., None])[..., 0]
    Iwd = (I @ wd[..., None])[..., 0]
    n = Iwd + cross3(w, Iw) + cross3(h, a)
    return f, n


# ---------------------------------------------------------------------------
# Physical consistency
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConsistencyReport:
    """Audit of the physical realizability of a parameter set.

    ``triangle_ok`` is the eigenvalue triangle inequality on the
    COM-frame inertia: s1 + s2 + s3 >= 2 * sk for each k.
    """

    mass_nonneg: bool
    inertia_eigs: np.ndarray
    psd_ok: bool
    triangle_ok: bool
    violation_count: int = 0

    @property
    def fully_consistent(self) -> bool:
        return bool(self.mass_nonneg and self.psd_ok and self.triangle_ok)


def consistency_check(params: InertialParams, tol: float = 1e-12) -> ConsistencyReport:
    """Check mass sign, inertia PSD and the eigenvalue triangle inequality.

    Eigenvalues are taken in the COM frame when the mass is meaningfully
    positive; otherwise the stored (origin-frame) tensor is used as-is.
    """
    mass_ok = params.mass >= -tol
    I = params.com_frame_inertia() if params.mass > 1e-12 else params.inertia
    eigs = np.linalg.eigvalsh(I)
    psd_ok = bool(eigs[0] >= -tol)
    triangle_ok = bool(eigs.sum() - 2.0 * eigs.max() >= -tol)
    return ConsistencyReport(
        mass_nonneg=bool(mass_ok),
        inertia_eigs=eigs,
        psd_ok=psd_ok,
        triangle_ok=triangle_ok,
        violation_count=int(not triangle_ok),
    )


def count_triangle_violations(params_list, tol: float = 1e-12) -> int:
    """Number of estimates in a batch whose COM-frame eigenvalues violate
    the triangle inequality."""
    return sum(int(not consistency_check(p, tol=tol).triangle_ok) for p in params_list)


# ---------------------------------------------------------------------------
# Frame transforms
# ---------------------------------------------------------------------------

def _check_rotation(R: np.ndarray, tol: float = 1e-9) -> None:
    err = np.abs(R @ R.T - np.eye(3)).max()
    if err > tol or np.linalg.det(R) < 0.0:
        raise InvalidRotation(f"rotation not orthonormal (deviation {err:.2e})")


def transform_mhi(m, h, I, R, p):
    """Transform batched (m, h, I) from frame A to frame B, x_B = R x_A + p.

    Works for signed masses (used for carved holes) because every term is
    linear in the density.
    """
    p = np.asarray(p, dtype=float)
    hr = (R @ h[..., None])[..., 0]
    h_new = hr + m[..., None] * p
    ph = np.sum(p * hr, axis=-1)
    pp = np.sum(p * p, axis=-1)
    eye = np.eye(3)
    I_new = (
        R @ I @ np.swapaxes(R, -1, -2)
        + (2.0 * ph + m * pp)[..., None, None] * eye
        - (hr[..., :, None] * p[..., None, :] + p[..., :, None] * hr[..., None, :])
        - m[..., None, None] * (p[..., :, None] * p[..., None, :])
    )
    return m, h_new, I_new


def transform_params(params: InertialParams, pose: Pose) -> InertialParams:
    """Express inertial parameters in a new frame.

    ``pose`` places the current body frame in the target frame
    (``x_new = R x_old + t``).  Mass is invariant; COM and inertia move
    by rotation plus the generalized parallel-axis shift.
    """
    _check_rotation(pose.rotation)
    m = np.asarray([params.mass])
    h = params.first_moment[None, :]
    I = params.inertia[None, :, :]
    m2, h2, I2 = transform_mhi(m, h, I, pose.rotation, pose.translation)
    mass = float(m2[0])
    com = h2[0] / mass if abs(mass) > 1e-12 else pose.apply(params.com)
    return InertialParams(mass, com, I2[0])
