"""Shaking-trajectory generation and inverse kinematics.

The excitation signal mimics how a person shakes an unfamiliar object:
a sinusoid whose frequency decays linearly over the trial, amplitude
shaped by a Hann window so the motion starts and ends at rest.  Two such
signals (x and y axes of the end-effector) form the task trajectory,
which is converted to joint commands with damped-least-squares
differential IK, one step per control tick.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .simworld import ArmParams, JointCommands, RobotModel, forward_kinematics, _joint_rotations

__all__ = [
    "ChirpConfig",
    "TaskTrajectory",
    "IKConfig",
    "ConfigMismatch",
    "hann_window",
    "chirp_signal",
    "build_task_trajectory",
    "position_jacobian",
    "end_effector_position",
    "dls_ik_step",
    "solve_ik",
    "task_to_joint_commands",
    "DEFAULT_HOLD_POSE",
]

DEFAULT_HOLD_POSE = np.array([0.0, 0.6, -1.2, 0.6])


class ConfigMismatch(ValueError):
    """Per-axis chirp configs disagree on dt or total duration."""


@dataclass(frozen=True)
class ChirpConfig:
    """Decaying-frequency chirp parameters.

    ``amplitude`` is the end-effector displacement envelope in meters.
    The sweep runs from ``h_freq`` down to ``l_freq`` over ``t_total``.
    """

    h_freq: float
    l_freq: float
    amplitude: float
    t_total: float = 0.5
    dt: float = 1e-3

    def __post_init__(self):
        if not (self.h_freq >= self.l_freq > 0):
            raise ValueError("need h_freq >= l_freq > 0")
        if self.t_total <= 0 or self.dt <= 0:
            raise ValueError("t_total and dt must be positive")

    @staticmethod
    def x_axis_default() -> "ChirpConfig":
        # 5 -> 1 Hz sweep, 5 mm envelope (negative: leading pull-in)
        return ChirpConfig(h_freq=5.0, l_freq=1.0, amplitude=-0.005)

    @staticmethod
    def y_axis_default() -> "ChirpConfig":
        # 3 -> 1 Hz sweep, 80 mm envelope
        return ChirpConfig(h_freq=3.0, l_freq=1.0, amplitude=0.08)


def hann_window(t, t_total: float):
    """w(t) = (1 - cos(2 pi t / T)) / 2; zero at both ends, one at T/2."""
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * np.asarray(t, dtype=float) / t_total))


def chirp_signal(cfg: ChirpConfig):
    """Sample the windowed decaying-frequency chirp.

    Returns (t, x) arrays of length N = round(t_total / dt), t_k = k dt.
    The instantaneous frequency falls linearly from h_freq at t = 0 to
    l_freq at t = t_total; the phase is the running sum of fdt.
    """
    n = int(round(cfg.t_total / cfg.dt))
    t = np.arange(n) * cfg.dt
    freq = cfg.h_freq - (cfg.h_freq - cfg.l_freq) * (t / cfg.t_total)
    phase = cfg.dt * np.cumsum(freq)
    x = cfg.amplitude * np.sin(2.0 * np.pi * phase) * hann_window(t, cfg.t_total)
    return t, x


@dataclass(frozen=True)
class TaskTrajectory:
    """End-effector displacement targets relative to the hold pose."""

    dt: float
    targets: np.ndarray  # (N, 3)

    def __post_init__(self):
        tgt = np.asarray(self.targets, dtype=float)
        if tgt.ndim != 2 or tgt.shape[1] != 3:
            raise ValueError("targets must be (N, 3)")
        object.__setattr__(self, "targets", tgt)

    def __len__(self):
        return self.targets.shape[0]

    def to_csv(self, path) -> None:
        n = len(self)
        data = np.column_stack([np.arange(n) * self.dt, self.targets])
        np.savetxt(path, data, delimiter=",", header="t,x,y,z", comments="", fmt="%.17g")

    @staticmethod
    def from_csv(path) -> "TaskTrajectory":
        data = np.atleast_2d(np.genfromtxt(path, delimiter=",", skip_header=1))
        dt = float(data[1, 0] - data[0, 0]) if data.shape[0] > 1 else 1e-3
        return TaskTrajectory(dt=dt, targets=data[:, 1:4])


def build_task_trajectory(cfg_x: ChirpConfig, cfg_y: ChirpConfig) -> TaskTrajectory:
    """Assemble per-axis chirps into 3-vector displacements with z = 0."""
    if abs(cfg_x.dt - cfg_y.dt) > 1e-12 or abs(cfg_x.t_total - cfg_y.t_total) > 1e-12:
        raise ConfigMismatch("x/y chirp configs must share dt and t_total")
    _, x = chirp_signal(cfg_x)
    _, y = chirp_signal(cfg_y)
    return TaskTrajectory(dt=cfg_x.dt, targets=np.column_stack([x, y, np.zeros_like(x)]))


# ---------------------------------------------------------------------------
# Kinematics
# ---------------------------------------------------------------------------

def end_effector_position(model: RobotModel, q) -> np.ndarray:
    params = ArmParams.from_model(model)
    _, _, ee = forward_kinematics(params, np.asarray(q, dtype=float).reshape(1, 4))
    return ee[0]


def position_jacobian(model: RobotModel, q) -> np.ndarray:
    """Analytic 3x4 end-effector position Jacobian (world frame).

    Column j is axis_j x (p_ee - p_j) with the joint axis and origin
    expressed in the world frame.
    """
    params = ArmParams.from_model(model)
    q = np.asarray(q, dtype=float).reshape(1, 4)
    rs = _joint_rotations(params, q)
    Rs, origins, ee = forward_kinematics(params, q, rs)
    J = np.zeros((3, 4))
    R_parent = np.eye(3)
    for j in range(4):
        axis_w = R_parent @ params.axes[j]  # joint axis is fixed in the pre-rotation frame
        J[:, j] = np.cross(axis_w, ee[0] - origins[j][0])
        R_parent = Rs[j][0]
    return J


@dataclass(frozen=True)
class IKConfig:
    damping: float = 0.05
    step_gain: float = 0.5
    max_iter: int = 100
    tol: float = 1e-4

    def __post_init__(self):
        if self.damping <= 0:
            raise ValueError("damping must be positive")
        if not (0.0 < self.step_gain <= 1.0):
            raise ValueError("step_gain must be in (0, 1]")


def dls_ik_step(model: RobotModel, q, target, ik: IKConfig = IKConfig()) -> np.ndarray:
    """One damped-least-squares IK step toward a world-frame target.

    q_des = q + step_gain * (J^T J + damping^2 I)^-1 J^T e.  Total by
    construction: the damping keeps the solve bounded at singularities.
    """
    q = np.asarray(q, dtype=float).reshape(4)
    J = position_jacobian(model, q)
    e = np.asarray(target, dtype=float) - end_effector_position(model, q)
    A = J.T @ J + ik.damping**2 * np.eye(4)
    return q + ik.step_gain * np.linalg.solve(A, J.T @ e)


def solve_ik(model: RobotModel, q0, target, ik: IKConfig = IKConfig()):
    """Iterate DLS steps until the task error drops below tol.

    Returns (q, error_norm, iterations).
    """
    q = np.asarray(q0, dtype=float).reshape(4)
    err = np.inf
    for it in range(ik.max_iter):
        q = dls_ik_step(model, q, target, ik)
        err = np.linalg.norm(np.asarray(target) - end_effector_position(model, q))
        if err <= ik.tol:
            return q, err, it + 1
    return q, err, ik.max_iter


def task_to_joint_commands(
    model: RobotModel,
    trajectory: TaskTrajectory,
    hold_q=DEFAULT_HOLD_POSE,
    ik: IKConfig = IKConfig(),
) -> JointCommands:
    """Stream the task trajectory through one DLS step per control tick.

    Displacements are applied about the end-effector position at the
    hold pose.  Velocity commands come from differencing the position
    commands (one-sided at the ends).
    """
    hold_q = np.asarray(hold_q, dtype=float).reshape(4)
    anchor = end_effector_position(model, hold_q)
    n = len(trajectory)
    q_des = np.empty((n, 4))
    q = hold_q.copy()
    for k in range(n):
        q = dls_ik_step(model, q, anchor + trajectory.targets[k], ik)
        q_des[k] = q
    qdot_des = np.gradient(q_des, trajectory.dt, axis=0)
    return JointCommands(dt=trajectory.dt, q_des=q_des, qdot_des=qdot_des)
