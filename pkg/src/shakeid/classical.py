"""Classical least-squares identification baselines and error metrics.

Stacks the per-sample 6x10 wrench regressors from a rollout into one
linear system and solves it by OLS or two-stage feasible WLS.  The
payload kinematics at the grasp are reconstructed from the recorded
joint trajectory (forward kinematics plus smoothed finite differences);
the matching wrench is what an ideal force/torque sensor at the grasp
would report for the known payload, so noiseless recovery is exact.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy.signal import butter, filtfilt

from .rigidbody import (
    ConsistencyReport,
    InertialParams,
    _regressor,
    batch_wrench,
    consistency_check,
    cross3,
)
from .simworld import ArmParams, RobotModel, RolloutRecord, _joint_rotations, _rotT_vec

__all__ = [
    "StackedRegression",
    "EstimationReport",
    "TooShort",
    "RankDeficient",
    "grasp_kinematics",
    "stack_from_rollout",
    "add_wrench_noise",
    "ols_estimate",
    "wls_estimate",
    "evaluate_estimate",
    "default_y_scale",
    "params_to_y",
]

GROUPS = ("mass", "com", "inertia")


class TooShort(ValueError):
    """Record too short for the finite-difference stencil."""


class RankDeficient(RuntimeError):
    """Stacked regressor is rank deficient: insufficient excitation."""


@dataclass
class StackedRegression:
    """Rows of wrench regressors stacked over time.

    ``channel_weights`` is per-row; None requests the feasible-WLS
    default (inverse residual variance per wrench channel).
    """

    matrix: np.ndarray       # (6N, 10)
    wrench: np.ndarray       # (6N,)
    channel_weights: np.ndarray = None

    def __post_init__(self):
        if self.matrix.shape[0] != self.wrench.shape[0]:
            raise ValueError("row counts disagree")
        if self.matrix.shape[0] < 12:
            raise ValueError("need at least two samples (12 rows)")

    @property
    def n_samples(self) -> int:
        return self.matrix.shape[0] // 6


@dataclass
class EstimationReport:
    params: InertialParams
    consistency: ConsistencyReport
    wall_time: float
    mae: dict = None
    nmae: dict = None

    def to_dict(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "consistent": self.consistency.fully_consistent,
            "triangle_ok": self.consistency.triangle_ok,
            "wall_time": self.wall_time,
            "mae": self.mae,
            "nmae": self.nmae,
        }


def _lowpass(x: np.ndarray, dt: float, cutoff_hz: float = 20.0) -> np.ndarray:
    """Zero-phase Butterworth low-pass along axis 0."""
    nyq = 0.5 / dt
    if cutoff_hz >= 0.95 * nyq:
        return x
    b, a = butter(4, cutoff_hz / nyq)
    return filtfilt(b, a, x, axis=0)


def grasp_kinematics(record: RolloutRecord, model: RobotModel):
    """Body kinematics of the grasp frame along a rollout.

    Joint accelerations come from central differences of the recorded
    velocities after 20 Hz zero-phase smoothing.  Returns arrays
    (lin_acc, ang_vel, ang_acc), each (N, 3), expressed in the grasp
    frame with gravity folded into the linear acceleration.
    """
    n = len(record)
    if n < 5:
        raise TooShort("need at least 5 samples for differentiation")
    q = _lowpass(record.q, record.dt)
    qd = _lowpass(record.qdot, record.dt)
    qdd = np.gradient(qd, record.dt, axis=0)

    from .simworld import _forward_pass

    params = ArmParams.from_model(model)
    ws, wds, accs, _ = _forward_pass(params, q, qd, qdd)  # time as the batch axis
    w, wd, a4 = ws[3], wds[3], accs[3]
    # shift from the last-link origin to the grasp (EE) point
    r = model.ee_offset
    a = a4 + cross3(wd, r) + cross3(w, cross3(w, np.broadcast_to(r, w.shape)))
    return a, w, wd


def stack_from_rollout(
    record: RolloutRecord, model: RobotModel, payload: InertialParams
) -> StackedRegression:
    """Build the stacked linear system for one rollout.

    ``payload`` is the true payload expressed in the grasp frame; the
    wrench column is its Newton-Euler response to the reconstructed
    kinematics (an ideal F/T sensor at the grasp).
    """
    a, w, wd = grasp_kinematics(record, model)
    Y = _regressor(a, w, wd)                      # (N, 6, 10)
    n = Y.shape[0]
    m = np.full(n, payload.mass)
    h = np.broadcast_to(payload.first_moment, (n, 3))
    I = np.broadcast_to(payload.inertia, (n, 3, 3))
    f, tq = batch_wrench(m, h, I, a, w, wd)
    wrench = np.concatenate([f, tq], axis=1).reshape(-1)
    return StackedRegression(matrix=Y.reshape(-1, 10), wrench=wrench)


def add_wrench_noise(S: StackedRegression, sigma: float, rng: np.random.Generator) -> StackedRegression:
    """Fresh copy with additive white noise on the wrench column."""
    return StackedRegression(
        matrix=S.matrix,
        wrench=S.wrench + sigma * rng.standard_normal(S.wrench.shape),
        channel_weights=S.channel_weights,
    )


def _check_rank(matrix: np.ndarray) -> None:
    if np.linalg.matrix_rank(matrix) < 10:
        raise RankDeficient("stacked regressor rank < 10; trajectory does not excite all parameters")


def _report(phi: np.ndarray, t0: float) -> EstimationReport:
    params = InertialParams.from_vector(phi)
    return EstimationReport(
        params=params,
        consistency=consistency_check(params),
        wall_time=time.perf_counter() - t0,
    )


def ols_estimate(S: StackedRegression) -> EstimationReport:
    """Ordinary least squares via orthogonal decomposition (SVD solve)."""
    t0 = time.perf_counter()
    _check_rank(S.matrix)
    phi, *_ = np.linalg.lstsq(S.matrix, S.wrench, rcond=None)
    return _report(phi, t0)


def wls_estimate(S: StackedRegression) -> EstimationReport:
    """Weighted least squares.

    Uses ``S.channel_weights`` when provided.  Otherwise runs a
    two-stage feasible scheme: OLS first, then weights set to the
    inverse residual variance of each of the six wrench channels.
    """
    t0 = time.perf_counter()
    _check_rank(S.matrix)
    if S.channel_weights is not None:
        weights = np.asarray(S.channel_weights, dtype=float)
        if np.any(weights <= 0):
            raise ValueError("channel weights must be positive")
    else:
        phi0, *_ = np.linalg.lstsq(S.matrix, S.wrench, rcond=None)
        resid = (S.wrench - S.matrix @ phi0).reshape(-1, 6)
        var = resid.var(axis=0)
        var = np.maximum(var, 1e-20)
        weights = np.tile(1.0 / var, S.n_samples)
    sw = np.sqrt(weights)
    phi, *_ = np.linalg.lstsq(S.matrix * sw[:, None], S.wrench * sw, rcond=None)
    return _report(phi, t0)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def params_to_y(params: InertialParams) -> np.ndarray:
    """7-vector [m, cx, cy, cz, Ixx, Iyy, Izz] with the inertia diagonal
    taken about the COM."""
    return np.concatenate(
        [[params.mass], params.com, np.diag(params.com_frame_inertia())]
    )


def evaluate_estimate(phi_hat, phi_true, y_scale) -> dict:
    """Per-group MAE and normalized MAE.

    Inputs are InertialParams or 7-vectors.  MAE averages the absolute
    component errors inside each group {mass}, {com}, {inertia diag};
    NMAE divides each component by its scale before averaging.
    """
    yh = params_to_y(phi_hat) if isinstance(phi_hat, InertialParams) else np.asarray(phi_hat, dtype=float)
    yt = params_to_y(phi_true) if isinstance(phi_true, InertialParams) else np.asarray(phi_true, dtype=float)
    scale = np.asarray(y_scale, dtype=float).reshape(7)
    if np.any(scale <= 0):
        raise ValueError("y_scale must be positive")
    err = np.abs(yh - yt)
    groups = {"mass": slice(0, 1), "com": slice(1, 4), "inertia": slice(4, 7)}
    mae = {g: float(err[s].mean()) for g, s in groups.items()}
    nmae = {g: float((err[s] / scale[s]).mean()) for g, s in groups.items()}
    return {"mae": mae, "nmae": nmae}


def default_y_scale(catalog) -> np.ndarray:
    """Reference scales for NMAE: the heaviest catalog object's mass and
    inertia diagonal, and the plate half-extents for the COM components
    (ground-truth COM entries sit near zero and cannot normalize)."""
    from .objects import catalog_by_label, composite_inertia, object_bounding_half_extents

    by_label = catalog_by_label(catalog)
    ref = composite_inertia(by_label["Full Steel"])
    half = object_bounding_half_extents(by_label["Full Steel"])
    return np.concatenate([[ref.mass], half, np.diag(ref.com_frame_inertia())])
