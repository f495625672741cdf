"""Gaussian-process regression of the unmodeled dynamics residual.

After parameter identification there remains a trajectory gap that no
setting of the identifiable parameters can close (friction and similar
unmodeled effects).  That residual is learned as four independent exact
GPs (one per joint) over standardized features [q, qdot, tau, t] and
attached to the simulator as an additive joint-acceleration correction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, cholesky
from scipy.optimize import minimize_scalar
from scipy.signal import butter, filtfilt

from .simworld import JointState, SimConfig, World
from .sysid import TargetDataset

__all__ = [
    "GPModel",
    "ResidualDataset",
    "IllConditioned",
    "rbf_kernel",
    "build_features",
    "build_residual_dataset",
    "fit_gp",
    "empty_gp",
    "gp_predict",
    "attach_correction",
    "save_gp",
    "load_gp",
]

_JITTERS = (1e-10, 1e-8, 1e-6, 1e-4)


class IllConditioned(RuntimeError):
    """Gram matrix stayed non-positive-definite after jitter escalation."""


def rbf_kernel(z1, z2, variance: float = 1.0, lengthscale: float = 1.0) -> np.ndarray:
    """Radial basis function kernel matrix k(z1, z2).

    k(a, b) = variance * exp(-|a - b|^2 / (2 lengthscale^2)).
    Accepts (n, d) and (m, d); returns (n, m).
    """
    z1 = np.atleast_2d(np.asarray(z1, dtype=float))
    z2 = np.atleast_2d(np.asarray(z2, dtype=float))
    d2 = _sqdist(z1, z2)
    return variance * np.exp(-0.5 * d2 / lengthscale**2)


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aa = np.sum(a * a, axis=1)[:, None]
    bb = np.sum(b * b, axis=1)[None, :]
    d2 = aa + bb - 2.0 * (a @ b.T)
    return np.maximum(d2, 0.0)


def build_features(q, qdot, tau, t) -> np.ndarray:
    """Raw GP feature rows [q(4), qdot(4), tau(4), t]."""
    q = np.atleast_2d(q)
    n = q.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=float), (n,))
    return np.column_stack([q, np.atleast_2d(qdot), np.atleast_2d(tau), t])


@dataclass
class ResidualDataset:
    """(feature, per-joint residual acceleration) training pairs."""

    features: np.ndarray   # (n, 13) raw
    residuals: np.ndarray  # (n, 4) rad/s^2

    def __post_init__(self):
        if self.features.shape[0] != self.residuals.shape[0]:
            raise ValueError("row counts disagree")
        if not (np.all(np.isfinite(self.features)) and np.all(np.isfinite(self.residuals))):
            raise ValueError("residual dataset must be finite")

    def __len__(self):
        return self.features.shape[0]


class GPModel:
    """Exact GP posterior over the 4-joint residual, shared features.

    Each joint has its own (variance, lengthscale, noise) hyperparameters
    on the standardized features; the Cholesky factor of K + noise*I is
    cached for prediction.
    """

    def __init__(self, train_inputs, train_targets, hyper, feat_mean, feat_std):
        self.train_inputs = np.asarray(train_inputs, dtype=float)
        self.train_targets = np.asarray(train_targets, dtype=float)
        self.hyper = np.asarray(hyper, dtype=float).reshape(4, 3)  # variance, lengthscale, noise
        self.feat_mean = np.asarray(feat_mean, dtype=float)
        self.feat_std = np.asarray(feat_std, dtype=float)
        self._z = self._standardize(self.train_inputs)
        self._chol = []
        self._alpha = []
        n = self.train_inputs.shape[0]
        for j in range(4):
            if n == 0:
                self._chol.append(None)
                self._alpha.append(None)
                continue
            var, ls, noise = self.hyper[j]
            K = rbf_kernel(self._z, self._z, var, ls)
            L = _chol_with_jitter(K, noise)
            self._chol.append(L)
            self._alpha.append(cho_solve((L, True), self.train_targets[:, j]))

    @property
    def n_train(self) -> int:
        return self.train_inputs.shape[0]

    def _standardize(self, z):
        return (np.atleast_2d(z) - self.feat_mean) / self.feat_std

    def predict(self, features):
        """Posterior mean and predictive variance at raw feature rows.

        Variance includes the learned observation noise, so far from the
        data it approaches variance + noise.
        """
        z = self._standardize(features)
        b = z.shape[0]
        mean = np.zeros((b, 4))
        var = np.zeros((b, 4))
        for j in range(4):
            v, ls, noise = self.hyper[j]
            if self._alpha[j] is None:
                var[:, j] = v + noise
                continue
            ks = rbf_kernel(z, self._z, v, ls)
            mean[:, j] = ks @ self._alpha[j]
            sol = cho_solve((self._chol[j], True), ks.T)
            var[:, j] = np.maximum(v - np.sum(ks * sol.T, axis=1), 0.0) + noise
        return mean, var

    def predict_mean(self, features) -> np.ndarray:
        """Mean-only fast path used inside simulation steps."""
        z = self._standardize(features)
        mean = np.zeros((z.shape[0], 4))
        for j in range(4):
            if self._alpha[j] is None:
                continue
            v, ls, _ = self.hyper[j]
            d2 = _sqdist(z, self._z)
            mean[:, j] = (v * np.exp(-0.5 * d2 / ls**2)) @ self._alpha[j]
        return mean

    def log_marginal_likelihood(self, joint: int, hyper=None) -> float:
        var, ls, noise = self.hyper[joint] if hyper is None else hyper
        return _lml(self._z, self.train_targets[:, joint], var, ls, noise)


def _chol_with_jitter(K: np.ndarray, noise: float) -> np.ndarray:
    n = K.shape[0]
    for jitter in _JITTERS:
        try:
            return cholesky(K + (noise + jitter) * np.eye(n), lower=True)
        except np.linalg.LinAlgError:
            continue
    raise IllConditioned("Gram matrix not positive definite after jitter escalation to 1e-4")


def _lml(z, y, var, ls, noise) -> float:
    """Log marginal likelihood.  Hyperparameters whose Gram matrix is not
    positive definite at face value are rejected (-inf) rather than
    patched, so the optimizer cannot exploit jitter as free noise."""
    n = z.shape[0]
    K = rbf_kernel(z, z, var, ls)
    try:
        L = cholesky(K + (noise + 1e-12 * var) * np.eye(n), lower=True)
    except np.linalg.LinAlgError:
        return -np.inf
    alpha = cho_solve((L, True), y)
    return float(-0.5 * y @ alpha - np.log(np.diag(L)).sum() - 0.5 * n * np.log(2.0 * np.pi))


def gp_predict(model: GPModel, features):
    """Functional alias for :meth:`GPModel.predict`."""
    return model.predict(features)


def empty_gp() -> GPModel:
    """A GP with no data: zero mean everywhere (prior reversion)."""
    return GPModel(
        np.zeros((0, 13)), np.zeros((0, 4)), np.tile([1.0, 1.0, 1e-6], (4, 1)),
        np.zeros(13), np.ones(13),
    )


def _smooth(x: np.ndarray, dt: float, cutoff_hz: float = 20.0) -> np.ndarray:
    nyq = 0.5 / dt
    if cutoff_hz >= 0.95 * nyq:
        return x
    b, a = butter(4, cutoff_hz / nyq)
    return filtfilt(b, a, x, axis=0)


def build_residual_dataset(
    sim_world: World,
    dataset: TargetDataset,
    config: SimConfig = SimConfig(),
    thin: int = 5,
    cutoff_hz: float = 20.0,
    skip_initial: float = 0.03,
) -> ResidualDataset:
    """Acceleration residual between the target records and the simulator,
    evaluated at matched states.

    For every recorded sample the simulator's instantaneous acceleration
    is computed at the *recorded* state and applied torque (no free
    integration, so trajectory drift cannot leak into the targets).  The
    target-side acceleration comes from centrally differencing the
    recorded velocities.  Both sides are low-passed so that
    controller-bandwidth oscillation does not alias into the training
    targets.  The first ``skip_initial`` seconds are dropped: trials
    start with a PD snap to the commanded pose whose acceleration
    impulse would otherwise ring through the zero-phase filter.  End
    samples are dropped too (one-sided differences), and the series is
    thinned to keep the exact-GP problem small.
    """
    from .simworld import ArmParams, _crba, _joint_rotations, batch_accelerations

    feats = []
    resids = []
    params = ArmParams.from_model(sim_world.model)
    for rec in dataset.records:
        qdd_target = np.gradient(_smooth(rec.qdot, rec.dt, cutoff_hz), rec.dt, axis=0)
        qdd_sim = batch_accelerations(sim_world.model, rec.q, rec.qdot, rec.tau)
        if sim_world.residual_hook is not None:
            tau_corr = sim_world.residual_hook(rec.q, rec.qdot, rec.tau, rec.t)
            H = _crba(params, _joint_rotations(params, rec.q))
            qdd_sim = qdd_sim + np.linalg.solve(H, tau_corr[..., None])[..., 0]
        qdd_sim = _smooth(qdd_sim, rec.dt, cutoff_hz)
        start = max(1, int(round(skip_initial / rec.dt)))
        sl = slice(start, len(rec) - 5, thin)
        feats.append(build_features(rec.q[sl], rec.qdot[sl], rec.tau[sl], rec.t[sl]))
        resids.append((qdd_target - qdd_sim)[sl])
    return ResidualDataset(np.vstack(feats), np.vstack(resids))


# Standardization scale floors per feature family [q, qdot, tau, t].
# The unmodeled dynamics gap is a function of state: joint friction rides
# on the velocities and the configuration sets the inertia it acts
# through.  Torque and time, by contrast, are liabilities at transfer
# time: attaching a payload shifts the torque channels by many trajectory
# deviations and shifts the *timing* of every velocity reversal, so a
# kernel that keys on them replays the training trial's friction
# timeline at the wrong moments.  Huge floors effectively remove those
# two families; the position floor damps gravity-sag shifts.
FEATURE_SCALE_FLOORS = (0.5, 0.4, 1e6, 1e6)


def fit_gp(
    data: ResidualDataset,
    seed: int = 0,
    restarts: int = 3,
    max_points: int = 5000,
    scale_floors=FEATURE_SCALE_FLOORS,
) -> GPModel:
    """Fit per-joint exact GPs by maximizing the log marginal likelihood.

    Hyperparameters start at variance 1, lengthscale 1; they are refined
    by bounded coordinate descent in log space over (variance,
    lengthscale, noise), restarted from a few spread-out initial points.
    Deterministic for a fixed seed.
    """
    n = len(data)
    if n < 1:
        raise ValueError("need at least one training point")
    if n > max_points:
        raise ValueError(f"exact GP budget exceeded: {n} > {max_points}")
    feat_mean = data.features.mean(axis=0)
    feat_std = np.maximum(data.features.std(axis=0), 1e-12)
    if scale_floors is not None:
        fq, fqd, ftau, ft = scale_floors
        floors = np.concatenate([np.full(4, fq), np.full(4, fqd), np.full(4, ftau), [ft]])
        feat_std = np.maximum(feat_std, floors)
    z = (data.features - feat_mean) / feat_std
    rng = np.random.default_rng(seed)

    hyper = np.zeros((4, 3))
    for j in range(4):
        y = data.residuals[:, j]
        y_var = max(float(y.var()), 1e-12)
        # bounds relative to the target variance: caps runaway-variance
        # interpolation fits whose posteriors swing wildly between points
        log_bounds = np.array(
            [
                [np.log10(5e-2 * y_var), np.log10(10.0 * y_var)],
                [-0.7, 1.5],
                [np.log10(1e-3 * y_var), np.log10(y_var)],
            ]
        )
        starts = [
            np.array([0.0, 0.0, np.log10(1e-2 * y_var)]),  # the (1, 1) initialization
            np.array([np.log10(y_var), 0.3, np.log10(1e-2 * y_var)]),
            np.array([np.log10(0.1 * y_var), -0.3, np.log10(1e-3 * y_var)]),
        ]
        while len(starts) < restarts:
            starts.append(log_bounds[:, 0] + (log_bounds[:, 1] - log_bounds[:, 0]) * rng.random(3))

        def neg_lml(logp):
            return -_lml(z, y, 10.0 ** logp[0], 10.0 ** logp[1], 10.0 ** logp[2])

        best_p, best_v = None, np.inf
        for p0 in starts[:max(restarts, 1)]:
            p = np.clip(p0, log_bounds[:, 0], log_bounds[:, 1])
            val = neg_lml(p)
            for _ in range(3):  # coordinate sweeps
                for k in range(3):
                    def f1(x, k=k, p=p):
                        trial = p.copy()
                        trial[k] = x
                        return neg_lml(trial)
                    res = minimize_scalar(
                        f1, bounds=tuple(log_bounds[k]), method="bounded",
                        options={"xatol": 1e-2},
                    )
                    if res.fun < val:
                        p[k] = res.x
                        val = res.fun
            if val < best_v:
                best_p, best_v = p.copy(), val
        hyper[j] = 10.0 ** best_p

    return GPModel(data.features, data.residuals, hyper, feat_mean, feat_std)


def attach_correction(sim_world: World, model: GPModel) -> World:
    """Simulator whose joint accelerations carry the GP correction.

    The GP predicts the residual acceleration of the (payload-free)
    reference world it was trained in.  The correction is routed through
    that reference inertia, tau_corr = M_ref(q) @ mean, so that when a
    payload changes the arm's inertia the applied acceleration scales
    the way a physical unmodeled torque would.  On the reference world
    itself this is identical to adding the predicted acceleration.
    """
    from .simworld import ArmParams, _crba, _joint_rotations

    ref_params = ArmParams.from_model(sim_world.model)

    def hook(q, qd, tau, t):
        mean = model.predict_mean(build_features(q, qd, tau, t))
        H_ref = _crba(ref_params, _joint_rotations(ref_params, q))
        return (H_ref @ mean[..., None])[..., 0]

    return sim_world.with_hook(hook)


def save_gp(model: GPModel, path) -> None:
    payload = {
        "train_inputs": model.train_inputs.tolist(),
        "train_targets": model.train_targets.tolist(),
        "hyper": model.hyper.tolist(),
        "feat_mean": model.feat_mean.tolist(),
        "feat_std": model.feat_std.tolist(),
    }
    with open(path, "w") as f:
        json.dump(payload, f)


def load_gp(path) -> GPModel:
    with open(path) as f:
        d = json.load(f)
    return GPModel(
        np.array(d["train_inputs"], dtype=float).reshape(-1, 13),
        np.array(d["train_targets"], dtype=float).reshape(-1, 4),
        np.array(d["hyper"], dtype=float),
        np.array(d["feat_mean"], dtype=float),
        np.array(d["feat_std"], dtype=float),
    )
