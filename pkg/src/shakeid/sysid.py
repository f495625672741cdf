"""Simulator parameter search against target-world rollouts.

Eight simulator parameters (four joint dampings, four link masses) are
searched with global-best particle-swarm optimization so that simulated
joint trajectories match a small set of rollouts recorded in the target
world.  Candidate evaluations are batched: the whole swarm rolls out as
one vectorized simulation per target record.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .simworld import (
    ArmParams,
    JointCommands,
    JointState,
    RobotModel,
    RolloutRecord,
    SimConfig,
    World,
    rollout_batch,
)

__all__ = [
    "SysIdParams",
    "PsoConfig",
    "PsoResult",
    "TargetDataset",
    "LengthMismatch",
    "trajectory_mse",
    "pso_minimize",
    "default_bounds",
    "make_target_dataset",
    "identify",
    "sysid_objective",
]


class LengthMismatch(ValueError):
    """Records must share dt and length to be compared."""


@dataclass(frozen=True)
class SysIdParams:
    """zeta = [joint damping (4), link masses (4)]."""

    zeta: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.zeta, dtype=float).reshape(8)
        if np.any(z[4:] <= 0):
            raise ValueError("link masses must be positive")
        if np.any(z[:4] < 0):
            raise ValueError("joint damping must be non-negative")
        object.__setattr__(self, "zeta", z)

    @property
    def damping(self) -> np.ndarray:
        return self.zeta[:4]

    @property
    def masses(self) -> np.ndarray:
        return self.zeta[4:]

    def apply(self, model: RobotModel) -> RobotModel:
        return model.with_sysid_vector(self.zeta)

    def to_dict(self) -> dict:
        return {"damping": self.damping.tolist(), "masses": self.masses.tolist()}


@dataclass(frozen=True)
class PsoConfig:
    swarm_size: int = 40
    max_iters: int = 300
    inertia_weight: float = 0.729
    cognitive: float = 1.494
    social: float = 1.494
    lo: np.ndarray = None
    hi: np.ndarray = None
    velocity_clamp: float = 0.2
    seed: int = 0
    tol: float = 1e-8
    patience: int = 20

    def __post_init__(self):
        if self.swarm_size < 1:
            raise ValueError("swarm_size must be >= 1")
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        if lo.shape != hi.shape or np.any(lo >= hi):
            raise ValueError("bounds must satisfy lo < hi elementwise")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)


@dataclass
class PsoResult:
    best_x: np.ndarray
    best_value: float
    history: np.ndarray      # global-best value per iteration
    iterations: int


@dataclass
class TargetDataset:
    """Rollouts recorded in the target world plus the shared commands
    needed to replay them in simulation."""

    records: list
    commands: JointCommands
    payload_labels: list = field(default_factory=list)

    def __post_init__(self):
        if not self.records:
            raise ValueError("need at least one record")
        n = len(self.records[0])
        dt = self.records[0].dt
        for r in self.records:
            if len(r) != n or abs(r.dt - dt) > 1e-12:
                raise LengthMismatch("target records must share dt and length")
        if not self.payload_labels:
            self.payload_labels = [r.payload_label for r in self.records]

    def __len__(self):
        return len(self.records)


def trajectory_mse(a: RolloutRecord, b: RolloutRecord) -> float:
    """Mean squared joint-position error over time and the four joints."""
    if len(a) != len(b) or abs(a.dt - b.dt) > 1e-12:
        raise LengthMismatch("records must share dt and length")
    return float(np.mean((a.q - b.q) ** 2))


def pso_minimize(objective, cfg: PsoConfig, x0=None, vectorized: bool = False) -> PsoResult:
    """Global-best PSO with velocity clamping and box projection.

    ``objective`` maps an 8-vector (or any d-vector matching the bounds)
    to a scalar; with ``vectorized=True`` it receives the (S, d) swarm
    and returns (S,) values.  Non-finite objective values are treated as
    +inf; the particle survives and keeps searching.  Deterministic for
    a fixed seed.  ``x0`` seeds particle 0.
    """
    rng = np.random.default_rng(cfg.seed)
    d = cfg.lo.shape[0]
    span = cfg.hi - cfg.lo
    S = cfg.swarm_size
    x = cfg.lo + span * rng.random((S, d))
    if x0 is not None:
        x[0] = np.clip(np.asarray(x0, dtype=float), cfg.lo, cfg.hi)
    v = np.zeros((S, d))
    vmax = cfg.velocity_clamp * span

    def evaluate(xs):
        if vectorized:
            vals = np.asarray(objective(xs), dtype=float)
        else:
            vals = np.array([objective(xi) for xi in xs], dtype=float)
        return np.where(np.isfinite(vals), vals, np.inf)

    pbest_x = x.copy()
    pbest_v = evaluate(x)
    g = int(np.argmin(pbest_v))
    gbest_x = pbest_x[g].copy()
    gbest_v = float(pbest_v[g])
    history = [gbest_v]
    stall = 0
    it = 0
    for it in range(1, cfg.max_iters + 1):
        r1 = rng.random((S, d))
        r2 = rng.random((S, d))
        v = (
            cfg.inertia_weight * v
            + cfg.cognitive * r1 * (pbest_x - x)
            + cfg.social * r2 * (gbest_x - x)
        )
        v = np.clip(v, -vmax, vmax)
        x = np.clip(x + v, cfg.lo, cfg.hi)
        vals = evaluate(x)
        improved = vals < pbest_v
        pbest_x[improved] = x[improved]
        pbest_v[improved] = vals[improved]
        g = int(np.argmin(pbest_v))
        prev = gbest_v
        if pbest_v[g] < gbest_v:
            gbest_v = float(pbest_v[g])
            gbest_x = pbest_x[g].copy()
        history.append(gbest_v)
        stall = stall + 1 if prev - gbest_v < cfg.tol else 0
        if stall >= cfg.patience:
            break
    return PsoResult(best_x=gbest_x, best_value=gbest_v, history=np.array(history), iterations=it)


def default_bounds(model: RobotModel) -> tuple:
    """Damping in [0, 0.5] N m s/rad, masses within [0.5, 1.5] x nominal."""
    masses = model.link_masses
    lo = np.concatenate([np.zeros(4), 0.5 * masses])
    hi = np.concatenate([np.full(4, 0.5), 1.5 * masses])
    return lo, hi


def make_target_dataset(
    world: World,
    commands: JointCommands,
    config: SimConfig = SimConfig(),
    trials: int = 5,
    ic_jitter: float = 0.02,
    settle_time: float = 0.15,
    seed: int = 0,
    payload=None,
) -> TargetDataset:
    """Collect repeated trials of the same commanded motion in a world.

    Each trial grasps at a slightly different pose (seeded jitter on the
    initial joint positions), holds the start command until the arm has
    settled, and then records the commanded motion - the protocol a
    physical experiment follows.  The settle prefix is not part of the
    record.
    """
    rng = np.random.default_rng(seed)
    records = []
    for _ in range(trials):
        q0 = commands.q_des[0] + ic_jitter * (2.0 * rng.random(4) - 1.0)
        state = JointState(q0, np.zeros(4))
        if settle_time > 0:
            hold = JointCommands.hold(commands.q_des[0], settle_time, commands.dt)
            pre = world.rollout(hold, config, payload=payload, initial_state=state)
            state = JointState(pre.q[-1], pre.qdot[-1])
        rec = world.rollout(commands, config, payload=payload, initial_state=state)
        records.append(rec)
    return TargetDataset(records=records, commands=commands)


def identify(sim_factory, dataset: TargetDataset, cfg: PsoConfig, config: SimConfig = SimConfig(), x0=None):
    """Search zeta so simulated replays match the target rollouts.

    ``sim_factory`` maps an 8-vector zeta to a RobotModel (typically
    ``nominal.with_sysid_vector``).  The objective is the mean over
    target records of the joint-position MSE between the simulated
    replay (same commands, same initial state) and the record.  ``x0``
    warm-starts particle 0 (usually the nominal zeta).  Returns
    (SysIdParams, PsoResult).
    """
    n_rec = len(dataset)
    n = len(dataset.records[0])
    init_q = np.array([r.q[0] for r in dataset.records])
    init_qd = np.array([r.qdot[0] for r in dataset.records])
    target_q = np.stack([r.q for r in dataset.records])  # (m, N, 4)

    def batch_objective(zetas: np.ndarray) -> np.ndarray:
        S = zetas.shape[0]
        models = [sim_factory(z) for z in zetas]
        params = ArmParams.from_models(models)
        # swarm x records in one batch: tile particles per record
        big = ArmParams(
            params.axes, params.offsets, params.ee_offset, params.gravity, params.kp,
            params.kd, params.torque_limit,
            np.repeat(params.m, n_rec, axis=0), np.repeat(params.h, n_rec, axis=0),
            np.repeat(params.I, n_rec, axis=0), np.repeat(params.damping, n_rec, axis=0),
        )
        out = rollout_batch(
            big, dataset.commands, config,
            initial_q=np.tile(init_q, (S, 1)), initial_qd=np.tile(init_qd, (S, 1)),
            record_ee=False,
        )
        q = out["q"].reshape(S, n_rec, n, 4)
        mse = np.mean((q - target_q) ** 2, axis=(1, 2, 3))
        mse[out["diverged"].reshape(S, n_rec).any(axis=1)] = np.inf
        return mse

    result = pso_minimize(batch_objective, cfg, x0=x0, vectorized=True)
    return SysIdParams(result.best_x), result


def sysid_objective(sim_factory, dataset: TargetDataset, config: SimConfig = SimConfig()):
    """Scalar objective zeta -> mean trajectory MSE (for diagnostics)."""

    def objective(zeta):
        model = sim_factory(np.asarray(zeta, dtype=float))
        world = World(model)
        total = 0.0
        for rec in dataset.records:
            sim = world.rollout(dataset.commands, config, initial_state=rec.initial_state)
            total += trajectory_mse(sim, rec)
        return total / len(dataset)

    return objective
