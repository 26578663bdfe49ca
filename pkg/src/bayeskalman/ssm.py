"""State-space models, trajectory simulation, datasets and mismatch injection.

Every model function is vectorised over leading axes: ``f`` and ``h`` map
arrays of shape ``(..., m)`` to ``(..., m)`` / ``(..., n)`` and the Jacobians
return ``(..., m, m)`` / ``(..., n, m)``.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, SimulationError

Array = np.ndarray

SNR_GRID_DB = (-10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0)
NOISE_RATIO = 0.01  # q^2 / r^2
DEFAULT_T = 100
PENDULUM_G = 9.81


def noise_factor(cov: Array) -> Array:
    """Return ``L`` with ``L @ L.T == cov`` for a symmetric PSD matrix (zeros allowed)."""
    cov = np.asarray(cov, dtype=float)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
        if vals.min() < -1e-10 * max(1.0, abs(vals).max()):
            raise ConfigError("noise covariance is not positive semidefinite")
        return vecs * np.sqrt(np.clip(vals, 0.0, None))


def snr_to_r2(snr_db: float) -> float:
    """Observation noise variance r^2 for an SNR 1/r^2 given in dB."""
    return 10.0 ** (-snr_db / 10.0)


@dataclass(frozen=True, eq=False)
class SSModelSpec:
    m: int
    n: int
    f: Callable[[Array], Array]
    h: Callable[[Array], Array]
    jac_f: Callable[[Array], Array]
    jac_h: Callable[[Array], Array]
    Q: Array
    R: Array
    dt: float = 1.0
    tag: str = "custom"
    snr_db: Optional[float] = None
    init_state: Optional[Callable[[np.random.Generator], Array]] = None
    F: Optional[Array] = None  # set for linear models
    H: Optional[Array] = None
    _lq: Array = field(init=False, repr=False)
    _lr: Array = field(init=False, repr=False)

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise ConfigError("state and observation dimensions must be positive")
        Q = np.array(self.Q, dtype=float)
        R = np.array(self.R, dtype=float)
        if Q.shape != (self.m, self.m) or R.shape != (self.n, self.n):
            raise ConfigError(f"noise covariance shapes {Q.shape}, {R.shape} do not match m={self.m}, n={self.n}")
        if not (np.allclose(Q, Q.T) and np.allclose(R, R.T)):
            raise ConfigError("noise covariances must be symmetric")
        Q.setflags(write=False)
        R.setflags(write=False)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "_lq", noise_factor(Q))
        object.__setattr__(self, "_lr", noise_factor(R))

    @property
    def is_linear(self) -> bool:
        return self.F is not None and self.H is not None

    def with_noise(self, Q: Optional[Array] = None, R: Optional[Array] = None) -> "SSModelSpec":
        return replace(self, Q=self.Q if Q is None else Q, R=self.R if R is None else R)

    def sample_x0(self, rng: np.random.Generator) -> Array:
        if self.init_state is None:
            return np.zeros(self.m)
        return np.asarray(self.init_state(rng), dtype=float)


@dataclass
class Trajectory:
    states: Array  # (T, m)
    observations: Array  # (T, n)
    x0: Array  # (m,)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.observations = np.asarray(self.observations, dtype=float)
        self.x0 = np.asarray(self.x0, dtype=float)
        if self.states.ndim != 2 or self.observations.ndim != 2:
            raise ValueError("states and observations must be 2-D (T x dim)")
        if len(self.states) < 1 or len(self.states) != len(self.observations):
            raise ValueError("states and observations must share a length T >= 1")

    @property
    def T(self) -> int:
        return len(self.states)


@dataclass
class Dataset:
    trajectories: list
    model_tag: str
    snr_db: Optional[float]
    seed: int
    mismatch: str = "none"

    def __post_init__(self):
        if not self.trajectories:
            raise ValueError("a dataset needs at least one trajectory")
        shapes = {(tr.states.shape, tr.observations.shape) for tr in self.trajectories}
        if len(shapes) != 1:
            raise ValueError("all trajectories must share m, n and T")

    def __len__(self):
        return len(self.trajectories)

    @property
    def m(self) -> int:
        return self.trajectories[0].states.shape[1]

    @property
    def n(self) -> int:
        return self.trajectories[0].observations.shape[1]

    @property
    def T(self) -> int:
        return self.trajectories[0].T

    @property
    def states(self) -> Array:
        return np.stack([tr.states for tr in self.trajectories])

    @property
    def observations(self) -> Array:
        return np.stack([tr.observations for tr in self.trajectories])

    @property
    def x0(self) -> Array:
        return np.stack([tr.x0 for tr in self.trajectories])

    def subset(self, indices) -> "Dataset":
        return replace(self, trajectories=[self.trajectories[i] for i in indices])


def concat_datasets(datasets) -> Dataset:
    """Pool datasets (e.g. one per SNR) into a single training set."""
    datasets = list(datasets)
    snrs = {d.snr_db for d in datasets}
    return Dataset(
        trajectories=[tr for d in datasets for tr in d.trajectories],
        model_tag=datasets[0].model_tag,
        snr_db=snrs.pop() if len(snrs) == 1 else None,
        seed=datasets[0].seed,
        mismatch=datasets[0].mismatch,
    )



def project_states(dataset: Dataset, m: int) -> Dataset:
    """Keep the first ``m`` state coordinates, e.g. CA data evaluated by a CV filter."""
    if not 1 <= m <= dataset.m:
        raise ValueError(f"cannot project {dataset.m}-dimensional states onto {m} coordinates")
    if m == dataset.m:
        return dataset
    trajectories = [Trajectory(tr.states[:, :m], tr.observations, tr.x0[:m]) for tr in dataset.trajectories]
    return replace(dataset, trajectories=trajectories)

# ---------------------------------------------------------------------------
# simulation


def step_state(model: SSModelSpec, x_prev, rng: Optional[np.random.Generator], noise=None, t=None) -> Array:
    """One transition ``f(x_prev) + w`` with ``w ~ N(0, Q)``.

    ``noise`` optionally supplies the standard-normal draw used for ``w``.
    """
    x_prev = np.asarray(x_prev, dtype=float)
    z = rng.standard_normal(model.m) if noise is None else np.asarray(noise, dtype=float)
    x = model.f(x_prev) + model._lq @ z
    if not np.all(np.isfinite(x)):
        raise SimulationError(f"non-finite state at t={t}", t=t)
    return x


def observe(model: SSModelSpec, x, rng: Optional[np.random.Generator], noise=None) -> Array:
    """Noisy observation ``h(x) + v`` with ``v ~ N(0, R)``."""
    z = rng.standard_normal(model.n) if noise is None else np.asarray(noise, dtype=float)
    return model.h(np.asarray(x, dtype=float)) + model._lr @ z


def simulate_trajectory(model: SSModelSpec, x0, T: int, rng: Optional[np.random.Generator], noise=None) -> Trajectory:
    """Simulate ``T`` steps from ``x0``; ``states[0]`` is one transition after ``x0``.

    ``noise`` may be a pair ``(W, V)`` of standard-normal arrays of shapes
    ``(T, m)`` and ``(T, n)``, in which case ``rng`` is not used.
    """
    if T < 1:
        raise ValueError("trajectory length must be >= 1")
    W, V = (None, None) if noise is None else noise
    states = np.empty((T, model.m))
    obs = np.empty((T, model.n))
    x = np.asarray(x0, dtype=float)
    for t in range(T):
        x = step_state(model, x, rng, None if W is None else W[t], t=t)
        states[t] = x
        obs[t] = observe(model, x, rng, None if V is None else V[t])
    return Trajectory(states, obs, np.asarray(x0, dtype=float))


def generate_dataset(model: SSModelSpec, count: int, T: int = DEFAULT_T, seed: int = 0, mismatch: str = "none") -> Dataset:
    """``count`` independent trajectories, each seeded from a spawned child of ``seed``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    children = np.random.SeedSequence(seed).spawn(count)
    trajectories = []
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        x0 = model.sample_x0(rng)
        try:
            trajectories.append(simulate_trajectory(model, x0, T, rng))
        except SimulationError as err:
            raise SimulationError(f"trajectory {i}: {err}", t=err.t, trajectory=i) from err
    return Dataset(trajectories, model.tag, model.snr_db, seed, mismatch)


# ---------------------------------------------------------------------------
# scenarios


def _linear(F: Array, H: Array, Q: Array, R: Array, **kw) -> SSModelSpec:
    F = np.asarray(F, dtype=float)
    H = np.asarray(H, dtype=float)
    m, n = F.shape[0], H.shape[0]

    def f(x):
        return x @ F.T

    def h(x):
        return x @ H.T

    def jac_f(x):
        return np.broadcast_to(F, np.shape(x)[:-1] + F.shape).copy()

    def jac_h(x):
        return np.broadcast_to(H, np.shape(x)[:-1] + H.shape).copy()

    return SSModelSpec(m, n, f, h, jac_f, jac_h, Q, R, F=F, H=H, **kw)


def make_linear_model(F, H, Q, R, dt=1.0, tag="linear", x0=None) -> SSModelSpec:
    """Generic linear-Gaussian model with a fixed initial state (zeros by default)."""
    x0 = np.zeros(np.shape(F)[0]) if x0 is None else np.asarray(x0, dtype=float)
    return _linear(F, H, Q, R, dt=dt, tag=tag, init_state=lambda rng: x0.copy())


def _noise(snr_db: float, m: int, n: int):
    r2 = snr_to_r2(snr_db)
    return NOISE_RATIO * r2 * np.eye(m), r2 * np.eye(n)


def make_canonical_model(snr_db: float = 0.0) -> SSModelSpec:
    A = np.array([[1.0, 1.0], [0.0, 1.0]])
    F = A / np.linalg.norm(A, 2)
    Q, R = _noise(snr_db, 2, 2)
    return _linear(F, np.eye(2), Q, R, dt=1.0, tag="canonical", snr_db=snr_db,
                   init_state=lambda rng: np.array([1.0, 0.0]))


def make_pendulum_model(snr_db: float = 0.0, g: float = PENDULUM_G, length: float = 1.0, dt: float = 0.01) -> SSModelSpec:
    Q, R = _noise(snr_db, 2, 2)
    w2 = g / length

    def f(x):
        th, om = x[..., 0], x[..., 1]
        return np.stack([th + om * dt, om - w2 * np.sin(th) * dt], axis=-1)

    def jac_f(x):
        th = x[..., 0]
        J = np.zeros(np.shape(x)[:-1] + (2, 2))
        J[..., 0, 0] = 1.0
        J[..., 0, 1] = dt
        J[..., 1, 0] = -w2 * np.cos(th) * dt
        J[..., 1, 1] = 1.0
        return J

    def h(x):
        th = x[..., 0]
        return np.stack([length * np.cos(th), length * np.sin(th)], axis=-1)

    def jac_h(x):
        th = x[..., 0]
        J = np.zeros(np.shape(x)[:-1] + (2, 2))
        J[..., 0, 0] = -length * np.sin(th)
        J[..., 1, 0] = length * np.cos(th)
        return J

    def init_state(rng):
        return np.array([rng.uniform(-math.pi / 2, math.pi / 2), 0.0])

    return SSModelSpec(2, 2, f, h, jac_f, jac_h, Q, R, dt=dt, tag="pendulum", snr_db=snr_db, init_state=init_state)


def _cv_init(rng):
    return np.concatenate([[0.0, 0.0], rng.uniform(-1.0, 1.0, size=2)])


def make_cv_model(snr_db: float = 0.0, dt: float = 1.0) -> SSModelSpec:
    F = np.eye(4)
    F[0, 2] = F[1, 3] = dt
    H = np.eye(2, 4)
    Q, R = _noise(snr_db, 4, 2)
    return _linear(F, H, Q, R, dt=dt, tag="cv", snr_db=snr_db, init_state=_cv_init)


def make_ca_model(snr_db: float = 0.0, dt: float = 1.0) -> SSModelSpec:
    """Constant-acceleration model; state ``[x, y, vx, vy, ax, ay]``, position observations."""
    F = np.eye(6)
    F[0, 2] = F[1, 3] = F[2, 4] = F[3, 5] = dt
    F[0, 4] = F[1, 5] = 0.5 * dt * dt
    H = np.eye(2, 6)
    Q, R = _noise(snr_db, 6, 2)
    return _linear(F, H, Q, R, dt=dt, tag="ca", snr_db=snr_db,
                   init_state=lambda rng: np.concatenate([_cv_init(rng), [0.0, 0.0]]))


SCENARIOS = {
    "canonical": make_canonical_model,
    "pendulum": make_pendulum_model,
    "cv": make_cv_model,
}


def make_model(scenario: str, snr_db: float) -> SSModelSpec:
    try:
        return SCENARIOS[scenario](snr_db)
    except KeyError:
        raise ConfigError(f"unknown scenario {scenario!r}; expected one of {sorted(SCENARIOS)}") from None


# ---------------------------------------------------------------------------
# mismatch


class MismatchKind(str, enum.Enum):
    NONE = "none"
    PROCESS_NOISE = "process_noise"
    MEASUREMENT_NOISE = "measurement_noise"
    EVOLUTION_MODEL = "evolution_model"


@dataclass(frozen=True)
class MismatchConfig:
    kind: MismatchKind = MismatchKind.NONE
    factor: float = 100.0

    def __post_init__(self):
        object.__setattr__(self, "kind", MismatchKind(self.kind))
        if not self.factor > 0:
            raise ConfigError("mismatch factor must be positive")


def apply_mismatch(cfg: MismatchConfig, base: SSModelSpec):
    """Return ``(data_model, filter_model)``; filters only ever see ``filter_model``."""
    kind = cfg.kind
    if kind is MismatchKind.NONE:
        return base, base
    if kind is MismatchKind.PROCESS_NOISE:
        return base.with_noise(Q=cfg.factor * base.Q), base
    if kind is MismatchKind.MEASUREMENT_NOISE:
        return base.with_noise(R=cfg.factor * base.R), base
    if base.tag != "cv":
        raise ConfigError(f"evolution-model mismatch is only defined for the cv scenario, not {base.tag!r}")
    return make_ca_model(base.snr_db if base.snr_db is not None else 0.0, dt=base.dt), base


# ---------------------------------------------------------------------------
# dataset files


def save_dataset(dataset: Dataset, path) -> Path:
    """Write ``<path>.csv`` plus a ``<path>.json`` sidecar; returns the CSV path."""
    path = Path(path).with_suffix(".csv")
    path.parent.mkdir(parents=True, exist_ok=True)
    m, n = dataset.m, dataset.n
    header = ["traj_id", "t"] + [f"x_{k + 1}" for k in range(m)] + [f"y_{k + 1}" for k in range(n)]
    lines = [",".join(header)]
    for i, tr in enumerate(dataset.trajectories):
        for t in range(tr.T):
            vals = np.concatenate([tr.states[t], tr.observations[t]])
            lines.append(f"{i},{t + 1}," + ",".join(format(v, ".17g") for v in vals))
    path.write_text("\n".join(lines) + "\n")
    meta = {
        "model_tag": dataset.model_tag,
        "m": m,
        "n": n,
        "T": dataset.T,
        "count": len(dataset),
        "snr_db": dataset.snr_db,
        "seed": dataset.seed,
        "mismatch": dataset.mismatch,
        "x0": [[float(v) for v in tr.x0] for tr in dataset.trajectories],
    }
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2) + "\n")
    return path


def load_dataset(path) -> Dataset:
    path = Path(path).with_suffix(".csv")
    meta = json.loads(path.with_suffix(".json").read_text())
    m, n, T, count = meta["m"], meta["n"], meta["T"], meta["count"]
    raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if raw.shape != (count * T, 2 + m + n):
        raise ValueError(f"{path}: expected {count * T} rows of {2 + m + n} columns, got {raw.shape}")
    raw = raw.reshape(count, T, 2 + m + n)
    x0 = meta.get("x0") or [[0.0] * m] * count
    trajectories = [Trajectory(raw[i, :, 2:2 + m], raw[i, :, 2 + m:], x0[i]) for i in range(count)]
    return Dataset(trajectories, meta["model_tag"], meta["snr_db"], meta["seed"], meta.get("mismatch", "none"))
