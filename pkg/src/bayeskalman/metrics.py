"""Accuracy and calibration metrics (MSE, ANEES, APEC, EEC) and latency measurement."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import NumericalError
from .linalg import jitter

NEG_INF_DB = float("-inf")


def to_db(value: float) -> float:
    return NEG_INF_DB if value <= 0 else 10.0 * math.log10(value)


def mse(estimates, truths):
    """Squared error summed over coordinates, averaged over steps and trajectories; returns ``(linear, dB)``.

    A perfect estimate gives ``(0.0, -inf)``.
    """
    e = np.asarray(estimates, dtype=float) - np.asarray(truths, dtype=float)
    linear = float(np.mean(np.sum(e * e, axis=-1)))
    return linear, to_db(linear)


def nees(errors, covs):
    """Per-sample ``e^T Sigma^{-1} e`` with trace-scaled jitter on ``Sigma``."""
    errors = np.asarray(errors, dtype=float)
    covs = np.asarray(covs, dtype=float)
    if not np.all(np.isfinite(covs)):
        bad = np.argwhere(~np.isfinite(covs).all(axis=(-1, -2)))[0]
        raise NumericalError(f"non-finite covariance at index {tuple(bad)}", index=tuple(bad))
    C = covs + jitter(covs)
    try:
        z = np.linalg.solve(C, errors[..., None])[..., 0]
    except np.linalg.LinAlgError:
        sing = np.abs(np.linalg.det(C)) == 0
        bad = tuple(np.argwhere(sing)[0]) if sing.any() else None
        raise NumericalError(f"covariance not invertible at index {bad}", index=bad) from None
    return np.sum(errors * z, axis=-1)


def anees(errors, covs, m: Optional[int] = None, indices=None) -> float:
    """Average NEES normalised by the state dimension, so a calibrated estimator scores 1.

    ``indices`` restricts the errors to the coordinates that ``covs`` describe.
    """
    errors = np.asarray(errors, dtype=float)
    if indices is not None:
        errors = errors[..., list(indices)]
    m = errors.shape[-1] if m is None else m
    return float(np.mean(nees(errors, covs)) / m)


def log_anees(errors, covs, m=None, indices=None) -> float:
    value = anees(errors, covs, m, indices)
    return math.log10(value) if value > 0 else float("nan")


def apec(covs_t):
    """Average predicted error covariance over a test set at one time step: ``(N, m, m) -> (m, m)``."""
    covs_t = np.asarray(covs_t, dtype=float)
    if len(covs_t) == 0:
        raise ValueError("empty test set")
    return covs_t.mean(axis=0)


def eec(errors_t):
    """Empirical error covariance at one time step: mean outer product of ``(N, m)`` errors."""
    errors_t = np.asarray(errors_t, dtype=float)
    if len(errors_t) == 0:
        raise ValueError("empty test set")
    return np.einsum("na,nb->ab", errors_t, errors_t) / len(errors_t)


def apec_eec_series(errors, covs):
    """Per-step APEC and EEC for ``errors`` (N, T, m) and ``covs`` (N, T, m, m)."""
    errors = np.asarray(errors, dtype=float)
    covs = np.asarray(covs, dtype=float)
    return covs.mean(axis=0), np.einsum("nta,ntb->tab", errors, errors) / errors.shape[0]


def apec_eec_rows(errors, covs):
    """CSV-ready rows ``t, apec_trace, eec_trace, apec_1..m, eec_1..m`` with ``t`` from 1."""
    A, E = apec_eec_series(errors, covs)
    m = A.shape[-1]
    header = ["t", "apec_trace", "eec_trace"] + [f"apec_{j + 1}" for j in range(m)] + [f"eec_{j + 1}" for j in range(m)]
    rows = []
    for t in range(A.shape[0]):
        dA, dE = np.diag(A[t]), np.diag(E[t])
        rows.append([t + 1, float(dA.sum()), float(dE.sum()), *map(float, dA), *map(float, dE)])
    return header, rows


@dataclass
class EvalReport:
    mse_db: float
    log_anees: Optional[float]
    apec_trace: list = field(default_factory=list)
    eec_trace: list = field(default_factory=list)
    latency_ms_per_traj: Optional[float] = None

    def to_json(self) -> str:
        def clean(v):
            if isinstance(v, float) and not math.isfinite(v):
                return str(v)
            if isinstance(v, list):
                return [clean(x) for x in v]
            return v

        return json.dumps({k: clean(v) for k, v in asdict(self).items()}, indent=2)


def evaluate(estimates, truths, covs=None, cov_indices=None, latency_ms=None) -> EvalReport:
    """Summarise a batched filter run ``(N, T, m)`` against ground truth."""
    estimates = np.asarray(estimates, dtype=float)
    truths = np.asarray(truths, dtype=float)
    _, db = mse(estimates, truths)
    if covs is None:
        return EvalReport(db, None, latency_ms_per_traj=latency_ms)
    errors = estimates - truths
    if cov_indices is not None:
        errors = errors[..., list(cov_indices)]
    A, E = apec_eec_series(errors, covs)
    return EvalReport(
        mse_db=db,
        log_anees=log_anees(errors, covs),
        apec_trace=[float(x) for x in np.trace(A, axis1=-2, axis2=-1)],
        eec_trace=[float(x) for x in np.trace(E, axis1=-2, axis2=-1)],
        latency_ms_per_traj=latency_ms,
    )


def bench_latency(filter_fn: Callable, observations, repetitions=10, warmup=3, clock=time.perf_counter) -> float:
    """Median wall-clock milliseconds of ``filter_fn(observations)`` for one trajectory.

    ``warmup`` untimed calls precede ``repetitions`` (at least 10) timed ones.
    An empty trajectory does no work and reports 0.
    """
    if np.shape(observations)[0] == 0:
        return 0.0
    repetitions = max(int(repetitions), 10)
    for _ in range(warmup):
        filter_fn(observations)
    times = []
    for _ in range(repetitions):
        start = clock()
        filter_fn(observations)
        times.append(clock() - start)
    return 1e3 * float(np.median(times))
