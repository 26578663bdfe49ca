"""Extended Kalman filter.

The recursion runs on batched arrays: every quantity may carry leading axes
(one per trajectory), so a whole test set is filtered in one pass.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import NumericalError
from .linalg import FilterOutput, check_conditioning, jitter, symmetrize
from .ssm import SSModelSpec


@dataclass
class EkfState:
    x_post: np.ndarray
    P_post: np.ndarray
    x_prior: np.ndarray | None = None
    P_prior: np.ndarray | None = None
    y_prior: np.ndarray | None = None
    H: np.ndarray | None = None
    S: np.ndarray | None = None
    K: np.ndarray | None = None


def init_state(x0, P0=None) -> EkfState:
    x0 = np.asarray(x0, dtype=float)
    m = x0.shape[-1]
    P0 = np.broadcast_to(np.eye(m), x0.shape[:-1] + (m, m)) if P0 is None else np.asarray(P0, dtype=float)
    return EkfState(x0.copy(), np.array(P0, dtype=float))


def ekf_predict(model: SSModelSpec, state: EkfState) -> EkfState:
    F = model.jac_f(state.x_post)
    x_prior = model.f(state.x_post)
    H = model.jac_h(x_prior)
    if not (np.all(np.isfinite(F)) and np.all(np.isfinite(H))):
        raise NumericalError("non-finite Jacobian", snapshot=state)
    P_prior = symmetrize(F @ state.P_post @ np.swapaxes(F, -1, -2) + model.Q)
    S = symmetrize(H @ P_prior @ np.swapaxes(H, -1, -2) + model.R)
    return replace(state, x_prior=x_prior, P_prior=P_prior, y_prior=model.h(x_prior), H=H, S=S)


def _gain(P_prior, H, S):
    # K = P H^T S^{-1}, computed as (S^{-1} H P)^T through a Cholesky factor of S
    HP = H @ P_prior
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        try:
            L = np.linalg.cholesky(S + jitter(S))
        except np.linalg.LinAlgError:
            raise NumericalError("innovation covariance is not positive definite") from None
    Z = np.linalg.solve(np.swapaxes(L, -1, -2), np.linalg.solve(L, HP))
    return np.swapaxes(Z, -1, -2)


def ekf_update(model: SSModelSpec, state: EkfState, y) -> EkfState:
    if state.P_prior is None:
        raise ValueError("ekf_update called before ekf_predict")
    check_conditioning(state.S, "innovation covariance S")
    K = _gain(state.P_prior, state.H, state.S)
    innov = np.asarray(y, dtype=float) - state.y_prior
    x_post = state.x_prior + (K @ innov[..., None])[..., 0]
    m = x_post.shape[-1]
    P_post = symmetrize((np.eye(m) - K @ state.H) @ state.P_prior)
    return replace(state, x_post=x_post, P_post=P_post, K=K)


def run_ekf(model: SSModelSpec, observations, x0, P0=None) -> FilterOutput:
    """Filter an observation sequence ``(..., T, n)`` starting from ``x0`` ``(..., m)``.

    Returns posterior means ``(..., T, m)`` and covariances ``(..., T, m, m)``.
    ``P0`` defaults to the identity.
    """
    Y = np.asarray(observations, dtype=float)
    T = Y.shape[-2]
    if T < 1:
        raise ValueError("observations must be non-empty")
    state = init_state(x0, P0)
    xs = np.empty(Y.shape[:-1] + (model.m,))
    Ps = np.empty(Y.shape[:-1] + (model.m, model.m))
    for t in range(T):
        try:
            state = ekf_update(model, ekf_predict(model, state), Y[..., t, :])
        except NumericalError as err:
            raise NumericalError(f"t={t}: {err}", index=t, snapshot=err.snapshot) from err
        xs[..., t, :] = state.x_post
        Ps[..., t, :, :] = state.P_post
    return FilterOutput(xs, Ps)
