"""Bayesian KalmanNet: Monte Carlo dropout ensembles over the gain network."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .ad.layers import DropoutMode
from .errors import NumericalError
from .knet import KGNetwork, run_knet
from .linalg import FilterOutput
from .ssm import SSModelSpec

DEFAULT_J = 20


class ExecutionMode(str, enum.Enum):
    SERIAL = "serial"
    PARALLEL = "parallel"


@dataclass
class BayesParams:
    """Deterministic weights plus one dropout probability per dropout layer."""

    theta0: dict
    dropout_p: dict

    @classmethod
    def from_network(cls, net: KGNetwork):
        params = net.state_dict()
        theta0 = {k: v for k, v in params.items() if not k.endswith("logit_p")}
        dropout_p = {name: layer.dropout.p.copy() for name, layer in zip(("fc_in", "fc_out"), net.dense_layers)
                     if layer.dropout is not None}
        return cls(theta0, dropout_p)


@dataclass
class EnsembleOutput:
    members: np.ndarray  # (J, ..., m)
    mean: np.ndarray
    cov: np.ndarray


def sample_realizations(net: KGNetwork, J: int, rng, batch_shape=()):
    """``J`` i.i.d. hard dropout-mask sets; realization ``j`` is ``net`` evaluated with ``masks[j]``.

    Each entry is a tuple with one mask per dense layer (``None`` for layers without dropout).
    """
    if J < 1:
        raise ValueError("J must be at least 1")
    return [net.sample_masks(tuple(batch_shape), rng, DropoutMode.INFER_BERNOULLI) for _ in range(J)]


def ensemble_mean(members):
    """Arithmetic mean over the leading member axis.

    Accumulates deviations from the first member, so identical members return
    that member exactly.
    """
    members = np.asarray(members, dtype=float)
    ref = members[0]
    return ref + (members - ref).sum(axis=0) / members.shape[0]


def ensemble_cov(members, mean=None):
    """``(1/J) sum_j (x_j - mean)(x_j - mean)^T`` over the leading member axis."""
    members = np.asarray(members, dtype=float)
    mean = ensemble_mean(members) if mean is None else mean
    dev = members - mean
    cov = np.einsum("j...a,j...b->...ab", dev, dev) / members.shape[0]
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


def ensemble(members) -> EnsembleOutput:
    members = np.asarray(members, dtype=float)
    mean = ensemble_mean(members)
    return EnsembleOutput(members, mean, ensemble_cov(members, mean))


def _stack_masks(mask_sets, axis=0):
    first = mask_sets[0]
    if first is None:
        return None
    return tuple(None if m is None else np.stack([s[i] for s in mask_sets], axis=axis) for i, m in enumerate(first))


def _flatten_masks(masks, rows):
    if masks is None:
        return None
    return tuple(None if m is None else m.reshape(rows, -1) for m in masks)


def bkn_members(model: SSModelSpec, net: KGNetwork, observations, x0, J=DEFAULT_J, rng=None,
                mode=ExecutionMode.SERIAL, resample_each_step=False):
    """Member state tracks of shape ``(J, N, T, m)`` for observations ``(N, T, n)``.

    Every member starts from ``x0`` and keeps its own estimate chain and hidden
    state. Serial mode runs members one after another; parallel mode stacks
    them as rows of one batched recursion.
    """
    rng = np.random.default_rng() if rng is None else rng
    Y = np.asarray(observations, dtype=float)
    if Y.ndim == 2:
        Y = Y[None]
    N, T, _ = Y.shape
    if T < 1:
        raise ValueError("observations must be non-empty")
    x0 = np.broadcast_to(np.atleast_2d(np.asarray(x0, dtype=float)), (N, model.m))
    mode = ExecutionMode(mode)
    if mode is ExecutionMode.SERIAL:
        tracks = []
        for j in range(J):
            try:
                if resample_each_step:
                    run = run_knet(model, net, Y, x0,
                                   mask_fn=lambda t: net.sample_masks((N,), rng, DropoutMode.INFER_BERNOULLI))
                else:
                    run = run_knet(model, net, Y, x0, masks=net.sample_masks((N,), rng, DropoutMode.INFER_BERNOULLI))
            except NumericalError as err:
                raise NumericalError(f"member j={j}: {err}", index=(err.index, j)) from err
            tracks.append(run.x)
        return np.stack(tracks)
    Yr = np.broadcast_to(Y, (J, N, T, Y.shape[-1])).reshape(J * N, T, -1)
    xr = np.broadcast_to(x0, (J, N, model.m)).reshape(J * N, model.m)
    if resample_each_step:
        run = run_knet(model, net, Yr, xr,
                       mask_fn=lambda t: net.sample_masks((J * N,), rng, DropoutMode.INFER_BERNOULLI))
    else:
        masks = _flatten_masks(_stack_masks(sample_realizations(net, J, rng, (N,))), J * N)
        run = run_knet(model, net, Yr, xr, masks=masks)
    return run.x.reshape(J, N, T, model.m)


def bkn_run(model: SSModelSpec, net: KGNetwork, observations, x0, J=DEFAULT_J, rng=None,
            mode=ExecutionMode.SERIAL, resample_each_step=False, keep_members=False):
    """Ensemble filter: per-step mean of the member estimates and their ``1/J`` covariance.

    ``observations`` may be one trajectory ``(T, n)`` or a batch ``(N, T, n)``;
    the output matches that layout.
    """
    single = np.ndim(observations) == 2
    members = bkn_members(model, net, observations, x0, J, rng, mode, resample_each_step)
    out = ensemble(members)
    x, cov = out.mean, out.cov
    if single:
        x, cov, members = x[0], cov[0], members[:, 0]
    result = FilterOutput(x, cov)
    if keep_members:
        return result, members
    return result
