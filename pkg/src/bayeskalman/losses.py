"""Training losses: l2, second-moment, empirical mix, Gaussian NLL, and the dropout KL regulariser.

Predictions and targets have shape ``(N, T, m)``; covariances ``(N, T, m, m)``.
Every function accepts arrays or tape ``Value`` objects.
"""

from __future__ import annotations

import numpy as np

from . import ad
from .ad.layers import use
from .errors import NumericalError
from .linalg import JITTER_SCALE

P_CLAMP = 1e-6


def loss_l2(predictions, targets):
    """Mean squared error over trajectories, steps and coordinates."""
    e = predictions - targets
    return ad.mean(ad.square(e))


def loss_m2(predictions, targets, predicted_covs, reduction="sum"):
    """``sum |e_j^2 - [Sigma]_jj|`` over trajectories, steps and coordinates.

    ``reduction="mean"`` divides by the number of terms so the value is on the
    scale of ``loss_l2``.
    """
    e = predictions - targets
    gap = ad.absolute(ad.square(e) - ad.diagonal(predicted_covs))
    if reduction == "sum":
        return ad.vsum(gap)
    if reduction == "mean":
        return ad.mean(gap)
    raise ValueError(f"unknown reduction {reduction!r}")


def loss_emp(predictions, targets, predicted_covs, beta, reduction="sum"):
    """``(1 - beta) * l2 + beta * m2``."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    if beta == 0.0:
        return loss_l2(predictions, targets)
    if beta == 1.0:
        return loss_m2(predictions, targets, predicted_covs, reduction)
    return (1.0 - beta) * loss_l2(predictions, targets) + beta * loss_m2(predictions, targets, predicted_covs, reduction)


def loss_gnll(predictions, targets, predicted_covs):
    """Mean over trajectories and steps of ``e^T Sigma^{-1} e + log det Sigma``.

    A trace-scaled jitter ``1e-9 * tr(Sigma)/m`` is added before factorisation.
    """
    e = predictions - targets
    C = ad.data_of(predicted_covs)
    m = C.shape[-1]
    eps = JITTER_SCALE * np.abs(np.trace(C, axis1=-2, axis2=-1)) / m
    covs = predicted_covs + eps[..., None, None] * np.eye(m)
    Cj = ad.data_of(covs)
    try:
        np.linalg.cholesky(Cj)
    except np.linalg.LinAlgError:
        bad = [idx for idx in np.ndindex(Cj.shape[:-2]) if np.any(np.linalg.eigvalsh(Cj[idx]) <= 0)]
        raise NumericalError(f"covariance not positive definite at (i, t)={bad[0]}", index=bad[0]) from None
    shape = np.shape(ad.data_of(e))
    col = ad.reshape(e, shape + (1,))
    quad = ad.reshape(ad.matmul(ad.transpose(col), ad.solve(covs, col)), shape[:-1])
    return ad.mean(quad + ad.logdet_spd(covs))


def bernoulli_entropy(p):
    p = np.clip(p, P_CLAMP, 1.0 - P_CLAMP) if not isinstance(p, ad.Value) else p
    return -(p * ad.log(p) + (1.0 - p) * ad.log(1.0 - p))


def kl_layer(theta_sq_norm, p, n_inputs, c1, c2):
    """``c1 * ||theta||^2 / (1 - p) - c2 * H(p) * n_inputs`` with ``p`` clamped to ``[1e-6, 1 - 1e-6]``.

    ``theta_sq_norm`` is the squared norm of the layer weights. ``p`` may be a
    ``Value`` (then clamping is applied through its data only).
    """
    if isinstance(p, ad.Value):
        clipped = np.clip(p.data, P_CLAMP, 1.0 - P_CLAMP)
        p = p + (clipped - p.data)  # straight-through clamp
    else:
        p = float(np.clip(p, P_CLAMP, 1.0 - P_CLAMP)) if np.ndim(p) == 0 else np.clip(p, P_CLAMP, 1.0 - P_CLAMP)
    return c1 * theta_sq_norm / (1.0 - p) - c2 * bernoulli_entropy(p) * n_inputs


def network_kl(net, c1, c2):
    """Sum of ``kl_layer`` over every dropout-carrying dense layer of ``net``.

    ``theta`` is the dense layer's weights and bias. A per-neuron ``p`` contributes
    its mean entropy times the input width.
    """
    total = 0.0
    for layer in net.dropout_layers():
        dense, drop = layer.dense, layer.dropout
        W, b = use(dense.weight), use(dense.bias)
        sq = ad.vsum(ad.square(W)) + ad.vsum(ad.square(b))
        p = ad.sigmoid(use(drop.logit_p))
        term = kl_layer(sq, ad.mean(p), drop.n_features, c1, c2)
        total = total + term
    return total
