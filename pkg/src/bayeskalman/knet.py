"""DNN-aided filters: learned Kalman gain, learned prior covariance, and a black-box tracker.

All runners are batched: observations have shape ``(R, T, n)`` where the
leading axis indexes independent rows (trajectories or ensemble members).
During training the same code runs on tape ``Value`` objects.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from . import ad
from .ad.layers import DenseLayer, DropoutDense, DropoutMode, GRUCell, Module
from .covariance import extract_cov_joseph, extract_cov_update, posterior_from_gain
from .errors import ConfigError, NumericalError
from .linalg import FilterOutput, jitter
from .ssm import Dataset, SSModelSpec

P_INIT_RANGE = (0.5, 0.8)
OUT_SCALE = 1e-2
S_FLOOR = 1e-6


class FilterVariant(str, enum.Enum):
    EKF = "ekf"
    KNET_KG = "knet_kg"
    SKN = "skn"
    BLACKBOX = "blackbox"
    BKN = "bkn"


class CovForm(str, enum.Enum):
    STANDARD = "standard"
    JOSEPH = "joseph"


def hidden_size(m, n):
    return 10 * (m + n)


# ---------------------------------------------------------------------------
# features


@dataclass
class KnetFeatures:
    dx: Any
    dy_innov: Any
    dy_diff: Any

    def vector(self):
        return ad.concat([self.dx, self.dy_innov, self.dy_diff], axis=-1)


def compute_features(y, y_prior=None, x_prev=None, x_prev2=None, y_prev=None, m=None) -> KnetFeatures:
    """Differences fed to the gain network; any term lacking its history is a zero vector.

    ``dx = x_prev - x_prev2``, ``dy_innov = y - y_prior``, ``dy_diff = y - y_prev``.
    The width of a zero ``dx`` comes from ``x_prev`` or, failing that, ``m``.
    """
    y_shape = np.shape(ad.data_of(y))
    dy_innov = np.zeros(y_shape) if y_prior is None else y - y_prior
    dy_diff = np.zeros(y_shape) if y_prev is None else y - y_prev
    if x_prev is not None and x_prev2 is not None:
        dx = x_prev - x_prev2
    else:
        width = np.shape(ad.data_of(x_prev))[-1] if x_prev is not None else (m or 0)
        dx = np.zeros(y_shape[:-1] + (width,))
    return KnetFeatures(dx, dy_innov, dy_diff)


def feature_scales(model: SSModelSpec, dataset: Dataset, floor=1e-8) -> np.ndarray:
    """Per-feature standard deviations estimated from ground-truth trajectories.

    ``dx`` uses state increments, ``dy_innov`` the one-step observation
    prediction error of the true state, ``dy_diff`` observation increments.
    """
    X = dataset.states
    Y = dataset.observations
    X_full = np.concatenate([dataset.x0[:, None, :], X], axis=1)
    dx = np.diff(X_full, axis=1)
    innov = Y - model.h(model.f(X_full[:, :-1]))
    dy = np.diff(Y, axis=1)
    parts = [dx.reshape(-1, model.m), innov.reshape(-1, model.n)]
    parts.append(dy.reshape(-1, model.n) if dy.size else np.ones((1, model.n)))
    scales = np.concatenate([p.std(axis=0) for p in parts])
    return np.maximum(scales, floor)


# ---------------------------------------------------------------------------
# networks


def _dropout_kwargs(dropout, rng, p_init, temperature, per_neuron):
    if not dropout:
        return {}
    lo, hi = p_init if isinstance(p_init, tuple) else (p_init, p_init)
    return dict(dropout=True, p_init=float(rng.uniform(lo, hi)) if hi > lo else lo,
                temperature=temperature, per_neuron=per_neuron)


class KGNetwork(Module):
    """Gain network: dense -> GRU -> dense, with optional concrete dropout on each dense input.

    Maps the normalised ``(dx, dy_innov, dy_diff)`` feature vector to an ``m x n`` gain.
    """

    def __init__(self, m, n, hidden=None, dropout=False, rng=None, p_init=P_INIT_RANGE,
                 temperature=0.1, per_neuron=False, out_scale=OUT_SCALE):
        rng = np.random.default_rng() if rng is None else rng
        self.m, self.n = m, n
        self.in_dim = m + 2 * n
        self.hidden = hidden_size(m, n) if hidden is None else hidden
        h_in = 8 * (m + n)
        kw = lambda: _dropout_kwargs(dropout, rng, p_init, temperature, per_neuron)  # noqa: E731
        self.fc_in = DropoutDense(self.in_dim, h_in, "relu", rng, **kw())
        self.gru = GRUCell(h_in, self.hidden, rng)
        self.fc_out = DropoutDense(self.hidden, m * n, "identity", rng, scale=out_scale, **kw())
        self.feat_scale = np.ones(self.in_dim)

    @property
    def dense_layers(self):
        return [self.fc_in, self.fc_out]

    @property
    def has_dropout(self):
        return any(layer.dropout is not None for layer in self.dense_layers)

    def dropout_layers(self):
        return [layer for layer in self.dense_layers if layer.dropout is not None]

    def buffers(self):
        return {"feat_scale": self.feat_scale.copy()}

    def load_buffers(self, buffers):
        if "feat_scale" in buffers:
            self.feat_scale = np.asarray(buffers["feat_scale"], dtype=float).copy()

    def init_hidden(self, rows):
        return self.gru.init_hidden((rows,))

    def sample_masks(self, batch_shape, rng, mode=DropoutMode.INFER_BERNOULLI):
        if DropoutMode(mode) is DropoutMode.OFF or not self.has_dropout:
            return None
        return tuple(layer.sample_mask(batch_shape, rng, mode) for layer in self.dense_layers)

    def __call__(self, features, hidden, masks=None):
        masks = masks or (None, None)
        a = self.fc_in(features * (1.0 / self.feat_scale), masks[0])
        hidden = self.gru(a, hidden)
        k = self.fc_out(hidden, masks[1])
        rows = np.shape(ad.data_of(k))[:-1]
        return ad.reshape(k, rows + (self.m, self.n)), hidden


class CholeskyHead(Module):
    """Dense map to ``d(d+1)/2`` numbers forming ``L`` (exp on the diagonal); emits ``L L^T + floor I``."""

    def __init__(self, in_dim, d, rng, floor=0.0, out_scale=OUT_SCALE):
        self.d = d
        self.floor = floor
        k = d * (d + 1) // 2
        self.dense = DenseLayer(in_dim, k, "identity", rng, scale=out_scale)
        rows, cols = np.tril_indices(d)
        diag = rows == cols
        self._E_diag = np.zeros((d, d * d))
        self._E_off = np.zeros((k - d, d * d))
        self._diag_pos = np.flatnonzero(diag)
        self._off_pos = np.flatnonzero(~diag)
        for i, pos in enumerate(self._diag_pos):
            self._E_diag[i, rows[pos] * d + cols[pos]] = 1.0
        for i, pos in enumerate(self._off_pos):
            self._E_off[i, rows[pos] * d + cols[pos]] = 1.0

    def factor(self, x):
        raw = self.dense(x)
        rows = np.shape(ad.data_of(raw))[:-1]
        diag = ad.exp(ad.getitem(raw, (Ellipsis, self._diag_pos)))
        flat = ad.matmul(ad.reshape(diag, rows + (1, self.d)), self._E_diag)
        if len(self._off_pos):
            off = ad.getitem(raw, (Ellipsis, self._off_pos))
            off = ad.reshape(off, rows + (1, len(self._off_pos)))
            flat = flat + ad.matmul(off, self._E_off)
        return ad.reshape(flat, rows + (self.d, self.d))

    def __call__(self, x):
        L = self.factor(x)
        C = ad.matmul(L, ad.transpose(L))
        return C + self.floor * np.eye(self.d) if self.floor else C


class SplitNetwork(Module):
    """Two recurrent branches emitting the prior covariance and the innovation covariance.

    The second branch emits a positive-definite ``R_hat`` and the innovation
    covariance is composed as ``S_hat = H Sigma_hat H^T + R_hat``, so the
    standard posterior update ``(I - K H) Sigma_hat`` stays PSD.
    """

    def __init__(self, m, n, hidden=None, rng=None, out_scale=OUT_SCALE):
        rng = np.random.default_rng() if rng is None else rng
        self.m, self.n = m, n
        self.in_dim = m + 2 * n
        self.hidden = hidden_size(m, n) if hidden is None else hidden
        h_in = 8 * (m + n)
        self.fc_sigma = DenseLayer(self.in_dim, h_in, "relu", rng)
        self.gru_sigma = GRUCell(h_in, self.hidden, rng)
        self.head_sigma = CholeskyHead(self.hidden, m, rng, out_scale=out_scale)
        self.fc_r = DenseLayer(self.in_dim, h_in, "relu", rng)
        self.gru_r = GRUCell(h_in, self.hidden, rng)
        self.head_r = CholeskyHead(self.hidden, n, rng, floor=S_FLOOR, out_scale=out_scale)
        self.feat_scale = np.ones(self.in_dim)

    buffers = KGNetwork.buffers
    load_buffers = KGNetwork.load_buffers

    def init_hidden(self, rows):
        return (self.gru_sigma.init_hidden((rows,)), self.gru_r.init_hidden((rows,)))

    def __call__(self, features, hidden, H):
        z = features * (1.0 / self.feat_scale)
        h_s = self.gru_sigma(self.fc_sigma(z), hidden[0])
        h_r = self.gru_r(self.fc_r(z), hidden[1])
        sigma = self.head_sigma(h_s)
        S = ad.matmul(ad.matmul(H, sigma), ad.transpose(H)) + self.head_r(h_r)
        return sigma, S, (h_s, h_r)


class BlackboxTracker(Module):
    """GRU over normalised observations with a mean head and a log-variance head."""

    def __init__(self, m, n, hidden=None, rng=None):
        rng = np.random.default_rng() if rng is None else rng
        self.m, self.n = m, n
        self.hidden = hidden_size(m, n) if hidden is None else hidden
        h_in = 8 * (m + n)
        self.fc_in = DenseLayer(n, h_in, "relu", rng)
        self.gru = GRUCell(h_in, self.hidden, rng)
        self.mean_head = DenseLayer(self.hidden, m, "identity", rng)
        self.logvar_head = DenseLayer(self.hidden, m, "identity", rng, scale=OUT_SCALE)
        self.y_scale = np.ones(n)
        self.x_scale = np.ones(m)

    def buffers(self):
        return {"y_scale": self.y_scale.copy(), "x_scale": self.x_scale.copy()}

    def load_buffers(self, buffers):
        for key in ("y_scale", "x_scale"):
            if key in buffers:
                setattr(self, key, np.asarray(buffers[key], dtype=float).copy())

    def init_hidden(self, rows):
        return self.gru.init_hidden((rows,))

    def __call__(self, y, hidden):
        hidden = self.gru(self.fc_in(y * (1.0 / self.y_scale)), hidden)
        return self.mean_head(hidden) * self.x_scale, self.logvar_head(hidden), hidden


# ---------------------------------------------------------------------------
# steps


@dataclass
class KnetState:
    """Recursion memory of a learned filter over ``R`` rows."""

    x_post: Any  # x_{t-1|t-1}
    hidden: Any
    x_post_prev: Any = None  # x_{t-2|t-2}
    y_prev: Any = None
    t: int = 0


@dataclass
class StepResult:
    x_post: Any
    x_prior: Any
    K: Any
    H: np.ndarray
    cov: Any = None


def init_knet_state(net, x0) -> KnetState:
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    return KnetState(x_post=x0, hidden=net.init_hidden(x0.shape[0]))


def _predict(model: SSModelSpec, x_post):
    x_prior = ad.vector_map(model.f, model.jac_f, x_post)
    y_prior = ad.vector_map(model.h, model.jac_h, x_prior)
    return x_prior, y_prior


def _check_finite(arr, what, t):
    if not np.all(np.isfinite(ad.data_of(arr))):
        raise NumericalError(f"t={t}: non-finite {what}", index=t)


def _advance(state, x_post, hidden, y):
    return KnetState(x_post=x_post, hidden=hidden, x_post_prev=state.x_post, y_prev=y, t=state.t + 1)


def knet_step(model: SSModelSpec, net, state: KnetState, y, masks=None):
    """One learned-gain update. ``net(features, hidden, masks) -> (K, hidden)``."""
    x_prior, y_prior = _predict(model, state.x_post)
    feats = compute_features(y, y_prior, state.x_post, state.x_post_prev, state.y_prev)
    K, hidden = net(feats.vector(), state.hidden, masks)
    _check_finite(K, "gain network output", state.t)
    innov = y - y_prior
    x_post = x_prior + ad.bmv(K, innov)
    H = model.jac_h(ad.data_of(x_prior))
    return _advance(state, x_post, hidden, y), StepResult(x_post, x_prior, K, H)


def skn_step(model: SSModelSpec, net, state: KnetState, y, cov_form=CovForm.STANDARD):
    """One split update. ``net(features, hidden, H) -> (Sigma_prior, S, hidden)``; ``K = Sigma H^T S^{-1}``."""
    x_prior, y_prior = _predict(model, state.x_post)
    feats = compute_features(y, y_prior, state.x_post, state.x_post_prev, state.y_prev)
    H = model.jac_h(ad.data_of(x_prior))
    sigma, S, hidden = net(feats.vector(), state.hidden, H)
    _check_finite(sigma, "prior covariance head", state.t)
    _check_finite(S, "innovation covariance head", state.t)
    S_data = ad.data_of(S)
    try:
        np.linalg.cholesky(S_data)
    except np.linalg.LinAlgError:
        S = S + jitter(S_data)
        try:
            np.linalg.cholesky(ad.data_of(S))
        except np.linalg.LinAlgError:
            raise NumericalError(f"t={state.t}: innovation covariance not positive definite", index=state.t) from None
    K = ad.transpose(ad.solve(S, ad.matmul(H, sigma)))
    x_post = x_prior + ad.bmv(K, y - y_prior)
    if CovForm(cov_form) is CovForm.JOSEPH:
        cov = extract_cov_joseph(K, H, sigma, model.R)
    else:
        cov = extract_cov_update(K, H, sigma, check=False)
    return _advance(state, x_post, hidden, y), StepResult(x_post, x_prior, K, H, cov)


def blackbox_step(tracker: BlackboxTracker, hidden, y):
    """Returns ``(x_hat, diag covariance, variances, hidden)``."""
    mean, logvar, hidden = tracker(y, hidden)
    var = ad.exp(logvar)
    m = tracker.m
    cov = ad.mul(ad.reshape(var, np.shape(ad.data_of(var)) + (1,)), np.eye(m))
    return mean, cov, var, hidden


# ---------------------------------------------------------------------------
# full-trajectory runners


@dataclass
class LearnedRun:
    """Stacked outputs over time: ``x`` (R, T, m); ``K`` (R, T, m, n); ``H`` (R, T, n, m); ``cov`` optional."""

    x: Any
    K: Any = None
    H: Optional[np.ndarray] = None
    cov: Any = None
    cov_indices: Optional[tuple] = None
    extras: dict = field(default_factory=dict)


def _rows(observations, x0):
    Y = np.asarray(observations, dtype=float)
    if Y.ndim == 2:
        Y = Y[None]
    if Y.shape[1] < 1:
        raise ValueError("observations must be non-empty")
    x0 = np.broadcast_to(np.atleast_2d(np.asarray(x0, dtype=float)), (Y.shape[0], np.shape(x0)[-1]))
    return Y, x0


def run_knet(model: SSModelSpec, net, observations, x0, masks=None, mask_fn=None) -> LearnedRun:
    """Learned-gain filter over ``(R, T, n)`` observations.

    ``masks`` are held for the whole trajectory; ``mask_fn(t)`` instead supplies
    fresh masks at every step.
    """
    Y, x0 = _rows(observations, x0)
    state = init_knet_state(net, x0)
    xs, Ks, Hs = [], [], []
    for t in range(Y.shape[1]):
        step_masks = mask_fn(t) if mask_fn is not None else masks
        state, out = knet_step(model, net, state, Y[:, t], step_masks)
        xs.append(out.x_post)
        Ks.append(out.K)
        Hs.append(out.H)
    return LearnedRun(x=ad.stack(xs, axis=1), K=ad.stack(Ks, axis=1), H=np.stack(Hs, axis=1))


def run_skn(model: SSModelSpec, net: SplitNetwork, observations, x0, cov_form=CovForm.STANDARD) -> LearnedRun:
    Y, x0 = _rows(observations, x0)
    state = init_knet_state(net, x0)
    xs, Ks, Hs, covs = [], [], [], []
    for t in range(Y.shape[1]):
        state, out = skn_step(model, net, state, Y[:, t], cov_form)
        xs.append(out.x_post)
        Ks.append(out.K)
        Hs.append(out.H)
        covs.append(out.cov)
    return LearnedRun(x=ad.stack(xs, axis=1), K=ad.stack(Ks, axis=1), H=np.stack(Hs, axis=1),
                      cov=ad.stack(covs, axis=1))


def run_blackbox(tracker: BlackboxTracker, observations) -> LearnedRun:
    Y = np.asarray(observations, dtype=float)
    if Y.ndim == 2:
        Y = Y[None]
    hidden = tracker.init_hidden(Y.shape[0])
    xs, covs, variances = [], [], []
    for t in range(Y.shape[1]):
        mean, cov, var, hidden = blackbox_step(tracker, hidden, Y[:, t])
        xs.append(mean)
        covs.append(cov)
        variances.append(var)
    return LearnedRun(x=ad.stack(xs, axis=1), cov=ad.stack(covs, axis=1),
                      extras={"var": ad.stack(variances, axis=1)})


def knet_covariance(run: LearnedRun, R, form=CovForm.STANDARD, indices=None):
    """Gain-only posterior covariances for a learned-gain run (``R`` broadcast per row)."""
    R = np.asarray(R, dtype=float)
    if R.ndim == 3:
        R = R[:, None]
    return posterior_from_gain(run.K, run.H, R, CovForm(form).value, indices)


def knet_cov_indices(model: SSModelSpec, H_sample=None):
    """State indices whose covariance block is recoverable from the gain; ``None`` means all.

    Raises ``ConfigError`` when no column subset of the observation Jacobian has
    full column rank (the gain then carries no covariance information).
    """
    H = model.H if model.H is not None else H_sample
    if H is None:
        H = model.jac_h(model.sample_x0(np.random.default_rng(0)))
    H = np.asarray(H, dtype=float)
    if np.linalg.matrix_rank(H) == model.m:
        return None
    cols = [j for j in range(model.m) if np.any(H[:, j] != 0)]
    if cols and model.H is not None and np.linalg.matrix_rank(H[:, cols]) == len(cols):
        return tuple(cols)
    raise ConfigError(f"covariance cannot be extracted from the gain for the {model.tag} model")


def as_filter_output(run: LearnedRun, squeeze=False) -> FilterOutput:
    x = ad.data_of(run.x)
    cov = None if run.cov is None else ad.data_of(run.cov)
    if squeeze and x.shape[0] == 1:
        x = x[0]
        cov = None if cov is None else cov[0]
    return FilterOutput(x, cov, run.cov_indices)


def build_network(variant, m, n, rng, **kw):
    variant = FilterVariant(variant)
    if variant is FilterVariant.KNET_KG:
        return KGNetwork(m, n, rng=rng, dropout=False, hidden=kw.get("hidden"))
    if variant is FilterVariant.BKN:
        return KGNetwork(m, n, rng=rng, dropout=True, hidden=kw.get("hidden"),
                         p_init=kw.get("p_init", P_INIT_RANGE), temperature=kw.get("temperature", 0.1),
                         per_neuron=kw.get("per_neuron", False))
    if variant is FilterVariant.SKN:
        return SplitNetwork(m, n, rng=rng, hidden=kw.get("hidden"))
    if variant is FilterVariant.BLACKBOX:
        return BlackboxTracker(m, n, rng=rng, hidden=kw.get("hidden"))
    raise ConfigError(f"variant {variant.value} has no network")
