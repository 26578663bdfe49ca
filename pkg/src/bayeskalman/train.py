"""Training loop for the learned filters with validation-based checkpoint selection."""

from __future__ import annotations

import csv
import enum
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import ad
from .ad import checkpoint
from .ad.layers import DropoutMode
from .bkn import ExecutionMode, bkn_members, ensemble_cov, ensemble_mean
from .errors import ConfigError, DivergenceError, NumericalError
from .knet import (
    BlackboxTracker,
    CovForm,
    FilterVariant,
    build_network,
    feature_scales,
    knet_cov_indices,
    knet_covariance,
    run_blackbox,
    run_knet,
    run_skn,
)
from .losses import loss_emp, loss_gnll, loss_l2, network_kl
from .metrics import anees, mse
from .ssm import Dataset, SSModelSpec

LOG_HEADER = ["epoch", "train_loss", "val_loss", "val_mse_db", "val_anees", "beta", "wallclock_s"]


class LossKind(str, enum.Enum):
    L2 = "l2"
    EMP = "emp"
    GNLL = "gnll"
    BKN = "bkn"


DEFAULT_LOSS = {
    FilterVariant.KNET_KG: LossKind.L2,
    FilterVariant.SKN: LossKind.GNLL,
    FilterVariant.BLACKBOX: LossKind.GNLL,
    FilterVariant.BKN: LossKind.BKN,
}


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 8
    lr: float = 1e-3
    beta_start: float = 0.1
    beta_end: float = 0.9
    beta_ramp_fraction: float = 0.6
    c1: float = 1e-4
    c2: float = 1e-4
    loss: Optional[str] = None  # None picks the variant default
    seed: int = 0
    val_fraction: float = 0.1
    mc_samples: int = 8
    val_members: int = 10
    clip_norm: float = 10.0
    m2_reduction: str = "mean"
    cov_form: str = "standard"
    per_neuron: bool = False
    temperature: float = 0.1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        for name in ("beta_start", "beta_end", "beta_ramp_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.c1 < 0 or self.c2 < 0:
            raise ConfigError("c1 and c2 must be non-negative")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")
        if self.mc_samples < 1 or self.val_members < 1:
            raise ConfigError("mc_samples and val_members must be positive")
        if self.loss is not None:
            LossKind(self.loss)
        CovForm(self.cov_form)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def beta_schedule(epoch: int, config: TrainConfig) -> float:
    """Linear ramp from ``beta_start`` to ``beta_end`` over the first ``beta_ramp_fraction`` of epochs."""
    ramp = max(1, round(config.beta_ramp_fraction * config.epochs))
    frac = min(1.0, epoch / ramp)
    return config.beta_start + (config.beta_end - config.beta_start) * frac


def resolve_loss(variant, config: TrainConfig) -> LossKind:
    variant = FilterVariant(variant)
    if variant is FilterVariant.EKF:
        raise ConfigError("the EKF has nothing to train")
    loss = DEFAULT_LOSS[variant] if config.loss is None else LossKind(config.loss)
    if (loss is LossKind.BKN) != (variant is FilterVariant.BKN):
        raise ConfigError(f"loss {loss.value} is not compatible with variant {variant.value}")
    if variant is FilterVariant.KNET_KG and loss is LossKind.GNLL:
        raise ConfigError("gain-extracted covariances are not guaranteed positive definite; use l2 or emp")
    return loss


# ---------------------------------------------------------------------------
# forward passes shared by training and validation


@dataclass
class Batch:
    Y: np.ndarray  # (B, T, n)
    X: np.ndarray  # (B, T, m)
    x0: np.ndarray  # (B, m)
    R: np.ndarray  # (B, n, n) filter-side observation noise per trajectory


def _outer_mean(dev):
    """``mean_j dev_j dev_j^T`` over the leading axis, on the tape."""
    shape = np.shape(ad.data_of(dev))
    col = ad.reshape(dev, shape + (1,))
    row = ad.reshape(dev, shape[:-1] + (1, shape[-1]))
    return ad.mean(ad.mul(col, row), axis=0)


def bkn_train_forward(model, net, batch: Batch, rng, mc_samples):
    """Ensemble mean and covariance of ``mc_samples`` relaxed-mask realizations per trajectory."""
    B, T, n = batch.Y.shape
    rows = mc_samples * B
    Y = np.broadcast_to(batch.Y, (mc_samples, B, T, n)).reshape(rows, T, n)
    x0 = np.broadcast_to(batch.x0, (mc_samples, B, model.m)).reshape(rows, model.m)
    masks = net.sample_masks((rows,), rng, DropoutMode.TRAIN_RELAXED)
    x = ad.reshape(run_knet(model, net, Y, x0, masks=masks).x, (mc_samples, B, T, model.m))
    mean = ad.mean(x, axis=0)
    cov = _outer_mean(x - mean) if mc_samples > 1 else np.zeros((B, T, model.m, model.m))
    return mean, cov


def loss_bkn(net, model, batch: Batch, beta, c1, c2, rng, mc_samples=8, reduction="mean"):
    """Monte Carlo data term on the relaxed-dropout ensemble plus the per-layer KL regulariser."""
    mean, cov = bkn_train_forward(model, net, batch, rng, mc_samples)
    return loss_emp(mean, batch.X, cov, beta, reduction) + network_kl(net, c1, c2)


def _variant_forward(variant, model, net, batch: Batch, need_cov, config, cov_indices):
    if variant is FilterVariant.KNET_KG:
        run = run_knet(model, net, batch.Y, batch.x0)
        cov = knet_covariance(run, batch.R, config.cov_form, cov_indices) if need_cov else None
        return run.x, cov
    if variant is FilterVariant.SKN:
        run = run_skn(model, net, batch.Y, batch.x0, config.cov_form)
        return run.x, run.cov
    if variant is FilterVariant.BLACKBOX:
        run = run_blackbox(net, batch.Y)
        return run.x, run.cov
    raise ConfigError(f"no forward pass for {variant.value}")


def _subset_cols(x, indices):
    return x if indices is None else ad.getitem(x, (Ellipsis, list(indices)))


def batch_loss(variant, loss_kind, model, net, batch, beta, config, rng, cov_indices=None):
    if loss_kind is LossKind.BKN:
        return loss_bkn(net, model, batch, beta, config.c1, config.c2, rng, config.mc_samples, config.m2_reduction)
    need_cov = loss_kind is not LossKind.L2
    x, cov = _variant_forward(variant, model, net, batch, need_cov, config, cov_indices)
    if loss_kind is LossKind.L2:
        return loss_l2(x, batch.X)
    if loss_kind is LossKind.EMP:
        if cov_indices is None:
            return loss_emp(x, batch.X, cov, beta, config.m2_reduction)
        l2 = loss_l2(x, batch.X)
        m2 = loss_emp(_subset_cols(x, cov_indices), _subset_cols(batch.X, cov_indices), cov, 1.0, config.m2_reduction)
        return (1.0 - beta) * l2 + beta * m2
    return loss_gnll(_subset_cols(x, cov_indices), _subset_cols(batch.X, cov_indices), cov)


def predict(variant, model, net, Y, x0, R=None, config: Optional[TrainConfig] = None, rng=None, J=None,
            cov_indices=None, mode=ExecutionMode.PARALLEL):
    """Inference pass returning ``(x, cov)`` arrays; ``cov`` is ``None`` when unavailable."""
    variant = FilterVariant(variant)
    config = config or TrainConfig()
    if variant is FilterVariant.BKN:
        members = bkn_members(model, net, Y, x0, J or config.val_members, rng, mode)
        mean = ensemble_mean(members)
        return mean, ensemble_cov(members, mean)
    R = model.R if R is None else R
    batch = Batch(Y, None, x0, np.broadcast_to(R, (len(Y),) + np.shape(model.R)))
    try:
        return _variant_forward(variant, model, net, batch, True, config, cov_indices)
    except NumericalError:
        x, _ = _variant_forward(variant, model, net, batch, False, config, cov_indices)
        return x, None


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    variant: str
    net: object
    state: dict
    buffers: dict
    log: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = math.inf

    def save_checkpoint(self, path, meta=None):
        meta = dict(meta or {}, variant=self.variant, best_epoch=self.best_epoch)
        return checkpoint.save(path, self.state, self.buffers, meta)


def init_buffers(variant, net, model: SSModelSpec, dataset: Dataset):
    if isinstance(net, BlackboxTracker):
        net.y_scale = np.maximum(dataset.observations.reshape(-1, model.n).std(axis=0), 1e-8)
        net.x_scale = np.maximum(dataset.states.reshape(-1, model.m).std(axis=0), 1e-8)
    else:
        net.feat_scale = feature_scales(model, dataset)


def split_indices(N, val_fraction, rng):
    """Random ``(train, val)`` index split; ``val`` is empty only when ``val_fraction`` is 0 or ``N == 1``."""
    n_val = int(round(val_fraction * N)) if N > 1 else 0
    n_val = min(max(n_val, 1 if val_fraction > 0 and N > 1 else 0), max(N - 1, 0))
    perm = rng.permutation(N)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _batch_of(dataset: Dataset, idx, R_all):
    return Batch(dataset.observations[idx], dataset.states[idx], dataset.x0[idx], R_all[idx])


def _noise_rows(model, dataset, R_rows):
    if R_rows is None:
        return np.broadcast_to(model.R, (len(dataset),) + model.R.shape)
    R_rows = np.asarray(R_rows, dtype=float)
    if R_rows.shape != (len(dataset),) + model.R.shape:
        raise ConfigError("per-trajectory R must have shape (N, n, n)")
    return R_rows


def validate(variant, loss_kind, model, net, val: Dataset, R_val, config, beta, cov_indices, seed):
    """Validation metrics ``(loss, mse_db, anees)`` with a fixed mask stream for comparability."""
    rng = np.random.default_rng(seed)
    x, cov = predict(variant, model, net, val.observations, val.x0, R_val, config, rng, cov_indices=cov_indices)
    X = val.states
    _, mse_db = mse(x, X)
    err_c = X if cov_indices is None else X[..., list(cov_indices)]
    x_c = x if cov_indices is None else x[..., list(cov_indices)]
    if loss_kind is LossKind.L2:
        loss = float(loss_l2(x, X))
    elif loss_kind is LossKind.GNLL:
        try:
            loss = float(loss_gnll(x_c, err_c, cov))
        except (NumericalError, np.linalg.LinAlgError):
            loss = math.inf
    else:
        if cov is None:
            loss = math.inf
        elif cov_indices is None:
            loss = float(loss_emp(x, X, cov, beta, config.m2_reduction))
        else:
            m2 = float(loss_emp(x_c, err_c, cov, 1.0, config.m2_reduction))
            loss = (1.0 - beta) * float(loss_l2(x, X)) + beta * m2
    try:
        a = anees(x_c - err_c, cov) if cov is not None else math.nan
    except NumericalError:
        a = math.nan
    return loss, mse_db, a


def train_model(variant, model: SSModelSpec, dataset: Dataset, config: TrainConfig = None,
                val_dataset: Optional[Dataset] = None, R_rows=None, R_val=None, log_path=None,
                progress=None) -> TrainResult:
    """Train a learned filter on ``dataset``; returns the best-validation parameters and the epoch log.

    ``R_rows`` gives the filter-side observation noise per training trajectory
    (pooled multi-SNR data); it defaults to ``model.R``. The validation loss used
    for selection is evaluated at the final ``beta`` so epochs are comparable.
    """
    variant = FilterVariant(variant)
    config = config or TrainConfig()
    loss_kind = resolve_loss(variant, config)
    seq = np.random.SeedSequence(config.seed)
    init_rng, split_rng, shuffle_rng, mask_rng = (np.random.default_rng(s) for s in seq.spawn(4))
    val_seed = int(seq.generate_state(1)[0])

    R_all = _noise_rows(model, dataset, R_rows)
    if val_dataset is None:
        idx_train, idx_val = split_indices(len(dataset), config.val_fraction, split_rng)
        train_ds, R_train = dataset.subset(idx_train), R_all[idx_train]
        val_ds = dataset.subset(idx_val) if len(idx_val) else None
        R_v = R_all[idx_val] if len(idx_val) else None
    else:
        train_ds, val_ds, R_train = dataset, val_dataset, R_all
        R_v = _noise_rows(model, val_dataset, R_val)

    net = build_network(variant, model.m, model.n, init_rng, per_neuron=config.per_neuron,
                        temperature=config.temperature)
    init_buffers(variant, net, model, train_ds)
    cov_indices = None
    if variant is FilterVariant.KNET_KG and loss_kind is LossKind.EMP:
        cov_indices = knet_cov_indices(model)
    params = net.named_parameters()
    opt = ad.Adam(params, lr=config.lr, clip_norm=config.clip_norm)

    result = TrainResult(variant.value, net, net.state_dict(), net.buffers())
    start = time.perf_counter()
    N = len(train_ds)
    for epoch in range(config.epochs):
        beta = beta_schedule(epoch, config)
        order = shuffle_rng.permutation(N)
        losses = []
        for b0 in range(0, N, config.batch_size):
            idx = np.sort(order[b0:b0 + config.batch_size])
            batch = _batch_of(train_ds, idx, R_train)
            opt.zero_grad()
            try:
                with ad.Tape() as tape:
                    loss = batch_loss(variant, loss_kind, model, net, batch, beta, config, mask_rng, cov_indices)
                    if not np.isfinite(loss.data):
                        raise DivergenceError(f"epoch {epoch}: non-finite training loss", epoch=epoch)
                    tape.backward(loss)
                opt.step()
            except NumericalError as err:
                raise DivergenceError(f"epoch {epoch}: {err}", epoch=epoch) from err
            losses.append(float(loss.data))
        train_loss = float(np.mean(losses))
        if val_ds is not None:
            val_loss, val_mse_db, val_anees = validate(variant, loss_kind, model, net, val_ds, R_v, config,
                                                       config.beta_end, cov_indices, val_seed)
        else:
            val_loss, val_mse_db, val_anees = train_loss, math.nan, math.nan
        row = dict(epoch=epoch + 1, train_loss=train_loss, val_loss=val_loss, val_mse_db=val_mse_db,
                   val_anees=val_anees, beta=beta, wallclock_s=time.perf_counter() - start)
        result.log.append(row)
        if val_loss < result.best_val_loss or epoch == 0:
            result.best_val_loss = val_loss
            result.best_epoch = epoch + 1
            result.state = net.state_dict()
        if progress is not None:
            progress(row)
    net.load_state_dict(result.state)
    if log_path is not None:
        write_training_log(log_path, result.log)
    return result


def _fmt(v):
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else str(v)
    return str(v)


def write_training_log(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for row in rows:
            w.writerow([_fmt(row[k]) for k in LOG_HEADER])
    return path


def load_trained(variant, model: SSModelSpec, path, seed=0, **net_kw):
    """Rebuild a network from a checkpoint file; ``net_kw`` must match the trained architecture."""
    params, buffers, meta = checkpoint.load(path)
    net = build_network(variant, model.m, model.n, np.random.default_rng(seed), **net_kw)
    net.load_state_dict(params)
    net.load_buffers(buffers)
    return net, meta
