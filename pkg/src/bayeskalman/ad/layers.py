"""Parameterised layers built on the tape primitives."""

from __future__ import annotations

import enum

import numpy as np

from . import tape as ad
from .tape import Value, parameter


def use(p: Value):
    """A parameter as seen by the current computation: the Value while recording, else its array."""
    return p if ad.active_tape() is not None else p.data


def xavier(rng, fan_out, fan_in, scale=1.0):
    bound = scale * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


class Module:
    """Minimal container: parameters are ``Value`` attributes, children are ``Module`` attributes or lists."""

    def named_parameters(self, prefix=""):
        out = {}
        for key, val in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(val, Value) and val.requires_grad:
                out[path] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(path + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{path}.{i}."))
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state):
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=float)
            if arr.shape != p.data.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.data.shape}")
            p.data = arr.copy()


class Activation(str, enum.Enum):
    IDENTITY = "identity"
    RELU = "relu"
    TANH = "tanh"


_ACT = {Activation.IDENTITY: lambda x: x, Activation.RELU: ad.relu, Activation.TANH: ad.tanh}


class DenseLayer(Module):
    def __init__(self, in_dim, out_dim, activation="identity", rng=None, scale=1.0):
        rng = np.random.default_rng() if rng is None else rng
        self.in_dim, self.out_dim = in_dim, out_dim
        self.activation = Activation(activation)
        self.weight = parameter(xavier(rng, out_dim, in_dim, scale))
        self.bias = parameter(np.zeros(out_dim))

    def __call__(self, x):
        return _ACT[self.activation](ad.linear(x, use(self.weight), use(self.bias)))


class GRUCell(Module):
    def __init__(self, in_dim, hidden_dim, rng=None):
        rng = np.random.default_rng() if rng is None else rng
        self.in_dim, self.hidden_dim = in_dim, hidden_dim
        self.W_ih = parameter(np.concatenate([xavier(rng, hidden_dim, in_dim) for _ in range(3)]))
        self.W_hh = parameter(np.concatenate([xavier(rng, hidden_dim, hidden_dim) for _ in range(3)]))
        self.b_ih = parameter(np.zeros(3 * hidden_dim))
        self.b_hh = parameter(np.zeros(3 * hidden_dim))

    def init_hidden(self, batch_shape=()):
        return np.zeros(tuple(batch_shape) + (self.hidden_dim,))

    def __call__(self, x, h):
        return ad.gru_cell(x, h, use(self.W_ih), use(self.W_hh), use(self.b_ih), use(self.b_hh))


def gru_step(cell: GRUCell, h_prev, x):
    return cell(x, h_prev)


class DropoutMode(str, enum.Enum):
    TRAIN_RELAXED = "train_relaxed"
    INFER_BERNOULLI = "infer_bernoulli"
    OFF = "off"


def _logit(p):
    p = np.asarray(p, dtype=float)
    with np.errstate(divide="ignore"):
        return np.log(p) - np.log1p(-p)


class ConcreteDropoutLayer(Module):
    """Dropout on a layer input with a trainable drop probability ``p = sigmoid(logit_p)``.

    ``TRAIN_RELAXED`` uses the concrete (relaxed Bernoulli) mask so the loss is
    differentiable in ``logit_p``; ``INFER_BERNOULLI`` uses a hard mask.  Both
    rescale kept units by ``1 / (1 - p)``.
    """

    def __init__(self, n_features, p_init=0.5, temperature=0.1, per_neuron=False):
        self.n_features = n_features
        self.temperature = float(temperature)
        shape = (n_features,) if per_neuron else (1,)
        self.logit_p = parameter(np.broadcast_to(_logit(p_init), shape).copy())

    @property
    def p(self):
        return ad._sigmoid(self.logit_p.data)

    def set_p(self, p):
        self.logit_p.data = np.broadcast_to(_logit(p), self.logit_p.data.shape).copy()

    def sample_mask(self, batch_shape, rng, mode, u=None):
        """Mask of shape ``batch_shape + (n_features,)``, already scaled by ``1/(1-p)``; ``None`` when off."""
        mode = DropoutMode(mode)
        if mode is DropoutMode.OFF:
            return None
        shape = tuple(batch_shape) + (self.n_features,)
        if u is None:
            u = rng.random(shape)
        u = np.broadcast_to(np.asarray(u, dtype=float), shape)
        logit_p = use(self.logit_p)
        keep_scale = 1.0 / ad.sigmoid(-logit_p)  # 1 / (1 - p)
        if mode is DropoutMode.INFER_BERNOULLI:
            keep = (u >= ad.data_of(ad.sigmoid(logit_p))).astype(float)
            return keep * ad.data_of(keep_scale)
        eps = 1e-12
        uc = np.clip(u, eps, 1.0 - eps)
        noise = np.log(uc) - np.log1p(-uc)
        z = 1.0 - ad.sigmoid((logit_p + noise) * (1.0 / self.temperature))
        return z * keep_scale

    @staticmethod
    def apply(x, mask):
        return x if mask is None else ad.mul(x, mask)

    def __call__(self, x, rng=None, mode=DropoutMode.OFF, u=None):
        return self.apply(x, self.sample_mask(np.shape(ad.data_of(x))[:-1], rng, mode, u))


def concrete_dropout_forward(layer: ConcreteDropoutLayer, x, rng, mode, u=None):
    return layer(x, rng, mode, u)


class DropoutDense(Module):
    """A dense layer whose input passes through an optional concrete-dropout layer."""

    def __init__(self, in_dim, out_dim, activation="identity", rng=None, dropout=False,
                 p_init=0.5, temperature=0.1, per_neuron=False, scale=1.0):
        self.dense = DenseLayer(in_dim, out_dim, activation, rng, scale)
        self.dropout = ConcreteDropoutLayer(in_dim, p_init, temperature, per_neuron) if dropout else None

    def sample_mask(self, batch_shape, rng, mode):
        if self.dropout is None:
            return None
        return self.dropout.sample_mask(batch_shape, rng, mode)

    def __call__(self, x, mask=None):
        return self.dense(ConcreteDropoutLayer.apply(x, mask))
