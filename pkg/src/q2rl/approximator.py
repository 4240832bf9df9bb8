"""Numpy multilayer perceptrons with hand-written backprop, Adam, and target-net helpers.

An :class:`Mlp` may hold a stack of independent networks (``ensemble_size=E``);
weights then carry a leading member axis and one forward call evaluates all
members. Inputs of shape (B, in) are broadcast to every member, inputs of
shape (E, B, in) are routed member by member.
"""
import json

import numpy as np

from . import _kernels_py, kernels
from .errors import NumericError, ShapeError

FORMAT_VERSION = 1
LN_EPS = 1e-10

_ACTIVATIONS = {"relu": kernels.ACT_RELU, "tanh": kernels.ACT_TANH}


class Mlp:
    def __init__(self, layer_sizes, activation="relu", use_layer_norm=True,
                 ensemble_size=None, rng=None, final_scale=1.0, dtype=np.float64):
        layer_sizes = [int(n) for n in layer_sizes]
        if len(layer_sizes) < 2 or min(layer_sizes) < 1:
            raise ShapeError(f"bad layer sizes {layer_sizes}")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.layer_sizes = layer_sizes
        self.activation = activation
        self.use_layer_norm = bool(use_layer_norm)
        self.ensemble_size = ensemble_size
        self.dtype = np.dtype(dtype)
        self.params = {}
        rng = rng if rng is not None else np.random.default_rng(0)
        lead = () if ensemble_size is None else (int(ensemble_size),)
        n_layers = len(layer_sizes) - 1
        for l in range(n_layers):
            fan_in, fan_out = layer_sizes[l], layer_sizes[l + 1]
            bound = 1.0 / np.sqrt(fan_in)
            scale = final_scale if l == n_layers - 1 else 1.0
            w = rng.uniform(-bound, bound, size=lead + (fan_in, fan_out)) * scale
            b = rng.uniform(-bound, bound, size=lead + (1, fan_out)) * scale
            self.params[f"W{l}"] = w.astype(self.dtype)
            self.params[f"b{l}"] = b.astype(self.dtype)
            if l < n_layers - 1 and self.use_layer_norm:
                self.params[f"g{l}"] = np.ones(lead + (fan_out,), self.dtype)
                self.params[f"beta{l}"] = np.zeros(lead + (fan_out,), self.dtype)

    @property
    def n_layers(self):
        return len(self.layer_sizes) - 1

    @property
    def in_dim(self):
        return self.layer_sizes[0]

    @property
    def out_dim(self):
        return self.layer_sizes[-1]

    def architecture(self):
        return {
            "layer_sizes": list(self.layer_sizes),
            "activation": self.activation,
            "use_layer_norm": self.use_layer_norm,
            "ensemble_size": self.ensemble_size,
            "dtype": self.dtype.name,
        }

    def copy(self):
        other = Mlp.__new__(Mlp)
        other.__dict__.update(self.__dict__)
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other

    def members_subset(self, idx):
        """Read-only view restricted to the listed ensemble members."""
        if self.ensemble_size is None:
            raise ShapeError("members_subset needs an ensemble network")
        idx = np.asarray(idx)
        other = Mlp.__new__(Mlp)
        other.__dict__.update(self.__dict__)
        other.params = {k: v[idx] for k, v in self.params.items()}
        other.ensemble_size = int(idx.size)
        return other

    # -- forward / backward -------------------------------------------------

    def _kernels(self):
        return kernels if self.dtype == np.float64 else _kernels_py

    def _check_input(self, x):
        x = np.asarray(x, dtype=self.dtype)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"input has {x.shape[-1]} features, network expects {self.in_dim}")
        if x.ndim == 3 and (self.ensemble_size is None or x.shape[0] != self.ensemble_size):
            raise ShapeError(f"per-member input of shape {x.shape} does not match ensemble")
        return x, squeeze

    def forward(self, x):
        out, _ = self.forward_cache(x, keep=False)
        return out

    def __call__(self, x):
        return self.forward(x)

    def forward_cache(self, x, keep=True):
        x, squeeze = self._check_input(x)
        k = self._kernels()
        act = _ACTIVATIONS[self.activation]
        cache = []
        h = x
        for l in range(self.n_layers):
            z = np.matmul(h, self.params[f"W{l}"]) + self.params[f"b{l}"]
            if l == self.n_layers - 1:
                if keep:
                    cache.append((h, None, None, None))
                h = z
                break
            if self.use_layer_norm:
                shape = z.shape
                rows = shape[-2]
                gain = self.params[f"g{l}"].reshape(-1, shape[-1])
                beta = self.params[f"beta{l}"].reshape(-1, shape[-1])
                out, xhat, rstd = k.ln_act_forward(
                    np.ascontiguousarray(z.reshape(-1, shape[-1])), gain, beta, rows, act, LN_EPS)
                out = out.reshape(shape)
                if keep:
                    cache.append((h, out, xhat, rstd))
            else:
                out = np.maximum(z, 0.0) if act == kernels.ACT_RELU else np.tanh(z)
                if keep:
                    cache.append((h, out, None, None))
            h = out
        if squeeze:
            h = h[..., 0, :]
        return h, (cache, squeeze)

    def backward(self, cache, dout):
        """Gradients of sum(dout * output) w.r.t. parameters and input."""
        layers, squeeze = cache
        dout = np.asarray(dout, dtype=self.dtype)
        if squeeze:
            dout = dout[..., None, :]
        k = self._kernels()
        act = _ACTIVATIONS[self.activation]
        grads = {}
        dh = dout
        for l in range(self.n_layers - 1, -1, -1):
            h_in, out, xhat, rstd = layers[l]
            if l < self.n_layers - 1:
                if self.use_layer_norm:
                    shape = dh.shape
                    gain = self.params[f"g{l}"].reshape(-1, shape[-1])
                    dz, dgain, dbeta = k.ln_act_backward(
                        np.ascontiguousarray(dh.reshape(-1, shape[-1])),
                        out.reshape(-1, shape[-1]), xhat, rstd, gain, shape[-2], act)
                    dz = dz.reshape(shape)
                    grads[f"g{l}"] = dgain.reshape(self.params[f"g{l}"].shape)
                    grads[f"beta{l}"] = dbeta.reshape(self.params[f"beta{l}"].shape)
                elif act == kernels.ACT_RELU:
                    dz = dh * (out > 0.0)
                else:
                    dz = dh * (1.0 - out * out)
            else:
                dz = dh
            w = self.params[f"W{l}"]
            grads[f"W{l}"] = np.matmul(np.swapaxes(h_in, -1, -2), dz).reshape(w.shape)
            grads[f"b{l}"] = dz.sum(axis=-2, keepdims=True).reshape(self.params[f"b{l}"].shape)
            dh = np.matmul(dz, np.swapaxes(w, -1, -2))
        if squeeze:
            dh = dh[..., 0, :]
        return grads, dh

    # -- serialization ------------------------------------------------------

    def to_dict(self):
        return {
            "format_version": FORMAT_VERSION,
            "architecture": self.architecture(),
            "params": {
                name: {"shape": list(arr.shape), "data": arr.ravel().tolist()}
                for name, arr in self.params.items()
            },
        }

    @classmethod
    def from_dict(cls, doc):
        if doc.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {doc.get('format_version')}")
        arch = doc["architecture"]
        net = cls(arch["layer_sizes"], arch["activation"], arch["use_layer_norm"],
                  arch["ensemble_size"], dtype=arch.get("dtype", "float64"))
        for name, entry in doc["params"].items():
            if name not in net.params:
                raise ShapeError(f"unexpected parameter {name!r}")
            arr = np.asarray(entry["data"], dtype=net.dtype).reshape(entry["shape"])
            if arr.shape != net.params[name].shape:
                raise ShapeError(f"parameter {name!r} has shape {arr.shape}")
            net.params[name] = arr
        return net

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))


def mse_loss(pred, target):
    """Mean squared error and its gradient w.r.t. ``pred``."""
    diff = pred - np.asarray(target, dtype=pred.dtype).reshape(pred.shape)
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def gradient(net, loss, x, y):
    """Evaluate ``loss(net(x), y)`` and its parameter gradients.

    ``loss`` returns ``(value, d value / d output)``.
    """
    x = np.asarray(x)
    if x.shape[0] == 0:
        raise ShapeError("empty batch")
    out, cache = net.forward_cache(x)
    value, dout = loss(out, y)
    if not np.isfinite(value):
        raise NumericError(f"non-finite loss {value}")
    grads, _ = net.backward(cache, dout)
    return value, grads


class Adam:
    """Adam with bias correction; one moment pair per parameter array."""

    def __init__(self, params, learning_rate=3e-4, beta1=0.9, beta2=0.999, epsilon=1e-8):
        if learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads):
        for k, g in grads.items():
            if k not in self.m or self.m[k].shape != np.shape(g) or params[k].shape != np.shape(g):
                raise ShapeError(f"gradient {k!r} does not match optimizer state")
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            params[k] -= self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.epsilon)
        return params

    def state_dict(self):
        return {
            "learning_rate": self.learning_rate, "beta1": self.beta1, "beta2": self.beta2,
            "epsilon": self.epsilon, "step_count": self.step_count,
        }


def soft_update(target, online, tau):
    """Polyak averaging: target <- tau * online + (1 - tau) * target, in place."""
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    if target.architecture() != online.architecture():
        raise ShapeError("soft_update between different architectures")
    for k, p in target.params.items():
        if tau == 1.0:
            p[...] = online.params[k]
        else:
            p *= 1.0 - tau
            p += tau * online.params[k]
    return target


def flat_params(net):
    return np.concatenate([net.params[k].ravel() for k in sorted(net.params)])
