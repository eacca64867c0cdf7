"""Minimal MLP stack with explicit reverse-mode gradients.

Everything is float64 numpy.  An Mlp.forward returns the output plus a
tape of intermediates; Mlp.backward consumes the tape and an upstream
gradient and returns exact parameter gradients and the input gradient.
Adam, diagonal-Gaussian utilities, and a versioned checkpoint format
round out what the encoder/policy/critic/discriminators need.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import ShapeError, ValidationError

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
LOG_2PI = float(np.log(2.0 * np.pi))

CHECKPOINT_VERSION = 1


def _act(name, z):
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "elu":
        return np.where(z > 0, z, np.expm1(z))
    raise ValidationError(f"unknown activation {name!r}")


def act_prime(name, z, a):
    """First derivative of the activation given pre-activation z and a = act(z)."""
    if name == "tanh":
        return 1.0 - a * a
    if name == "relu":
        return (z > 0).astype(float)
    if name == "elu":
        return np.where(z > 0, 1.0, a + 1.0)
    raise ValidationError(f"unknown activation {name!r}")


def act_second(name, z, a):
    """Second derivative; needed by the discriminator gradient penalty."""
    if name == "tanh":
        return -2.0 * a * (1.0 - a * a)
    if name == "relu":
        return np.zeros_like(z)
    if name == "elu":
        return np.where(z > 0, 0.0, a + 1.0)
    raise ValidationError(f"unknown activation {name!r}")


class Mlp:
    """Fully connected net: affine layers, configurable hidden activation,
    identity output."""

    def __init__(self, sizes, activation="tanh", rng=None, out_scale=1.0):
        if len(sizes) < 2:
            raise ValidationError("Mlp needs at least input and output sizes")
        rng = rng or np.random.default_rng(0)
        self.sizes = tuple(int(s) for s in sizes)
        self.activation = activation
        self.weights = []
        self.biases = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            scale = np.sqrt(2.0 / (fan_in + fan_out))
            if i == len(sizes) - 2:
                scale *= out_scale
            self.weights.append(rng.normal(0.0, scale, (fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))

    @property
    def n_layers(self):
        return len(self.weights)

    def param_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def forward(self, x):
        """Returns (output, tape).  x is (batch, in) or (in,)."""
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[1] != self.sizes[0]:
            raise ShapeError(
                f"input width {x.shape[1]} != first layer {self.sizes[0]}")
        acts = [x]        # a_0 .. a_L
        pres = []         # z_1 .. z_L
        a = x
        for i in range(self.n_layers):
            z = a @ self.weights[i] + self.biases[i]
            pres.append(z)
            a = z if i == self.n_layers - 1 else _act(self.activation, z)
            acts.append(a)
        out = acts[-1][0] if squeeze else acts[-1]
        return out, (acts, pres)

    def backward(self, tape, dy):
        """Gradients from a forward tape and upstream gradient dy.

        Returns (grads, dx) where grads is a list of (dW, db) per layer.
        """
        acts, pres = tape
        dy = np.asarray(dy, dtype=float)
        if dy.ndim == 1:
            dy = dy[None, :]
        if dy.shape != acts[-1].shape:
            raise ShapeError(f"output grad shape {dy.shape} != {acts[-1].shape}")
        grads = [None] * self.n_layers
        g = dy
        for i in reversed(range(self.n_layers)):
            if i != self.n_layers - 1:
                g = g * act_prime(self.activation, pres[i], acts[i + 1])
            grads[i] = (acts[i].T @ g, g.sum(axis=0))
            g = g @ self.weights[i].T
        return grads, g

    def input_gradient(self, x):
        """d output / d x for a scalar-output net, one row per sample."""
        if self.sizes[-1] != 1:
            raise ShapeError("input_gradient requires a scalar output")
        _, tape = self.forward(x)
        acts, pres = tape
        g = np.ones((len(acts[0]), 1))
        for i in reversed(range(self.n_layers)):
            if i != self.n_layers - 1:
                g = g * act_prime(self.activation, pres[i], acts[i + 1])
            g = g @ self.weights[i].T
        return g

    def named_params(self, prefix):
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.w{i}"] = w
            out[f"{prefix}.b{i}"] = b
        return out

    def grads_to_named(self, grads, prefix):
        out = {}
        for i, (dw, db) in enumerate(grads):
            out[f"{prefix}.w{i}"] = dw
            out[f"{prefix}.b{i}"] = db
        return out


def adam_step(param, grad, m, v, lr, t, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns (new_param, new_m, new_v)."""
    if t < 1:
        raise ValidationError("Adam step index t must be >= 1")
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class Adam:
    """Adam over a dict of named parameter arrays (updated in place)."""

    def __init__(self, params: dict, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p) for k, p in params.items()}
        self.v = {k: np.zeros_like(p) for k, p in params.items()}

    def step(self, grads: dict):
        self.t += 1
        for k, g in grads.items():
            p, self.m[k], self.v[k] = adam_step(
                self.params[k], g, self.m[k], self.v[k], self.lr, self.t,
                self.beta1, self.beta2, self.eps)
            self.params[k][...] = p

    def moments(self) -> dict:
        out = {}
        for k in self.params:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        return out


def gaussian_logprob(mean, log_std, x):
    """Log-density of a diagonal Gaussian; sums over the last axis."""
    mean = np.asarray(mean, dtype=float)
    log_std = np.asarray(log_std, dtype=float)
    x = np.asarray(x, dtype=float)
    z = (x - mean) / np.exp(log_std)
    return (-0.5 * z * z - log_std - 0.5 * LOG_2PI).sum(axis=-1)


def gaussian_sample(mean, std, rng: np.random.Generator):
    """Reparameterized sample mean + std * eps; returns (sample, eps)."""
    mean = np.asarray(mean, dtype=float)
    eps = rng.standard_normal(mean.shape)
    return mean + np.asarray(std, dtype=float) * eps, eps


def gaussian_entropy(log_std):
    """Entropy of a diagonal Gaussian, summed over dims."""
    return float(np.sum(log_std + 0.5 * (1.0 + LOG_2PI)))


def clamp_log_std(log_std):
    return np.clip(log_std, LOG_STD_MIN, LOG_STD_MAX)


def save_checkpoint(path, params: dict, moments: dict | None = None,
                    rng_state: dict | None = None, meta: dict | None = None):
    """Write all named tensors plus optimizer moments and RNG state."""
    header = {
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "rng_state": rng_state,
        "param_names": sorted(params),
        "moment_names": sorted(moments) if moments else [],
    }
    arrays = {f"p/{k}": v for k, v in params.items()}
    if moments:
        arrays.update({f"o/{k}": v for k, v in moments.items()})
    np.savez(path, __header__=np.frombuffer(
        json.dumps(header, default=str).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path):
    """Returns (params, moments, rng_state, meta)."""
    with np.load(path) as data:
        header = json.loads(bytes(data["__header__"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValidationError(
                f"checkpoint version {header.get('version')} unsupported")
        params = {k: data[f"p/{k}"].copy() for k in header["param_names"]}
        moments = {k: data[f"o/{k}"].copy() for k in header["moment_names"]}
    return params, moments, header.get("rng_state"), header.get("meta", {})
