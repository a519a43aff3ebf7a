"""Conditional noise-prediction MLP with hand-written reverse mode.

Input is ``[x_t, time_embedding(t), cond_table[c]]``; hidden layers use SiLU
and the output layer is linear with ``d`` outputs. All parameters live in a
single flat float64 vector so optimizers, checkpoints and finite-difference
checks can treat the model as one array.

Flat layout: for each layer ``W`` (fan_in x fan_out, row-major) then ``b``;
the condition table (K x dc) comes last.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ConfigError, InputError
from .rng import Rng


@dataclass(frozen=True)
class Architecture:
    d: int
    K: int
    dt: int = 16
    dc: int = 8
    hidden: tuple[int, ...] = (64, 64)

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if min((self.d, self.K, self.dt, self.dc, *self.hidden), default=1) < 1:
            raise ConfigError(f"all widths must be >= 1: {self}")
        if self.dt % 2:
            raise ConfigError(f"time-embedding width must be even, got {self.dt}")
        if not self.hidden:
            raise ConfigError("need at least one hidden layer")

    @property
    def input_width(self) -> int:
        return self.d + self.dt + self.dc

    @property
    def widths(self) -> list[int]:
        return [self.input_width, *self.hidden, self.d]

    @property
    def n_params(self) -> int:
        w = self.widths
        layers = sum(a * b + b for a, b in zip(w[:-1], w[1:]))
        return layers + self.K * self.dc


def unpack(arch: Architecture, flat: np.ndarray):
    """Views ``([(W, b), ...], cond_table)`` into a flat parameter vector."""
    layers = []
    pos = 0
    w = arch.widths
    for fan_in, fan_out in zip(w[:-1], w[1:]):
        W = flat[pos : pos + fan_in * fan_out].reshape(fan_in, fan_out)
        pos += fan_in * fan_out
        b = flat[pos : pos + fan_out]
        pos += fan_out
        layers.append((W, b))
    cond = flat[pos : pos + arch.K * arch.dc].reshape(arch.K, arch.dc)
    return layers, cond


class DenoiserParams:
    """Weights of one network (policy or frozen reference)."""

    def __init__(self, arch: Architecture, flat: np.ndarray):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (arch.n_params,):
            raise ConfigError(
                f"parameter vector has shape {flat.shape}, architecture needs ({arch.n_params},)"
            )
        self.arch = arch
        self.flat = flat

    @property
    def d(self) -> int:
        return self.arch.d

    @property
    def K(self) -> int:
        return self.arch.K

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.arch, self.flat.copy())

    def with_flat(self, flat: np.ndarray) -> "DenoiserParams":
        return DenoiserParams(self.arch, flat)

    def forward(self, x, t, c):
        return forward(self, x, t, c)

    def forward_backward(self, x, t, c, upstream):
        return forward_backward(self, x, t, c, upstream)

    def forward_vjp(self, x, t, c):
        return forward_vjp(self, x, t, c)

    def __eq__(self, other):
        if not isinstance(other, DenoiserParams):
            return NotImplemented
        return self.arch == other.arch and np.array_equal(self.flat, other.flat)

    def __repr__(self):
        return f"DenoiserParams({self.arch}, n={self.flat.size})"


def init_params(arch: Architecture, seed: int) -> DenoiserParams:
    """Glorot-uniform hidden weights, zero biases, zero output layer,
    N(0, 0.02^2) condition embeddings."""
    rng = Rng(seed)
    flat = np.zeros(arch.n_params)
    layers, cond = unpack(arch, flat)
    for W, _ in layers[:-1]:
        fan_in, fan_out = W.shape
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        W[...] = (2.0 * rng.uniforms(W.size) - 1.0).reshape(W.shape) * limit
    cond[...] = 0.02 * rng.normal(cond.shape)
    return DenoiserParams(arch, flat)


def time_embedding(t, dt: int) -> np.ndarray:
    """Sinusoidal embedding, ``[sin(t f_0..), cos(t f_0..)]`` with
    ``f_i = 10000^(-2i/dt)``. Accepts a scalar or an array of timesteps."""
    if dt % 2:
        raise ConfigError(f"time-embedding width must be even, got {dt}")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0):
        raise InputError("timestep must be >= 0")
    half = dt // 2
    freqs = 10000.0 ** (-2.0 * np.arange(half) / dt)
    ang = t_arr[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def silu(z):
    return z * expit(z)


def _as_batch(params: DenoiserParams, x, t, c):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    B = x2.shape[0]
    if x2.shape[1] != params.d:
        raise InputError(f"x has dimension {x2.shape[1]}, model expects {params.d}")
    if not np.all(np.isfinite(x2)):
        raise InputError("non-finite input x_t")
    t_arr = np.broadcast_to(np.asarray(t), (B,))
    c_arr = np.broadcast_to(np.asarray(c), (B,))
    if not np.issubdtype(c_arr.dtype, np.integer):
        raise InputError("condition labels must be integers")
    if np.any(c_arr < 0) or np.any(c_arr >= params.K):
        raise InputError(f"condition label out of range [0, {params.K})")
    return x2, t_arr, c_arr, single


def _forward_cached(params: DenoiserParams, x2, t_arr, c_arr):
    arch = params.arch
    layers, cond = unpack(arch, params.flat)
    h = np.concatenate([x2, time_embedding(t_arr, arch.dt), cond[c_arr]], axis=1)
    acts = [h]
    pre = []
    for W, b in layers[:-1]:
        z = h @ W + b
        h = silu(z)
        pre.append(z)
        acts.append(h)
    W, b = layers[-1]
    out = h @ W + b
    return out, acts, pre


def forward(params: DenoiserParams, x, t, c) -> np.ndarray:
    """Predicted noise for one input vector or a batch of rows."""
    x2, t_arr, c_arr, single = _as_batch(params, x, t, c)
    out, _, _ = _forward_cached(params, x2, t_arr, c_arr)
    return out[0] if single else out


def forward_vjp(params: DenoiserParams, x, t, c):
    """Forward pass plus a closure mapping ``upstream`` to
    ``(grad_params_flat, grad_x)`` for the scalar ``sum(upstream * eps_hat)``.

    Parameter gradients are summed over rows.
    """
    x2, t_arr, c_arr, single = _as_batch(params, x, t, c)
    out, acts, pre = _forward_cached(params, x2, t_arr, c_arr)
    arch = params.arch

    def vjp(upstream):
        g = np.asarray(upstream, dtype=np.float64).reshape(out.shape)
        layers, _ = unpack(arch, params.flat)
        grads = np.zeros_like(params.flat)
        glayers, gcond = unpack(arch, grads)

        W, _ = layers[-1]
        gW, gb = glayers[-1]
        gW[...] = acts[-1].T @ g
        gb[...] = g.sum(axis=0)
        gh = g @ W.T
        for i in range(len(layers) - 2, -1, -1):
            z = pre[i]
            s = expit(z)
            dz = gh * (s + z * s * (1.0 - s))
            W, _ = layers[i]
            gW, gb = glayers[i]
            gW[...] = acts[i].T @ dz
            gb[...] = dz.sum(axis=0)
            gh = dz @ W.T
        np.add.at(gcond, c_arr, gh[:, arch.d + arch.dt :])
        grad_x = gh[:, : arch.d]
        return grads, (grad_x[0] if single else grad_x)

    return (out[0] if single else out), vjp


def forward_backward(params: DenoiserParams, x, t, c, upstream):
    """Returns ``(eps_hat, grad_params_flat, grad_x)``."""
    out, vjp = forward_vjp(params, x, t, c)
    grads, grad_x = vjp(upstream)
    return out, grads, grad_x
