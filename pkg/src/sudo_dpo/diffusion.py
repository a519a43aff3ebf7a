"""DDPM noise schedule, forward noising and ancestral sampling.

Timesteps are 1-indexed (``t = 1..T``) with ``alpha_bar_0 = 1`` so the
posterior variance at ``t = 1`` is exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError, NumericError
from .rng import Rng

DEFAULT_T = 200
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass(frozen=True)
class Schedule:
    T: int
    beta_start: float
    beta_end: float
    betas: np.ndarray = field(repr=False)
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)

    @classmethod
    def from_betas(cls, betas) -> "Schedule":
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ConfigError("betas must be a non-empty vector")
        if np.any(betas <= 0.0) or np.any(betas > 1.0):
            raise ConfigError("every beta must lie in (0, 1]")
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        return cls(len(betas), float(betas[0]), float(betas[-1]), betas, alphas, alpha_bars)

    def alpha_bar_prev(self, t):
        t = np.asarray(t)
        return np.where(t > 1, self.alpha_bars[np.maximum(t - 2, 0)], 1.0)

    def posterior_variance(self, t):
        """beta_tilde_t = (1 - abar_{t-1}) / (1 - abar_t) * beta_t."""
        i = np.asarray(t) - 1
        return (1.0 - self.alpha_bar_prev(t)) / (1.0 - self.alpha_bars[i]) * self.betas[i]

    def check_t(self, t):
        t_arr = np.asarray(t)
        if np.any(t_arr < 1) or np.any(t_arr > self.T):
            raise InputError(f"timestep out of range [1, {self.T}]")


def make_linear_schedule(
    T: int = DEFAULT_T,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> Schedule:
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end <= 1.0):
        raise ConfigError(f"need 0 < beta_start <= beta_end <= 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([beta_start])
    sched = Schedule.from_betas(betas)
    return Schedule(T, float(beta_start), float(beta_end), sched.betas, sched.alphas, sched.alpha_bars)


def forward_step(schedule: Schedule, x_prev, t: int, eps):
    """One Markov noising step x_{t-1} -> x_t."""
    schedule.check_t(t)
    beta = schedule.betas[t - 1]
    return np.sqrt(1.0 - beta) * np.asarray(x_prev) + np.sqrt(beta) * np.asarray(eps)


def q_sample(schedule: Schedule, x0, t, eps):
    """Closed-form marginal x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.

    ``t`` may be a scalar or one timestep per row of ``x0``.
    """
    schedule.check_t(t)
    ab = schedule.alpha_bars[np.asarray(t) - 1]
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim == 2 and np.ndim(ab) == 1:
        ab = ab[:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * np.asarray(eps)


def reverse_step(params, schedule: Schedule, x_t, t: int, c, z):
    """Ancestral step x_t -> x_{t-1} with fixed variance beta_tilde_t.

    Works on a single vector or a batch of rows (all at the same ``t``);
    ``z`` is ignored at ``t = 1``.
    """
    schedule.check_t(t)
    eps_hat = params.forward(x_t, t, c)
    if not np.all(np.isfinite(eps_hat)):
        raise NumericError(f"non-finite noise prediction at t={t}")
    beta = schedule.betas[t - 1]
    alpha = schedule.alphas[t - 1]
    ab = schedule.alpha_bars[t - 1]
    mu = (np.asarray(x_t) - (beta / np.sqrt(1.0 - ab)) * eps_hat) / np.sqrt(alpha)
    if t == 1:
        return mu
    sigma = np.sqrt(schedule.posterior_variance(t))
    return mu + sigma * np.asarray(z)


def sample_batch(params, schedule: Schedule, conds, noise: np.ndarray) -> np.ndarray:
    """Run ``len(conds)`` chains from pre-drawn noise.

    ``noise`` has shape ``(n, T, d)``: ``noise[:, 0]`` is x_T and
    ``noise[:, k]`` for ``k >= 1`` is the z used at ``t = T - k + 1``,
    so z for ``t = T .. 2`` in order. This is the order :func:`sample`
    consumes a stream in.
    """
    conds = np.asarray(conds, dtype=np.int64)
    x = noise[:, 0, :].copy()
    for k, t in enumerate(range(schedule.T, 0, -1)):
        z = noise[:, k + 1, :] if t > 1 else None
        x = reverse_step(params, schedule, x, t, conds, z)
        if not np.all(np.isfinite(x)):
            raise NumericError(f"non-finite sample at t={t}")
    return x


def draw_chain_noise(rng: Rng, T: int, d: int) -> np.ndarray:
    """The ``T * d`` normals one sampling chain consumes, shaped ``(T, d)``."""
    return rng.normal((T, d))


def sample(params, schedule: Schedule, c: int, rng: Rng) -> np.ndarray:
    """Draw one x0 for condition ``c`` by ancestral sampling from pure noise."""
    noise = draw_chain_noise(rng, schedule.T, params.d)
    return sample_batch(params, schedule, [c], noise[None])[0]
