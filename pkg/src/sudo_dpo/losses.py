"""Objectives: noise-prediction MSE, Bradley-Terry, and the preference losses.

The preference loss for a pair is

    -log sigmoid(C * [(e_w_theta - e_l_theta) - (e_w_ref - e_l_ref)])

where each ``e`` is a squared noise-prediction error (mean over dimensions)
of the policy or the frozen reference on the noised winner or loser. The
same routine serves self-generated losers and externally ranked losers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .diffusion import Schedule, q_sample
from .errors import ConfigError, InputError, NumericError

METHODS = ("sft", "sudo", "dpo")


@dataclass(frozen=True)
class LossConfig:
    C: float = -2500.0
    lambda1: float = 0.5
    lambda2: float = 0.5
    method: str = "sudo"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.method != "sft" and self.C == 0:
            raise ConfigError("scale factor C must be non-zero for preference methods")


@dataclass(frozen=True)
class PairErrors:
    e_w_theta: float
    e_l_theta: float
    e_w_ref: float
    e_l_ref: float

    def __post_init__(self):
        for v in (self.e_w_theta, self.e_l_theta, self.e_w_ref, self.e_l_ref):
            if not (math.isfinite(v) and v >= 0):
                raise InputError(f"squared errors must be finite and >= 0: {self}")


@dataclass
class PairBatch:
    """Rows of preference pairs sharing one timestep per row."""

    cond: np.ndarray  # (B,) int
    x_w: np.ndarray  # (B, d)
    x_l: np.ndarray  # (B, d)
    t: np.ndarray  # (B,) int in [1, T]
    eps_w: np.ndarray  # (B, d)
    eps_l: np.ndarray  # (B, d)

    def __len__(self):
        return len(self.cond)

    def swapped(self) -> "PairBatch":
        return PairBatch(self.cond, self.x_l, self.x_w, self.t, self.eps_l, self.eps_w)


def mse_loss(eps_hat, eps) -> float:
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps_hat.shape != eps.shape:
        raise InputError(f"shape mismatch {eps_hat.shape} vs {eps.shape}")
    return float(np.mean((eps_hat - eps) ** 2))


def bradley_terry(r_w: float, r_l: float) -> float:
    """P(winner preferred) = sigmoid(r_w - r_l)."""
    return float(expit(r_w - r_l))


def preference_inner(pe: PairErrors, C: float) -> float:
    return C * ((pe.e_w_theta - pe.e_l_theta) - (pe.e_w_ref - pe.e_l_ref))


def logsig_loss(inner):
    """-log sigmoid(inner) as an overflow-safe softplus(-inner)."""
    if np.ndim(inner) == 0:
        x = float(inner)
        return max(-x, 0.0) + math.log1p(math.exp(-abs(x)))
    x = np.asarray(inner, dtype=np.float64)
    return np.maximum(-x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def implicit_reward(e_theta: float, e_ref: float, C: float) -> float:
    """Per-sample reward in noise-error form, (C/2) (e_theta - e_ref)."""
    return (C / 2.0) * (e_theta - e_ref)


def combined_loss(mse: float, sudo: float, cfg: LossConfig) -> float:
    return cfg.lambda1 * mse + cfg.lambda2 * sudo


def _row_sq_err(eps_hat, eps):
    return np.mean((eps_hat - eps) ** 2, axis=1)


def mse_objective(policy, schedule: Schedule, cond, x0, t, eps, weight: float = 1.0):
    """``weight * mean_i ||eps_hat_i - eps_i||^2 / d`` on noised rows.

    Returns ``(loss, grad_flat, per_row_errors)``.
    """
    xt = q_sample(schedule, x0, t, eps)
    eps_hat, vjp = policy.forward_vjp(xt, t, cond)
    err = _row_sq_err(eps_hat, eps)
    B, d = eps_hat.shape
    loss = weight * float(np.mean(err))
    upstream = (weight * 2.0 / (B * d)) * (eps_hat - eps)
    grads, _ = vjp(upstream)
    return loss, grads, err


@dataclass
class PreferenceResult:
    loss: float
    grads: np.ndarray | None
    pair_losses: np.ndarray
    inner: np.ndarray
    e_w_theta: np.ndarray
    e_l_theta: np.ndarray
    e_w_ref: np.ndarray
    e_l_ref: np.ndarray
    mse: float
    pref: float

    def pair_errors(self, i: int = 0) -> PairErrors:
        return PairErrors(
            float(self.e_w_theta[i]),
            float(self.e_l_theta[i]),
            float(self.e_w_ref[i]),
            float(self.e_l_ref[i]),
        )


def preference_objective(
    policy,
    ref,
    schedule: Schedule,
    batch: PairBatch,
    C: float,
    lambda_mse: float = 0.0,
    lambda_pref: float = 1.0,
    need_grad: bool = True,
) -> PreferenceResult:
    """``lambda_mse * winner MSE + lambda_pref * mean pair loss``.

    The MSE term reuses the winner's noised sample and policy prediction.
    The reference is evaluated on the same stacked rows and never
    receives gradient.
    """
    B = len(batch)
    xt_w = q_sample(schedule, batch.x_w, batch.t, batch.eps_w)
    xt_l = q_sample(schedule, batch.x_l, batch.t, batch.eps_l)
    xt = np.concatenate([xt_w, xt_l], axis=0)
    tt = np.concatenate([batch.t, batch.t])
    cc = np.concatenate([batch.cond, batch.cond])
    eps = np.concatenate([batch.eps_w, batch.eps_l], axis=0)

    ref_hat = ref.forward(xt, tt, cc)
    pol_hat, vjp = policy.forward_vjp(xt, tt, cc)
    if not (np.all(np.isfinite(ref_hat)) and np.all(np.isfinite(pol_hat))):
        raise NumericError("non-finite noise prediction in preference loss")

    e_theta = _row_sq_err(pol_hat, eps)
    e_ref = _row_sq_err(ref_hat, eps)
    e_w_theta, e_l_theta = e_theta[:B], e_theta[B:]
    e_w_ref, e_l_ref = e_ref[:B], e_ref[B:]

    inner = C * ((e_w_theta - e_l_theta) - (e_w_ref - e_l_ref))
    pair_losses = logsig_loss(inner)
    pref = float(np.mean(pair_losses))
    mse = float(np.mean(e_w_theta))
    loss = lambda_mse * mse + lambda_pref * pref

    grads = None
    if need_grad:
        d = eps.shape[1]
        # d(-log sigmoid(u))/du = sigmoid(u) - 1 = -sigmoid(-u)
        g_inner = -expit(-inner) * (lambda_pref / B)
        g_ew = g_inner * C + lambda_mse / B
        g_el = -g_inner * C
        coef = np.concatenate([g_ew, g_el]) * (2.0 / d)
        grads, _ = vjp(coef[:, None] * (pol_hat - eps))

    return PreferenceResult(
        loss, grads, pair_losses, inner, e_w_theta, e_l_theta, e_w_ref, e_l_ref, mse, pref
    )


def _single_pair_loss(policy, ref, schedule, c, x_w, x_l, t, eps_w, eps_l, cfg: LossConfig):
    batch = PairBatch(
        np.array([c], dtype=np.int64),
        np.asarray(x_w, dtype=np.float64)[None],
        np.asarray(x_l, dtype=np.float64)[None],
        np.array([t], dtype=np.int64),
        np.asarray(eps_w, dtype=np.float64)[None],
        np.asarray(eps_l, dtype=np.float64)[None],
    )
    res = preference_objective(policy, ref, schedule, batch, cfg.C)
    if not math.isfinite(res.loss):
        raise NumericError("non-finite pair loss")
    return res


def sudo_pair_loss(policy, ref, pair, schedule: Schedule, cfg: LossConfig):
    """Loss, gradient and diagnostics for one self-generated pair.

    Returns ``(loss, grads, (PairErrors, inner))``.
    """
    res = _single_pair_loss(
        policy, ref, schedule, pair.condition, pair.x_w, pair.x_sl, pair.t,
        pair.eps_w, pair.eps_sl, cfg,
    )
    return res.loss, res.grads, (res.pair_errors(), float(res.inner[0]))


def dpo_pair_loss(policy, ref, c, x_w, x_l, t, eps_w, eps_l, schedule: Schedule, cfg: LossConfig):
    """Same computation as :func:`sudo_pair_loss` with a supplied loser."""
    res = _single_pair_loss(policy, ref, schedule, c, x_w, x_l, t, eps_w, eps_l, cfg)
    return res.loss, res.grads
