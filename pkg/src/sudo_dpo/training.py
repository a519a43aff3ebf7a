"""Fine-tuning loop for the three objectives, plus optimizer and checkpoints.

Per-step randomness comes from named child streams of the run seed, so the
winner indices, timesteps and winner noise of step ``k`` are identical for
every method. Consequently ``sft`` and ``sudo`` with ``lambda2 = 0`` and
``lambda1 = 1`` follow the same parameter trajectory.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset
from .denoiser import Architecture, DenoiserParams, init_params
from .diffusion import (
    DEFAULT_BETA_END,
    DEFAULT_BETA_START,
    DEFAULT_T,
    Schedule,
    make_linear_schedule,
)
from .downgrade import DowngradeStrategy, make_loser
from .errors import ConfigError, FormatError, NumericError
from .io import atomic_write_bytes, atomic_write_text
from .losses import METHODS, LossConfig, PairBatch, mse_objective, preference_objective
from .rng import Rng, derive_seed

METRICS_HEADER = "step,lr,loss_total,loss_mse,loss_sudo,inner_mean,e_w_theta,e_l_theta,grad_norm"

# child-stream labels
_STEP = 0x5354
_INDEX, _TIME, _EPS_W, _LOSER, _EPS_L = 1, 2, 3, 4, 5


@dataclass
class OptimState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "OptimState":
        return cls(np.zeros(n), np.zeros(n), 0)


@dataclass(frozen=True)
class TrainConfig:
    method: str = "sudo"
    loss: LossConfig = field(default_factory=LossConfig)
    steps: int = 3000
    batch_size: int = 64
    base_lr: float = 1e-3
    warmup_frac: float = 0.25
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    downgrade: DowngradeStrategy = field(default_factory=DowngradeStrategy)
    share_noise: bool = False
    hidden: tuple[int, ...] = (64, 64)
    dt: int = 16
    dc: int = 8
    T: int = DEFAULT_T
    beta_start: float = DEFAULT_BETA_START
    beta_end: float = DEFAULT_BETA_END

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.loss.method != self.method:
            object.__setattr__(self, "loss", replace(self.loss, method=self.method))
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be >= 1")
        if not 0.0 <= self.warmup_frac <= 1.0:
            raise ConfigError("warmup_frac must lie in [0, 1]")
        object.__setattr__(self, "hidden", tuple(self.hidden))

    def architecture(self, ds: Dataset) -> Architecture:
        return Architecture(ds.data_dim, ds.K, self.dt, self.dc, self.hidden)

    def schedule(self) -> Schedule:
        return make_linear_schedule(self.T, self.beta_start, self.beta_end)


@dataclass
class Checkpoint:
    params: DenoiserParams
    schedule: Schedule
    method: str
    step: int
    seed: int
    optim: OptimState | None = None

    @property
    def arch(self) -> Architecture:
        return self.params.arch


def lr_at(step: int, total_steps: int, base_lr: float, warmup_frac: float) -> float:
    """Linear warmup over ``ceil(warmup_frac * total_steps)`` steps, then constant."""
    warmup_steps = math.ceil(warmup_frac * total_steps)
    if warmup_steps == 0:
        return base_lr
    return base_lr * min(1.0, (step + 1) / warmup_steps)


def adam_step(params, grads, state: OptimState, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
    """AdamW update; returns new ``(params, state)`` without mutating inputs."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError("parameter, gradient and moment shapes differ")
    b1, b2 = betas
    step = state.step + 1
    m = b1 * state.m + (1.0 - b1) * grads
    v = b2 * state.v + (1.0 - b2) * grads * grads
    m_hat = m / (1.0 - b1**step)
    v_hat = v / (1.0 - b2**step)
    new = params * (1.0 - lr * weight_decay) if weight_decay else params
    new = new - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new, OptimState(m, v, step)


def snapshot_ref(params: DenoiserParams) -> DenoiserParams:
    ref = params.copy()
    ref.flat.setflags(write=False)
    return ref


# -- batches and objectives ------------------------------------------------


def step_streams(seed: int, step: int) -> dict[int, Rng]:
    base = derive_seed(seed, _STEP, step)
    return {k: Rng(derive_seed(base, k)) for k in (_INDEX, _TIME, _EPS_W, _LOSER, _EPS_L)}


def draw_batch(
    config: TrainConfig,
    ds: Dataset,
    schedule: Schedule,
    step: int,
    losers: Dataset | None = None,
) -> PairBatch:
    """Batch for one step. ``x_l``/``eps_l`` are ``None`` for sft."""
    s = step_streams(config.seed, step)
    B, D = config.batch_size, ds.data_dim
    idx = s[_INDEX].integers(ds.n, B)
    t = 1 + s[_TIME].integers(schedule.T, B)
    eps_w = s[_EPS_W].normal((B, D))
    cond = ds.labels[idx]
    x_w = ds.values[idx]
    if config.method == "sft":
        return PairBatch(cond, x_w, None, t, eps_w, None)
    if config.method == "dpo":
        if losers is None:
            raise ConfigError("dpo needs a ranked loser set")
        x_l = losers.values[idx]
    else:
        rng = s[_LOSER]
        x_l = np.stack([make_loser(ds, int(i), config.downgrade, rng) for i in idx])
    eps_l = eps_w.copy() if config.share_noise else s[_EPS_L].normal((B, D))
    return PairBatch(cond, x_w, x_l, t, eps_w, eps_l)


@dataclass
class StepResult:
    loss: float
    grads: np.ndarray
    loss_mse: float
    loss_sudo: float = math.nan
    inner_mean: float = math.nan
    e_w_theta: float = math.nan
    e_l_theta: float = math.nan


def objective(policy, ref, schedule: Schedule, config: TrainConfig, batch: PairBatch) -> StepResult:
    """Method loss and gradient for one batch.

    sft: MSE. sudo: lambda1 * winner MSE + lambda2 * mean pair loss.
    dpo: mean pair loss on externally ranked losers.
    """
    cfg = config.loss
    if config.method == "sft":
        loss, grads, _ = mse_objective(policy, schedule, batch.cond, batch.x_w, batch.t, batch.eps_w)
        return StepResult(loss, grads, loss)
    if config.method == "sudo" and cfg.lambda2 == 0.0:
        loss, grads, _ = mse_objective(
            policy, schedule, batch.cond, batch.x_w, batch.t, batch.eps_w, weight=cfg.lambda1
        )
        diag = preference_objective(policy, ref, schedule, batch, cfg.C, need_grad=False)
        return StepResult(
            loss, grads, diag.mse, diag.pref, float(np.mean(diag.inner)),
            float(np.mean(diag.e_w_theta)), float(np.mean(diag.e_l_theta)),
        )
    lam_mse, lam_pref = (cfg.lambda1, cfg.lambda2) if config.method == "sudo" else (0.0, 1.0)
    res = preference_objective(policy, ref, schedule, batch, cfg.C, lam_mse, lam_pref)
    return StepResult(
        res.loss, res.grads, res.mse, res.pref, float(np.mean(res.inner)),
        float(np.mean(res.e_w_theta)), float(np.mean(res.e_l_theta)),
    )


# -- training loop ---------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def train(
    config: TrainConfig,
    ds: Dataset,
    out_ckpt_path=None,
    metrics_path=None,
    losers: Dataset | None = None,
    init: DenoiserParams | None = None,
) -> Checkpoint:
    """Run ``config.steps`` optimizer steps from ``init_params(seed)`` (or
    ``init``), against a reference frozen at the starting weights."""
    if config.method == "sudo":
        config.downgrade.check_dataset(ds)
    if config.method == "dpo":
        if losers is None:
            raise ConfigError("method dpo needs a ranked-pair file")
        if losers.n != ds.n or losers.data_dim != ds.data_dim:
            raise ConfigError("ranked-pair file does not match the dataset")
    schedule = config.schedule()
    arch = config.architecture(ds)
    policy = init.copy() if init is not None else init_params(arch, config.seed)
    if policy.arch != arch:
        raise ConfigError(f"initial weights have architecture {policy.arch}, config needs {arch}")
    ref = snapshot_ref(policy)
    opt = OptimState.zeros(arch.n_params)
    rows = [METRICS_HEADER]
    for step in range(config.steps):
        batch = draw_batch(config, ds, schedule, step, losers)
        with np.errstate(over="ignore", invalid="ignore"):
            res = objective(policy, ref, schedule, config, batch)
        if not (math.isfinite(res.loss) and np.all(np.isfinite(res.grads))):
            raise NumericError(f"non-finite loss or gradient at step {step}")
        lr = lr_at(step, config.steps, config.base_lr, config.warmup_frac)
        flat, opt = adam_step(
            policy.flat, res.grads, opt, lr, config.betas, config.adam_eps, config.weight_decay
        )
        policy = policy.with_flat(flat)
        gnorm = math.sqrt(float(res.grads @ res.grads))
        rows.append(
            ",".join(
                [str(step)]
                + [_fmt(v) for v in (lr, res.loss, res.loss_mse, res.loss_sudo, res.inner_mean,
                                     res.e_w_theta, res.e_l_theta, gnorm)]
            )
        )
    ckpt = Checkpoint(policy, schedule, config.method, config.steps, config.seed, opt)
    if metrics_path is not None:
        atomic_write_text(metrics_path, "\n".join(rows) + "\n")
    if out_ckpt_path is not None:
        save_checkpoint(ckpt, out_ckpt_path)
    return ckpt


# -- gradient check ----------------------------------------------------------


def finite_difference_grad(f, theta: np.ndarray, h: float) -> np.ndarray:
    """Central differences of scalar ``f`` at every coordinate of ``theta``."""
    theta = np.array(theta, dtype=np.float64)
    g = np.empty_like(theta)
    for i in range(theta.size):
        old = theta[i]
        theta[i] = old + h
        fp = f(theta)
        theta[i] = old - h
        fm = f(theta)
        theta[i] = old
        g[i] = (fp - fm) / (2.0 * h)
    return g


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))


def grad_check(
    config: TrainConfig,
    ds: Dataset,
    seed: int,
    h: float = 1e-5,
    losers: Dataset | None = None,
    policy=None,
    ref=None,
    perturb: float = 0.05,
) -> float:
    """Max relative error of the analytic gradient of the configured loss
    against central differences, denominator ``max(1, |analytic|)``.

    By default the policy is ``init_params(seed)`` with every weight jittered
    by N(0, perturb^2), so the output layer is non-zero and the policy
    differs from the (unjittered) reference. ``policy``/``ref`` may be any
    objects with ``flat``, ``with_flat``, ``forward`` and ``forward_vjp``.
    """
    schedule = config.schedule()
    if policy is None:
        base = init_params(config.architecture(ds), seed)
        jitter = perturb * Rng(derive_seed(seed, 0x4A)).normals(base.flat.size)
        policy = base.with_flat(base.flat + jitter)
        ref = ref if ref is not None else base
    if ref is None:
        ref = policy
    if config.method == "dpo" and losers is None:
        raise ConfigError("dpo gradient check needs a ranked loser set")
    batch = draw_batch(replace(config, seed=seed), ds, schedule, 0, losers)

    def f(theta):
        return objective(policy.with_flat(theta), ref, schedule, config, batch).loss

    analytic = objective(policy, ref, schedule, config, batch).grads
    numeric = finite_difference_grad(f, policy.flat, h)
    return max_rel_err(analytic, numeric)


# -- checkpoint file -----------------------------------------------------------

CKPT_MAGIC = b"SUDC"
CKPT_VERSION = 1
METHOD_CODES = {"sft": 0, "sudo": 1, "dpo": 2}


def checkpoint_to_bytes(ckpt: Checkpoint) -> bytes:
    a = ckpt.arch
    s = ckpt.schedule
    parts = [
        CKPT_MAGIC,
        struct.pack("<I", CKPT_VERSION),
        struct.pack(f"<{5 + len(a.hidden)}I", a.d, a.K, a.dt, a.dc, len(a.hidden), *a.hidden),
        struct.pack("<Idd", s.T, s.beta_start, s.beta_end),
        struct.pack("<BQQ", METHOD_CODES[ckpt.method], ckpt.step, ckpt.seed),
        ckpt.params.flat.astype("<f8").tobytes(),
    ]
    if ckpt.optim is None:
        parts.append(b"\x00")
    else:
        parts.append(struct.pack("<BQ", 1, ckpt.optim.step))
        parts.append(ckpt.optim.m.astype("<f8").tobytes())
        parts.append(ckpt.optim.v.astype("<f8").tobytes())
    return b"".join(parts)


def checkpoint_from_bytes(buf: bytes) -> Checkpoint:
    pos = 0

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise FormatError(f"truncated checkpoint: need {size} bytes", pos)
        out = struct.unpack_from(fmt, buf, pos)
        pos += size
        return out

    def take_f64(n):
        nonlocal pos
        if pos + 8 * n > len(buf):
            raise FormatError(f"truncated checkpoint array of {n} values", pos)
        arr = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).astype(np.float64)
        pos += 8 * n
        return arr

    if buf[:4] != CKPT_MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}, expected {CKPT_MAGIC!r}", 0)
    pos = 4
    (version,) = take("<I")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    arch_pos = pos
    d, K, dt, dc, n_hidden = take("<5I")
    hidden = take(f"<{n_hidden}I")
    try:
        arch = Architecture(d, K, dt, dc, hidden)
    except ConfigError as exc:
        raise FormatError(f"invalid architecture block: {exc}", arch_pos) from None
    sched_pos = pos
    T, b0, b1 = take("<Idd")
    try:
        schedule = make_linear_schedule(T, b0, b1)
    except ConfigError as exc:
        raise FormatError(f"invalid schedule block: {exc}", sched_pos) from None
    meta_pos = pos
    method_code, step, seed = take("<BQQ")
    methods = {v: k for k, v in METHOD_CODES.items()}
    if method_code not in methods:
        raise FormatError(f"unknown method code {method_code}", meta_pos)
    params = DenoiserParams(arch, take_f64(arch.n_params))
    (flag,) = take("<B")
    optim = None
    if flag == 1:
        (ostep,) = take("<Q")
        optim = OptimState(take_f64(arch.n_params), take_f64(arch.n_params), ostep)
    elif flag != 0:
        raise FormatError(f"bad optimizer flag {flag}", pos - 1)
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes", pos)
    return Checkpoint(params, schedule, methods[method_code], step, seed, optim)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    atomic_write_bytes(path, checkpoint_to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())
