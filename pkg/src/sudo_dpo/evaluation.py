"""Paired-seed win rates and the downgrade ablation."""

from __future__ import annotations

import json
import math
import statistics
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset, GmSpec, GridSpec, ranking_key, score_samples
from .diffusion import sample_batch
from .downgrade import STRATEGIES
from .errors import ConfigError
from .rng import Rng, derive_seed
from .training import Checkpoint, TrainConfig, train

ABLATION_ROWS = ("sft", "blur", "random_grid", "random_image")


def alignment_score(x0, c, spec) -> float:
    """How well one sample matches its condition, in [0, 1]."""
    if not isinstance(spec, (GmSpec, GridSpec)):
        raise ConfigError(f"unknown dataset spec {spec!r}")
    return float(score_samples(spec, np.asarray(x0)[None], c)[0])


@dataclass
class EvalReport:
    n_pairs: int
    n_per_condition: int
    seed: int
    per_condition_mean_a: list[float]
    per_condition_mean_b: list[float]
    mean_a: float
    mean_b: float
    wins_a: float
    win_rate_a: float

    def to_dict(self) -> dict:
        return {
            "n_pairs": self.n_pairs,
            "n_per_condition": self.n_per_condition,
            "seed": self.seed,
            "per_condition_mean_a": self.per_condition_mean_a,
            "per_condition_mean_b": self.per_condition_mean_b,
            "mean_a": self.mean_a,
            "mean_b": self.mean_b,
            "wins_a": self.wins_a,
            "win_rate_a": self.win_rate_a,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


def count_wins(scores_a, scores_b) -> tuple[float, float]:
    """``(wins_a, win_rate_a)``; a tie counts as half a win for each side."""
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.size == 0:
        raise ValueError("need equally many (>= 1) scores on both sides")
    half_wins = 2 * int(np.sum(a > b)) + int(np.sum(a == b))
    return half_wins / 2.0, 100.0 * half_wins / (2 * a.size)


def _check_compatible(a: Checkpoint, b: Checkpoint, spec) -> None:
    if (a.arch.d, a.arch.K) != (b.arch.d, b.arch.K):
        raise ConfigError(
            f"checkpoints disagree on (d, K): {(a.arch.d, a.arch.K)} vs {(b.arch.d, b.arch.K)}"
        )
    d = spec.d if isinstance(spec, GmSpec) else spec.side**2
    if (d, spec.K) != (a.arch.d, a.arch.K):
        raise ConfigError("checkpoints do not match the dataset's dimension or condition count")


def score_checkpoint_pairs(a: Checkpoint, b: Checkpoint, spec, n_per_condition: int, seed: int,
                           chunk: int = 256):
    """Scores and ranking keys of both models on shared noise streams, one
    per (condition, replicate)."""
    _check_compatible(a, b, spec)
    K, d = a.arch.K, a.arch.d
    T_max = max(a.schedule.T, b.schedule.T)
    cells = [(c, i) for c in range(K) for i in range(n_per_condition)]
    conds = np.array([c for c, _ in cells], dtype=np.int64)
    scores_a, scores_b = np.empty(len(cells)), np.empty(len(cells))
    keys_a, keys_b = np.empty(len(cells)), np.empty(len(cells))
    for lo in range(0, len(cells), chunk):
        part = cells[lo : lo + chunk]
        noise = np.stack([Rng(derive_seed(seed, c, i)).normal((T_max, d)) for c, i in part])
        cc = conds[lo : lo + len(part)]
        xa = sample_batch(a.params, a.schedule, cc, noise[:, : a.schedule.T])
        xb = sample_batch(b.params, b.schedule, cc, noise[:, : b.schedule.T])
        sl = slice(lo, lo + len(part))
        scores_a[sl] = score_samples(spec, xa, cc)
        scores_b[sl] = score_samples(spec, xb, cc)
        keys_a[sl] = ranking_key(spec, xa, cc)
        keys_b[sl] = ranking_key(spec, xb, cc)
    return conds, scores_a, scores_b, keys_a, keys_b


def paired_eval(a: Checkpoint, b: Checkpoint, spec, n_per_condition: int, seed: int) -> EvalReport:
    """Win rate of ``a`` over ``b`` when both samplers consume identical noise."""
    if n_per_condition < 1:
        raise ConfigError("n_per_condition must be >= 1")
    conds, sa, sb, ka, kb = score_checkpoint_pairs(a, b, spec, n_per_condition, seed)
    wins, rate = count_wins(ka, kb)
    K = a.arch.K
    return EvalReport(
        n_pairs=len(conds),
        n_per_condition=n_per_condition,
        seed=seed,
        per_condition_mean_a=[float(np.mean(sa[conds == c])) for c in range(K)],
        per_condition_mean_b=[float(np.mean(sb[conds == c])) for c in range(K)],
        mean_a=float(np.mean(sa)),
        mean_b=float(np.mean(sb)),
        wins_a=wins,
        win_rate_a=rate,
    )


@dataclass
class AblationRow:
    name: str
    applicable: bool
    mean_alignment: float = math.nan
    win_rate_vs_sft: float = math.nan
    per_seed_win_rates: list[float] = field(default_factory=list)


@dataclass
class AblationTable:
    rows: list[AblationRow]
    seeds: list[int]

    def row(self, name: str) -> AblationRow:
        return next(r for r in self.rows if r.name == name)

    def to_csv(self) -> str:
        lines = ["row,applicable,mean_alignment,win_rate_vs_sft,per_seed_win_rates"]
        for r in self.rows:
            per_seed = ";".join(repr(w) for w in r.per_seed_win_rates)
            lines.append(
                f"{r.name},{int(r.applicable)},{r.mean_alignment!r},{r.win_rate_vs_sft!r},{per_seed}"
            )
        return "\n".join(lines) + "\n"


def strategy_applicable(kind: str, ds: Dataset, base: TrainConfig) -> bool:
    try:
        replace(base.downgrade, kind=kind).check_dataset(ds)
    except ConfigError:
        return False
    return True


PRETRAIN_LABEL = 0x50524554


def pretrain_base(ds: Dataset, base: TrainConfig, seed: int, steps: int) -> Checkpoint:
    """Plain denoising fit used as the common starting point (and frozen
    reference) for every fine-tuning method."""
    cfg = replace(base, method="sft", seed=derive_seed(seed, PRETRAIN_LABEL), steps=steps)
    return train(cfg, ds)


def run_ablation(
    ds: Dataset,
    base: TrainConfig,
    seeds,
    n_per_condition: int = 250,
    pretrain_steps: int | None = None,
) -> AblationTable:
    """Per seed: pretrain a base model, fine-tune SFT and one SUDO model per
    applicable downgrade from it, and compare each SUDO model with SFT on
    shared sampling noise. Rows hold medians over seeds."""
    seeds = list(seeds)
    if not seeds:
        raise ConfigError("need at least one seed")
    pretrain_steps = base.steps if pretrain_steps is None else pretrain_steps
    align = {name: [] for name in ABLATION_ROWS}
    rates = {name: [] for name in ABLATION_ROWS}
    usable = [k for k in STRATEGIES if strategy_applicable(k, ds, base)]
    for seed in seeds:
        cfg = replace(base, seed=seed)
        init = pretrain_base(ds, base, seed, pretrain_steps).params if pretrain_steps else None
        sft = train(replace(cfg, method="sft"), ds, init=init)
        sft_mean = None
        for kind in usable:
            sudo_cfg = replace(cfg, method="sudo", downgrade=replace(base.downgrade, kind=kind))
            model = train(sudo_cfg, ds, init=init)
            rep = paired_eval(model, sft, ds.spec, n_per_condition, seed)
            align[kind].append(rep.mean_a)
            rates[kind].append(rep.win_rate_a)
            sft_mean = rep.mean_b
        if sft_mean is None:
            sft_mean = paired_eval(sft, sft, ds.spec, n_per_condition, seed).mean_a
        align["sft"].append(sft_mean)
        rates["sft"].append(50.0)
    rows = []
    for name in ABLATION_ROWS:
        if name == "sft" or name in usable:
            rows.append(AblationRow(name, True, statistics.median(align[name]),
                                    statistics.median(rates[name]), rates[name]))
        else:
            rows.append(AblationRow(name, False))
    return AblationTable(rows, seeds)
