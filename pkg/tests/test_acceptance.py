"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line verdict that is printed in the pytest terminal
summary. Criterion 7 trains 24 models and takes several minutes.
"""

import math
import statistics
from dataclasses import replace

import numpy as np
import pytest

from sudo_dpo.cli import default_gradcheck_setup, main
from sudo_dpo.data import gen_gaussian_mixture, gen_pattern_grid, make_gm_spec, posterior
from sudo_dpo.denoiser import Architecture, DenoiserParams
from sudo_dpo.diffusion import forward_step, make_linear_schedule, q_sample
from sudo_dpo.downgrade import (
    DowngradeStrategy,
    PreferencePair,
    downgrade_blur,
    downgrade_random_grid,
    downgrade_random_image,
)
from sudo_dpo.evaluation import paired_eval, pretrain_base
from sudo_dpo.losses import LossConfig, PairBatch, dpo_pair_loss, logsig_loss, preference_objective, sudo_pair_loss
from sudo_dpo.rng import Rng
from sudo_dpo.training import TrainConfig, grad_check, train

LN2 = math.log(2.0)


def random_arch(r: Rng) -> Architecture:
    hidden = tuple(2 + r.randbelow(12) for _ in range(1 + r.randbelow(3)))
    return Architecture(1 + r.randbelow(4), 1 + r.randbelow(5), 2 * (1 + r.randbelow(4)),
                        1 + r.randbelow(4), hidden)


def test_criterion_1_loss_is_ln2_at_initialization(criterion):
    r = Rng(101)
    worst = 0.0
    for _ in range(100):
        arch = random_arch(r)
        params = DenoiserParams(arch, 0.5 * r.normals(arch.n_params))
        T = 1 + r.randbelow(200)
        s = make_linear_schedule(T)
        B = 1 + r.randbelow(16)
        batch = PairBatch(r.integers(arch.K, B), 3 * r.normal((B, arch.d)), 3 * r.normal((B, arch.d)),
                          1 + r.integers(T, B), r.normal((B, arch.d)), r.normal((B, arch.d)))
        res = preference_objective(params, params.copy(), s, batch, -2500.0, need_grad=False)
        worst = max(worst, abs(res.pref - LN2))
    assert criterion(1, worst <= 1e-12, f"max |loss - ln 2| over 100 batches = {worst:.3g} (tol 1e-12)")


def test_criterion_2_gradients_match_finite_differences(criterion):
    results = {}
    for method in ("sft", "sudo", "combined"):
        for seed in (0, 1, 2):
            config, ds, _ = default_gradcheck_setup(method, seed)
            assert config.architecture(ds).n_params <= 2000
            results[(method, seed)] = grad_check(config, ds, seed, h=1e-5)
    worst = max(results.values())
    detail = ", ".join(f"{m}={max(v for (mm, _), v in results.items() if mm == m):.2g}"
                       for m in ("sft", "sudo", "combined"))
    assert criterion(2, worst < 1e-5, f"max relative error {detail} (tol 1e-5)")


def test_criterion_3_dpo_sudo_equivalence_and_antisymmetry(criterion):
    r = Rng(303)
    arch = Architecture(3, 4, 8, 4, (16, 16))
    ref = DenoiserParams(arch, 0.3 * r.normals(arch.n_params))
    pol = ref.with_flat(ref.flat + 0.05 * r.normals(arch.n_params))
    s = make_linear_schedule(200)
    cfg = LossConfig()
    identical = antisym = True
    for _ in range(1000):
        c, t = r.randbelow(4), 1 + r.randbelow(200)
        xw, xl, ew, el = (r.normals(3) for _ in range(4))
        pair = PreferencePair(c, xw, xl, t, ew, el, "random_image")
        ls, gs, (_, inner) = sudo_pair_loss(pol, ref, pair, s, cfg)
        ld, gd = dpo_pair_loss(pol, ref, c, xw, xl, t, ew, el, s, cfg)
        identical &= ls == ld and np.array_equal(gs, gd)
        swapped = PreferencePair(c, xl, xw, t, el, ew, "random_image")
        _, _, (_, inner_sw) = sudo_pair_loss(pol, ref, swapped, s, cfg)
        antisym &= inner_sw == -inner
    assert criterion(3, identical and antisym,
                     f"bit-identical losses/grads: {identical}; swap negates inner exactly: {antisym}")


def test_criterion_4_forward_process_statistics(criterion):
    r = Rng(404)
    T, n, d = 100, 100_000, 2
    s = make_linear_schedule(T)
    ok = True
    for _ in range(5):
        t = 1 + r.randbelow(T)
        x0 = 2 * r.normals(d)
        ab = s.alpha_bars[t - 1]
        mean, var = math.sqrt(ab) * x0, 1 - ab
        closed = q_sample(s, np.broadcast_to(x0, (n, d)), t, r.normal((n, d)))
        x = np.broadcast_to(x0, (n, d)).copy()
        for k in range(1, t + 1):
            x = forward_step(s, x, k, r.normal((n, d)))
        for sample in (closed, x):
            ok &= bool(np.all(np.abs(sample.mean(0) - mean) <= 3 * math.sqrt(var / n)))
            ok &= bool(np.all(np.abs(sample.var(0) - var) <= 3 * var * math.sqrt(2 / n)))
    assert criterion(4, ok, "q_sample and iterated forward_step moments within 3 sigma for 5 (t, x0)")


def test_criterion_5_numerical_stability(criterion):
    lo, hi = logsig_loss(-1e4), logsig_loss(1e4)
    finite = math.isfinite(lo) and math.isfinite(hi) and lo == pytest.approx(1e4) and 0 <= hi < 1e-300
    spec = make_gm_spec(4, 2, sigma=0.01)
    x = np.array([[1e3, -1e3], [1e4, 1e4], [0.0, 0.0], [2.0, 2.0]])
    with np.errstate(over="raise", invalid="raise"):
        p = posterior(spec, x)
    normalized = bool(np.all(np.abs(p.sum(axis=1) - 1.0) <= 1e-12))
    assert criterion(5, finite and normalized,
                     f"logsig(-1e4)={lo:.6g}, logsig(1e4)={hi:.3g}; posterior row sums within 1e-12: {normalized}")


def pool_oracle(img, f):
    s = img.shape[0]
    out = np.empty_like(img)
    for bi in range(0, s, f):
        for bj in range(0, s, f):
            out[bi : bi + f, bj : bj + f] = sum(
                img[i, j] for i in range(bi, bi + f) for j in range(bj, bj + f)
            ) / (f * f)
    return out


def test_criterion_6_downgrade_oracles(criterion):
    r = Rng(606)
    blur_exact = multiset = True
    for _ in range(200):
        img = np.floor(8 * r.normal((16, 16))) / 8
        blur_exact &= np.array_equal(downgrade_blur(img, 4), pool_oracle(img, 4))
        noisy = r.normal((16, 16))
        out = downgrade_random_grid(noisy, 8, r)
        multiset &= np.array_equal(np.sort(out.ravel()), np.sort(noisy.ravel()))
    ds = gen_gaussian_mixture(make_gm_spec(4, 2), 100, 6)
    never_winner = all(downgrade_random_image(ds, k % ds.n, r)[1] != k % ds.n for k in range(10_000))
    assert criterion(6, blur_exact and multiset and never_winner,
                     f"blur==oracle: {blur_exact}; grid multiset kept: {multiset}; "
                     f"random_image avoided winner in 10^4 trials: {never_winner}")


SEEDS = (1, 2, 3)
STEPS = 3000


def _fine_tune_all(ds, variants, seed):
    """Pretrain, then fine-tune SFT and each SUDO variant from the same base;
    return win rates of each variant against SFT."""
    base = TrainConfig(method="sft", steps=STEPS, batch_size=64, hidden=(64, 64), T=200, seed=seed)
    init = pretrain_base(ds, base, seed, STEPS).params
    sft = train(base, ds, init=init)
    rates = {}
    for name, cfg in variants.items():
        model = train(replace(base, method="sudo", **cfg), ds, init=init)
        rates[name] = paired_eval(model, sft, ds.spec, 250, seed).win_rate_a
    return rates


@pytest.mark.slow
def test_criterion_7_directional_ablation(criterion):
    gm = gen_gaussian_mixture(make_gm_spec(4, 2, radius=4.0, sigma=0.5), 4000, 7)
    grid = gen_pattern_grid(4, 8, 4000, 0.2, 7)
    gm_variants = {
        "random_image": {},
        "no_mse": {"loss": LossConfig(lambda1=0.0, lambda2=1.0)},
    }
    grid_variants = {
        "blur": {"downgrade": DowngradeStrategy("blur")},
        "random_grid": {"downgrade": DowngradeStrategy("random_grid")},
    }
    per_seed = {k: [] for k in (*gm_variants, *grid_variants)}
    for seed in SEEDS:
        for ds, variants in ((gm, gm_variants), (grid, grid_variants)):
            for name, rate in _fine_tune_all(ds, variants, seed).items():
                per_seed[name].append(rate)
    med = {k: statistics.median(v) for k, v in per_seed.items()}
    checks = {
        "random_image > 55": med["random_image"] > 55,
        "blur <= 55": med["blur"] <= 55,
        "random_grid <= 55": med["random_grid"] <= 55,
        "no_mse > 50": med["no_mse"] > 50,
    }
    detail = "; ".join(f"{k}: median {med[k]:.2f} {per_seed[k]}" for k in per_seed)
    failed = [k for k, v in checks.items() if not v]
    assert criterion(7, not failed, detail + (f"; failed: {failed}" if failed else ""))


def test_criterion_8_training_is_deterministic(criterion, tmp_path, capsys):
    data = tmp_path / "gm.sud"
    assert main(["gen-data", "--kind", "gm", "--k", "4", "--d", "2", "--n", "1000", "--seed", "5",
                 "--out", str(data)]) == 0
    outputs = []
    for run in ("a", "b"):
        ckpt, metrics = tmp_path / f"{run}.ckpt", tmp_path / f"{run}.csv"
        code = main(["train", "--data", str(data), "--method", "sudo", "--steps", "300", "--seed", "9",
                     "--out-ckpt", str(ckpt), "--metrics", str(metrics)])
        assert code == 0
        outputs.append((ckpt.read_bytes(), metrics.read_bytes()))
    capsys.readouterr()
    same = outputs[0] == outputs[1]
    assert criterion(8, same, f"two 300-step sudo runs: checkpoints and metrics bit-identical: {same}")
