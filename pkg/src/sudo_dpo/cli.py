"""Command-line entry point: ``sudo-dpo <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 I/O or file-format
error, 3 numeric failure, 4 gradient check over tolerance. On success a
single JSON summary line is printed to stdout.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .data import (
    gen_gaussian_mixture,
    gen_pattern_grid,
    gen_ranked_losers,
    load_dataset,
    make_gm_spec,
    save_dataset,
)
from .diffusion import sample_batch
from .downgrade import CLI_NAMES, DowngradeStrategy
from .errors import ConfigError, FormatError, InputError, NumericError
from .evaluation import paired_eval, run_ablation
from .io import atomic_write_text
from .losses import LossConfig
from .rng import Rng, derive_seed, parse_seed
from .training import TrainConfig, grad_check, load_checkpoint, train

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_GRADCHECK = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _int_list(text: str) -> list[int]:
    try:
        return [parse_seed(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _widths(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(s) for s in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated widths, got {text!r}") from None


def _seed(text: str) -> int:
    try:
        return parse_seed(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _add_train_flags(p: argparse.ArgumentParser, with_io: bool = True) -> None:
    p.add_argument("--data", required=True)
    if with_io:
        p.add_argument("--method", choices=["sft", "sudo", "dpo"], default="sudo")
        p.add_argument("--downgrade", choices=sorted(CLI_NAMES), default="random-image")
        p.add_argument("--out-ckpt", required=True)
        p.add_argument("--metrics")
        p.add_argument("--pairs", help="ranked-loser dataset file (method dpo)")
        p.add_argument("--init-ckpt", help="start from these weights; the reference is frozen at them")
        p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--c", type=float, default=-2500.0)
    p.add_argument("--lambda1", type=float, default=0.5)
    p.add_argument("--lambda2", type=float, default=0.5)
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--warmup-frac", type=float, default=0.25)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--blur-factor", type=int, default=4)
    p.add_argument("--grid-count", type=int, default=8)
    p.add_argument("--share-noise", action="store_true")
    p.add_argument("--allow-same-label", action="store_true")
    p.add_argument("--hidden", type=_widths, default=(64, 64))
    p.add_argument("--T", type=int, default=200)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sudo-dpo", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset file")
    p.add_argument("--kind", choices=["gm", "grid"], required=True)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--d", type=int, default=2)
    p.add_argument("--side", type=int, default=16)
    p.add_argument("--n", type=int, default=4000)
    p.add_argument("--sigma", type=float, help="component std (gm, default 0.5) or pixel noise (grid, default 0.2)")
    p.add_argument("--radius", type=float, default=4.0)
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--pairs-out", help="also write a ranked-loser file for method dpo")

    p = sub.add_parser("train", help="fine-tune with sft, sudo or dpo")
    _add_train_flags(p)

    p = sub.add_parser("sample", help="draw samples from a checkpoint as CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--cond", type=int, required=True)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="paired-noise win rate of checkpoint A over B")
    p.add_argument("--ckpt-a", required=True)
    p.add_argument("--ckpt-b", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--n-per-cond", type=int, default=250)
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--report", required=True)

    p = sub.add_parser("ablate", help="downgrade ablation against sft")
    _add_train_flags(p, with_io=False)
    p.add_argument("--seeds", type=_int_list, default=[1, 2, 3])
    p.add_argument("--pretrain-steps", type=int, default=3000)
    p.add_argument("--n-per-cond", type=int, default=250)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference check of the loss gradient")
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--method", choices=["sft", "sudo", "combined", "dpo"], default="combined")
    return parser


def _train_config(args, method: str = "sudo", seed: int = 0) -> TrainConfig:
    loss = LossConfig(C=args.c, lambda1=args.lambda1, lambda2=args.lambda2, method=method)
    strategy = DowngradeStrategy(
        CLI_NAMES[getattr(args, "downgrade", "random-image")],
        args.blur_factor,
        args.grid_count,
        args.allow_same_label,
    )
    return TrainConfig(
        method=method,
        loss=loss,
        steps=args.steps,
        batch_size=args.batch,
        base_lr=args.lr,
        warmup_frac=args.warmup_frac,
        seed=seed,
        weight_decay=args.weight_decay,
        downgrade=strategy,
        share_noise=args.share_noise,
        hidden=args.hidden,
        T=args.T,
    )


def cmd_gen_data(args) -> dict:
    if args.kind == "gm":
        sigma = 0.5 if args.sigma is None else args.sigma
        ds = gen_gaussian_mixture(make_gm_spec(args.k, args.d, args.radius, sigma), args.n, args.seed)
    else:
        sigma = 0.2 if args.sigma is None else args.sigma
        ds = gen_pattern_grid(args.k, args.side, args.n, sigma, args.seed)
    save_dataset(ds, args.out)
    out = {"command": "gen-data", "out": args.out, "kind": ds.kind, "n": ds.n, "K": ds.K, "dim": ds.dim}
    if args.pairs_out:
        save_dataset(gen_ranked_losers(ds, derive_seed(args.seed, 0x5052)), args.pairs_out)
        out["pairs_out"] = args.pairs_out
    return out


def cmd_train(args) -> dict:
    ds = load_dataset(args.data)
    config = _train_config(args, args.method, args.seed)
    losers = load_dataset(args.pairs) if args.pairs else None
    init = load_checkpoint(args.init_ckpt).params if args.init_ckpt else None
    ckpt = train(config, ds, args.out_ckpt, args.metrics, losers=losers, init=init)
    return {
        "command": "train",
        "method": config.method,
        "steps": ckpt.step,
        "seed": config.seed,
        "n_params": ckpt.arch.n_params,
        "out_ckpt": args.out_ckpt,
        "metrics": args.metrics,
    }


def cmd_sample(args) -> dict:
    ckpt = load_checkpoint(args.ckpt)
    if not 0 <= args.cond < ckpt.arch.K:
        raise InputError(f"--cond must lie in [0, {ckpt.arch.K})")
    T, d = ckpt.schedule.T, ckpt.arch.d
    noise = np.stack([Rng(derive_seed(args.seed, args.cond, i)).normal((T, d)) for i in range(args.n)])
    x = sample_batch(ckpt.params, ckpt.schedule, np.full(args.n, args.cond), noise)
    lines = ["condition," + ",".join(f"x_{j + 1}" for j in range(d))]
    lines += [f"{args.cond}," + ",".join(repr(float(v)) for v in row) for row in x]
    atomic_write_text(args.out, "\n".join(lines) + "\n")
    return {"command": "sample", "n": args.n, "cond": args.cond, "out": args.out}


def cmd_eval(args) -> dict:
    a = load_checkpoint(args.ckpt_a)
    b = load_checkpoint(args.ckpt_b)
    ds = load_dataset(args.data)
    report = paired_eval(a, b, ds.spec, args.n_per_cond, args.seed)
    atomic_write_text(args.report, report.to_json() + "\n")
    return {"command": "eval", "report": args.report, "win_rate_a": report.win_rate_a,
            "n_pairs": report.n_pairs}


def cmd_ablate(args) -> dict:
    ds = load_dataset(args.data)
    table = run_ablation(ds, _train_config(args), args.seeds, args.n_per_cond,
                         pretrain_steps=args.pretrain_steps)
    atomic_write_text(args.out, table.to_csv())
    return {
        "command": "ablate",
        "out": args.out,
        "win_rate_vs_sft": {r.name: (r.win_rate_vs_sft if r.applicable else None) for r in table.rows},
    }


def default_gradcheck_setup(method: str, seed: int):
    """Small GM problem and a 1634-parameter network."""
    ds = gen_gaussian_mixture(make_gm_spec(4, 2), 64, derive_seed(seed, 0x4443))
    lam = {"sft": (1.0, 0.0), "sudo": (0.0, 1.0), "combined": (0.5, 0.5), "dpo": (0.0, 1.0)}[method]
    train_method = {"combined": "sudo"}.get(method, method)
    loss = LossConfig(lambda1=lam[0], lambda2=lam[1], method=train_method)
    config = TrainConfig(method=train_method, loss=loss, batch_size=8, hidden=(32, 32), dt=8, dc=4, steps=1)
    losers = gen_ranked_losers(ds, seed) if method == "dpo" else None
    return config, ds, losers


def cmd_gradcheck(args) -> dict:
    config, ds, losers = default_gradcheck_setup(args.method, args.seed)
    err = grad_check(config, ds, args.seed, args.h, losers=losers)
    summary = {"command": "gradcheck", "method": args.method, "max_rel_err": err, "tol": args.tol,
               "n_params": config.architecture(ds).n_params, "passed": err < args.tol}
    return summary


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        summary = COMMANDS[args.command](args)
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(json.dumps(summary))
    if args.command == "gradcheck" and not summary["passed"]:
        return EXIT_GRADCHECK
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
