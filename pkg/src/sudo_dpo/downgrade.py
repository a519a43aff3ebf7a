"""Self-generated losing samples.

A loser is manufactured from the winner record by one of three strategies:

* ``random_image`` - another training record, preferring a different label,
  so the loser does not match the winner's condition;
* ``blur`` - block average-pool then nearest upsampling of a grid record;
* ``random_grid`` - swap the contents of two cells of a grid record.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .diffusion import Schedule
from .errors import ConfigError, InputError
from .losses import PairBatch
from .rng import Rng

STRATEGIES = ("random_image", "blur", "random_grid")
CLI_NAMES = {"random-image": "random_image", "blur": "blur", "grid": "random_grid"}


@dataclass(frozen=True)
class DowngradeStrategy:
    kind: str = "random_image"
    blur_factor: int = 4
    grid_count: int = 8
    allow_same_label: bool = False

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ConfigError(f"unknown downgrade {self.kind!r}; choose from {STRATEGIES}")
        if self.blur_factor < 2:
            raise ConfigError("blur_factor must be >= 2")
        if self.grid_count < 2:
            raise ConfigError("grid_count must be >= 2")

    def check_dataset(self, ds: Dataset) -> None:
        if self.kind == "random_image":
            if ds.n < 2:
                raise ConfigError("random_image needs at least two records")
            return
        if ds.kind != "grid":
            raise ConfigError(f"{self.kind} downgrade needs grid data, got {ds.kind}")
        factor = self.blur_factor if self.kind == "blur" else self.grid_count
        if ds.side % factor:
            raise ConfigError(f"grid side {ds.side} not divisible by {factor} for {self.kind}")


@dataclass
class PreferencePair:
    condition: int
    x_w: np.ndarray
    x_sl: np.ndarray
    t: int
    eps_w: np.ndarray
    eps_sl: np.ndarray
    strategy: str


def downgrade_random_image(ds: Dataset, winner_index: int, rng: Rng, allow_same_label: bool = False):
    """Returns ``(values, chosen_index)`` of a record other than the winner.

    Rejection-samples up to ``n`` uniform indices; if every attempt fails,
    falls back to a uniform pick among the acceptable indices.
    """
    n = ds.n
    if n < 2:
        raise InputError("no distinct sample available")
    label = ds.labels[winner_index]
    for _ in range(n):
        j = rng.randbelow(n)
        if j != winner_index and (allow_same_label or ds.labels[j] != label):
            return ds.values[j], j
    ok = np.flatnonzero(ds.labels != label) if not allow_same_label else np.array([], dtype=np.int64)
    if ok.size == 0:
        ok = np.delete(np.arange(n), winner_index)
    j = int(ok[rng.randbelow(ok.size)])
    return ds.values[j], j


def _as_square(x, side: int | None):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x, False
    side = side or int(round(np.sqrt(x.size)))
    if side * side != x.size:
        raise InputError(f"vector of length {x.size} is not a square grid")
    return x.reshape(side, side), True


def downgrade_blur(x, factor: int = 4, side: int | None = None) -> np.ndarray:
    """Replace every ``factor x factor`` block by its mean.

    The mean is taken as ``first + mean(block - first)`` so a constant block
    maps to itself bit-exactly (making the operation idempotent).
    """
    img, flat = _as_square(x, side)
    s = img.shape[0]
    if img.shape[0] != img.shape[1] or s % factor:
        raise InputError(f"grid side {s} not divisible by blur factor {factor}")
    m = s // factor
    blocks = img.reshape(m, factor, m, factor).transpose(0, 2, 1, 3).reshape(m, m, factor * factor)
    first = blocks[..., :1]
    means = first[..., 0] + (blocks - first).mean(axis=-1)
    out = np.repeat(np.repeat(means, factor, axis=0), factor, axis=1)
    return out.ravel() if flat else out


def downgrade_random_grid(x, grid_count: int, rng: Rng, side: int | None = None) -> np.ndarray:
    """Swap two distinct cells of a ``grid_count x grid_count`` partition
    (cells numbered row-major)."""
    img, flat = _as_square(x, side)
    s = img.shape[0]
    if img.shape[0] != img.shape[1] or s % grid_count:
        raise InputError(f"grid side {s} not divisible by grid count {grid_count}")
    n_cells = grid_count * grid_count
    a = rng.randbelow(n_cells)
    b = rng.randbelow(n_cells - 1)
    if b >= a:
        b += 1
    out = swap_cells(img, grid_count, a, b)
    return out.ravel() if flat else out


def swap_cells(img: np.ndarray, grid_count: int, a: int, b: int) -> np.ndarray:
    cs = img.shape[0] // grid_count
    out = img.copy()
    ra, ca = divmod(a, grid_count)
    rb, cb = divmod(b, grid_count)
    sa = (slice(ra * cs, (ra + 1) * cs), slice(ca * cs, (ca + 1) * cs))
    sb = (slice(rb * cs, (rb + 1) * cs), slice(cb * cs, (cb + 1) * cs))
    out[sa], out[sb] = img[sb], img[sa]
    return out


def make_loser(ds: Dataset, winner_index: int, strategy: DowngradeStrategy, rng: Rng) -> np.ndarray:
    x_w = ds.values[winner_index]
    if strategy.kind == "random_image":
        x_sl, _ = downgrade_random_image(ds, winner_index, rng, strategy.allow_same_label)
        return x_sl
    if strategy.kind == "blur":
        return downgrade_blur(x_w, strategy.blur_factor, ds.side)
    return downgrade_random_grid(x_w, strategy.grid_count, rng, ds.side)


def make_pair(
    ds: Dataset,
    winner_index: int,
    strategy: DowngradeStrategy,
    schedule: Schedule,
    rng: Rng,
    share_noise: bool = False,
) -> PreferencePair:
    """One self-supervised pair. Draw order: loser, t, eps_w, eps_sl."""
    strategy.check_dataset(ds)
    c, x_w = ds[winner_index]
    x_sl = make_loser(ds, winner_index, strategy, rng)
    t = 1 + rng.randbelow(schedule.T)
    eps_w = rng.normals(ds.data_dim)
    eps_sl = eps_w.copy() if share_noise else rng.normals(ds.data_dim)
    return PreferencePair(c, x_w.copy(), np.array(x_sl, dtype=np.float64), t, eps_w, eps_sl, strategy.kind)


def stack_pairs(pairs: list[PreferencePair]) -> PairBatch:
    return PairBatch(
        np.array([p.condition for p in pairs], dtype=np.int64),
        np.stack([p.x_w for p in pairs]),
        np.stack([p.x_sl for p in pairs]),
        np.array([p.t for p in pairs], dtype=np.int64),
        np.stack([p.eps_w for p in pairs]),
        np.stack([p.eps_sl for p in pairs]),
    )
