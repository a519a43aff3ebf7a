"""Synthetic conditional datasets and their binary file format.

Two kinds stand in for (prompt, image) records: ``vector`` samples from an
isotropic Gaussian mixture whose component is the condition, and ``grid``
samples of a class pattern plus pixel noise. Both keep the generating
parameters so samples can be scored analytically.

File layout (little-endian)::

    b"SUD1" | version u32 = 1 | kind u8 | dim u32 | K u32 | n u64
    | spec_len u32 | spec bytes | n x (label u32, D x f64)

``dim`` is ``d`` for vector data and ``side`` for grid data (``D = side**2``).
Vector spec: sigma f64, radius f64, K*d means f64. Grid spec: noise_sigma f64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import softmax

from .errors import ConfigError, FormatError, InputError
from .io import atomic_write_bytes
from .rng import Rng

MAGIC = b"SUD1"
VERSION = 1
KIND_CODES = {"vector": 0, "grid": 1}
GRID_CLASSES = ("horizontal", "vertical", "checkerboard", "square")


@dataclass(frozen=True)
class GmSpec:
    K: int
    d: int
    means: np.ndarray
    sigma: float = 0.5
    radius: float = 4.0

    def __post_init__(self):
        means = np.asarray(self.means, dtype=np.float64)
        object.__setattr__(self, "means", means)
        if means.shape != (self.K, self.d):
            raise ConfigError(f"means shape {means.shape} != ({self.K}, {self.d})")
        if not self.sigma > 0:
            raise ConfigError("sigma must be positive")
        if len({m.tobytes() for m in means}) != self.K:
            raise ConfigError("component means must be distinct")

    def __eq__(self, other):
        if not isinstance(other, GmSpec):
            return NotImplemented
        return (
            (self.K, self.d, self.sigma, self.radius) == (other.K, other.d, other.sigma, other.radius)
            and np.array_equal(self.means, other.means)
        )


def make_gm_spec(K: int, d: int = 2, radius: float = 4.0, sigma: float = 0.5) -> GmSpec:
    """Means on a circle of ``radius`` for d=2, else on signed coordinate axes."""
    if K < 1 or d < 1:
        raise ConfigError("K and d must be >= 1")
    means = np.zeros((K, d))
    if d == 2:
        ang = 2.0 * np.pi * np.arange(K) / K
        means[:, 0] = radius * np.cos(ang)
        means[:, 1] = radius * np.sin(ang)
    else:
        if K > 2 * d:
            raise ConfigError(f"axis layout supports at most 2*d = {2 * d} components")
        for k in range(K):
            means[k, k % d] = radius if k < d else -radius
    return GmSpec(K, d, means, sigma, radius)


@dataclass(frozen=True)
class GridSpec:
    K: int
    side: int
    noise_sigma: float = 0.1

    def __post_init__(self):
        if not 1 <= self.K <= len(GRID_CLASSES):
            raise ConfigError(f"grid data supports 1..{len(GRID_CLASSES)} classes, got {self.K}")
        if self.side < 4:
            raise ConfigError(f"grid side must be >= 4, got {self.side}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")


@dataclass
class Dataset:
    kind: str
    dim: int
    K: int
    labels: np.ndarray  # (n,) int64
    values: np.ndarray  # (n, D) float64
    spec: GmSpec | GridSpec

    def __post_init__(self):
        if self.kind not in KIND_CODES:
            raise ConfigError(f"unknown dataset kind {self.kind!r}")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        n = len(self.labels)
        if n < 1:
            raise InputError("dataset needs at least one record")
        if self.values.shape != (n, self.data_dim):
            raise InputError(f"values shape {self.values.shape} != ({n}, {self.data_dim})")
        if np.any(self.labels < 0) or np.any(self.labels >= self.K):
            raise InputError(f"labels must lie in [0, {self.K})")

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def data_dim(self) -> int:
        return self.dim * self.dim if self.kind == "grid" else self.dim

    @property
    def side(self) -> int:
        if self.kind != "grid":
            raise ConfigError("vector datasets have no side")
        return self.dim

    def __len__(self):
        return self.n

    def __getitem__(self, i):
        return int(self.labels[i]), self.values[i]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            (self.kind, self.dim, self.K) == (other.kind, other.dim, other.K)
            and self.spec == other.spec
            and np.array_equal(self.labels, other.labels)
            and self.values.tobytes() == other.values.tobytes()
        )


def gen_gaussian_mixture(spec: GmSpec, n: int, seed: int) -> Dataset:
    if n < 1:
        raise ConfigError("n must be >= 1")
    rng = Rng(seed)
    labels = np.empty(n, dtype=np.int64)
    values = np.empty((n, spec.d))
    for i in range(n):
        c = rng.randbelow(spec.K)
        labels[i] = c
        values[i] = spec.means[c] + spec.sigma * rng.normals(spec.d)
    return Dataset("vector", spec.d, spec.K, labels, values, spec)


def posterior(spec: GmSpec, x) -> np.ndarray:
    """p(c | x) under uniform weights; rows of ``x`` give rows of output."""
    x = np.asarray(x, dtype=np.float64)
    sq = np.sum((x[..., None, :] - spec.means) ** 2, axis=-1)
    # uniform weights cancel; softmax renormalizes after the max shift, so
    # rows sum to one even when every exponent underflows
    return softmax(-sq / (2.0 * spec.sigma**2), axis=-1)


def log_posterior_of(spec: GmSpec, x, c) -> np.ndarray:
    """log p(c | x) per row, without saturating when p(c | x) rounds to 1.

    Uses ``-log(sum_k exp(l_k - l_c))``; when ``c`` dominates this is
    ``-log1p(sum_{k != c} exp(l_k - l_c))``, which keeps tiny tail masses.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    c = np.broadcast_to(np.asarray(c, dtype=np.int64), (x.shape[0],))
    sq = np.sum((x[:, None, :] - spec.means) ** 2, axis=-1)
    logp = -sq / (2.0 * spec.sigma**2)
    rows = np.arange(x.shape[0])
    diff = logp - logp[rows, c][:, None]
    diff[rows, c] = -np.inf
    m = np.maximum(diff.max(axis=1), 0.0)
    rest = np.exp(diff - m[:, None]).sum(axis=1)
    return -np.where(m == 0.0, np.log1p(rest), m + np.log(np.exp(-m) + rest))


def grid_template(k: int, side: int) -> np.ndarray:
    """0/1 class pattern, shape (side, side)."""
    i, j = np.indices((side, side))
    if k == 0:
        return (i % 2).astype(np.float64)
    if k == 1:
        return (j % 2).astype(np.float64)
    if k == 2:
        return ((i + j) % 2).astype(np.float64)
    if k == 3:
        lo, hi = side // 4, side - side // 4
        return ((i >= lo) & (i < hi) & (j >= lo) & (j < hi)).astype(np.float64)
    raise ConfigError(f"no grid template for class {k}")


def gen_pattern_grid(K: int, side: int, n: int, noise_sigma: float, seed: int) -> Dataset:
    spec = GridSpec(K, side, noise_sigma)
    if n < 1:
        raise ConfigError("n must be >= 1")
    templates = [grid_template(k, side).ravel() for k in range(K)]
    rng = Rng(seed)
    labels = np.empty(n, dtype=np.int64)
    values = np.empty((n, side * side))
    for i in range(n):
        c = rng.randbelow(K)
        labels[i] = c
        values[i] = templates[c] + noise_sigma * rng.normals(side * side)
    return Dataset("grid", side, K, labels, values, spec)


def template_correlation(x, template) -> np.ndarray:
    """Pearson correlation of each row of ``x`` with ``template``; 0 when
    either side is constant."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    tc = np.ravel(template) - np.mean(template)
    xc = x - x.mean(axis=1, keepdims=True)
    num = xc @ tc
    den = np.sqrt(np.sum(xc**2, axis=1) * np.sum(tc**2))
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return np.clip(corr, -1.0, 1.0)


def score_samples(spec, x, c) -> np.ndarray:
    """Alignment of each row of ``x`` with condition ``c`` in [0, 1].

    Vector data: the analytic posterior p(c | x). Grid data: template
    correlation mapped through (corr + 1) / 2.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    c = np.broadcast_to(np.asarray(c, dtype=np.int64), (x.shape[0],))
    if isinstance(spec, GmSpec):
        return posterior(spec, x)[np.arange(x.shape[0]), c]
    if isinstance(spec, GridSpec):
        out = np.empty(x.shape[0])
        for k in np.unique(c):
            rows = c == k
            out[rows] = (template_correlation(x[rows], grid_template(int(k), spec.side)) + 1.0) / 2.0
        return out
    raise ConfigError(f"cannot score samples for spec {spec!r}")


def ranking_key(spec, x, c) -> np.ndarray:
    """Monotone transform of :func:`score_samples` that does not round to a
    constant for confidently aligned samples; used to decide pairwise wins."""
    if isinstance(spec, GmSpec):
        return log_posterior_of(spec, x, c)
    return score_samples(spec, x, c)


def gen_ranked_losers(ds: Dataset, seed: int, spread: float = 3.0, max_tries: int = 100) -> Dataset:
    """Pre-ranked losing samples for supervised preference training.

    Record ``i`` of the result is a lower-quality draw for the same condition
    as record ``i`` of ``ds``: the class centre plus noise ``spread`` times
    wider, redrawn until it scores no higher than the winner.
    """
    rng = Rng(seed)
    spec = ds.spec
    if isinstance(spec, GmSpec):
        centres = spec.means
        scale = spread * spec.sigma
    else:
        centres = np.stack([grid_template(k, spec.side).ravel() for k in range(spec.K)])
        scale = spread * max(spec.noise_sigma, 0.1)
    win_scores = score_samples(spec, ds.values, ds.labels)
    losers = np.empty_like(ds.values)
    for i in range(ds.n):
        c = int(ds.labels[i])
        for _ in range(max_tries):
            cand = centres[c] + scale * rng.normals(ds.data_dim)
            if score_samples(spec, cand, c)[0] <= win_scores[i]:
                break
        losers[i] = cand
    return Dataset(ds.kind, ds.dim, ds.K, ds.labels.copy(), losers, spec)


# -- serialization -------------------------------------------------------


def _spec_bytes(ds: Dataset) -> bytes:
    if ds.kind == "vector":
        s = ds.spec
        return struct.pack("<dd", s.sigma, s.radius) + s.means.astype("<f8").tobytes()
    return struct.pack("<d", ds.spec.noise_sigma)


def dataset_to_bytes(ds: Dataset) -> bytes:
    header = MAGIC + struct.pack("<IBIIQ", VERSION, KIND_CODES[ds.kind], ds.dim, ds.K, ds.n)
    spec = _spec_bytes(ds)
    rec = np.empty(ds.n, dtype=[("label", "<u4"), ("values", "<f8", (ds.data_dim,))])
    rec["label"] = ds.labels
    rec["values"] = ds.values
    return header + struct.pack("<I", len(spec)) + spec + rec.tobytes()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated {what}: need {n} bytes, {len(self.buf) - self.pos} left", self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def dataset_from_bytes(buf: bytes) -> Dataset:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported dataset version {version}", 4)
    kind_pos = r.pos
    kind_code, dim, K, n = r.unpack("<BIIQ", "header")
    kinds = {v: k for k, v in KIND_CODES.items()}
    if kind_code not in kinds:
        raise FormatError(f"unknown kind code {kind_code}", kind_pos)
    kind = kinds[kind_code]
    if n < 1:
        raise FormatError("dataset has no records", kind_pos + 9)
    (spec_len,) = r.unpack("<I", "spec length")
    spec_pos = r.pos
    spec_buf = _Reader(r.take(spec_len, "spec block"))
    try:
        if kind == "vector":
            sigma, radius = spec_buf.unpack("<dd", "spec")
            means = np.frombuffer(spec_buf.take(8 * K * dim, "spec means"), dtype="<f8")
            spec = GmSpec(K, dim, means.reshape(K, dim).astype(np.float64), sigma, radius)
        else:
            (noise_sigma,) = spec_buf.unpack("<d", "spec")
            spec = GridSpec(K, dim, noise_sigma)
    except FormatError as exc:
        raise FormatError(str(exc).split(" (at byte")[0], spec_pos + exc.offset) from None
    except ConfigError as exc:
        raise FormatError(f"invalid spec block: {exc}", spec_pos) from None
    D = dim * dim if kind == "grid" else dim
    rec_dtype = np.dtype([("label", "<u4"), ("values", "<f8", (D,))])
    rec_pos = r.pos
    if n * rec_dtype.itemsize > len(buf) - rec_pos:
        whole = (len(buf) - rec_pos) // rec_dtype.itemsize
        raise FormatError(
            f"truncated records: {n} declared, {whole} complete", rec_pos + whole * rec_dtype.itemsize
        )
    rec = np.frombuffer(r.take(n * rec_dtype.itemsize, "records"), dtype=rec_dtype)
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes", r.pos)
    labels = rec["label"].astype(np.int64)
    bad = np.flatnonzero(labels >= K)
    if bad.size:
        raise FormatError(f"label {labels[bad[0]]} out of range", rec_pos + int(bad[0]) * rec_dtype.itemsize)
    return Dataset(kind, dim, K, labels, rec["values"].astype(np.float64), spec)


def save_dataset(ds: Dataset, path) -> None:
    atomic_write_bytes(path, dataset_to_bytes(ds))


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read())
