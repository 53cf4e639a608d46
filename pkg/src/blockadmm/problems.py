"""Local losses, block-separable regularizers and LIBSVM ingestion."""

from __future__ import annotations

import bz2
import gzip
import lzma
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .core import Topology, build_topology

# below this many matrix entries a dense copy is faster than CSR products
_DENSE_LIMIT = 200_000


@dataclass(frozen=True)
class LocalDataset:
    """Samples held by one worker: rows of ``features`` with ``labels``.

    Feature columns are in model coordinates (the concatenation of blocks).
    """

    features: sp.csr_matrix
    labels: np.ndarray

    def __post_init__(self):
        feats = sp.csr_matrix(self.features, dtype=float)
        feats.sum_duplicates()
        feats.eliminate_zeros()
        labels = np.asarray(self.labels, dtype=float)
        if feats.shape[0] < 1:
            raise ValueError("a dataset needs at least one sample")
        if labels.shape != (feats.shape[0],):
            raise ValueError("one label per sample required")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    @property
    def m(self) -> int:
        return self.features.shape[0]

    @property
    def active_features(self) -> np.ndarray:
        return np.unique(self.features.indices)


class LossOracle:
    """Smooth local loss ``f_i`` with block gradients.

    ``kind`` is ``"logistic"`` (mean of ``log(1 + exp(-y <a, x>))``) or
    ``"least-squares"`` (mean of ``0.5 (<a, x> - b)^2``).
    """

    def __init__(self, kind: str, dataset: LocalDataset, topology: Topology):
        if kind not in ("logistic", "least-squares"):
            raise ValueError(f"unknown loss kind {kind!r}")
        if dataset.features.shape[1] != topology.dim:
            raise ValueError(
                f"dataset has {dataset.features.shape[1]} columns, model has {topology.dim}")
        self.kind = kind
        self.dataset = dataset
        self.topology = topology
        A = dataset.features
        self._A = A.toarray() if A.shape[0] * A.shape[1] <= _DENSE_LIMIT else A
        csc = A.tocsc()
        self._blocks = {}
        self._active_blocks = set()
        for j in range(topology.num_blocks):
            sl = topology.block_slice(j)
            Aj = csc[:, sl]
            if Aj.nnz:
                self._active_blocks.add(j)
            self._blocks[j] = Aj.toarray() if isinstance(self._A, np.ndarray) else Aj.tocsr()
        self._y = dataset.labels
        self._m = dataset.m

    @property
    def active_blocks(self) -> frozenset:
        return frozenset(self._active_blocks)

    def _check(self, model):
        model = np.asarray(model, dtype=float)
        if model.shape != (self.topology.dim,):
            raise ValueError(f"model length {model.shape} != {self.topology.dim}")
        return model

    def _residual_weights(self, model):
        u = self._A @ model
        if self.kind == "logistic":
            return -self._y * expit(-self._y * u)
        return u - self._y

    def value(self, model) -> float:
        model = self._check(model)
        u = self._A @ model
        if self.kind == "logistic":
            return float(np.mean(np.logaddexp(0.0, -self._y * u)))
        return float(0.5 * np.mean((u - self._y) ** 2))

    def gradient(self, model) -> np.ndarray:
        model = self._check(model)
        s = self._residual_weights(model)
        return np.asarray(self._A.T @ s).ravel() / self._m

    def block_gradient(self, model, block: int) -> np.ndarray:
        if block not in self._blocks:
            raise KeyError(f"unknown block {block}")
        model = self._check(model)
        if block not in self._active_blocks:
            return np.zeros(self.topology.block_dims[block])
        s = self._residual_weights(model)
        return np.asarray(self._blocks[block].T @ s).ravel() / self._m

    def block_lipschitz(self, block: int, rtol: float = 1e-3, max_iter: int = 10_000) -> float:
        """Upper estimate of the block Lipschitz constant of the gradient.

        Uses power iteration on the block Gram matrix; the logistic curvature
        is bounded by 1/4.
        """
        if block not in self._active_blocks:
            return 0.0
        Aj = self._blocks[block]
        d = Aj.shape[1]
        v = np.random.default_rng(12345).standard_normal(d)
        v /= np.linalg.norm(v)
        est = 0.0
        for _ in range(max_iter):
            w = np.asarray(Aj.T @ (Aj @ v)).ravel()
            new = float(np.linalg.norm(w))
            if new == 0.0:
                break
            v = w / new
            if abs(new - est) <= 1e-3 * rtol * new:
                est = new
                break
            est = new
        scale = 0.25 if self.kind == "logistic" else 1.0
        return scale * est / self._m


@dataclass(frozen=True)
class Regularizer:
    """``h_j(z) = lam * ||z||_1`` restricted to the box ``|z| <= clip``."""

    kind: str = "ell1"
    lam: float = 0.0
    clip: float = math.inf

    def __post_init__(self):
        if self.kind not in ("none", "ell1"):
            raise ValueError(f"unknown regularizer {self.kind!r}")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if not self.clip > 0:
            raise ValueError("clip bound must be > 0")

    @property
    def weight(self) -> float:
        return self.lam if self.kind == "ell1" else 0.0

    def value(self, z) -> float:
        return self.weight * float(np.abs(z).sum())

    def prox(self, v, mu: float) -> np.ndarray:
        """``argmin_{|u| <= clip} h(u) + mu/2 ||v - u||^2``."""
        if not mu > 0:
            raise ValueError("mu must be > 0")
        v = np.asarray(v, dtype=float)
        lam = self.weight
        if lam > 0:
            v = np.sign(v) * np.maximum(np.abs(v) - lam / mu, 0.0)
        if math.isfinite(self.clip):
            v = np.clip(v, -self.clip, self.clip)
        return v

    def subdiff_distance(self, z, v) -> np.ndarray:
        """Componentwise distance from ``v`` to the subdifferential of h at ``z``."""
        z = np.asarray(z, dtype=float)
        v = np.asarray(v, dtype=float)
        lam = self.weight
        c = self.clip
        at_upper = z >= c
        at_lower = z <= -c
        zero = (z == 0) & ~at_upper & ~at_lower
        interior = ~(at_upper | at_lower | zero)
        out = np.empty_like(v)
        out[interior] = np.abs(v[interior] - lam * np.sign(z[interior]))
        out[zero] = np.maximum(np.abs(v[zero]) - lam, 0.0)
        # the box normal cone opens the subdifferential outward at the bounds
        out[at_upper] = np.maximum(lam - v[at_upper], 0.0)
        out[at_lower] = np.maximum(v[at_lower] + lam, 0.0)
        return out


@dataclass
class Problem:
    """Topology plus one loss per worker and a shared block regularizer."""

    topology: Topology
    losses: list
    reg: Regularizer = field(default_factory=Regularizer)
    block_map: dict | None = None

    def __post_init__(self):
        if len(self.losses) != self.topology.num_workers:
            raise ValueError("one loss oracle per worker required")

    def smooth_value(self, model) -> float:
        return sum(f.value(model) for f in self.losses)

    def objective(self, model) -> float:
        return self.smooth_value(model) + self.reg.value(model)

    def gradient(self, model) -> np.ndarray:
        return sum(f.gradient(model) for f in self.losses)


def make_problem(kind, datasets, topology, lam=0.0, clip=math.inf, block_map=None) -> Problem:
    reg = Regularizer("ell1" if lam > 0 else "none", lam, clip)
    losses = [LossOracle(kind, ds, topology) for ds in datasets]
    return Problem(topology, losses, reg, block_map)


class LibsvmFormatError(ValueError):
    pass


def _open_text(path: Path):
    suffix = path.suffix.lower()
    if suffix in (".gz", ".gzip"):
        return gzip.open(path, "rt")
    if suffix in (".bz2",):
        return bz2.open(path, "rt")
    if suffix in (".xz", ".lzma"):
        return lzma.open(path, "rt")
    return open(path, "r")


def _parse_label(token: str, lineno: int) -> float:
    try:
        y = float(token)
    except ValueError:
        raise LibsvmFormatError(f"line {lineno}: bad label {token!r}") from None
    if y == 0:
        return -1.0
    if y in (-1.0, 1.0):
        return y
    raise LibsvmFormatError(f"line {lineno}: label {token!r} not in {{-1, 0, +1}}")


def read_libsvm(path):
    """Parse a LIBSVM file into ``(rows, cols, vals, labels, max_index)``.

    Indices are 1-based and must be strictly ascending within a line.
    """
    path = Path(path)
    rows, cols, vals, labels = [], [], [], []
    max_index = 0
    with _open_text(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            tokens = line.split()
            y = _parse_label(tokens[0], lineno)
            r = len(labels)
            prev = 0
            for tok in tokens[1:]:
                idx, sep, val = tok.partition(":")
                try:
                    k = int(idx)
                    v = float(val)
                except ValueError:
                    raise LibsvmFormatError(f"line {lineno}: malformed entry {tok!r}") from None
                if not sep or k < 1:
                    raise LibsvmFormatError(f"line {lineno}: malformed entry {tok!r}")
                if k <= prev:
                    raise LibsvmFormatError(f"line {lineno}: indices not ascending at {k}")
                if not math.isfinite(v):
                    raise LibsvmFormatError(f"line {lineno}: non-finite value {val!r}")
                prev = k
                rows.append(r)
                cols.append(k - 1)
                vals.append(v)
            max_index = max(max_index, prev)
            labels.append(y)
    if not labels:
        raise LibsvmFormatError(f"{path}: no samples")
    return rows, cols, vals, np.array(labels), max_index


def load_libsvm(path, num_shards: int, block_width: int, num_features: int | None = None):
    """Read a LIBSVM file and shard it round-robin over ``num_shards`` workers.

    Features are grouped into contiguous ranges of ``block_width``. Ranges with
    no nonzero in any sample are dropped, since no worker depends on them; the
    returned ``block_map`` gives the original feature range of each kept block.
    Edge ``(i, j)`` exists iff shard ``i`` has a nonzero feature in block ``j``.

    Returns ``(topology, datasets, block_map)``.
    """
    if num_shards < 1 or block_width < 1:
        raise ValueError("num_shards and block_width must be >= 1")
    rows, cols, vals, labels, max_index = read_libsvm(path)
    n = len(labels)
    if n < num_shards:
        raise ValueError(f"{n} samples cannot fill {num_shards} shards")
    d = max_index if num_features is None else num_features
    if d < max_index:
        raise ValueError(f"num_features={d} below largest index {max_index}")
    full = sp.csr_matrix((vals, (rows, cols)), shape=(n, max(d, 1)))

    n_ranges = max(1, -(-d // block_width))
    used = np.zeros(n_ranges, dtype=bool)
    used[np.unique(np.asarray(cols, dtype=int) // block_width)] = True
    kept = np.flatnonzero(used)
    block_map = {}
    keep_cols = []
    for new_j, r in enumerate(kept):
        lo, hi = r * block_width, min((r + 1) * block_width, d)
        block_map[new_j] = (int(lo), int(hi))
        keep_cols.extend(range(lo, hi))
    full = full[:, keep_cols]
    dims = [hi - lo for lo, hi in block_map.values()]
    starts = np.concatenate([[0], np.cumsum(dims)])

    edges = set()
    shards = []
    for i in range(num_shards):
        idx = np.arange(i, n, num_shards)
        A = full[idx]
        active = np.unique(A.indices)
        for j in np.unique(np.searchsorted(starts, active, side="right") - 1):
            edges.add((i, int(j)))
        shards.append((A, labels[idx]))
    topology = build_topology(edges, dims, num_workers=num_shards)
    datasets = [LocalDataset(A, y) for A, y in shards]
    return topology, datasets, block_map
