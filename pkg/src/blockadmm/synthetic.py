"""Synthetic sparse instances with a planted model, and the standard fixtures."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .core import Topology, build_topology
from .problems import LocalDataset, Problem, make_problem


@dataclass
class SyntheticInstance:
    topology: Topology
    datasets: list
    truth: np.ndarray
    kind: str

    def problem(self, lam=0.0, clip=math.inf) -> Problem:
        return make_problem(self.kind, self.datasets, self.topology, lam, clip)


def generate_synthetic(num_workers: int, num_blocks: int, block_width: int,
                       samples_per_worker: int, density: float = 1.0, noise: float = 0.0,
                       seed: int = 0, kind: str = "least-squares",
                       model_density: float = 0.5, blocks_per_worker: int | None = None,
                       edges=None) -> SyntheticInstance:
    """Deterministic sparse regression/classification instance.

    Each worker's samples only use features from ``blocks_per_worker``
    consecutive blocks (wrapping around) when given, otherwise from all
    blocks, or from exactly its blocks in ``edges`` when an edge set is
    given. Entries are standard normal, kept with probability ``density``;
    every sample and every block keeps at least one nonzero. Labels come from
    a planted model with ``model_density`` nonzeros: ``A x + noise`` for
    least squares, the sign of it for logistic.
    """
    for name, v in (("num_workers", num_workers), ("num_blocks", num_blocks),
                    ("block_width", block_width), ("samples_per_worker", samples_per_worker)):
        if v < 1:
            raise ValueError(f"{name} must be >= 1")
    if not 0 < density <= 1:
        raise ValueError("density must be in (0, 1]")
    rng = np.random.default_rng(seed)
    dim = num_blocks * block_width
    truth = rng.standard_normal(dim) * (rng.random(dim) < model_density)
    if not truth.any():
        truth[rng.integers(dim)] = 1.0
    span = num_blocks if blocks_per_worker is None else min(blocks_per_worker, num_blocks)

    shards = []
    covered = np.zeros(dim, dtype=bool)
    for i in range(num_workers):
        if edges is not None:
            blocks = sorted(j for w, j in edges if w == i)
        else:
            blocks = [(i + k) % num_blocks for k in range(span)]
        cols = np.concatenate([np.arange(j * block_width, (j + 1) * block_width)
                               for j in blocks])
        m = samples_per_worker
        vals = rng.standard_normal((m, cols.size))
        mask = rng.random((m, cols.size)) < density
        for r in np.flatnonzero(~mask.any(axis=1)):
            mask[r, rng.integers(cols.size)] = True
        dense = np.zeros((m, dim))
        dense[:, cols] = vals * mask
        covered |= dense.any(axis=0)
        shards.append(dense)
    # give every block at least one nonzero somewhere
    for j in range(num_blocks):
        sl = slice(j * block_width, (j + 1) * block_width)
        if not covered[sl].any():
            owners = [i for i in range(num_workers) if edges is None or (i, j) in edges]
            i = owners[j % len(owners)] if owners else j % num_workers
            shards[i][rng.integers(samples_per_worker), j * block_width] = rng.standard_normal()

    datasets, found = [], set()
    for i, dense in enumerate(shards):
        u = dense @ truth
        if kind == "least-squares":
            y = u + noise * rng.standard_normal(u.size)
        elif kind == "logistic":
            y = np.where(u + noise * rng.standard_normal(u.size) >= 0, 1.0, -1.0)
        else:
            raise ValueError(f"unknown kind {kind!r}")
        A = sp.csr_matrix(dense)
        datasets.append(LocalDataset(A, y))
        for j in np.unique(A.indices // block_width):
            found.add((i, int(j)))
    topology = build_topology(found, [block_width] * num_blocks, num_workers=num_workers)
    return SyntheticInstance(topology, datasets, truth, kind)


def convex_fixture() -> Problem:
    """LASSO on a ring: 4 workers, 4 blocks of width 2, each worker touching
    two neighbouring blocks, 20 noisy samples per worker, lambda = 0.05."""
    inst = generate_synthetic(4, 4, 2, 20, density=1.0, noise=0.1, seed=7,
                              blocks_per_worker=2)
    return inst.problem(lam=0.05)


def lasso_fixture() -> Problem:
    """50 samples x 20 features least squares with lambda = 0.1, split over
    2 workers and 4 blocks of width 5."""
    inst = generate_synthetic(2, 4, 5, 25, density=1.0, noise=0.1, seed=11)
    return inst.problem(lam=0.1)


def logistic_fixture() -> Problem:
    """Sparse logistic regression, 4 workers x 4 blocks, 30 samples each."""
    inst = generate_synthetic(4, 4, 3, 30, density=0.4, noise=0.5, seed=3, kind="logistic")
    return inst.problem(lam=0.01, clip=1e4)
