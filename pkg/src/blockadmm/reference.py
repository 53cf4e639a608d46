"""Centralised proximal-gradient solver used as an independent optimum oracle."""

from __future__ import annotations

import numpy as np

from .problems import Problem


def lipschitz_bound(problem: Problem) -> float:
    """Spectral bound on the full smooth gradient via a dense eigen-solve."""
    total = 0.0
    for f in problem.losses:
        A = f.dataset.features.toarray()
        scale = 0.25 if f.kind == "logistic" else 1.0
        total += scale * float(np.linalg.eigvalsh(A.T @ A)[-1]) / f.dataset.m
    return total


def solve_reference(problem: Problem, x0=None, tol: float = 1e-13,
                    max_iter: int = 200_000) -> np.ndarray:
    """Minimise ``sum_i f_i(x) + h(x)`` over the whole vector with FISTA.

    Uses gradient-based adaptive restart; stops when an iterate moves by less
    than ``tol`` in max-norm.
    """
    L = lipschitz_bound(problem)
    step = 1.0 / L
    x = np.zeros(problem.topology.dim) if x0 is None else np.array(x0, dtype=float)
    v, t = x.copy(), 1.0
    for _ in range(max_iter):
        g = problem.gradient(v)
        x_new = problem.reg.prox(v - step * g, 1.0 / step)
        if np.max(np.abs(x_new - x)) < tol:
            return x_new
        if (v - x_new) @ (x_new - x) > 0:
            t = 1.0
        t_new = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        v = x_new + ((t - 1) / t_new) * (x_new - x)
        x, t = x_new, t_new
    return x
