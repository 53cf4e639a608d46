"""Convergence diagnostics over snapshots of the distributed state."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import RunConfig
from .problems import Problem


@dataclass
class Snapshot:
    """Copies of every ``x_{i,j}``, ``y_{i,j}`` (keyed by edge) and ``z_j``.

    ``consistency`` is ``"global"`` for snapshots taken with no update in
    flight and ``"per-block"`` when blocks were read independently.
    """

    epoch: int
    x: dict
    y: dict
    z: dict
    objective: float = math.nan
    timestamp: float = 0.0
    consistency: str = "global"

    def z_full(self, topology) -> np.ndarray:
        return topology.join(self.z)

    def local_vector(self, topology, worker) -> np.ndarray:
        out = np.zeros(topology.dim)
        for j in topology.blocks_of(worker):
            out[topology.block_slice(j)] = self.x[(worker, j)]
        return out

    def check_complete(self, topology) -> None:
        missing = topology.edges - set(self.x) | topology.edges - set(self.y)
        if missing or set(self.z) != set(range(topology.num_blocks)):
            raise ValueError(f"incomplete snapshot, missing edges {sorted(missing)}")


def capture(workers, servers, problem: Problem, epoch: int, dirty: bool = False,
            consistency: str = "global") -> Snapshot:
    x, y = {}, {}
    for w in workers:
        for j in w.blocks:
            x[(w.worker_id, j)] = np.array(w.x[j])
            y[(w.worker_id, j)] = np.array(w.y[j])
    z = {s.block_id: np.array(s.z_dirty if dirty else s.z) for s in servers}
    snap = Snapshot(epoch, x, y, z, timestamp=time.time(), consistency=consistency)
    snap.objective = problem.objective(snap.z_full(problem.topology))
    return snap


def augmented_lagrangian(snap: Snapshot, problem: Problem, config: RunConfig) -> float:
    top = problem.topology
    total = sum(f.value(snap.local_vector(top, i)) for i, f in enumerate(problem.losses))
    total += problem.reg.value(snap.z_full(top))
    for (i, j) in top.sorted_edges():
        r = snap.x[(i, j)] - snap.z[j]
        total += float(snap.y[(i, j)] @ r) + 0.5 * config.edge_rho(i, j) * float(r @ r)
    return total


def _x_gradients(snap: Snapshot, problem: Problem):
    top = problem.topology
    grads = {}
    for i, f in enumerate(problem.losses):
        g = f.gradient(snap.local_vector(top, i))
        for j in top.blocks_of(i):
            grads[(i, j)] = g[top.block_slice(j)]
    return grads


def stationarity_P(snap: Snapshot, problem: Problem, config: RunConfig,
                   variant: str = "main") -> float:
    """Gradient-mapping style stationarity measure; zero exactly at KKT points.

    ``variant="expanded"`` writes the z-term argument as
    ``z - sum_i rho_i (z - x_ij - y_ij / rho_i)``; algebraically this is the
    same point, so the two agree up to rounding.
    """
    top = problem.topology
    grads = _x_gradients(snap, problem)
    total = 0.0
    for j in range(top.num_blocks):
        zj = snap.z[j]
        if variant == "main":
            gz = np.zeros_like(zj)
            for i in top.workers_of(j):
                gz -= snap.y[(i, j)] + config.edge_rho(i, j) * (snap.x[(i, j)] - zj)
            arg = zj - gz
        elif variant == "expanded":
            arg = zj - sum(config.edge_rho(i, j) * (zj - snap.x[(i, j)]
                                                    - snap.y[(i, j)] / config.edge_rho(i, j))
                           for i in top.workers_of(j))
        else:
            raise ValueError(f"unknown variant {variant!r}")
        d = zj - problem.reg.prox(arg, 1.0)
        total += float(d @ d)
    for (i, j) in top.sorted_edges():
        r = snap.x[(i, j)] - snap.z[j]
        gx = grads[(i, j)] + snap.y[(i, j)] + config.edge_rho(i, j) * r
        total += float(gx @ gx) + float(r @ r)
    return total


def kkt_residuals(snap: Snapshot, problem: Problem) -> tuple:
    """``(r1, r2, r3)``: stationarity in x, subgradient inclusion in z, consensus."""
    top = problem.topology
    grads = _x_gradients(snap, problem)
    r1 = max(float(np.linalg.norm(grads[e] + snap.y[e])) for e in top.edges)
    r2 = 0.0
    for j in range(top.num_blocks):
        ysum = sum(snap.y[(i, j)] for i in top.workers_of(j))
        r2 = max(r2, float(np.linalg.norm(problem.reg.subdiff_distance(snap.z[j], ysum))))
    r3 = max(float(np.linalg.norm(snap.x[(i, j)] - snap.z[j])) for i, j in top.edges)
    return r1, r2, r3


def successive_differences(snaps) -> dict:
    """Max-over-blocks/edges norms of ``z``, ``x``, ``y`` changes between samples."""
    out = {"z": [], "x": [], "y": []}
    for a, b in zip(snaps, snaps[1:]):
        out["z"].append(max(float(np.linalg.norm(b.z[j] - a.z[j])) for j in a.z))
        out["x"].append(max(float(np.linalg.norm(b.x[e] - a.x[e])) for e in a.x))
        out["y"].append(max(float(np.linalg.norm(b.y[e] - a.y[e])) for e in a.y))
    return out


@dataclass
class TheoremParams:
    """Inputs to the hyperparameter conditions, keyed by edge/worker/block."""

    lipschitz: dict
    rho: dict
    delay: dict
    gamma: float
    workers_of: dict
    blocks_of: dict
    f_lower: float = 0.0

    @classmethod
    def from_problem(cls, problem: Problem, config: RunConfig, f_lower: float = 0.0,
                     lipschitz: dict | None = None) -> "TheoremParams":
        top = problem.topology
        if lipschitz is None:
            lipschitz = {(i, j): problem.losses[i].block_lipschitz(j) for i, j in top.edges}
        return cls(
            lipschitz=dict(lipschitz),
            rho={(i, j): config.edge_rho(i, j) for i, j in top.edges},
            delay={(i, j): config.edge_delay(i, j) for i, j in top.edges},
            gamma=config.gamma,
            workers_of={j: top.workers_of(j) for j in range(top.num_blocks)},
            blocks_of={i: top.blocks_of(i) for i in range(top.num_workers)},
            f_lower=f_lower)

    def alpha(self, j) -> float:
        return self.gamma + self._alpha_rest(j)

    def _alpha_rest(self, j) -> float:
        nbrs = self.workers_of[j]
        # the lone rho_i term has no bound index; take the smallest neighbor value
        lead = min(self.rho[(i, j)] for i in nbrs)
        penalty = 0.0
        for i in nbrs:
            L, rho, T = self.lipschitz[(i, j)], self.rho[(i, j)], self.delay[(i, j)]
            penalty += (0.5 + 1.0 / rho) * L ** 2 * (T + 1) ** 2
            penalty += (4 * L + rho + 1) * T ** 2 / 2
        return lead - penalty

    def beta(self, i) -> float:
        blocks = self.blocks_of[i]
        rho = min(self.rho[(i, j)] for j in blocks)
        Lmax = max(self.lipschitz[(i, j)] for j in blocks)
        return (rho - 4 * Lmax) / (2 * len(blocks))


@dataclass
class ConditionReport:
    passed: bool
    values: dict
    violations: list = field(default_factory=list)
    repairs: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def check_theorem1(params: TheoremParams, L0: float) -> ConditionReport:
    """Check the step-size conditions for the asynchronous method.

    ``repairs`` maps each failing block to the gamma at which its alpha
    reaches zero; any strictly larger gamma repairs it with rho held fixed.
    """
    values = {"alpha": {}, "beta": {}, "L0_minus_f_lower": L0 - params.f_lower}
    violations, repairs = [], {}
    if not (math.isfinite(L0) and L0 - params.f_lower >= 0):
        violations.append(f"L0 - f_lower = {L0 - params.f_lower} not in [0, inf)")
    for j in sorted(params.workers_of):
        a = params.alpha(j)
        values["alpha"][j] = a
        if not a > 0:
            violations.append(f"alpha[{j}] = {a:.6g} <= 0")
            repairs[j] = -params._alpha_rest(j)
    for i in sorted(params.blocks_of):
        b = params.beta(i)
        values["beta"][i] = b
        if not b > 0:
            violations.append(f"beta[{i}] = {b:.6g} <= 0")
    return ConditionReport(not violations, values, violations, repairs)


def minimal_gamma(params: TheoremParams, margin: float = 1.0) -> float:
    """Smallest gamma with every alpha at least ``margin``."""
    return max(0.0, max(margin - params._alpha_rest(j) for j in params.workers_of))


def check_theorem2(params: TheoremParams, schedule, L0: float | None = None) -> ConditionReport:
    """Per-edge conditions for filtered pushes, at t = 1 where the threshold peaks."""
    delta1 = schedule.threshold(1)
    values = {"alpha_prime": {}, "beta_prime": {}, "delta_1": delta1}
    violations = []
    if L0 is not None and not (math.isfinite(L0) and L0 - params.f_lower >= 0):
        violations.append(f"L0 - f_lower = {L0 - params.f_lower} not in [0, inf)")
    for e in sorted(params.lipschitz):
        L, rho, T = params.lipschitz[e], params.rho[e], params.delay[e]
        a = ((rho + params.gamma - delta1) / 2
             - (7 * L / (2 * rho ** 2) + 1 / rho) * L ** 2 * (T + 1) ** 2 - T ** 2 / 2)
        b = rho / 4 - 3 * L
        key = f"{e[0]},{e[1]}"
        values["alpha_prime"][key] = a
        values["beta_prime"][key] = b
        if not a > 0:
            violations.append(f"alpha'[{key}] = {a:.6g} <= 0")
        if not b > 0:
            violations.append(f"beta'[{key}] = {b:.6g} <= 0")
    return ConditionReport(not violations, values, violations)


def t_epsilon(p_values, eps: float):
    """Index of the first sample with ``P <= eps``, or ``None``."""
    for k, p in enumerate(p_values):
        if p <= eps:
            return k
    return None
