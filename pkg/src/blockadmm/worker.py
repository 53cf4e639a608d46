"""Worker side: block selection, linearized primal step, dual step and pushes."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .core import Message, MessageKind, RunConfig, Topology

IDENTITY_TOL = 1e-10


class InvariantError(AssertionError):
    """A runtime algebraic identity was violated."""


class EpochError(RuntimeError):
    """A worker epoch could not complete because the transport failed."""


@dataclass
class WorkerState:
    worker_id: int
    blocks: tuple
    rho: dict
    x: dict
    y: dict
    z_cache: dict
    z_version: dict
    prev_push: dict
    z_full: np.ndarray
    slices: dict
    rng: np.random.Generator
    epoch: int = 0
    cycle: list = field(default_factory=list)
    max_identity_residual: float = 0.0

    def edge_rho(self, block):
        return self.rho[block]


@dataclass
class EpochReport:
    worker: int
    epoch: int
    blocks: tuple
    filtered: tuple
    staleness: dict
    wall_ns: int


def worker_rng(seed: int, worker: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(worker)])


def init_worker(worker: int, topology: Topology, config: RunConfig, z0=None) -> WorkerState:
    """Fresh worker holding ``x = z0`` and ``y = 0`` on its edges.

    ``prev_push`` starts at zero, which is what every server holds for the
    worker before its first push.
    """
    blocks = topology.blocks_of(worker)
    z0 = np.zeros(topology.dim) if z0 is None else np.asarray(z0, dtype=float)
    z_full = np.zeros(topology.dim)
    slices = {j: topology.block_slice(j) for j in blocks}
    x, y, zc, prev = {}, {}, {}, {}
    for j in blocks:
        v = np.array(z0[slices[j]])
        zc[j] = v
        x[j] = v.copy()
        y[j] = np.zeros_like(v)
        prev[j] = np.zeros_like(v)
        z_full[slices[j]] = v
    return WorkerState(
        worker_id=worker, blocks=blocks,
        rho={j: config.edge_rho(worker, j) for j in blocks},
        x=x, y=y, z_cache=zc, z_version={j: 0 for j in blocks},
        prev_push=prev, z_full=z_full, slices=slices,
        rng=worker_rng(config.seed, worker))


def select_block(state: WorkerState, order: str = "random"):
    """Pick the block(s) to update this epoch.

    ``random`` draws uniformly from the worker's blocks, ``cyclic`` walks
    them in order restarting from a random position after each pass, and
    ``sweep`` returns every block (the synchronous full update).
    """
    blocks = state.blocks
    if order == "sweep":
        return blocks
    if len(blocks) == 1:
        return (blocks[0],)
    if order == "random":
        return (blocks[int(state.rng.integers(len(blocks)))],)
    if not state.cycle:
        start = int(state.rng.integers(len(blocks)))
        state.cycle = list(blocks[start:] + blocks[:start])
    return (state.cycle.pop(0),)


def primal_update(state: WorkerState, block: int, grad) -> np.ndarray:
    x = state.z_cache[block] - (grad + state.y[block]) / state.rho[block]
    state.x[block] = x
    return x


def dual_update(state: WorkerState, block: int) -> np.ndarray:
    y = state.y[block] + state.rho[block] * (state.x[block] - state.z_cache[block])
    state.y[block] = y
    return y


def make_push(state: WorkerState, block: int, delta_mode: bool = False,
              threshold: float = 0.0) -> Message | None:
    """Build the push for ``block``, or ``None`` if the significance filter drops it.

    The filter compares the max-norm of the change since the last transmitted
    value against ``threshold``; a zero threshold never filters.
    """
    w = state.rho[block] * state.x[block] + state.y[block]
    change = w - state.prev_push[block]
    if threshold > 0 and float(np.max(np.abs(change))) <= threshold:
        return None
    state.prev_push[block] = w
    if delta_mode:
        return Message(MessageKind.PUSH_DELTA, state.worker_id, block, change, state.epoch)
    return Message(MessageKind.PUSH_W, state.worker_id, block, w, state.epoch)


def set_cache(state: WorkerState, block: int, values, version: int) -> None:
    state.z_cache[block] = values
    state.z_version[block] = version
    state.z_full[state.slices[block]] = values


def refresh(state: WorkerState, transport) -> dict:
    """Pull every block the worker touches; returns staleness per block."""
    staleness = {}
    for j in state.blocks:
        values, version, tau = transport.pull(state.worker_id, j)
        set_cache(state, j, values, version)
        staleness[j] = tau
    return staleness


def update_blocks(state: WorkerState, oracle, config: RunConfig, blocks) -> list:
    """Primal/dual updates and push construction for ``blocks``.

    All gradients are taken at the current cache before any block changes.
    Returns ``(block, message_or_None)`` pairs.
    """
    grads = [(j, oracle.block_gradient(state.z_full, j)) for j in blocks]
    t_next = state.epoch + 1
    threshold = config.filter_schedule.threshold(t_next)
    out = []
    for j, g in grads:
        primal_update(state, j, g)
        y = dual_update(state, j)
        if config.check_identity:
            resid = float(np.max(np.abs(g + y))) if g.size else 0.0
            state.max_identity_residual = max(state.max_identity_residual, resid)
            scale = max(1.0, float(np.max(np.abs(g))) if g.size else 0.0)
            if resid > IDENTITY_TOL * scale:
                raise InvariantError(
                    f"worker {state.worker_id} block {j}: |grad + y| = {resid:.3e}")
        out.append((j, make_push(state, j, config.delta_push, threshold)))
    state.epoch = t_next
    return out


def worker_epoch(state: WorkerState, oracle, transport, config: RunConfig,
                 pull: bool = True, order: str | None = None) -> EpochReport:
    """One pass of the worker loop: select, update, push and (optionally) pull."""
    t0 = time.perf_counter_ns()
    blocks = select_block(state, order or config.block_order)
    results = update_blocks(state, oracle, config, blocks)
    try:
        for _, msg in results:
            if msg is not None:
                transport.push(msg)
        staleness = refresh(state, transport) if pull else {}
    except Exception as exc:
        raise EpochError(f"worker {state.worker_id} epoch {state.epoch}: {exc}") from exc
    return EpochReport(state.worker_id, state.epoch, tuple(blocks),
                       tuple(m is None for _, m in results), staleness,
                       time.perf_counter_ns() - t0)
