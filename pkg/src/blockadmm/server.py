"""Server side: per-block consensus step over cached worker pushes."""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field

import numpy as np

from .core import Message, MessageKind, RunConfig, Topology
from .problems import Regularizer


class NotANeighbor(ValueError):
    """A push or pull arrived over a non-existent edge."""


@dataclass
class ServerState:
    block_id: int
    neighbors: tuple
    rho: dict
    gamma: float
    reg: Regularizer
    delta_mode: bool
    mu_rule: str
    z: np.ndarray
    z_dirty: np.ndarray
    w_cache: dict
    s: np.ndarray
    received_since_commit: set = field(default_factory=set)
    version: int = 0
    commits: int = 0
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    @property
    def rho_sum(self) -> float:
        return sum(self.rho.values())

    @property
    def mu(self) -> float:
        # the plain variant leaves gamma out of the prox weight
        if self.mu_rule == "plain":
            return self.rho_sum
        return self.gamma + self.rho_sum


def init_server(block: int, topology: Topology, config: RunConfig, initial_z=None,
                reg: Regularizer | None = None) -> ServerState:
    d = topology.block_dims[block]
    if reg is None:
        reg = Regularizer("ell1" if config.lam > 0 else "none", config.lam, config.clip)
    if initial_z is None:
        z0 = np.zeros(d)
    else:
        z0 = np.array(initial_z, dtype=float).reshape(-1)
        if z0.shape != (d,):
            raise ValueError(f"block {block}: initial z has shape {z0.shape}, expected ({d},)")
        if not np.all(np.isfinite(z0)):
            raise ValueError(f"block {block}: initial z not finite")
        if np.any(np.abs(z0) > reg.clip):
            raise ValueError(f"block {block}: initial z outside [-{reg.clip}, {reg.clip}]")
    neighbors = topology.workers_of(block)
    return ServerState(
        block_id=block, neighbors=neighbors,
        rho={i: config.edge_rho(i, block) for i in neighbors},
        gamma=config.gamma, reg=reg, delta_mode=config.delta_push,
        mu_rule=config.mu_rule, z=z0, z_dirty=z0.copy(),
        w_cache={i: np.zeros(d) for i in neighbors}, s=np.zeros(d))


def _aggregate(state: ServerState) -> np.ndarray:
    if state.delta_mode:
        return state.s
    total = np.zeros_like(state.z_dirty)
    for i in state.neighbors:
        total = total + state.w_cache[i]
    return total


def receive_push(state: ServerState, msg: Message) -> np.ndarray:
    """Fold a worker push into the dirty copy and commit once all neighbors reported.

    The dirty copy is replaced by a new array rather than written in place, so
    any reference handed out by :func:`serve_pull` stays a consistent version.
    """
    i = msg.sender
    if i not in state.rho:
        raise NotANeighbor(f"block {state.block_id}: push from non-neighbor worker {i}")
    if msg.kind is MessageKind.PUSH_W:
        state.s = state.s + (msg.payload - state.w_cache[i])
        state.w_cache[i] = np.array(msg.payload, dtype=float)
    elif msg.kind is MessageKind.PUSH_DELTA:
        state.s = state.s + msg.payload
        state.w_cache[i] = state.w_cache[i] + msg.payload
    else:
        raise ValueError(f"server cannot apply {msg.kind.name}")
    denom = state.gamma + state.rho_sum
    state.z_dirty = state.reg.prox((state.gamma * state.z_dirty + _aggregate(state)) / denom,
                                   state.mu)
    state.version += 1
    state.received_since_commit.add(i)
    if len(state.received_since_commit) == len(state.neighbors):
        state.z = state.z_dirty
        state.commits += 1
        state.received_since_commit.clear()
    return state.z_dirty


def serve_pull(state: ServerState, requester: int) -> np.ndarray:
    if requester not in state.rho:
        raise NotANeighbor(f"block {state.block_id}: pull from non-neighbor worker {requester}")
    return state.z_dirty


def _enc(a: np.ndarray) -> list:
    return [float(v).hex() for v in a]


def _dec(a: list) -> np.ndarray:
    return np.array([float.fromhex(v) for v in a])


def checkpoint_record(state: ServerState) -> dict:
    return {
        "block": state.block_id,
        "commits": state.commits,
        "version": state.version,
        "z": _enc(state.z),
        "z_dirty": _enc(state.z_dirty),
        "s": _enc(state.s),
        "w_cache": {str(i): _enc(w) for i, w in sorted(state.w_cache.items())},
        "received_since_commit": sorted(state.received_since_commit),
    }


def save_checkpoint(servers, path) -> None:
    """Write one JSON line per block; floats are stored as hex for exact round-trips."""
    with open(path, "w") as fh:
        fh.write("# blockadmm-server-checkpoint v1\n")
        for st in servers:
            fh.write(json.dumps(checkpoint_record(st), sort_keys=True) + "\n")


def load_checkpoint(path, topology: Topology, config: RunConfig) -> list:
    servers = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            rec = json.loads(line)
            st = init_server(rec["block"], topology, config)
            st.commits = rec["commits"]
            st.version = rec["version"]
            st.z = _dec(rec["z"])
            st.z_dirty = _dec(rec["z_dirty"])
            st.s = _dec(rec["s"])
            st.w_cache = {int(i): _dec(w) for i, w in rec["w_cache"].items()}
            st.received_since_commit = set(rec["received_since_commit"])
            servers.append(st)
    return servers


def states_equal(a: ServerState, b: ServerState, atol: float = 0.0) -> bool:
    def close(u, v):
        return u.shape == v.shape and bool(np.all(np.abs(u - v) <= atol))

    return (a.block_id == b.block_id and a.commits == b.commits
            and close(a.z, b.z) and close(a.z_dirty, b.z_dirty) and close(a.s, b.s)
            and a.w_cache.keys() == b.w_cache.keys()
            and all(close(a.w_cache[i], b.w_cache[i]) for i in a.w_cache)
            and a.received_since_commit == b.received_since_commit)
