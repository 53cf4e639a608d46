"""Shared domain types: worker/block topology, run configuration and messages."""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np


class TopologyError(ValueError):
    """Raised when an edge set or block layout is inconsistent."""


class ConfigError(ValueError):
    """Raised for invalid run configurations."""


@dataclass(frozen=True)
class Topology:
    """Bipartite graph between workers and model blocks.

    ``edges`` holds the ``(worker, block)`` pairs for which the worker's loss
    depends on the block. The neighbor views ``worker_blocks`` and
    ``block_workers`` are derived once at construction.
    """

    num_workers: int
    num_blocks: int
    edges: frozenset
    block_dims: tuple

    worker_blocks: tuple = field(init=False, repr=False, compare=False)
    block_workers: tuple = field(init=False, repr=False, compare=False)
    offsets: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.num_workers < 1 or self.num_blocks < 1:
            raise TopologyError("need at least one worker and one block")
        if len(self.block_dims) != self.num_blocks:
            raise TopologyError(
                f"{len(self.block_dims)} block dims given for {self.num_blocks} blocks")
        for j, d in enumerate(self.block_dims):
            if int(d) < 1:
                raise TopologyError(f"block {j} has dimension {d} < 1")
        wb = [[] for _ in range(self.num_workers)]
        bw = [[] for _ in range(self.num_blocks)]
        for i, j in self.edges:
            if not 0 <= i < self.num_workers:
                raise TopologyError(f"worker id {i} out of range")
            if not 0 <= j < self.num_blocks:
                raise TopologyError(f"block id {j} out of range")
            wb[i].append(j)
            bw[j].append(i)
        for i, blocks in enumerate(wb):
            if not blocks:
                raise TopologyError(f"orphan worker {i}")
        for j, workers in enumerate(bw):
            if not workers:
                raise TopologyError(f"orphan block {j}")
        offsets = np.concatenate([[0], np.cumsum(self.block_dims)]).astype(int)
        object.__setattr__(self, "worker_blocks", tuple(tuple(sorted(b)) for b in wb))
        object.__setattr__(self, "block_workers", tuple(tuple(sorted(w)) for w in bw))
        object.__setattr__(self, "offsets", tuple(int(o) for o in offsets))

    @property
    def dim(self) -> int:
        return self.offsets[-1]

    def blocks_of(self, worker: int) -> tuple:
        return self.worker_blocks[worker]

    def workers_of(self, block: int) -> tuple:
        return self.block_workers[block]

    def block_slice(self, block: int) -> slice:
        return slice(self.offsets[block], self.offsets[block + 1])

    def sorted_edges(self) -> list:
        return sorted(self.edges)

    def split(self, full: np.ndarray) -> dict:
        """Cut a full model vector into per-block copies."""
        return {j: np.array(full[self.block_slice(j)], dtype=float)
                for j in range(self.num_blocks)}

    def join(self, blocks: Mapping[int, np.ndarray]) -> np.ndarray:
        out = np.zeros(self.dim)
        for j, v in blocks.items():
            out[self.block_slice(j)] = v
        return out


def build_topology(edge_list: Iterable, block_dims, num_workers: int | None = None) -> Topology:
    """Validate an edge list and block sizes and return a :class:`Topology`.

    ``num_workers`` defaults to one more than the largest worker id seen.
    """
    edges = frozenset((int(i), int(j)) for i, j in edge_list)
    dims = tuple(int(d) for d in block_dims)
    if num_workers is None:
        num_workers = 1 + max((i for i, _ in edges), default=-1)
        if num_workers == 0:
            raise TopologyError("empty edge list and no worker count")
    return Topology(int(num_workers), len(dims), edges, dims)


class Mode(str, enum.Enum):
    SYNC = "sync"
    ASYNC_SIM = "async-sim"
    ASYNC_THREADS = "async-threads"


@dataclass(frozen=True)
class FilterSchedule:
    """Significance-filter threshold rule: ``off``, ``const`` (c) or ``decay`` (c/t)."""

    kind: str = "off"
    c: float = 0.0

    def __post_init__(self):
        if self.kind not in ("off", "const", "decay"):
            raise ConfigError(f"unknown filter kind {self.kind!r}")
        if self.c < 0 or not math.isfinite(self.c):
            raise ConfigError("filter constant must be finite and >= 0")

    def threshold(self, t: int) -> float:
        if self.kind == "off":
            return 0.0
        if self.kind == "const":
            return self.c
        return self.c / max(t, 1)

    @classmethod
    def parse(cls, text: str) -> "FilterSchedule":
        text = text.strip()
        if text == "off":
            return cls()
        kind, sep, value = text.partition(":")
        if not sep:
            raise ConfigError(f"filter must be off, const:c or decay:c, got {text!r}")
        try:
            c = float(value)
        except ValueError:
            raise ConfigError(f"bad filter constant {value!r}") from None
        return cls(kind, c)

    def __str__(self):
        return "off" if self.kind == "off" else f"{self.kind}:{self.c!r}"


@dataclass(frozen=True)
class RunConfig:
    """All solver hyperparameters and mode switches.

    ``rho`` is either one value for every worker or a per-worker sequence;
    ``rho_edges`` optionally overrides it for single ``(worker, block)`` edges.
    ``delay_bound`` is a uniform staleness cap or a mapping from edge to cap.
    """

    rho: float | tuple = 100.0
    gamma: float = 0.01
    lam: float = 0.0
    clip: float = 1e4
    delay_bound: int | Mapping = 0
    filter_schedule: FilterSchedule = FilterSchedule()
    delta_push: bool = False
    mode: Mode = Mode.ASYNC_SIM
    seed: int = 0
    max_epochs: int = 100
    tolerance: float = 1e-6
    rho_edges: Mapping | None = None
    # simulator / diagnostics knobs
    delay_distribution: str = "uniform"
    fixed_delay: int = 0
    schedule: str = "random"
    block_order: str = "random"
    mu_rule: str = "damped"
    check_identity: bool = False
    metric_every: int = 100
    commit_metrics: bool = True
    kill_staleness: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if isinstance(self.rho, (list, tuple, np.ndarray)):
            object.__setattr__(self, "rho", tuple(float(r) for r in self.rho))
            rhos = self.rho
        else:
            object.__setattr__(self, "rho", float(self.rho))
            rhos = (self.rho,)
        if any(not (r > 0 and math.isfinite(r)) for r in rhos):
            raise ConfigError("rho must be finite and > 0")
        if self.rho_edges:
            edges = {(int(i), int(j)): float(r) for (i, j), r in self.rho_edges.items()}
            if any(r <= 0 for r in edges.values()):
                raise ConfigError("per-edge rho must be > 0")
            object.__setattr__(self, "rho_edges", edges)
        if not (self.gamma >= 0 and math.isfinite(self.gamma)):
            raise ConfigError("gamma must be finite and >= 0")
        if not (self.lam >= 0 and math.isfinite(self.lam)):
            raise ConfigError("lambda must be finite and >= 0")
        if not self.clip > 0:
            raise ConfigError("clip bound C must be > 0")
        if isinstance(self.delay_bound, Mapping):
            bounds = {(int(i), int(j)): int(t) for (i, j), t in self.delay_bound.items()}
            object.__setattr__(self, "delay_bound", bounds)
            values = bounds.values()
        else:
            object.__setattr__(self, "delay_bound", int(self.delay_bound))
            values = (self.delay_bound,)
        if any(t < 0 for t in values):
            raise ConfigError("delay bound must be >= 0")
        if self.mode is Mode.SYNC:
            if any(t != 0 for t in values):
                raise ConfigError("synchronous mode requires delay_bound = 0")
        elif self.gamma == 0:
            raise ConfigError("gamma = 0 is only allowed in synchronous mode")
        if isinstance(self.filter_schedule, str):
            object.__setattr__(self, "filter_schedule", FilterSchedule.parse(self.filter_schedule))
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if not self.tolerance > 0:
            raise ConfigError("tolerance must be > 0")
        if self.delay_distribution not in ("uniform", "fixed", "max"):
            raise ConfigError(f"unknown delay distribution {self.delay_distribution!r}")
        if self.schedule not in ("random", "barrier"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.block_order not in ("random", "cyclic", "sweep"):
            raise ConfigError(f"unknown block order {self.block_order!r}")
        if self.mu_rule not in ("damped", "plain"):
            raise ConfigError(f"unknown mu rule {self.mu_rule!r}")
        if self.metric_every < 1:
            raise ConfigError("metric_every must be >= 1")

    def worker_rho(self, worker: int) -> float:
        if isinstance(self.rho, tuple):
            return self.rho[worker]
        return self.rho

    def edge_rho(self, worker: int, block: int) -> float:
        if self.rho_edges and (worker, block) in self.rho_edges:
            return self.rho_edges[(worker, block)]
        return self.worker_rho(worker)

    def edge_delay(self, worker: int, block: int) -> int:
        if isinstance(self.delay_bound, dict):
            return self.delay_bound.get((worker, block), 0)
        return self.delay_bound

    def max_delay(self) -> int:
        if isinstance(self.delay_bound, dict):
            return max(self.delay_bound.values(), default=0)
        return self.delay_bound

    def validate_for(self, topology: Topology) -> None:
        if isinstance(self.rho, tuple) and len(self.rho) != topology.num_workers:
            raise ConfigError(
                f"{len(self.rho)} rho values for {topology.num_workers} workers")
        for table, name in ((self.rho_edges, "rho"), (self.delay_bound, "delay")):
            if isinstance(table, dict):
                extra = set(table) - topology.edges
                if extra:
                    raise ConfigError(f"per-edge {name} for non-edges {sorted(extra)}")

    def replace(self, **changes) -> "RunConfig":
        import dataclasses

        return dataclasses.replace(self, **changes)


class MessageKind(enum.IntEnum):
    PUSH_W = 0
    PUSH_DELTA = 1
    PULL_REQUEST = 2
    PULL_REPLY = 3


_CARRIES_PAYLOAD = {MessageKind.PUSH_W, MessageKind.PUSH_DELTA, MessageKind.PULL_REPLY}
_HEADER = struct.Struct("<BqqqI")


@dataclass(frozen=True, eq=False)
class Message:
    """A worker/server message. Payload arrays are float64 block vectors."""

    kind: MessageKind
    sender: int
    block_id: int
    payload: np.ndarray | None
    epoch_tag: int

    def __post_init__(self):
        object.__setattr__(self, "kind", MessageKind(self.kind))
        if (self.payload is not None) != (self.kind in _CARRIES_PAYLOAD):
            raise ValueError(f"{self.kind.name} payload presence mismatch")

    @property
    def is_push(self) -> bool:
        return self.kind in (MessageKind.PUSH_W, MessageKind.PUSH_DELTA)

    def to_bytes(self) -> bytes:
        data = b"" if self.payload is None else np.ascontiguousarray(
            self.payload, dtype="<f8").tobytes()
        n = 0 if self.payload is None else self.payload.size
        return _HEADER.pack(int(self.kind), self.sender, self.block_id, self.epoch_tag, n) + data

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Message":
        kind, sender, block, tag, n = _HEADER.unpack_from(raw)
        payload = None
        if MessageKind(kind) in _CARRIES_PAYLOAD:
            payload = np.frombuffer(raw, dtype="<f8", count=n, offset=_HEADER.size).astype(float)
        return cls(MessageKind(kind), sender, block, payload, tag)

    def __eq__(self, other):
        if not isinstance(other, Message):
            return NotImplemented
        same_payload = (self.payload is None and other.payload is None) or (
            self.payload is not None and other.payload is not None
            and self.payload.tobytes() == other.payload.tobytes())
        return (self.kind, self.sender, self.block_id, self.epoch_tag) == (
            other.kind, other.sender, other.block_id, other.epoch_tag) and same_payload

    __hash__ = None
