"""Message layer binding workers to servers.

Three execution modes share the worker and server state machines:

* :func:`run_sync` -- barrier-synchronised full sweeps, no delay.
* :func:`run_async_sim` -- single-threaded seeded interleaving with bounded
  delays on both pulls (stale versions) and pushes (late delivery).
* :func:`run_async_threads` -- one thread per worker and per block, queues as
  channels; staleness is measured rather than enforced.  :func:`replay`
  re-executes a recorded thread run deterministically.
"""

from __future__ import annotations

import csv
import heapq
import math
import queue
import threading
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .core import Message, Mode, RunConfig
from .metrics import Snapshot, capture, stationarity_P
from .problems import Problem
from .server import init_server, receive_push, serve_pull
from .worker import (EpochReport, init_worker, select_block, set_cache, update_blocks,
                     refresh)

CSV_SCHEMA = "# blockadmm-trajectory v1"
CSV_COLUMNS = ["event_index", "epoch", "worker", "block", "kind", "staleness",
               "objective", "P"]


class HistoryUnderflow(RuntimeError):
    pass


class StalenessExceeded(RuntimeError):
    pass


class ReplayError(RuntimeError):
    pass


class DelayModel:
    """Draws staleness values in ``[0, T_ij]`` for each edge.

    ``distribution`` is ``uniform`` over ``{0..T}``, ``fixed`` (always
    ``min(tau, T)``) or ``max`` (always ``T``, the adversarial choice).
    """

    def __init__(self, config: RunConfig, seed_offset: int = 0):
        self.config = config
        self.distribution = config.delay_distribution
        self.fixed = config.fixed_delay
        self.rng = np.random.default_rng([config.seed, 7919, seed_offset])

    def bound(self, worker, block) -> int:
        return self.config.edge_delay(worker, block)

    def draw(self, worker, block) -> int:
        T = self.bound(worker, block)
        if T == 0:
            return 0
        if self.distribution == "uniform":
            return int(self.rng.integers(T + 1))
        if self.distribution == "fixed":
            return min(self.fixed, T)
        return T


class VersionHistory:
    """Ring buffer of the last ``depth`` versions of one block's dirty copy."""

    def __init__(self, depth: int, initial: np.ndarray):
        self.depth = depth
        self.versions = deque([(0, initial)], maxlen=depth)

    @property
    def latest(self) -> int:
        return self.versions[-1][0]

    def append(self, version: int, values: np.ndarray) -> None:
        self.versions.append((version, values))

    def back(self, tau: int):
        """Version ``latest - tau``, clamped to version 0 early in the run."""
        tau = min(tau, self.latest)
        if tau >= len(self.versions):
            raise HistoryUnderflow(
                f"need {tau} versions back, only {len(self.versions)} retained")
        version, values = self.versions[-1 - tau]
        return values, version, tau


def deliver_pull(delay_model: DelayModel, history: VersionHistory, edge) -> tuple:
    """Serve a possibly stale copy; returns ``(values, version, staleness)``."""
    tau = delay_model.draw(*edge)
    values, version, actual = history.back(tau)
    if actual > delay_model.bound(*edge):
        raise AssertionError(f"staleness {actual} exceeds bound on edge {edge}")
    return values, version, actual


@dataclass
class Sample:
    event_index: int
    epoch: int
    kind: str
    objective: float
    P: float
    snapshot: Snapshot


@dataclass
class Trajectory:
    mode: str
    samples: list = field(default_factory=list)
    events: list = field(default_factory=list)
    reports: list = field(default_factory=list)
    workers: list = field(default_factory=list)
    servers: list = field(default_factory=list)
    counts: dict = field(default_factory=lambda: {
        "pushes": 0, "filtered": 0, "delivered": 0, "pulls": 0, "commits": 0})
    wall_seconds: float = 0.0
    diverged: bool = False
    timing: dict = field(default_factory=dict)
    thread_log: "ThreadLog | None" = None

    @property
    def P(self) -> list:
        return [s.P for s in self.samples]

    @property
    def objective(self) -> list:
        return [s.objective for s in self.samples]

    @property
    def final(self) -> Sample:
        return self.samples[-1]

    @property
    def filtered_fraction(self) -> float:
        total = self.counts["pushes"] + self.counts["filtered"]
        return self.counts["filtered"] / total if total else 0.0

    def last_good(self) -> Sample | None:
        for s in reversed(self.samples):
            if math.isfinite(s.objective):
                return s
        return None

    def write_csv(self, path) -> None:
        rows = [(e[0], e[1], e[2], e[3], e[4], e[5], "", "") for e in self.events]
        rows += [(s.event_index, s.epoch, "", "", "sample:" + s.kind, "",
                  repr(s.objective), repr(s.P)) for s in self.samples]
        rows.sort(key=lambda r: (r[0], r[4].startswith("sample")))
        with open(path, "w", newline="") as fh:
            fh.write(CSV_SCHEMA + "\n")
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            w.writerows(rows)


class _Recorder:
    def __init__(self, problem, config, traj, workers, servers):
        self.problem = problem
        self.config = config
        self.traj = traj
        self.workers = workers
        self.servers = servers

    def sample(self, event_index, epoch, kind, consistency="global"):
        snap = capture(self.workers, self.servers, self.problem, epoch,
                       consistency=consistency)
        P = stationarity_P(snap, self.problem, self.config)
        self.traj.samples.append(Sample(event_index, epoch, kind, snap.objective, P, snap))
        if not (math.isfinite(snap.objective) and math.isfinite(P)):
            self.traj.diverged = True
        return P


def _setup(problem: Problem, config: RunConfig, initial_z):
    top = problem.topology
    config.validate_for(top)
    z0 = np.zeros(top.dim) if initial_z is None else np.asarray(initial_z, dtype=float)
    servers = [init_server(j, top, config, z0[top.block_slice(j)], problem.reg)
               for j in range(top.num_blocks)]
    workers = [init_worker(i, top, config, z0) for i in range(top.num_workers)]
    return workers, servers


def run_sync(problem: Problem, config: RunConfig, initial_z=None,
             stop_at_tolerance: bool = False) -> Trajectory:
    """Synchronous block-wise ADMM: every worker updates all its blocks at the
    same cached model, servers aggregate, and all caches refresh at a barrier."""
    if config.mode is not Mode.SYNC:
        config = config.replace(mode=Mode.SYNC, delay_bound=0)
    workers, servers = _setup(problem, config, initial_z)
    traj = Trajectory("sync", workers=workers, servers=servers)
    rec = _Recorder(problem, config, traj, workers, servers)
    t0 = time.perf_counter()
    rec.sample(0, 0, "epoch")
    event = 0
    for t in range(1, config.max_epochs + 1):
        for w in workers:
            start = time.perf_counter_ns()
            results = update_blocks(w, problem.losses[w.worker_id], config, w.blocks)
            for j, msg in results:
                if msg is None:
                    traj.counts["filtered"] += 1
                    continue
                traj.counts["pushes"] += 1
                receive_push(servers[j], msg)
                traj.counts["delivered"] += 1
            traj.events.append((event, t, w.worker_id, "", "epoch", 0))
            traj.reports.append(EpochReport(w.worker_id, w.epoch, w.blocks,
                                            tuple(m is None for _, m in results), {},
                                            time.perf_counter_ns() - start))
            event += 1
        for s in servers:
            if s.received_since_commit or s.z is not s.z_dirty:
                s.z = s.z_dirty
                s.commits += 1
                s.received_since_commit.clear()
            traj.counts["commits"] += 1
        for w in workers:
            for j in w.blocks:
                set_cache(w, j, serve_pull(servers[j], w.worker_id), servers[j].version)
                traj.counts["pulls"] += 1
        P = rec.sample(event, t, "epoch")
        if traj.diverged or (stop_at_tolerance and P <= config.tolerance):
            break
    traj.wall_seconds = time.perf_counter() - t0
    return traj


class SimTransport:
    """In-process transport with delayed FIFO push delivery and stale pulls."""

    def __init__(self, servers, config: RunConfig, traj: Trajectory, on_commit=None):
        self.servers = servers
        self.config = config
        self.traj = traj
        self.delays = DelayModel(config)
        depth = config.max_delay() + 1
        self.histories = [VersionHistory(depth, s.z_dirty) for s in servers]
        self.pending = []
        self.seq = 0
        self.last_due = {}
        self.step = 0
        self.on_commit = on_commit

    def push(self, msg: Message) -> None:
        edge = (msg.sender, msg.block_id)
        due = max(self.step + self.delays.draw(*edge), self.last_due.get(edge, 0))
        self.last_due[edge] = due
        heapq.heappush(self.pending, (due, self.seq, msg))
        self.seq += 1
        self.traj.counts["pushes"] += 1

    def deliver_due(self, step=None) -> None:
        step = self.step if step is None else step
        while self.pending and self.pending[0][0] <= step:
            _, _, msg = heapq.heappop(self.pending)
            self._deliver(msg)

    def drain(self) -> None:
        while self.pending:
            _, _, msg = heapq.heappop(self.pending)
            self._deliver(msg)

    def _deliver(self, msg: Message) -> None:
        srv = self.servers[msg.block_id]
        before = srv.commits
        receive_push(srv, msg)
        self.histories[msg.block_id].append(srv.version, srv.z_dirty)
        self.traj.counts["delivered"] += 1
        self.traj.events.append((len(self.traj.events), msg.epoch_tag, msg.sender,
                                 msg.block_id, "deliver", ""))
        if srv.commits != before:
            self.traj.counts["commits"] += 1
            if self.on_commit is not None:
                self.on_commit(msg.block_id)

    def pull(self, worker: int, block: int):
        serve_pull(self.servers[block], worker)
        self.traj.counts["pulls"] += 1
        return deliver_pull(self.delays, self.histories[block], (worker, block))


def run_async_sim(problem: Problem, config: RunConfig, initial_z=None,
                  keep_reports: bool = True, stop_at_tolerance: bool = False) -> Trajectory:
    """Seeded single-threaded interleaving of worker epochs and deliveries.

    With ``config.schedule == "random"`` each step runs one epoch of a
    uniformly chosen unfinished worker. With ``"barrier"`` workers run full
    sweeps in id order and refresh together at the end of each round, which
    at zero delay reproduces :func:`run_sync`.
    """
    if config.mode is not Mode.ASYNC_SIM:
        config = config.replace(mode=Mode.ASYNC_SIM)
    workers, servers = _setup(problem, config, initial_z)
    traj = Trajectory("async-sim", workers=workers, servers=servers)
    rec = _Recorder(problem, config, traj, workers, servers)
    n = len(workers)
    state = {"epochs": 0}

    def on_commit(block):
        if config.commit_metrics and config.schedule == "random":
            rec.sample(len(traj.events), state["epochs"] // n, f"commit:{block}")

    net = SimTransport(servers, config, traj, on_commit)
    t0 = time.perf_counter()
    rec.sample(0, 0, "start")
    if config.schedule == "barrier":
        _barrier_rounds(problem, config, workers, net, traj, rec, stop_at_tolerance)
    else:
        _random_steps(problem, config, workers, net, traj, rec, state, keep_reports,
                      stop_at_tolerance)
    net.drain()
    if not traj.diverged:
        rec.sample(len(traj.events), state["epochs"] // n if config.schedule == "random"
                   else traj.samples[-1].epoch, "final")
    traj.wall_seconds = time.perf_counter() - t0
    return traj


def _random_steps(problem, config, workers, net, traj, rec, state, keep_reports,
                  stop_at_tolerance):
    sched = np.random.default_rng([config.seed, 104729])
    active = [w.worker_id for w in workers]
    n = len(workers)
    order = config.block_order
    while active:
        i = active[int(sched.integers(len(active)))] if len(active) > 1 else active[0]
        w = workers[i]
        start = time.perf_counter_ns()
        blocks = select_block(w, order)
        results = update_blocks(w, problem.losses[i], config, blocks)
        for _, msg in results:
            if msg is None:
                traj.counts["filtered"] += 1
            else:
                net.push(msg)
        net.deliver_due()
        staleness = refresh(w, net)
        traj.events.append((len(traj.events), w.epoch, i, blocks[0] if len(blocks) == 1
                            else "", "epoch", max(staleness.values())))
        if keep_reports:
            traj.reports.append(EpochReport(i, w.epoch, tuple(blocks),
                                            tuple(m is None for _, m in results),
                                            staleness, time.perf_counter_ns() - start))
        net.step += 1
        state["epochs"] += 1
        if w.epoch >= config.max_epochs:
            active.remove(i)
        if state["epochs"] % config.metric_every == 0:
            P = rec.sample(len(traj.events), state["epochs"] // n, "cadence")
            if traj.diverged or (stop_at_tolerance and P <= config.tolerance):
                break


def _barrier_rounds(problem, config, workers, net, traj, rec, stop_at_tolerance):
    for t in range(1, config.max_epochs + 1):
        for w in workers:
            start = time.perf_counter_ns()
            results = update_blocks(w, problem.losses[w.worker_id], config, w.blocks)
            for _, msg in results:
                if msg is None:
                    traj.counts["filtered"] += 1
                else:
                    net.push(msg)
            net.deliver_due()
            traj.events.append((len(traj.events), t, w.worker_id, "", "epoch", 0))
            traj.reports.append(EpochReport(w.worker_id, w.epoch, w.blocks,
                                            tuple(m is None for _, m in results), {},
                                            time.perf_counter_ns() - start))
            net.step += 1
        staleness = 0
        for w in workers:
            staleness = max(staleness, max(refresh(w, net).values()))
        traj.events.append((len(traj.events), t, "", "", "barrier", staleness))
        P = rec.sample(len(traj.events), t, "round")
        if traj.diverged or (stop_at_tolerance and P <= config.tolerance):
            break


# ---------------------------------------------------------------- threads


@dataclass
class ThreadLog:
    """Per-worker epoch records and per-block receipt order of a thread run."""

    epochs: dict = field(default_factory=dict)
    receipts: dict = field(default_factory=dict)


class _ServerThread(threading.Thread):
    def __init__(self, state):
        super().__init__(daemon=True, name=f"server-{state.block_id}")
        self.state = state
        self.inbox = queue.Queue()
        self.published = (state.version, state.z_dirty)
        self.receipts = []
        self.error = None

    def run(self):
        try:
            while True:
                item = self.inbox.get()
                if item is None:
                    return
                msg, ack = item
                with self.state.lock:
                    receive_push(self.state, msg)
                    self.receipts.append((msg.sender, msg.epoch_tag))
                    self.published = (self.state.version, self.state.z_dirty)
                ack.set()
        except BaseException as exc:  # surfaced by the runner
            self.error = exc


class _ThreadNet:
    def __init__(self, servers):
        self.servers = servers

    def push(self, msg):
        """Queue a push; the returned event is set once the server applied it."""
        ack = threading.Event()
        self.servers[msg.block_id].inbox.put((msg, ack))
        return ack

    def pull(self, worker, block):
        srv = self.servers[block]
        serve_pull(srv.state, worker)
        version, values = srv.published
        return values, version, 0


def run_async_threads(problem: Problem, config: RunConfig, initial_z=None,
                      num_threads: int | None = None) -> Trajectory:
    """Run workers and servers on real threads.

    ``num_threads`` caps concurrently running workers (default: all). When
    every worker has its own thread, workers keep going until all of them
    have completed ``max_epochs``, so no worker idles while others still move
    the shared blocks; with fewer threads each worker stops at its budget.
    Observed staleness, the number of versions a block advanced between a
    worker's pull and its next use, is recorded; exceeding
    ``config.kill_staleness`` aborts the run with :class:`StalenessExceeded`.
    """
    if config.mode is not Mode.ASYNC_THREADS:
        config = config.replace(mode=Mode.ASYNC_THREADS)
    workers, servers = _setup(problem, config, initial_z)
    srv_threads = [_ServerThread(s) for s in servers]
    net = _ThreadNet(srv_threads)
    traj = Trajectory("async-threads", workers=workers, servers=servers)
    log = ThreadLog()
    abort = threading.Event()
    errors = []
    gate = threading.Semaphore(num_threads or len(workers))
    go = threading.Event()
    finished = threading.Event()
    pending = [len(workers)]
    pending_lock = threading.Lock()
    together = num_threads is None or num_threads >= len(workers)
    stats = {i: {"filtered": 0, "pushes": 0, "max_staleness": 0, "wall_ns": 0}
             for i in range(len(workers))}

    def work(w):
        i = w.worker_id
        oracle = problem.losses[i]
        records = log.epochs.setdefault(i, [])
        st = stats[i]
        go.wait()
        try:
            with gate:
                t_start = time.perf_counter_ns()
                counted = False
                while not abort.is_set():
                    if w.epoch >= config.max_epochs:
                        if not together:
                            break
                        if not counted:
                            counted = True
                            with pending_lock:
                                pending[0] -= 1
                                if pending[0] == 0:
                                    finished.set()
                        if finished.is_set():
                            break
                    observed = max(srv_threads[j].published[0] - w.z_version[j]
                                   for j in w.blocks)
                    st["max_staleness"] = max(st["max_staleness"], observed)
                    if config.kill_staleness is not None and observed > config.kill_staleness:
                        raise StalenessExceeded(
                            f"worker {i} epoch {w.epoch}: observed staleness {observed} "
                            f"> kill threshold {config.kill_staleness}")
                    blocks = select_block(w, config.block_order)
                    results = update_blocks(w, oracle, config, blocks)
                    acks = []
                    for _, msg in results:
                        if msg is None:
                            st["filtered"] += 1
                        else:
                            st["pushes"] += 1
                            acks.append(net.push(msg))
                    # a pull never overtakes this worker's own pushes
                    for ack in acks:
                        while not ack.wait(0.5):
                            if abort.is_set() or any(s.error for s in srv_threads):
                                raise RuntimeError(f"worker {i}: server stopped")
                    refresh(w, net)
                    records.append((tuple(blocks), tuple(m is None for _, m in results),
                                    dict(w.z_version), observed))
                    # yield the interpreter lock so epochs of different workers interleave
                    time.sleep(0)
                st["wall_ns"] = time.perf_counter_ns() - t_start
        except BaseException as exc:
            errors.append(exc)
            abort.set()

    for s in srv_threads:
        s.start()
    wthreads = [threading.Thread(target=work, args=(w,), name=f"worker-{w.worker_id}")
                for w in workers]
    t0 = time.perf_counter()
    for t in wthreads:
        t.start()
    go.set()
    for t in wthreads:
        t.join()
    for s in srv_threads:
        s.inbox.put(None)
    for s in srv_threads:
        s.join()
    wall = time.perf_counter() - t0
    srv_errors = [s.error for s in srv_threads if s.error is not None]
    if errors or srv_errors:
        raise (errors + srv_errors)[0]
    for s in srv_threads:
        log.receipts[s.state.block_id] = list(s.receipts)
    traj.counts["pushes"] = sum(s["pushes"] for s in stats.values())
    traj.counts["filtered"] = sum(s["filtered"] for s in stats.values())
    traj.counts["delivered"] = sum(len(r) for r in log.receipts.values())
    traj.counts["commits"] = sum(s.commits for s in servers)
    traj.wall_seconds = wall
    traj.timing = {
        "wall_seconds": wall,
        "epochs_per_worker": {i: len(r) for i, r in log.epochs.items()},
        "threads": num_threads or len(workers),
        "max_observed_staleness": max(s["max_staleness"] for s in stats.values()),
        "worker_wall_ns": {i: s["wall_ns"] for i, s in stats.items()},
    }
    traj.thread_log = log
    rec = _Recorder(problem, config, traj, workers, servers)
    rec.sample(sum(len(v) for v in log.epochs.values()), min(w.epoch for w in workers), "final",
               consistency="per-block")
    return traj


def replay(problem: Problem, config: RunConfig, log: ThreadLog, initial_z=None):
    """Re-execute a recorded thread run in one thread.

    Worker epochs use the recorded block choices and pulled versions; each
    server applies pushes in its recorded receipt order. Returns the final
    ``(workers, servers)``.
    """
    workers, servers = _setup(problem, config, initial_z)
    history = {s.block_id: [s.z_dirty] for s in servers}
    outbox = {}
    ep_ptr = {i: 0 for i in log.epochs}
    phase = {i: "update" for i in log.epochs}
    rc_ptr = {j: 0 for j in log.receipts}
    progress = True
    while progress:
        progress = False
        for j, receipts in log.receipts.items():
            while rc_ptr[j] < len(receipts):
                key = (*receipts[rc_ptr[j]], j)
                if key not in outbox:
                    break
                receive_push(servers[j], outbox.pop(key))
                history[j].append(servers[j].z_dirty)
                rc_ptr[j] += 1
                progress = True
        for i, records in log.epochs.items():
            w = workers[i]
            while ep_ptr[i] < len(records):
                blocks, filtered, versions, _ = records[ep_ptr[i]]
                if phase[i] == "update":
                    results = update_blocks(w, problem.losses[i], config, blocks)
                    if tuple(m is None for _, m in results) != filtered:
                        raise ReplayError(f"worker {i} epoch {w.epoch}: filter decision differs")
                    for j, msg in results:
                        if msg is not None:
                            outbox[(i, msg.epoch_tag, j)] = msg
                    phase[i] = "pull"
                    progress = True
                if any(v >= len(history[j]) for j, v in versions.items()):
                    break
                for j, v in versions.items():
                    set_cache(w, j, history[j][v], v)
                phase[i] = "update"
                ep_ptr[i] += 1
    if any(ep_ptr[i] < len(r) for i, r in log.epochs.items()) or any(
            rc_ptr[j] < len(r) for j, r in log.receipts.items()):
        raise ReplayError("recorded event order could not be replayed")
    return workers, servers


def run(problem: Problem, config: RunConfig, initial_z=None, **kw) -> Trajectory:
    if config.mode is Mode.SYNC:
        return run_sync(problem, config, initial_z, **kw)
    if config.mode is Mode.ASYNC_SIM:
        return run_async_sim(problem, config, initial_z, **kw)
    return run_async_threads(problem, config, initial_z, **kw)
