"""Acceptance gate: one PASS/FAIL line per criterion at the stated tolerances.

Run with ``pytest tests/test_acceptance.py`` or ``python tests/test_acceptance.py``.
"""

import functools
import os
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from blockadmm.core import FilterSchedule, Mode, RunConfig
from blockadmm.metrics import (TheoremParams, augmented_lagrangian, check_theorem1, check_theorem2,
                               kkt_residuals, minimal_gamma, successive_differences,
                               t_epsilon)
from blockadmm.problems import Regularizer
from blockadmm.reference import solve_reference
from blockadmm.server import states_equal
from blockadmm.synthetic import convex_fixture, generate_synthetic, lasso_fixture, logistic_fixture
from blockadmm.transport import replay, run_async_sim, run_async_threads, run_sync

from oracles import central_diff, prox_grid

_emit = print


@pytest.fixture(autouse=True)
def _show_verdicts(capsys):
    global _emit

    def emit(line):
        with capsys.disabled():
            print(line)

    _emit = emit
    yield
    _emit = print


def verdict(label, ok, detail):
    _emit(f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}")
    return ok


def info(label, detail):
    _emit(f"[INFO] {label}: {detail}")


def lmax(problem):
    return max(f.block_lipschitz(j) for f in problem.losses for j in f.active_blocks)


@functools.lru_cache(maxsize=None)
def convex_async_runs():
    """Three seeds on the convex fixture at T=5 with gamma from the step-size check."""
    prob = convex_fixture()
    base = RunConfig(rho=4.5 * lmax(prob), gamma=1.0, lam=prob.reg.lam, clip=prob.reg.clip,
                     delay_bound=5, max_epochs=5000, metric_every=prob.topology.num_workers,
                     commit_metrics=False)
    params = TheoremParams.from_problem(prob, base)
    cfg = base.replace(gamma=minimal_gamma(params))
    t0 = time.perf_counter()
    runs = [run_async_sim(prob, cfg.replace(seed=s), keep_reports=False) for s in (0, 1, 2)]
    return prob, cfg, runs, time.perf_counter() - t0


def test_c01_identity_every_epoch():
    prob = logistic_fixture()
    cfg = RunConfig(lam=prob.reg.lam, clip=prob.reg.clip, delay_bound=3, max_epochs=1000,
                    seed=1, check_identity=True, metric_every=10**9, commit_metrics=False)
    t0 = time.perf_counter()
    traj = run_async_sim(prob, cfg, keep_reports=False)
    elapsed = time.perf_counter() - t0
    worst = max(w.max_identity_residual for w in traj.workers)
    epochs = min(w.epoch for w in traj.workers)
    ok = worst <= 1e-10 and epochs == 1000 and elapsed < 5.0
    assert verdict("C1 identity grad+y=0", ok,
                   f"max |grad+y| = {worst:.2e} over {epochs} epochs/worker, {elapsed:.2f}s")


def test_c02_lasso_sync_vs_reference():
    prob = lasso_fixture()
    ref = solve_reference(prob)
    cfg = RunConfig(rho=4.5 * lmax(prob), gamma=0.0, lam=prob.reg.lam, clip=np.inf,
                    mode=Mode.SYNC, max_epochs=5000)
    t0 = time.perf_counter()
    traj = run_sync(prob, cfg)
    elapsed = time.perf_counter() - t0
    err = float(np.max(np.abs(traj.final.snapshot.z_full(prob.topology) - ref)))
    ok = err <= 1e-4 and elapsed < 10.0
    assert verdict("C2 LASSO sync vs reference", ok,
                   f"max-norm error {err:.2e} after {traj.final.epoch} epochs, {elapsed:.2f}s")


def test_c03_successive_differences_vanish():
    prob, cfg, runs, elapsed = convex_async_runs()
    L0 = augmented_lagrangian(runs[0].samples[0].snapshot, prob, cfg)
    check = check_theorem1(TheoremParams.from_problem(prob, cfg), L0)
    worst = {"z": 0.0, "x": 0.0, "y": 0.0}
    for traj in runs:
        snaps = [s.snapshot for s in traj.samples]
        tail = snaps[int(0.9 * len(snaps)):]
        for k, v in successive_differences(tail).items():
            worst[k] = max(worst[k], max(v))
    ok = check.passed and all(v < 1e-6 for v in worst.values()) and elapsed < 30.0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    assert verdict("C3 tail successive differences", ok,
                   f"gamma={cfg.gamma:.1f} (conditions {'pass' if check.passed else 'fail'}), "
                   f"3 seeds, {detail}, {elapsed:.2f}s")


def test_c04_kkt_at_termination():
    prob, _, runs, _ = convex_async_runs()
    res = [kkt_residuals(t.final.snapshot, prob) for t in runs]
    worst = np.max(np.array(res), axis=0)
    ok = bool(np.all(worst < 1e-4))
    assert verdict("C4 KKT residuals", ok,
                   f"max over seeds r1={worst[0]:.1e} r2={worst[1]:.1e} r3={worst[2]:.1e}")


def t_eps_products(traj):
    out = []
    for eps in (1e-1, 1e-2, 1e-3):
        k = t_epsilon(traj.P, eps)
        out.append(None if k is None else max(traj.samples[k].epoch, 1) * eps)
    return out


def test_c05_rate_products_within_factor_10():
    prob, cfg, runs, _ = convex_async_runs()
    products = t_eps_products(runs[0])
    sync = run_sync(prob, cfg.replace(mode=Mode.SYNC, delay_bound=0, gamma=0.0,
                                      max_epochs=2000))
    info("C5 sync reference",
         "T(eps)*eps = " + ", ".join(f"{p:.3g}" for p in t_eps_products(sync)))
    ok = None not in products and max(products) <= 10 * min(products)
    spread = max(products) / min(products) if None not in products else float("inf")
    assert verdict("C5 T(eps)*eps within factor 10", ok,
                   "T(eps)*eps = " + ", ".join(f"{p:.3g}" for p in products)
                   + f", spread {spread:.1f}x (one-sided bound: max {max(products):.3g})")


def test_c06_delta_push_equivalence():
    prob = convex_fixture()
    cfg = RunConfig(rho=4.5 * lmax(prob), gamma=50.0, lam=prob.reg.lam, clip=prob.reg.clip,
                    delay_bound=3, max_epochs=1000, seed=4, metric_every=1)
    direct = run_async_sim(prob, cfg)
    delta = run_async_sim(prob, cfg.replace(delta_push=True))
    same = len(direct.samples) == len(delta.samples)
    dev = max(float(np.max(np.abs(a.snapshot.z[j] - b.snapshot.z[j])))
              for a, b in zip(direct.samples, delta.samples) for j in a.snapshot.z)
    ok = same and dev <= 1e-9
    assert verdict("C6 delta vs direct push", ok,
                   f"max z deviation {dev:.1e} over {len(direct.samples)} samples")


def test_c07_significance_filter():
    prob = convex_fixture()
    base = RunConfig(rho=13 * lmax(prob), gamma=1.0, lam=prob.reg.lam, clip=prob.reg.clip,
                     delay_bound=2, max_epochs=4000, seed=0, delta_push=True,
                     metric_every=400, commit_metrics=False)
    sched = FilterSchedule("decay", 0.01)
    cfg = base.replace(gamma=minimal_gamma(TheoremParams.from_problem(prob, base)))
    cond = check_theorem2(TheoremParams.from_problem(prob, cfg), sched)
    off = run_async_sim(prob, cfg, keep_reports=False)
    on = run_async_sim(prob, cfg.replace(filter_schedule=sched), keep_reports=False)
    rel = abs(on.final.objective - off.final.objective) / abs(off.final.objective)
    frac = on.filtered_fraction
    ok = rel <= 0.01 and frac > 0.10
    assert verdict("C7 significance filter", ok,
                   f"objective delta {100 * rel:.2e}%, filtered {100 * frac:.1f}% of pushes, "
                   f"filter conditions {'pass' if cond.passed else 'fail'}")


def test_c08_barrier_equals_sync():
    prob = convex_fixture()
    cfg = RunConfig(rho=4.5 * lmax(prob), gamma=0.01, lam=prob.reg.lam, clip=prob.reg.clip,
                    max_epochs=500)
    sync = run_sync(prob, cfg.replace(mode=Mode.SYNC))
    sim = run_async_sim(prob, cfg.replace(schedule="barrier"))
    pairs = list(zip(sync.samples, sim.samples))
    dev = max(float(np.max(np.abs(a.snapshot.z[j] - b.snapshot.z[j])))
              for a, b in pairs for j in a.snapshot.z)
    ok = len(sync.samples) == 501 and len(pairs) == 501 and dev <= 1e-12
    assert verdict("C8 barrier async-sim vs sync", ok,
                   f"max per-epoch z deviation {dev:.1e} over {len(pairs) - 1} epochs")


def test_c09_threads_sound_and_replayable():
    prob = convex_fixture()
    cfg = RunConfig(rho=4.5 * lmax(prob), gamma=1.0, lam=prob.reg.lam, clip=prob.reg.clip,
                    mode=Mode.ASYNC_THREADS, max_epochs=3000, kill_staleness=10**6)
    worst_kkt, worst_replay, stale = 0.0, 0.0, 0
    for _ in range(10):
        traj = run_async_threads(prob, cfg, num_threads=4)
        worst_kkt = max(worst_kkt, max(kkt_residuals(traj.final.snapshot, prob)))
        stale = max(stale, traj.timing["max_observed_staleness"])
        workers, servers = replay(prob, cfg, traj.thread_log)
        for a, b in zip(traj.servers, servers):
            worst_replay = max(worst_replay, float(np.max(np.abs(a.z_dirty - b.z_dirty))))
            assert states_equal(a, b, atol=1e-9)
        for a, b in zip(traj.workers, workers):
            for j in a.blocks:
                worst_replay = max(worst_replay, float(np.max(np.abs(a.x[j] - b.x[j]))))
    ok = worst_kkt < 1e-3 and worst_replay <= 1e-9
    assert verdict("C9 thread runs", ok,
                   f"10 runs, max KKT {worst_kkt:.1e}, replay deviation {worst_replay:.1e}, "
                   f"max observed staleness {stale}")


def test_c10_speedup_informational():
    prob = generate_synthetic(4, 4, 50, 400, density=0.2, seed=2,
                              blocks_per_worker=2).problem(lam=0.01)
    cfg = RunConfig(rho=50.0, gamma=1.0, lam=0.01, mode=Mode.ASYNC_THREADS, max_epochs=300)
    t1 = run_async_threads(prob, cfg, num_threads=1).wall_seconds
    t4 = run_async_threads(prob, cfg, num_threads=4).wall_seconds
    cores = os.cpu_count() or 1
    info("C10 speedup (not gating)",
         f"{cores} cores, 4-thread/1-thread wall-clock {t4 / t1:.2f} "
         f"({'target <= 0.6' if cores >= 4 else 'host has < 4 cores, not measurable'})")


def test_c11_prox_grid_and_nonexpansive():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(1000):
        v = rng.uniform(-3, 3)
        lam, mu, clip = rng.uniform(0, 2), rng.uniform(0.2, 5), rng.uniform(0.05, 4)
        out = Regularizer("ell1", lam, clip).prox(np.array([v]), mu)[0]
        worst = max(worst, abs(out - prox_grid(v, lam, mu, clip, step=1e-4)))
    ratio = 0.0
    for _ in range(1000):
        lam, mu, clip = rng.uniform(0, 5), rng.uniform(0.01, 10), rng.uniform(0.1, 10)
        reg = Regularizer("ell1", lam, clip)
        a, b = rng.normal(0, 5, 4), rng.normal(0, 5, 4)
        ratio = max(ratio, np.linalg.norm(reg.prox(a, mu) - reg.prox(b, mu))
                    / np.linalg.norm(a - b))
    ok = worst <= 1e-3 and ratio <= 1.0 + 1e-12
    assert verdict("C11 prox oracle", ok,
                   f"max grid deviation {worst:.1e}, max Lipschitz ratio {ratio:.6f}")


def test_c12_gradient_finite_differences():
    rng = np.random.default_rng(12)
    worst = 0.0
    for k in range(100):
        inst = generate_synthetic(int(rng.integers(1, 4)), int(rng.integers(1, 4)),
                                  int(rng.integers(1, 4)), int(rng.integers(3, 12)),
                                  density=0.6, noise=0.3, seed=k, kind="logistic")
        prob = inst.problem()
        x = rng.standard_normal(prob.topology.dim)
        for f in prob.losses:
            for j in range(prob.topology.num_blocks):
                sl = prob.topology.block_slice(j)
                g = f.block_gradient(x, j)
                fd = central_diff(f.value, x, range(sl.start, sl.stop), h=1e-6)
                scale = max(float(np.linalg.norm(fd)), 1e-3)
                worst = max(worst, float(np.linalg.norm(g - fd)) / scale)
    assert verdict("C12 block gradient vs finite differences", worst <= 1e-5,
                   f"max relative error {worst:.1e} over 100 instances")


if __name__ == "__main__":
    failed = 0
    for name, fn in sorted(globals().items()):
        if name.startswith("test_c") and callable(fn):
            try:
                fn()
            except AssertionError:
                failed += 1
    sys.exit(1 if failed else 0)
