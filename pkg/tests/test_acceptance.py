"""Acceptance criteria 1-10, one PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py`` or directly as a script.  The
lines go through pytest's terminal reporter, so they show under output
capture, and are repeated in the end-of-session summary.
"""

import math
import os
import random
import sys
import threading
import time

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from oracles import random_smooth_state, relative_difference, rhs_oracle  # noqa: E402
from pxamr.amr import AmrConfig, evolve_hierarchy, initial_hierarchy  # noqa: E402
from pxamr.bench import (Cluster, bench_futures, bench_table, hierarchy_difference,  # noqa: E402
                         mean_overhead, random_points, relative_error, run_cosmo_distributed,
                         run_cosmo_local, table_oracle)
from pxamr.cosmo import (PHI, CosmoParams, evolve_unigrid, kink_init, rhs,  # noqa: E402
                         self_convergence, vacuum_state)
from pxamr.lco import FutureCell, dataflow  # noqa: E402
from pxamr.locality import Locality  # noqa: E402
from pxamr.runtime import LocalityId, Runtime, SchedulerPolicy  # noqa: E402
from pxamr.table import (TablePartition, TableSpec, evaluate_generator,  # noqa: E402
                         generate_table, read_spec, read_table)

PUBLISHED_OVERHEAD_US = 40.0
LINES: list[str] = []
_terminal = None


@pytest.fixture(autouse=True)
def _reporter(request):
    global _terminal
    _terminal = request.config.pluginmanager.get_plugin("terminalreporter")
    yield


def _emit(line: str) -> None:
    LINES.append(line)
    if _terminal is not None:
        _terminal.write_line("")
        _terminal.write_line(line)
    else:
        print(line, flush=True)


def report(n: int, ok: bool, detail: str, elapsed: float, budget: float) -> None:
    in_time = elapsed < budget
    verdict = "PASS" if ok and in_time else "FAIL"
    _emit(f"criterion {n:2d}: {verdict}  {detail}  [{elapsed:.1f} s of {budget:.0f} s]")
    assert ok, detail
    assert in_time, f"criterion {n} took {elapsed:.1f} s, budget {budget} s"


def warn(text: str) -> None:
    _emit(f"              warning: {text}")


@pytest.fixture(scope="module")
def table_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("accept") / "mixed.eos"
    return generate_table(TableSpec.uniform(64, 17, 9), "mixed", path)


# 1 ---------------------------------------------------------------------------

def _contention(writers=64, trials=1_000_000, batch=20_000):
    """Every writer calls try_write on every cell of a batch, each from a different offset."""
    wins = [0] * writers
    shared = {}
    barrier = threading.Barrier(writers)
    values_ok = [True]

    def writer(k):
        for b in range(trials // batch):
            if k == 0:
                shared["cells"] = [FutureCell() for _ in range(batch)]
            barrier.wait()
            cells = shared["cells"]
            off = (k * batch) // writers
            n = 0
            for c in cells[off:] + cells[:off]:
                if c.try_write(k):
                    n += 1
            wins[k] += n
            barrier.wait()
            if k == 0:
                counts = [0] * writers
                for c in cells:
                    counts[c.result()] += 1
                shared.setdefault("per_writer", [0] * writers)
                shared["per_writer"] = [a + b for a, b in zip(shared["per_writer"], counts)]
            barrier.wait()

    threads = [threading.Thread(target=writer, args=(k,)) for k in range(writers)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    values_ok[0] = shared["per_writer"] == wins
    return sum(wins), sum(1 for w in wins if w), values_ok[0]


def _read_after_write_never_suspends():
    rt = Runtime(SchedulerPolicy("local", 2), LocalityId(0)).start()
    try:
        cells = [FutureCell.ready_with(i) for i in range(1000)]

        async def read_all():
            return [await c for c in cells]

        done = FutureCell()
        rt.spawn(read_all, on_done=lambda r, e: done.set_from(r, e))
        values = done.get(30)
        return values == list(range(1000)) and sum(c.suspended_reads for c in cells) == 0
    finally:
        rt.stop()


def _dataflow_fires_once_under_random_orders(rounds=300, width=8):
    rt = Runtime(SchedulerPolicy("local", 4), LocalityId(0)).start()
    rng = random.Random(7)
    try:
        for _ in range(rounds):
            inputs = [FutureCell() for _ in range(width)]
            fired = []
            out = dataflow(inputs, lambda vals: fired.append(1) or sum(vals), runtime=rt)
            order = list(range(width))
            rng.shuffle(order)
            writers = [threading.Thread(target=inputs[i].write, args=(i,)) for i in order]
            for t in writers:
                t.start()
            for t in writers:
                t.join()
            if out.get(10) != sum(range(width)) or len(fired) != 1:
                return False
        return True
    finally:
        rt.stop()


def test_criterion_01_future_semantics():
    t0 = time.perf_counter()
    total, distinct, consistent = _contention()
    raw = _read_after_write_never_suspends()
    once = _dataflow_fires_once_under_random_orders()
    ok = total == 1_000_000 and consistent and raw and once
    report(1, ok, f"64 writers x 1e6 trials: {total} winners ({distinct} distinct threads won), "
           f"read-after-write suspensions none={raw}, dataflow exactly once={once}",
           time.perf_counter() - t0, 60)


# 2 ---------------------------------------------------------------------------

def test_criterion_02_overhead_protocol(tmp_path):
    from pxamr.bench import FUTURES_COLUMNS, write_csv

    t0 = time.perf_counter()
    rows = []
    with Locality(0, workers=1, host_agas=True).start() as loc:
        for w in (0.0, 100.0, 300.0):
            rows += bench_futures(loc, 100_000, w, runs=5)
    path = tmp_path / "futures.csv"
    write_csv(path, FUTURES_COLUMNS, rows)
    ov = {w: mean_overhead([r for r in rows if r["workload_us"] == w]) for w in (0.0, 100.0, 300.0)}
    positive = all(r["overhead_us"] > 0 for r in rows)
    spread = abs(ov[100.0] - ov[300.0]) / max(ov[100.0], ov[300.0])
    ok = positive and spread <= 0.5 and len(rows) == 15
    report(2, ok, f"overhead us/future: 0us {ov[0.0]:.1f} (published figure ~{PUBLISHED_OVERHEAD_US:.0f}, "
           f"not compared), 100us {ov[100.0]:.1f}, 300us {ov[300.0]:.1f}, "
           f"100 vs 300 differ by {spread:.0%} (limit 50%)", time.perf_counter() - t0, 600)


# 3 ---------------------------------------------------------------------------

def test_criterion_03_table_correctness(table_path):
    t0 = time.perf_counter()
    spec = read_spec(table_path)
    random_pts = random_points(spec, 16384, 0)
    rng = np.random.default_rng(1)
    # every x-plane; each partitioning puts its slab boundaries on some of them
    planes = np.column_stack([spec.x.points(), rng.uniform(0, 1, spec.x.n),
                              rng.uniform(0, 1, spec.x.n)])
    pts = np.vstack([random_pts, planes])
    oracle = table_oracle(table_path, pts)
    worst, details = 0.0, []
    with Cluster(4) as cl:
        for P in (1, 2, 4, 8, 16, 32):
            locs = cl.localities[:min(P, 4)]
            row = bench_table(cl.driver, table_path, locs, partitions=P, points=pts,
                              oracle=oracle, tolerance=math.inf)
            worst = max(worst, row["max_rel_err"])
            details.append(f"P={P}:{row['max_rel_err']:.0e}")
    report(3, worst <= 1e-12, f"{len(pts)} queries incl. {spec.x.n} boundary planes over 4 "
           f"localities, max rel err {worst:.1e} ({' '.join(details)})",
           time.perf_counter() - t0, 300)


# 4 ---------------------------------------------------------------------------

def test_criterion_04_table_scaling_trend(table_path):
    t0 = time.perf_counter()
    pts = random_points(read_spec(table_path), 16384, 2)
    oracle = table_oracle(table_path, pts)
    walls = {}
    for P in (1, 2, 4, 8):
        with Cluster(P) as cl:
            walls[P] = bench_table(cl.driver, table_path, cl.localities, 32, points=pts,
                                   oracle=oracle)["wall_s"]
    ratio = walls[8] / walls[2]
    curve = ", ".join(f"P={P} {w:.2f}s" for P, w in walls.items())
    report(4, ratio <= 3.0, f"access wall P=8 / P=2 = {ratio:.2f} (limit 3); curve {curve}",
           time.perf_counter() - t0, 600)


# 5 ---------------------------------------------------------------------------

def test_criterion_05_interpolation_order(tmp_path):
    t0 = time.perf_counter()
    spec = TableSpec.uniform(9, 7, 5, fields=4)
    spec_l, data = read_table(generate_table(spec, "linear", tmp_path / "lin.eos"))
    lin = TablePartition(0, 0, spec.x.n, spec_l, data)
    rng = np.random.default_rng(3)
    pts = rng.uniform(0, 1, (2000, 3))
    got = np.array([lin.interpolate(*p) for p in pts])
    lin_err = relative_error(got, evaluate_generator("linear", *pts.T, 4))

    def smooth_err(n):
        s = TableSpec.uniform(n, n, n, fields=3)
        sp, d = read_table(generate_table(s, "smooth", tmp_path / f"s{n}.eos"))
        part = TablePartition(0, 0, n, sp, d)
        h = s.x.spacing
        cells = np.random.default_rng(5).integers(0, n - 1, (300, 3))
        mids = (cells + 0.5) * h
        vals = np.array([part.interpolate(*m) for m in mids])
        return np.max(np.abs(vals - evaluate_generator("smooth", *mids.T, 3)))

    ratio = smooth_err(9) / smooth_err(17)
    ok = lin_err <= 1e-12 and abs(ratio / 4.0 - 1.0) <= 0.2
    report(5, ok, f"linear generator max rel err {lin_err:.1e}; smooth error ratio on halving "
           f"{ratio:.2f} (4 +/- 20%)", time.perf_counter() - t0, 60)


# 6 ---------------------------------------------------------------------------

def test_criterion_06_vacuum_fixed_point():
    t0 = time.perf_counter()
    p = CosmoParams(N=256)
    worst = 0.0
    for sign in (-1.0, 1.0):
        s0 = vacuum_state(p, sign)
        s, _ = evolve_unigrid(s0, p, 100, with_diagnostics=False)
        worst = max(worst, float(np.max(np.abs(s.u - s0.u))))
    report(6, worst <= 1e-12, f"max deviation after 100 steps at N=256: {worst:.1e}",
           time.perf_counter() - t0, 60)


# 7 ---------------------------------------------------------------------------

def test_criterion_07_rhs_oracle():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(100):
        n = (64, 96, 128, 256)[seed % 4]
        p = CosmoParams(N=n, lam=0.5 + seed / 100, v=0.05 + seed / 400)
        u = np.array(random_smooth_state(n, p.length, seed))
        worst = max(worst, relative_difference(rhs(u, p).tolist(),
                                                rhs_oracle(u, p.dz, p.lam, p.v)))
    report(7, worst <= 1e-14, f"100 random smooth states, max rel difference {worst:.1e}",
           time.perf_counter() - t0, 60)


# 8 ---------------------------------------------------------------------------

def test_criterion_08_convergence():
    t0 = time.perf_counter()
    order, e1, e2 = self_convergence(CosmoParams(N=256), 32, rows=(PHI,))
    report(8, abs(order - 2.0) <= 0.2, f"phi self-convergence over N=256/512/1024 to "
           f"t={32 * CosmoParams(N=256).dt:g}: order {order:.3f} ({e1:.2e} / {e2:.2e})",
           time.perf_counter() - t0, 300)


# 9 ---------------------------------------------------------------------------

def test_criterion_09_amr_equivalence():
    t0 = time.perf_counter()
    p = CosmoParams(N=256)
    fine_p = p.refined()

    h, _ = evolve_hierarchy(initial_hierarchy(p, AmrConfig(refine_all=True, coarse_patches=2),
                                              kink_init), 4)
    fine8, _ = evolve_unigrid(kink_init(fine_p), fine_p, 8, with_diagnostics=False)
    whole = float(np.max(np.abs(h.level_array(1) - fine8.u)))

    h0, _ = evolve_hierarchy(initial_hierarchy(p, AmrConfig(max_level=0, coarse_patches=4),
                                               kink_init), 32)
    uni, _ = evolve_unigrid(kink_init(p), p, 32, with_diagnostics=False)
    bitwise = bool(np.array_equal(h0.state().u, uni.u))

    ha, _ = evolve_hierarchy(initial_hierarchy(p, AmrConfig(), kink_init), 32)
    fine, _ = evolve_unigrid(kink_init(fine_p), fine_p, 64, with_diagnostics=False)
    envelope = float(np.max(np.abs(uni.phi - fine.phi[::2])))
    mask = ha.coverage(1)
    diff = float(np.max(np.abs(ha.level_array(1)[PHI, mask] - fine.phi[mask])))

    ok = whole <= 1e-12 and bitwise and diff <= 2.0 * envelope
    report(9, ok, f"whole-domain refinement vs fine unigrid {whole:.1e}; L=0 bitwise={bitwise}; "
           f"refined-region difference {diff:.2e} vs 2 x envelope {2 * envelope:.2e}",
           time.perf_counter() - t0, 600)


# 10 --------------------------------------------------------------------------

def test_criterion_10_distributed_run():
    t0 = time.perf_counter()
    p = CosmoParams(N=4096)
    # at this resolution the default threshold flags nothing; scale it with the spacing
    cfg = AmrConfig(max_level=1, tau=2e-4, coarse_patches=4, max_patch_cells=512)
    steps = 100
    ref = run_cosmo_local(p, cfg, steps, 1)
    with Cluster(2, workers=2) as cl:
        run = run_cosmo_distributed(cl.driver, cl.localities, p, cfg, steps)
    diff = hierarchy_difference(run.hierarchy, ref.hierarchy)
    refined = run.hierarchy.depth == 2
    speedup = ref.wall_s / run.wall_s
    ok = diff <= 1e-13 and refined
    report(10, ok, f"2 localities x 2 workers vs 1 worker, N=4096 L=1 {steps} steps: max "
           f"difference {diff:.1e}; speedup {speedup:.2f} on {os.cpu_count()} core(s)",
           time.perf_counter() - t0, 900)
    if speedup < 1.3:
        warn(f"speedup {speedup:.2f} below the 1.3x soft gate (not failed)")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
