"""Benchmark protocols, the local cluster launcher and CSV output."""

from __future__ import annotations

import csv
import os
import socket
import subprocess
import sys
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .gid import root_gid
from .locality import ROOT_TYPE
from .parcel import ACTION_SHUTDOWN

ACTION_SPIN = 32

FUTURES_COLUMNS = ("localities", "workers", "scheduler", "workload_us", "count", "run",
                   "wall_s", "overhead_us")
TABLE_COLUMNS = ("localities", "workers", "partitions", "queries", "wall_s")
COSMO_COLUMNS = ("localities", "workers", "levels", "N", "steps", "wall_s", "speedup")


class LaunchError(RuntimeError):
    pass


class OracleMismatch(AssertionError):
    pass


# calibrated busy wait -------------------------------------------------------

_clock_cost = None


def calibrate(samples: int = 20000) -> float:
    """Seconds one deadline check costs; subtracted from every spin."""
    global _clock_cost
    clock = time.perf_counter
    t0 = clock()
    for _ in range(samples):
        clock()
    _clock_cost = (clock() - t0) / samples
    return _clock_cost


def spin(workload_us: float) -> None:
    """Busy-wait ``workload_us`` microseconds of wall time (never sleeps)."""
    if workload_us <= 0:
        return
    if _clock_cost is None:
        calibrate()
    clock = time.perf_counter
    deadline = clock() + workload_us * 1e-6 - _clock_cost
    while clock() < deadline:
        pass


def register_actions(table) -> None:
    table.register(ACTION_SPIN, "bench.spin", "d",
                   lambda loc, root, us: spin(us), type_tag=ROOT_TYPE)


def write_csv(path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns))
        w.writeheader()
        for row in rows:
            w.writerow({k: row[k] for k in columns})


# futures overhead -----------------------------------------------------------

async def _futures_once(loc, count: int, workload_us: float, target) -> float:
    t0 = time.perf_counter()
    cells = [loc.async_action(target, ACTION_SPIN, float(workload_us)) for _ in range(count)]
    for cell in cells:
        await cell
    return time.perf_counter() - t0


def bench_futures(loc, count: int, workload_us: float, runs: int = 5,
                  target: Optional[int] = None, localities: int = 1) -> list[dict]:
    """Eager futures each spinning ``workload_us``; overhead = (wall - workload * count) / count."""
    if count <= 0:
        raise ValueError("count must be positive")
    if workload_us < 0 or runs <= 0:
        raise ValueError("workload must be non-negative and runs positive")
    calibrate()
    gid = root_gid(loc.index if target is None else target)
    policy = loc.runtime.policy
    rows = []
    for r in range(runs):
        wall = loc.run(_futures_once, loc, count, workload_us, gid)
        rows.append({
            "localities": localities, "workers": policy.worker_count,
            "scheduler": policy.kind.value, "workload_us": workload_us, "count": count,
            "run": r, "wall_s": wall,
            "overhead_us": (wall - workload_us * 1e-6 * count) / count * 1e6,
        })
    return rows


def mean_overhead(rows: Sequence[dict]) -> float:
    return float(np.mean([r["overhead_us"] for r in rows]))


# table access ---------------------------------------------------------------

def random_points(spec, count: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    lo = np.array([a.min for a in spec.axes])
    hi = np.array([a.max for a in spec.axes])
    return lo + (hi - lo) * rng.random((count, 3))


def table_oracle(path, points) -> np.ndarray:
    """Single-partition reference values for ``points``."""
    from .table import read_spec, TablePartition

    spec = read_spec(path)
    whole = TablePartition.load(path, 0, 0, spec.x.n)
    return np.array([whole.interpolate(*p) for p in points])


def relative_error(got, want) -> float:
    got, want = np.asarray(got, dtype=float), np.asarray(want, dtype=float)
    scale = np.maximum(np.abs(want), 1.0)
    return float(np.max(np.abs(got - want) / scale)) if want.size else 0.0


def bench_table(driver, path, localities: Sequence[int], partitions: int = 32,
                queries: int = 16384, seed: int = 0, name: Optional[str] = None,
                oracle: Optional[np.ndarray] = None, points=None,
                tolerance: float = 1e-12) -> dict:
    """Create partitions, time the access phase of ``queries`` eager futures, verify every result."""
    from .table import create_partitions, read_spec

    name = name or f"eos-{len(localities)}-{partitions}-{time.monotonic_ns()}"
    client = driver.run(create_partitions, driver, path, partitions, list(localities), name)
    if points is None:
        points = random_points(read_spec(path), queries, seed)
    t0 = time.perf_counter()
    got = client.bulk_query_sync(points)
    wall = time.perf_counter() - t0
    if oracle is None:
        oracle = table_oracle(path, points)
    err = relative_error(got, oracle)
    if err > tolerance:
        raise OracleMismatch(f"table results differ from the single-partition oracle by {err:.3g}")
    return {"localities": len(localities), "workers": None, "partitions": partitions,
            "queries": len(points), "wall_s": wall, "max_rel_err": err}


# cosmology ------------------------------------------------------------------

@dataclass
class CosmoRun:
    hierarchy: object
    diagnostics: list
    wall_s: float
    layouts: list = field(default_factory=list)


def run_cosmo(params, config, steps: int, *, executor=None, init=None) -> CosmoRun:
    from .amr import evolve_hierarchy, initial_hierarchy
    from .cosmo import kink_init

    init = init or (lambda p: kink_init(p))
    h = initial_hierarchy(params, config, init)
    layouts = [h.layout()]
    t0 = time.perf_counter()
    h, diags = evolve_hierarchy(h, steps, executor=executor,
                                on_regrid=lambda hh: layouts.append(hh.layout()))
    return CosmoRun(h, diags, time.perf_counter() - t0, layouts)


def hierarchy_difference(a, b) -> float:
    """Largest difference between two hierarchies with identical layouts."""
    if a.layout() != b.layout():
        return float("inf")
    return max(float(np.max(np.abs(p.u - q.u)))
               for la, lb in zip(a.levels, b.levels) for p, q in zip(la, lb))


def run_cosmo_local(params, config, steps: int, workers: int, scheduler="local",
                    init=None) -> CosmoRun:
    """One in-process runtime with ``workers`` workers executing the dataflow plan."""
    from .amr_dist import LocalExecutor
    from .runtime import LocalityId, Runtime, SchedulerPolicy

    rt = Runtime(SchedulerPolicy(scheduler, workers), LocalityId(0)).start()
    try:
        return run_cosmo(params, config, steps, executor=LocalExecutor(rt), init=init)
    finally:
        rt.stop()


def run_cosmo_distributed(driver, localities: Sequence[int], params, config, steps: int,
                          init=None) -> CosmoRun:
    """Patches placed round-robin over ``localities``; ``driver`` ships and collects plans."""
    from .amr import assign_owners, evolve_hierarchy, initial_hierarchy
    from .amr_dist import DistributedExecutor
    from .cosmo import kink_init

    init = init or (lambda p: kink_init(p))
    h = initial_hierarchy(params, config, init)
    assign_owners(h, localities)
    layouts = [h.layout()]

    def placed(hh):
        assign_owners(hh, localities)
        layouts.append(hh.layout())

    ex = DistributedExecutor(driver, localities)
    t0 = time.perf_counter()
    h, diags = evolve_hierarchy(h, steps, executor=ex, on_regrid=placed)
    return CosmoRun(h, diags, time.perf_counter() - t0, layouts)


# process launcher -----------------------------------------------------------

def free_ports(count: int) -> list[int]:
    socks, ports = [], []
    try:
        for _ in range(count):
            s = socket.socket()
            s.bind(("127.0.0.1", 0))
            socks.append(s)
            ports.append(s.getsockname()[1])
    finally:
        for s in socks:
            s.close()
    return ports


def _port_free(port: int) -> bool:
    with socket.socket() as s:
        try:
            s.bind(("127.0.0.1", port))
        except OSError:
            return False
    return True


class Cluster:
    """A standalone address server plus ``P`` locality processes on localhost."""

    def __init__(self, localities: int, base_port: int = 0, workers: int = 1,
                 scheduler: str = "local", timeout: float = 60.0):
        if localities < 1:
            raise ValueError("need at least one locality")
        self.P = localities
        self.workers = workers
        self.scheduler = scheduler
        self.timeout = timeout
        if base_port:
            self.ports = [base_port + i for i in range(localities + 1)]
        else:
            self.ports = free_ports(localities + 1)
        self.agas_endpoint = f"127.0.0.1:{self.ports[0]}"
        self.procs: list[subprocess.Popen] = []
        self.driver = None

    def _spawn(self, args: list[str]) -> subprocess.Popen:
        env = dict(os.environ)
        src = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
        env["PYTHONPATH"] = src + os.pathsep + env.get("PYTHONPATH", "")
        proc = subprocess.Popen([sys.executable, "-m", "pxamr", *args], env=env,
                                stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
        self.procs.append(proc)
        return proc

    def _check_alive(self) -> None:
        for proc in self.procs:
            if proc.poll() is not None:
                err = proc.stderr.read() if proc.stderr else ""
                raise LaunchError(f"child {' '.join(proc.args[3:5])} exited with "
                                  f"{proc.returncode}: {err.strip()[-500:]}")

    def start(self) -> "Cluster":
        from .locality import Locality

        busy = [p for p in self.ports if not _port_free(p)]
        if busy:
            raise LaunchError(f"ports already in use: {busy}")
        try:
            agas = self._spawn(["agas-server", "--port", str(self.ports[0])])
            self._await_line(agas, "ready")
            for i in range(self.P):
                self._spawn(["locality", "--index", str(i), "--port", str(self.ports[i + 1]),
                             "--agas", self.agas_endpoint, "--workers", str(self.workers),
                             "--scheduler", self.scheduler])
            self.driver = Locality(self.P, workers=max(2, self.workers),
                                   scheduler=self.scheduler, agas=self.agas_endpoint)
            self.driver.start(self.timeout)
            self.wait_registered(self.P + 1)
        except BaseException:
            self.stop()
            raise
        return self

    def _await_line(self, proc, word: str) -> str:
        deadline = time.monotonic() + self.timeout
        while time.monotonic() < deadline:
            line = proc.stdout.readline()
            if line.startswith(word):
                return line.strip()
            if not line and proc.poll() is not None:
                self._check_alive()
        raise LaunchError(f"child did not report {word!r} in time")

    def wait_registered(self, n: int) -> list:
        deadline = time.monotonic() + self.timeout
        while True:
            self._check_alive()
            listing = self.driver.agas.list_localities().get(self.timeout)
            if len(listing) >= n:
                return listing
            if time.monotonic() > deadline:
                raise LaunchError(f"only {len(listing)} of {n} localities registered")
            time.sleep(0.05)

    @property
    def localities(self) -> list[int]:
        return list(range(self.P))

    def stop(self) -> None:
        if self.driver is not None:
            for i in range(self.P):
                try:
                    self.driver.apply(root_gid(i), ACTION_SHUTDOWN)
                except Exception:  # noqa: BLE001 - children are killed below anyway
                    pass
        deadline = time.monotonic() + 5.0
        for proc in self.procs[1:]:
            try:
                proc.wait(max(0.1, deadline - time.monotonic()))
            except subprocess.TimeoutExpired:
                proc.terminate()
        for proc in self.procs:
            if proc.poll() is None:
                proc.terminate()
            try:
                proc.wait(5.0)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()
            for stream in (proc.stdout, proc.stderr):
                if stream is not None:
                    stream.close()
        if self.driver is not None:
            self.driver.stop()
            self.driver = None
        self.procs = []

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def read_endpoints(path) -> tuple[str, list[str]]:
    """Endpoint list file: the address server first, then one locality per line.

    Blank lines and ``#`` comments are ignored.
    """
    with open(path) as fh:
        lines = [ln.split("#", 1)[0].strip() for ln in fh]
    lines = [ln for ln in lines if ln]
    for ln in lines:
        host, _, port = ln.rpartition(":")
        if not host or not port.isdigit():
            raise ValueError(f"bad endpoint {ln!r}; expected host:port")
    if len(lines) < 2:
        raise ValueError("endpoint file needs the address server and at least one locality")
    return lines[0], lines[1:]


class ExternalCluster:
    """Driver attached to localities that were started elsewhere, e.g. on other hosts.

    Locality ``i`` must listen at line ``i + 1`` of the endpoint file; the
    driver joins with index ``P`` like :class:`Cluster`.
    """

    def __init__(self, path, workers: int = 2, scheduler: str = "local", timeout: float = 60.0):
        self.agas_endpoint, self.endpoints = read_endpoints(path)
        self.P = len(self.endpoints)
        self.workers = workers
        self.scheduler = scheduler
        self.timeout = timeout
        self.driver = None

    def start(self) -> "ExternalCluster":
        from .locality import Locality

        self.driver = Locality(self.P, workers=self.workers, scheduler=self.scheduler,
                               agas=self.agas_endpoint)
        self.driver.start(self.timeout)
        deadline = time.monotonic() + self.timeout
        want = {i: ep for i, ep in enumerate(self.endpoints)}
        while True:
            listing = dict(self.driver.agas.list_localities().get(self.timeout))
            missing = [i for i in want if i not in listing]
            if not missing:
                break
            if time.monotonic() > deadline:
                self.stop()
                raise LaunchError(f"localities {missing} never registered")
            time.sleep(0.05)
        wrong = [i for i, ep in want.items() if listing[i] != ep]
        if wrong:
            self.stop()
            raise LaunchError(f"localities {wrong} registered at other endpoints than listed")
        return self

    @property
    def localities(self) -> list[int]:
        return list(range(self.P))

    def stop(self) -> None:
        if self.driver is not None:
            self.driver.stop()
            self.driver = None

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def launch_cluster(P: int, base_port: int = 0, workers: int = 1,
                   scheduler: str = "local", timeout: float = 60.0) -> Cluster:
    return Cluster(P, base_port, workers, scheduler, timeout).start()
