"""Command line entry point.

Every subcommand returns 0 only when its oracle checks pass.
"""

from __future__ import annotations

import argparse
import logging
import os
import signal
import sys
import tempfile
import threading

import numpy as np

from .gid import AGAS_LOCALITY


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v]


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v]


def _serve(loc) -> int:
    stop = threading.Event()
    for sig in (signal.SIGTERM, signal.SIGINT):
        signal.signal(sig, lambda *_: stop.set())
    print(f"ready {loc.endpoint}", flush=True)
    while not stop.is_set() and not loc.shutdown_requested.is_set():
        stop.wait(0.1)
    loc.stop()
    return 0


def cmd_agas_server(args) -> int:
    from .locality import Locality

    loc = Locality(AGAS_LOCALITY, workers=args.workers, host=args.host, port=args.port,
                   host_agas=True).start()
    return _serve(loc)


def cmd_locality(args) -> int:
    from .locality import Locality

    loc = Locality(args.index, workers=args.workers, scheduler=args.scheduler, host=args.host,
                   port=args.port, agas=args.agas).start()
    return _serve(loc)


def cmd_gen_table(args) -> int:
    from .table import Axis, TableSpec, generate_table, read_table

    spec = TableSpec(Axis(args.xmin, args.xmax, args.nx), Axis(args.ymin, args.ymax, args.ny),
                     Axis(args.zmin, args.zmax, args.nz), args.fields)
    generate_table(spec, args.generator, args.out)
    size = os.path.getsize(args.out)
    ok = size == spec.file_size
    _spec, data = read_table(args.out)
    ok = ok and bool(np.isfinite(data).all())
    print(f"wrote {args.out}: {spec.record_count} records x {spec.fields} fields, "
          f"{size} bytes ({'ok' if ok else 'SIZE MISMATCH'})")
    return 0 if ok else 1


def cmd_bench_futures(args) -> int:
    from .bench import FUTURES_COLUMNS, bench_futures, mean_overhead, write_csv
    from .locality import Locality

    rows = []
    ok = True
    with Locality(0, workers=args.workers, scheduler=args.scheduler, host_agas=True).start() as loc:
        for w in args.workloads:
            r = bench_futures(loc, args.count, w, runs=args.runs)
            rows += r
            ov = mean_overhead(r)
            print(f"workload {w:g} us: mean overhead {ov:.2f} us/future over {args.runs} runs")
            ok = ok and ov > 0
    nonzero = {r["workload_us"] for r in rows if r["workload_us"] > 0}
    if len(nonzero) >= 2:
        ovs = [mean_overhead([r for r in rows if r["workload_us"] == w]) for w in sorted(nonzero)]
        spread = (max(ovs) - min(ovs)) / max(ovs)
        print(f"amortized overhead spread across nonzero workloads: {spread:.1%}")
    if args.csv:
        write_csv(args.csv, FUTURES_COLUMNS, rows)
    return 0 if ok else 1


def _table_path(args) -> str:
    from .table import TableSpec, generate_table

    if args.table and os.path.exists(args.table):
        return args.table
    path = args.table or os.path.join(tempfile.mkdtemp(prefix="pxamr-"), "table.eos")
    generate_table(TableSpec.uniform(args.nx, 17, 9), "mixed", path)
    return path


def _cluster(args, P: int, T: int):
    from .bench import Cluster, ExternalCluster

    if getattr(args, "endpoints", None):
        return ExternalCluster(args.endpoints, workers=max(2, T), scheduler=args.scheduler)
    return Cluster(P, workers=T, scheduler=args.scheduler)


def cmd_bench_table(args) -> int:
    from .bench import (TABLE_COLUMNS, OracleMismatch, bench_table, random_points, read_endpoints,
                        table_oracle, write_csv)
    from .table import read_spec

    path = _table_path(args)
    points = random_points(read_spec(path), args.queries, args.seed)
    oracle = table_oracle(path, points)
    rows, ok = [], True
    if args.endpoints:
        # the external localities were started with their own worker count
        args.localities = [len(read_endpoints(args.endpoints)[1])]
        args.workers = args.workers[:1]
    for P in args.localities:
        for T in args.workers:
            with _cluster(args, P, T) as cl:
                try:
                    row = bench_table(cl.driver, path, cl.localities, args.partitions,
                                      points=points, oracle=oracle)
                except OracleMismatch as exc:
                    print(f"P={P} T={T}: {exc}")
                    ok = False
                    continue
            row["workers"] = T
            rows.append(row)
            print(f"P={P} T={T}: {row['queries']} queries in {row['wall_s']:.3f} s "
                  f"(max rel err {row['max_rel_err']:.1e})")
    if args.csv:
        write_csv(args.csv, TABLE_COLUMNS, rows)
    return 0 if ok else 1


def _cosmo_setup(args):
    from .amr import AmrConfig
    from .cosmo import CosmoParams

    params = CosmoParams(N=args.N, z_min=0.0, z_max=args.length, cfl=args.cfl,
                         dissipation=args.dissipation)
    config = AmrConfig(max_level=args.levels, tau=args.tau, regrid_interval=args.regrid,
                       margin=args.margin, buffer=args.buffer,
                       coarse_patches=args.coarse_patches, max_patch_cells=args.max_patch_cells)
    return params, config


def cmd_cosmo(args) -> int:
    from .bench import (COSMO_COLUMNS, hierarchy_difference, read_endpoints,
                        run_cosmo_distributed, run_cosmo_local, write_csv)
    from .cosmo import kink_init, write_diagnostics_csv, write_snapshot

    params, config = _cosmo_setup(args)
    init = lambda p: kink_init(p, w=args.width)  # noqa: E731
    if args.steps == 0:
        from .amr import initial_hierarchy

        h = initial_hierarchy(params, config, init)
        if args.snapshot:
            write_snapshot(args.snapshot, h.state(), params)
        if args.layout_csv:
            h.write_layout_csv(args.layout_csv)
        print(f"initial data only: {len(h.layout())} patches")
        return 0
    ref = run_cosmo_local(params, config, args.steps, 1, args.scheduler, init)
    print(f"1 worker: {ref.wall_s:.3f} s")
    if args.endpoints:
        args.localities = len(read_endpoints(args.endpoints)[1])
    if args.localities > 1 or args.endpoints:
        with _cluster(args, args.localities, args.workers) as cl:
            run = run_cosmo_distributed(cl.driver, cl.localities, params, config, args.steps, init)
    else:
        run = run_cosmo_local(params, config, args.steps, args.workers, args.scheduler, init)
    diff = hierarchy_difference(run.hierarchy, ref.hierarchy)
    total = args.localities * args.workers
    speedup = ref.wall_s / run.wall_s
    print(f"{args.localities} x {args.workers} workers: {run.wall_s:.3f} s, "
          f"speedup {speedup:.2f}, max difference vs 1 worker {diff:.2e}")
    if args.csv:
        write_csv(args.csv, COSMO_COLUMNS, [
            {"localities": 1, "workers": 1, "levels": args.levels, "N": args.N,
             "steps": args.steps, "wall_s": ref.wall_s, "speedup": 1.0},
            {"localities": args.localities, "workers": args.workers, "levels": args.levels,
             "N": args.N, "steps": args.steps, "wall_s": run.wall_s, "speedup": speedup},
        ])
    if args.diag_csv:
        write_diagnostics_csv(args.diag_csv, run.diagnostics)
    if args.snapshot:
        write_snapshot(args.snapshot, run.hierarchy.state(), params)
    if args.layout_csv:
        run.hierarchy.write_layout_csv(args.layout_csv)
    if total > 1 and speedup < 1.3:
        print("warning: speedup below 1.3 (expected on a single core)", file=sys.stderr)
    return 0 if diff <= 1e-13 else 1


def cmd_launch(args) -> int:
    from .bench import Cluster

    with Cluster(args.localities, base_port=args.base_port, workers=args.workers,
                 scheduler=args.scheduler) as cl:
        listing = cl.wait_registered(args.localities + 1)
        for index, endpoint in listing:
            print(f"locality {index} at {endpoint}")
        print(f"{args.localities} localities registered with {cl.agas_endpoint}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pxamr", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def sched(p):
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--scheduler", choices=["global", "local"], default="local")

    p = sub.add_parser("agas-server", help="run the standalone address server")
    p.add_argument("--port", type=int, required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--workers", type=int, default=2)
    p.set_defaults(fn=cmd_agas_server)

    p = sub.add_parser("locality", help="run one locality process")
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--agas", required=True, help="host:port of the address server")
    sched(p)
    p.set_defaults(fn=cmd_locality)

    p = sub.add_parser("gen-table", help="write a synthetic table file")
    p.add_argument("--out", required=True)
    p.add_argument("--generator", default="mixed",
                   choices=["linear", "trilinear", "smooth", "mixed"])
    for ax, n in (("x", 32), ("y", 17), ("z", 9)):
        p.add_argument(f"--n{ax}", type=int, default=n)
        p.add_argument(f"--{ax}min", type=float, default=0.0)
        p.add_argument(f"--{ax}max", type=float, default=1.0)
    p.add_argument("--fields", type=int, default=19)
    p.set_defaults(fn=cmd_gen_table)

    p = sub.add_parser("bench-futures", help="future overhead protocol")
    p.add_argument("--count", type=int, default=100_000)
    p.add_argument("--workloads", type=_floats, default=[0.0, 100.0, 300.0])
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--csv")
    sched(p)
    p.set_defaults(fn=cmd_bench_futures)

    p = sub.add_parser("bench-table", help="partitioned table access protocol")
    p.add_argument("--localities", type=_ints, default=[1, 2, 4, 8])
    p.add_argument("--workers", type=_ints, default=[1, 2, 4])
    p.add_argument("--scheduler", choices=["global", "local"], default="local")
    p.add_argument("--partitions", type=int, default=32)
    p.add_argument("--queries", type=int, default=16384)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--table", help="table file (generated when missing)")
    p.add_argument("--nx", type=int, default=64)
    p.add_argument("--csv")
    p.add_argument("--endpoints", help="use running localities listed in this file "
                   "(address server first, then one host:port per locality)")
    p.set_defaults(fn=cmd_bench_table)

    p = sub.add_parser("cosmo", help="domain-wall run with refinement, timed against 1 worker")
    p.add_argument("--N", type=int, default=1024)
    p.add_argument("--length", type=float, default=400.0)
    p.add_argument("--width", type=float, default=10.0)
    p.add_argument("--cfl", type=float, default=0.25)
    p.add_argument("--dissipation", type=float, default=0.0)
    p.add_argument("--levels", type=int, default=1)
    p.add_argument("--steps", type=int, default=16)
    p.add_argument("--tau", type=float)
    p.add_argument("--regrid", type=int, default=4)
    p.add_argument("--margin", type=int, default=4)
    p.add_argument("--buffer", type=int)
    p.add_argument("--coarse-patches", type=int, default=4)
    p.add_argument("--max-patch-cells", type=int, default=256)
    p.add_argument("--localities", type=int, default=1)
    p.add_argument("--csv")
    p.add_argument("--diag-csv")
    p.add_argument("--snapshot")
    p.add_argument("--layout-csv")
    p.add_argument("--endpoints", help="use running localities listed in this file")
    sched(p)
    p.set_defaults(fn=cmd_cosmo)

    p = sub.add_parser("launch", help="start and tear down a localhost cluster")
    p.add_argument("--localities", type=int, required=True)
    p.add_argument("--base-port", type=int, default=0)
    sched(p)
    p.set_defaults(fn=cmd_launch)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except Exception as exc:  # noqa: BLE001 - reported as a nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 2
