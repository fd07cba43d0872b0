"""Distributed execution of refinement plans.

Each locality receives the whole plan and builds dataflow nodes only for the
nodes it owns.  An input produced elsewhere becomes a proxy future installed
under a plan-scoped gid on the consuming locality; the producer writes it
with a continuation parcel as soon as its value exists.  The only
synchronization is these futures: no locality ever waits for all others.

Running a plan takes two rounds of parcels.  ``prepare`` installs every proxy
before ``start`` lets any node fire, so a continuation can never arrive for a
proxy that does not exist yet.
"""

from __future__ import annotations

import itertools
import threading
import weakref
from collections import defaultdict
from typing import Optional, Sequence

from .amr import LevelHierarchy, Plan, evaluate_node, initial_values
from .gid import plan_gid, root_gid
from .lco import FutureCell, dataflow, wait_all
from .locality import ROOT_TYPE

ACTION_PLAN_PREPARE = 40
ACTION_PLAN_START = 41
ACTION_PLAN_RELEASE = 42

_runs: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()
_runs_lock = threading.Lock()


class PlanRun:
    """The part of one plan that lives on one locality."""

    def __init__(self, loc, plan_id: int, plan: Plan, driver: int):
        self.loc = loc
        self.plan_id = plan_id
        self.plan = plan
        self.driver = driver
        self.cells: dict[int, FutureCell] = {}
        self.proxies: dict[int, FutureCell] = {}
        self.init: dict = {}
        self.started = False

    def proxy(self, node: int) -> FutureCell:
        cell = self.proxies.get(node)
        if cell is None:
            cell = FutureCell()
            self.loc.install_lco(plan_gid(self.loc.index, self.plan_id, node), cell)
            self.proxies[node] = cell
        return cell

    def prepare(self) -> int:
        me = self.loc.index
        owner = {n.id: n.owner for n in self.plan.nodes}
        for n in self.plan.nodes:
            if n.owner == me:
                for i in n.inputs:
                    if owner[i] != me:
                        self.proxy(i)
        if self.driver == me:
            for nid in self.plan.outputs():
                if owner[nid] != me:
                    self.proxy(nid)
        return len(self.proxies)

    def start(self) -> int:
        if self.started:
            raise RuntimeError(f"plan {self.plan_id} already started")
        self.started = True
        me = self.loc.index
        plan = self.plan
        owner = {n.id: n.owner for n in plan.nodes}
        consumers: dict[int, set] = defaultdict(set)
        for n in plan.nodes:
            for i in n.inputs:
                if owner[i] != n.owner:
                    consumers[i].add(n.owner)
        if self.driver is not None:
            for nid in plan.outputs():
                if owner[nid] != self.driver:
                    consumers[nid].add(self.driver)
        rt = self.loc.runtime
        for n in plan.nodes:
            if n.owner != me:
                continue
            if n.kind == "init":
                cell = FutureCell.ready_with(self.init[n.id])
            else:
                ins = [self.cells[i] if owner[i] == me else self.proxies[i] for i in n.inputs]
                cell = dataflow(ins, lambda vals, node=n: evaluate_node(node, vals), runtime=rt)
            self.cells[n.id] = cell
            remote = consumers.get(n.id)
            if remote:
                cell.add_done_callback(lambda c, nid=n.id, dests=sorted(remote):
                                       self._publish(nid, c, dests))
        return len(self.cells)

    def _publish(self, nid: int, cell: FutureCell, dests) -> None:
        value = cell.result() if cell.ready() else None
        for d in dests:
            self.loc.send_continuation(plan_gid(d, self.plan_id, nid), value, cell.exception())

    def output(self, nid: int) -> FutureCell:
        return self.cells[nid] if nid in self.cells else self.proxies[nid]

    def release(self) -> None:
        for nid in self.proxies:
            self.loc.drop_lco(plan_gid(self.loc.index, self.plan_id, nid))
        self.proxies.clear()
        self.cells.clear()


def _table(loc) -> dict:
    with _runs_lock:
        return _runs.setdefault(loc, {})


def _get_run(loc, plan_id: int, text: Optional[str] = None, driver: Optional[int] = None) -> PlanRun:
    runs = _table(loc)
    run = runs.get(plan_id)
    if run is None:
        if text is None:
            raise KeyError(f"plan {plan_id} unknown on locality {loc.index}")
        run = runs[plan_id] = PlanRun(loc, plan_id, Plan.from_json(text), driver)
    return run


def _prepare_action(loc, _root, plan_id, text, driver, inits):
    run = _get_run(loc, plan_id, text, driver)
    run.init.update({int(nid): arr for nid, arr in inits})
    return run.prepare()


def _start_action(loc, _root, plan_id):
    return _get_run(loc, plan_id).start()


def _release_action(loc, _root, plan_id):
    run = _table(loc).pop(plan_id, None)
    if run is not None:
        run.release()
    return 0


def register_actions(table) -> None:
    table.register(ACTION_PLAN_PREPARE, "amr.plan_prepare", "IsIv", _prepare_action,
                   type_tag=ROOT_TYPE)
    table.register(ACTION_PLAN_START, "amr.plan_start", "I", _start_action, type_tag=ROOT_TYPE)
    table.register(ACTION_PLAN_RELEASE, "amr.plan_release", "I", _release_action,
                   type_tag=ROOT_TYPE)


class DistributedExecutor:
    """Plan executor for ``evolve_hierarchy`` spreading nodes over localities.

    Call it from a plain thread (not a worker); each plan is driven by one
    task on ``loc``.
    """

    _ids = itertools.count(1)

    def __init__(self, loc, localities: Sequence[int], timeout: Optional[float] = None):
        self.loc = loc
        self.localities = list(localities)
        self.timeout = timeout
        self.plans_run = 0

    def __call__(self, plan: Plan, h: LevelHierarchy) -> dict:
        self.plans_run += 1
        return self.loc.run(self._execute, plan, h, timeout=self.timeout)

    async def _execute(self, plan: Plan, h: LevelHierarchy) -> dict:
        loc = self.loc
        plan_id = next(self._ids)
        text = plan.to_json()
        involved = sorted({n.owner for n in plan.nodes} | {loc.index})
        for where in involved:
            if where not in self.localities and where != loc.index:
                raise ValueError(f"plan places work on unknown locality {where}")
        acks = []
        for where in involved:
            inits = [[nid, arr] for nid, arr in initial_values(h, plan, owner=where).items()]
            acks.append(loc.async_action(root_gid(where), ACTION_PLAN_PREPARE,
                                         plan_id, text, loc.index, inits))
        await wait_all(acks)
        await wait_all([loc.async_action(root_gid(w), ACTION_PLAN_START, plan_id)
                        for w in involved])
        run = _get_run(loc, plan_id)
        outs = plan.outputs()
        try:
            vals = await wait_all([run.output(nid) for nid in outs])
        finally:
            for w in involved:
                loc.apply(root_gid(w), ACTION_PLAN_RELEASE, plan_id)
        return dict(zip(outs, vals))


class LocalExecutor:
    """Plan executor running every node as a dataflow LCO on one runtime."""

    def __init__(self, runtime, timeout: Optional[float] = None):
        self.runtime = runtime
        self.timeout = timeout

    def __call__(self, plan: Plan, h: LevelHierarchy) -> dict:
        from .amr import run_plan_dataflow

        cells = run_plan_dataflow(plan, initial_values(h, plan), self.runtime)
        return {nid: cells[nid].get(self.timeout) for nid in plan.outputs()}
