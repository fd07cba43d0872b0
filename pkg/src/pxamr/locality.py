"""A locality: runtime, parcel port, action manager and local object table."""

from __future__ import annotations

import itertools
import logging
import threading
import types
from typing import Callable, Optional

from .agas import AgasClient, AgasServer, Binding, NotFound
from .gid import AGAS_LOCALITY, AGAS_SERVER_GID, PLAN_EPOCH_BIT, Gid, LocalMinter, root_gid
from .lco import FutureCell, forward_outcome
from .parcel import (ACTION_AGAS_UNBIND_NOTIFY, ACTION_FUTURE_GET, ACTION_LIST_LOCALITIES,
                     ACTION_SHUTDOWN, ACTION_WRITE_CONTINUATION, ANY_TYPE, FORWARDED_BIT,
                     ActionTable, Parcel)
from .runtime import LocalityId, Runtime, SchedulerPolicy
from .serialization import CodecError, decode_args, encode_args, register_error_type
from .transport import Connection, ParcelPort, TransportError

log = logging.getLogger(__name__)

ROOT_TYPE = 0
AGAS_TYPE = 1
LCO_TYPE = 2


@register_error_type
class TypeTagMismatch(TypeError):
    pass


def core_actions(table: ActionTable) -> None:
    from .agas import register_server_actions

    register_server_actions(table)
    table.register(ACTION_WRITE_CONTINUATION, "lco.write_continuation", "?v",
                   lambda loc, cell, failed, value: None, type_tag=LCO_TYPE)
    table.register(ACTION_AGAS_UNBIND_NOTIFY, "agas.unbind_notify", "giu",
                   lambda loc, root, gid, tag, ref: loc._destroy_local(gid), type_tag=ROOT_TYPE)
    table.register(ACTION_FUTURE_GET, "lco.get", "",
                   lambda loc, cell: cell, type_tag=LCO_TYPE)
    table.register(ACTION_SHUTDOWN, "locality.shutdown", "",
                   lambda loc, root: loc.shutdown_requested.set(), type_tag=ROOT_TYPE)


def standard_actions(extra: Optional[Callable[[ActionTable], None]] = None) -> ActionTable:
    """The action table every process of a run builds identically."""
    from . import bench, table

    t = ActionTable()
    core_actions(t)
    table.register_actions(t)
    from . import amr_dist

    amr_dist.register_actions(t)
    bench.register_actions(t)
    if extra is not None:
        extra(t)
    return t


class Locality:
    """One node-equivalent: workers, a parcel port and locally bound objects."""

    def __init__(self, index: int, *, workers: int = 1, scheduler="global_queue",
                 host: str = "127.0.0.1", port: int = 0, agas: Optional[str] = None,
                 host_agas: bool = False, extra_actions=None,
                 actions: Optional[ActionTable] = None):
        if not host_agas and agas is None:
            raise ValueError("a locality needs an AGAS endpoint unless it hosts AGAS")
        self.index = index
        self.actions = actions if actions is not None else standard_actions(extra_actions)
        self.runtime = Runtime(SchedulerPolicy(scheduler, workers), LocalityId(index))
        self.port = ParcelPort(self._on_parcel)
        self._host, self._port_no = host, port
        self.agas_endpoint = agas
        self.agas_server = (AgasServer(self.actions.table_hash(), on_destroy=self._notify_destroy)
                            if host_agas else None)
        self.agas = AgasClient(self._call_agas, index, server=self.agas_server)
        self._minter = LocalMinter(index)
        self._objects: dict[Gid, tuple[int, object]] = {root_gid(index): (ROOT_TYPE, self)}
        if self.agas_server is not None:
            self._objects[AGAS_SERVER_GID] = (AGAS_TYPE, self.agas_server)
        self._endpoints: dict[int, str] = {}
        self._refs = itertools.count(1)
        self.shutdown_requested = threading.Event()
        self.forwarded = 0
        self.loopback = 0
        self.destroyed: list[Gid] = []
        self.errors: list[BaseException] = []

    # lifecycle

    def start(self, timeout: float = 30.0) -> "Locality":
        self.runtime.start()
        try:
            endpoint = self.port.listen(self._host, self._port_no)
        except Exception:
            self.runtime.stop()
            raise
        self.locality_id = LocalityId(self.index, endpoint)
        if self.agas_server is not None and self.agas_endpoint is None:
            self.agas_endpoint = endpoint
        if self.index != AGAS_LOCALITY:
            self.agas.register_locality(self.index, endpoint,
                                        self.actions.table_hash()).get(timeout)
        return self

    def stop(self) -> None:
        self.port.close()
        self.runtime.stop()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()

    @property
    def endpoint(self) -> str:
        return self.port.endpoint

    @property
    def root(self) -> Gid:
        return root_gid(self.index)

    def run(self, fn: Callable, *args, timeout: Optional[float] = None):
        """Run ``fn`` (plain or async) as a task here and wait for its result."""
        return self.runtime.run(fn, *args, timeout=timeout)

    # local objects

    def mint(self) -> Gid:
        return self._minter.mint()

    def export(self, cell: FutureCell) -> Gid:
        """Make a local future addressable from other localities."""
        if cell.gid is None:
            cell.gid = self.mint()
        self._objects[cell.gid] = (LCO_TYPE, cell)
        return cell.gid

    def install_lco(self, gid: Gid, cell: FutureCell) -> None:
        """Register ``cell`` under a caller-chosen gid (plan-scoped proxies)."""
        cell.gid = gid
        self._objects[gid] = (LCO_TYPE, cell)

    def drop_lco(self, gid: Gid) -> None:
        self._objects.pop(gid, None)

    def local_object(self, gid: Gid):
        entry = self._objects.get(gid)
        return None if entry is None else entry[1]

    async def new_component(self, obj, type_tag: int) -> Gid:
        """Allocate a gid in AGAS, bind it here and return it."""
        gid = await self.agas.allocate(1, self.index)
        ref = next(self._refs)
        self._objects[gid] = (type_tag, obj)
        try:
            await self.agas.bind(gid, self.index, type_tag, ref)
        except Exception:
            self._objects.pop(gid, None)
            raise
        return gid

    def _destroy_local(self, gid: Gid) -> None:
        entry = self._objects.pop(gid, None)
        if entry is None:
            return
        self.destroyed.append(gid)
        destroy = getattr(entry[1], "destroy", None)
        if callable(destroy):
            destroy()

    def _notify_destroy(self, binding: Binding) -> None:
        self.apply(root_gid(binding.locality), ACTION_AGAS_UNBIND_NOTIFY,
                   binding.gid, binding.type_tag, binding.local_ref)

    # action manager

    def _call_agas(self, action_id: int, *args) -> FutureCell:
        return self.async_action(AGAS_SERVER_GID, action_id, *args)

    def async_action(self, target: Gid, action_id: int, *args) -> FutureCell:
        """Eager future: launch ``action_id`` on ``target`` now, result arrives in the cell."""
        cell = FutureCell()
        self.apply(target, action_id, *args, continuation=cell)
        return cell

    def apply(self, target: Gid, action_id: int, *args,
              continuation: Optional[FutureCell] = None) -> None:
        try:
            reg = self.actions[action_id]
            where = self._locate(target)
        except Exception as exc:  # noqa: BLE001 - resolution failures surface on read
            self._fail(continuation, exc)
            return
        if isinstance(where, FutureCell):
            def resolved(cell):
                if cell.failed():
                    self._fail(continuation, cell.exception())
                else:
                    self._invoke_at(cell.result().locality, target, reg, args, continuation)
            where.add_done_callback(resolved)
        else:
            self._invoke_at(where, target, reg, args, continuation)

    def _fail(self, cell: Optional[FutureCell], exc: BaseException) -> None:
        if cell is not None:
            cell.try_fail(exc)
        else:
            log.error("fire-and-forget action failed: %r", exc)
            self.errors.append(exc)

    def _locate(self, target: Gid):
        if target == AGAS_SERVER_GID:
            return self.index if self.agas_server is not None else AGAS_LOCALITY
        if target.is_local_minted:
            return target.locality
        binding = self.agas.cached(target)
        if binding is not None:
            return binding.locality
        return self.agas.resolve(target)

    def _invoke_at(self, where: int, target: Gid, reg, args, continuation) -> None:
        if where == self.index:
            self.loopback += 1
            self.runtime.spawn(self._run_local, target, reg, args,
                               on_done=lambda r, e: self._complete(continuation, r, e))
            return
        try:
            payload = encode_args(reg.schema, args)
            cont = self.export(continuation) if continuation is not None else Gid(0, 0)
            self._send_to(where, Parcel(target, reg.action_id, payload, cont, self.index))
        except Exception as exc:  # noqa: BLE001
            if continuation is not None:
                self._objects.pop(continuation.gid, None)
            self._fail(continuation, exc)

    def _complete(self, continuation, result, error) -> None:
        if continuation is not None:
            forward_outcome(continuation, result, error)
        elif error is not None:
            log.error("action failed without continuation: %r", error)
            self.errors.append(error)

    def _target(self, gid: Gid, reg):
        entry = self._objects.get(gid)
        if entry is None:
            return None
        tag, obj = entry
        if reg.type_tag != ANY_TYPE and reg.type_tag != tag:
            raise TypeTagMismatch(f"action {reg.name} expects type {reg.type_tag}, "
                                  f"{gid!r} has type {tag}")
        return obj

    async def _run_local(self, target: Gid, reg, args):
        obj = self._target(target, reg)
        if obj is None:
            raise NotFound(f"{target!r} is not bound on locality {self.index}")
        result = reg.handler(self, obj, *args)
        if isinstance(result, types.CoroutineType):
            result = await result
        if isinstance(result, FutureCell):
            result = await result
        return result

    # transport

    def _known_endpoint(self, locality: int) -> Optional[str]:
        if locality == AGAS_LOCALITY:
            return self.agas_endpoint
        ep = self._endpoints.get(locality)
        if ep is None and self.agas_server is not None:
            self._endpoints.update({int(i): e for i, e in self.agas_server.list_localities()})
            ep = self._endpoints.get(locality)
        return ep

    def _send_to(self, locality: int, parcel: Parcel) -> None:
        conn = self.port.route(locality)
        if conn is not None:
            self.port.send(parcel, conn=conn)
            return
        endpoint = self._known_endpoint(locality)
        if endpoint is not None:
            self.port.send(parcel, endpoint=endpoint)
            return
        if self.agas_server is not None:
            raise TransportError(f"locality {locality} is not registered")
        # endpoint unknown: ask the directory, send when it answers
        listing = self._call_agas(ACTION_LIST_LOCALITIES)

        def got(cell):
            try:
                if cell.failed():
                    raise cell.exception()
                self._endpoints.update({int(i): e for i, e in cell.result()})
                ep = self._endpoints.get(locality)
                if ep is None:
                    raise TransportError(f"locality {locality} is not registered")
                self.port.send(parcel, endpoint=ep)
            except Exception as exc:  # noqa: BLE001
                self._bounce(parcel, exc)

        listing.add_done_callback(got)

    def _bounce(self, parcel: Parcel, exc: BaseException) -> None:
        cell = self.local_object(parcel.continuation_gid)
        if isinstance(cell, FutureCell):
            self._objects.pop(parcel.continuation_gid, None)
            cell.try_fail(exc)
        else:
            log.error("undeliverable parcel: %r", exc)
            self.errors.append(exc)

    def send_continuation(self, cont: Gid, value, error: Optional[BaseException]) -> None:
        if not cont.valid:
            return
        dest = cont.locality
        if dest == self.index:
            entry = self._objects.pop(cont, None)
            if entry is not None and isinstance(entry[1], FutureCell):
                entry[1].set_from(value, error)
            return
        try:
            payload = encode_args("?v", (error is not None, error if error is not None else value))
        except CodecError as exc:
            payload = encode_args("?v", (True, exc))
        try:
            self._send_to(dest, Parcel(cont, ACTION_WRITE_CONTINUATION, payload,
                                       Gid(0, 0), self.index))
        except TransportError as exc:
            log.error("cannot deliver continuation to %d: %s", dest, exc)
            self.errors.append(exc)

    # receive path

    def _on_parcel(self, parcel: Parcel, conn: Optional[Connection]) -> None:
        # handlers never run on the receive loop
        try:
            self.runtime.spawn(self._handle_parcel, parcel)
        except Exception as exc:  # noqa: BLE001 - runtime shutting down
            log.debug("dropping parcel during shutdown: %r", exc)

    def _write_cont(self, parcel: Parcel) -> None:
        failed, value = decode_args("?v", parcel.payload)
        entry = self._objects.get(parcel.dest_gid)
        if entry is None or not isinstance(entry[1], FutureCell):
            log.warning("continuation for unknown future %r", parcel.dest_gid)
            return
        # plan proxies stay installed; one-shot continuations are removed
        if not parcel.dest_gid.epoch & PLAN_EPOCH_BIT:
            self._objects.pop(parcel.dest_gid, None)
        cell = entry[1]
        if failed:
            cell.try_fail(value if isinstance(value, BaseException) else RuntimeError(str(value)))
        else:
            cell.try_write(value)

    async def _handle_parcel(self, parcel: Parcel):
        action_id = parcel.action_id & ~FORWARDED_BIT
        forwarded = bool(parcel.action_id & FORWARDED_BIT)
        if action_id == ACTION_WRITE_CONTINUATION:
            self._write_cont(parcel)
            return
        result = error = None
        try:
            reg = self.actions[action_id]
            obj = self._target(parcel.dest_gid, reg)
            if obj is None:
                dest = parcel.dest_gid
                if forwarded or dest.is_local_minted or dest == AGAS_SERVER_GID:
                    raise NotFound(f"{dest!r} is not bound on locality {self.index}")
                binding = await self.agas.resolve(dest)
                if binding.locality == self.index:
                    raise NotFound(f"{dest!r} bound here but not present")
                self.forwarded += 1
                self._send_to(binding.locality, Parcel(
                    dest, parcel.action_id | FORWARDED_BIT, parcel.payload,
                    parcel.continuation_gid, parcel.source_locality))
                return
            args = decode_args(reg.schema, parcel.payload)
            result = reg.handler(self, obj, *args)
            if isinstance(result, types.CoroutineType):
                result = await result
            if isinstance(result, FutureCell):
                result = await result
        except Exception as exc:  # noqa: BLE001 - written to the continuation
            error = exc
        if parcel.continuation_gid.valid:
            self.send_continuation(parcel.continuation_gid, result, error)
        elif error is not None:
            log.error("parcel action %d failed: %r", action_id, error)
            self.errors.append(error)

