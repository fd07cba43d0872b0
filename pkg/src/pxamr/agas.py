"""Active global address space: GID allocation, binding, symbols, refcounts.

The server is a plain thread-safe state machine.  A locality hosts it either
as a dedicated process or next to its own work; clients reach it over
parcels or, when co-hosted, by direct calls.
"""

from __future__ import annotations

import collections
import threading
from dataclasses import dataclass
from typing import Callable, Optional

from .gid import MASK64, PLAN_EPOCH_BIT, Gid, make_msb
from .lco import FutureCell
from .parcel import (ACTION_AGAS_ALLOCATE, ACTION_AGAS_BIND, ACTION_AGAS_DECREF,
                     ACTION_AGAS_INCREF, ACTION_AGAS_LOOKUP, ACTION_AGAS_REGISTER,
                     ACTION_AGAS_RESOLVE, ACTION_LIST_LOCALITIES, ACTION_REGISTER_LOCALITY)
from .serialization import register_error_type


@register_error_type
class AgasError(RuntimeError):
    pass


@register_error_type
class NotFound(AgasError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "not found"


@register_error_type
class AlreadyBound(AgasError):
    pass


@register_error_type
class NotAllocated(AgasError):
    pass


@register_error_type
class DuplicateSymbol(AgasError):
    pass


@register_error_type
class RefcountError(AgasError):
    pass


@register_error_type
class AddressSpaceExhausted(AgasError):
    pass


@register_error_type
class HandshakeError(AgasError):
    pass


@dataclass(frozen=True)
class Binding:
    gid: Gid
    locality: int
    type_tag: int
    local_ref: int


FIRST_SERVER_EPOCH = 1


class AgasServer:
    """Centralized address server; all mutations serialized under one lock."""

    def __init__(self, action_hash: Optional[str] = None,
                 on_destroy: Optional[Callable[[Binding], None]] = None):
        self._lock = threading.RLock()
        self._epoch: dict[int, int] = {}
        self._next_lsb: dict[int, int] = {}
        self._bindings: dict[Gid, Binding] = {}
        self._refcounts: dict[Gid, int] = {}
        self._destroyed: set[Gid] = set()
        self._symbols: dict[bytes, Gid] = {}
        self._localities: dict[int, str] = {}
        self.action_hash = action_hash
        self.on_destroy = on_destroy
        self.counters = collections.Counter()
        self.registered = threading.Condition(self._lock)

    def _is_allocated(self, gid: Gid) -> bool:
        epoch = gid.msb & 0xFFFFFFFF
        if epoch < FIRST_SERVER_EPOCH or epoch & PLAN_EPOCH_BIT:
            return False
        nxt = self._next_lsb.get(gid.msb)
        if nxt is not None:
            return 1 <= gid.lsb < nxt
        # an exhausted earlier epoch of the same locality
        loc = gid.msb >> 32
        return FIRST_SERVER_EPOCH <= epoch < self._epoch.get(loc, 0) and gid.lsb >= 1

    def allocate(self, count: int, locality: int) -> Gid:
        self.counters["allocate"] += 1
        if count < 1:
            raise ValueError("allocate needs a positive count")
        with self._lock:
            epoch = self._epoch.get(locality, FIRST_SERVER_EPOCH)
            msb = make_msb(locality, epoch)
            start = self._next_lsb.get(msb, 1)
            if start + count - 1 > MASK64:
                epoch += 1
                if epoch >= PLAN_EPOCH_BIT:
                    raise AddressSpaceExhausted(f"no epochs left for locality {locality}")
                msb = make_msb(locality, epoch)
                start = 1
                if count > MASK64:
                    raise AddressSpaceExhausted("range wider than one epoch")
            self._epoch[locality] = epoch
            self._next_lsb[msb] = start + count
            return Gid(msb, start)

    def bind(self, gid: Gid, locality: int, type_tag: int, local_ref: int) -> bool:
        self.counters["bind"] += 1
        with self._lock:
            if not self._is_allocated(gid):
                raise NotAllocated(f"{gid!r} was never allocated")
            if gid in self._bindings or gid in self._destroyed:
                raise AlreadyBound(f"{gid!r} is already bound")
            self._bindings[gid] = Binding(gid, locality, type_tag, local_ref)
            return True

    def resolve(self, gid: Gid) -> Binding:
        self.counters["resolve"] += 1
        binding = self._bindings.get(gid)
        if binding is None:
            raise NotFound(f"{gid!r} is not bound")
        return binding

    def register_symbol(self, name, gid: Gid) -> bool:
        self.counters["register"] += 1
        key = name.encode("utf-8") if isinstance(name, str) else bytes(name)
        if not key:
            raise ValueError("symbol name must be nonempty")
        with self._lock:
            if key in self._symbols:
                raise DuplicateSymbol(f"symbol {key!r} already registered")
            self._symbols[key] = gid
        return True

    def lookup_symbol(self, name) -> Gid:
        self.counters["lookup"] += 1
        key = name.encode("utf-8") if isinstance(name, str) else bytes(name)
        gid = self._symbols.get(key)
        if gid is None:
            raise NotFound(f"symbol {key!r} not registered")
        return gid

    def _count(self, gid: Gid) -> int:
        if gid in self._destroyed:
            return 0
        if not self._is_allocated(gid):
            raise NotAllocated(f"{gid!r} was never allocated")
        return self._refcounts.get(gid, 1)

    def incref(self, gid: Gid, n: int = 1) -> int:
        self.counters["incref"] += 1
        if n < 0:
            raise ValueError("incref amount must be non-negative")
        with self._lock:
            count = self._count(gid)
            if count == 0:
                raise RefcountError(f"{gid!r} already destroyed")
            self._refcounts[gid] = count + n
            return count + n

    def decref(self, gid: Gid, n: int = 1) -> int:
        self.counters["decref"] += 1
        if n < 0:
            raise ValueError("decref amount must be non-negative")
        with self._lock:
            count = self._count(gid)
            if n > count or count == 0:
                raise RefcountError(f"decref by {n} below zero (count {count}) for {gid!r}")
            remaining = count - n
            binding = None
            if remaining == 0:
                self._refcounts.pop(gid, None)
                self._destroyed.add(gid)
                binding = self._bindings.pop(gid, None)
            else:
                self._refcounts[gid] = remaining
        if remaining == 0 and binding is not None and self.on_destroy is not None:
            self.on_destroy(binding)
        return remaining

    def register_locality(self, index: int, endpoint: str, action_hash: str) -> int:
        self.counters["register_locality"] += 1
        with self._lock:
            if self.action_hash is None:
                self.action_hash = action_hash
            elif action_hash != self.action_hash:
                raise HandshakeError(f"locality {index} action table {action_hash} "
                                     f"!= {self.action_hash}")
            old = self._localities.get(index)
            if old is not None and old != endpoint:
                raise HandshakeError(f"locality index {index} already taken by {old}")
            self._localities[index] = endpoint
            self.registered.notify_all()
            return len(self._localities)

    def list_localities(self) -> list:
        self.counters["list_localities"] += 1
        with self._lock:
            return [[i, ep] for i, ep in sorted(self._localities.items())]

    def wait_for_localities(self, n: int, timeout: Optional[float] = None) -> bool:
        with self.registered:
            return self.registered.wait_for(lambda: len(self._localities) >= n, timeout)


def register_server_actions(table) -> None:
    """Parcel handlers for the reserved AGAS action ids; target is the server."""
    def b2l(binding: Binding):
        return [binding.locality, binding.type_tag, binding.local_ref]

    table.register(ACTION_AGAS_ALLOCATE, "agas.allocate", "II",
                   lambda loc, srv, count, locality: srv.allocate(count, locality))
    table.register(ACTION_AGAS_BIND, "agas.bind", "gIiu",
                   lambda loc, srv, gid, locality, tag, ref: srv.bind(gid, locality, tag, ref))
    table.register(ACTION_AGAS_RESOLVE, "agas.resolve", "g",
                   lambda loc, srv, gid: b2l(srv.resolve(gid)))
    table.register(ACTION_AGAS_REGISTER, "agas.register_symbol", "bg",
                   lambda loc, srv, name, gid: srv.register_symbol(name, gid))
    table.register(ACTION_AGAS_LOOKUP, "agas.lookup_symbol", "b",
                   lambda loc, srv, name: srv.lookup_symbol(name))
    table.register(ACTION_AGAS_INCREF, "agas.incref", "gi",
                   lambda loc, srv, gid, n: srv.incref(gid, n))
    table.register(ACTION_AGAS_DECREF, "agas.decref", "gi",
                   lambda loc, srv, gid, n: srv.decref(gid, n))
    table.register(ACTION_REGISTER_LOCALITY, "agas.register_locality", "Iss",
                   lambda loc, srv, index, endpoint, h: srv.register_locality(index, endpoint, h))
    table.register(ACTION_LIST_LOCALITIES, "agas.list_localities", "",
                   lambda loc, srv: srv.list_localities())


class AgasClient:
    """Client view of the address server with a resolve cache.

    Every method returns a :class:`FutureCell`; call ``.get()`` from plain
    threads or ``await`` it inside a task.
    """

    def __init__(self, call: Callable[..., FutureCell], locality: int,
                 server: Optional[AgasServer] = None):
        self._call = call
        self._server = server
        self.locality = locality
        self._cache: dict[Gid, Binding] = {}
        self._inflight: dict[Gid, FutureCell] = {}
        self._lock = threading.Lock()
        self.cache_hits = 0

    def _invoke(self, action_id: int, method: str, *args) -> FutureCell:
        if self._server is not None:
            cell = FutureCell()
            try:
                cell.write(getattr(self._server, method)(*args))
            except Exception as exc:  # noqa: BLE001 - delivered through the future
                cell.fail(exc)
            return cell
        return self._call(action_id, *args)

    def allocate(self, count: int = 1, locality: Optional[int] = None) -> FutureCell:
        loc = self.locality if locality is None else locality
        return self._invoke(ACTION_AGAS_ALLOCATE, "allocate", count, loc)

    def bind(self, gid: Gid, locality: int, type_tag: int, local_ref: int) -> FutureCell:
        return self._invoke(ACTION_AGAS_BIND, "bind", gid, locality, type_tag, local_ref)

    def is_local(self, binding: Binding) -> bool:
        return binding.locality == self.locality

    def cached(self, gid: Gid) -> Optional[Binding]:
        return self._cache.get(gid)

    def resolve(self, gid: Gid) -> FutureCell:
        binding = self._cache.get(gid)
        if binding is not None:
            self.cache_hits += 1
            return FutureCell.ready_with(binding)
        with self._lock:
            pending = self._inflight.get(gid)
            if pending is not None:
                return pending
            out = FutureCell()
            self._inflight[gid] = out
        raw = self._invoke(ACTION_AGAS_RESOLVE, "resolve", gid)

        def done(cell):
            with self._lock:
                self._inflight.pop(gid, None)
            if cell.failed():
                out.fail(cell.exception())
                return
            value = cell.result()
            b = value if isinstance(value, Binding) else Binding(gid, *value)
            self._cache[gid] = b
            out.write(b)

        raw.add_done_callback(done)
        return out

    def register_symbol(self, name, gid: Gid) -> FutureCell:
        key = name.encode("utf-8") if isinstance(name, str) else bytes(name)
        return self._invoke(ACTION_AGAS_REGISTER, "register_symbol", key, gid)

    def lookup_symbol(self, name) -> FutureCell:
        key = name.encode("utf-8") if isinstance(name, str) else bytes(name)
        return self._invoke(ACTION_AGAS_LOOKUP, "lookup_symbol", key)

    def incref(self, gid: Gid, n: int = 1) -> FutureCell:
        return self._invoke(ACTION_AGAS_INCREF, "incref", gid, n)

    def decref(self, gid: Gid, n: int = 1) -> FutureCell:
        cell = self._invoke(ACTION_AGAS_DECREF, "decref", gid, n)

        def forget(c):
            if c.ready() and c.result() == 0:
                self._cache.pop(gid, None)

        cell.add_done_callback(forget)
        return cell

    def register_locality(self, index: int, endpoint: str, action_hash: str) -> FutureCell:
        return self._invoke(ACTION_REGISTER_LOCALITY, "register_locality",
                            index, endpoint, action_hash)

    def list_localities(self) -> FutureCell:
        return self._invoke(ACTION_LIST_LOCALITIES, "list_localities")
