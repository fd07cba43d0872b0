"""Local control objects: single-assignment futures and dataflow nodes."""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence

from .runtime import RuntimeStateError, TaskState, current_runtime

_EMPTY, _READY, _FAILED = 0, 1, 2


class FutureError(RuntimeError):
    pass


class DoubleWriteError(FutureError):
    pass


class FutureCell:
    """Single-assignment cell; readers suspend only while it is empty.

    ``await cell`` from a task is the suspending read.  ``cell.get()`` blocks
    the calling OS thread and is meant for code outside the workers.
    """

    __slots__ = ("_state", "_value", "_lock", "_waiters", "_callbacks",
                 "gid", "suspended_reads", "__weakref__")

    def __init__(self):
        self._state = _EMPTY
        self._value = None
        self._lock = threading.Lock()
        self._waiters = None
        self._callbacks = None
        self.gid = None
        self.suspended_reads = 0

    @classmethod
    def ready_with(cls, value) -> "FutureCell":
        cell = cls()
        cell._state = _READY
        cell._value = value
        return cell

    # state

    def done(self) -> bool:
        return self._state != _EMPTY

    def ready(self) -> bool:
        return self._state == _READY

    def failed(self) -> bool:
        return self._state == _FAILED

    @property
    def state(self) -> str:
        return ("empty", "ready", "failed")[self._state]

    def result(self):
        """Terminal value without waiting; raises if still empty or failed."""
        if self._state == _READY:
            return self._value
        if self._state == _FAILED:
            raise self._value
        raise FutureError("future is not ready")

    def exception(self) -> Optional[BaseException]:
        return self._value if self._state == _FAILED else None

    # writes

    def _complete(self, state: int, value) -> bool:
        if self._state != _EMPTY:
            return False
        with self._lock:
            if self._state != _EMPTY:
                return False
            self._value = value
            self._state = state
            waiters, self._waiters = self._waiters, None
            callbacks, self._callbacks = self._callbacks, None
        if waiters:
            for rt, task in waiters:
                rt.resume(task)
        if callbacks:
            for cb in callbacks:
                cb(self)
        return True

    def try_write(self, value) -> bool:
        """Write unless already terminal; True iff this call won."""
        return self._complete(_READY, value)

    def try_fail(self, error: BaseException) -> bool:
        return self._complete(_FAILED, error)

    def write(self, value) -> None:
        if not self._complete(_READY, value):
            raise DoubleWriteError("future already written")

    def fail(self, error: BaseException) -> None:
        if not self._complete(_FAILED, error):
            raise DoubleWriteError("future already written")

    def set_from(self, value, error: Optional[BaseException]) -> bool:
        return self.try_fail(error) if error is not None else self.try_write(value)

    # reads

    def add_done_callback(self, fn: Callable[["FutureCell"], None]) -> None:
        if self._state == _EMPTY:
            with self._lock:
                if self._state == _EMPTY:
                    if self._callbacks is None:
                        self._callbacks = []
                    self._callbacks.append(fn)
                    return
        fn(self)

    def _park(self, task) -> bool:
        with self._lock:
            if self._state != _EMPTY:
                return False
            rt = current_runtime()
            task.state = TaskState.SUSPENDED
            if self._waiters is None:
                self._waiters = []
            self._waiters.append((rt, task))
            self.suspended_reads += 1
            return True

    def __await__(self):
        if self._state == _EMPTY:
            yield self
        if self._state == _FAILED:
            raise self._value
        return self._value

    def get(self, timeout: Optional[float] = None):
        if self._state == _EMPTY:
            if current_runtime() is not None:
                raise RuntimeStateError("blocking get inside a worker; use 'await' instead")
            event = threading.Event()
            self.add_done_callback(lambda _c: event.set())
            if not event.wait(timeout):
                raise TimeoutError("future not ready within timeout")
        return self.result()

    def __repr__(self):
        return f"<FutureCell {self.state}>"


def future_read(cell: FutureCell) -> FutureCell:
    """Awaitable read; ``value = await future_read(cell)``."""
    return cell


def future_write(cell: FutureCell, value=None, error: Optional[BaseException] = None) -> None:
    if error is not None:
        cell.fail(error)
    else:
        cell.write(value)


def forward_outcome(cell: FutureCell, result, error) -> None:
    """Write a task outcome into ``cell``, chaining through returned futures."""
    if error is None and isinstance(result, FutureCell):
        result.add_done_callback(
            lambda src: cell.set_from(src._value if src.ready() else None, src.exception()))
        return
    cell.set_from(result, error)


def spawn_future(runtime, fn: Callable, *args) -> FutureCell:
    """Eagerly run ``fn(*args)`` as a local task; the cell receives its outcome."""
    cell = FutureCell()
    runtime.spawn(fn, *args, on_done=lambda r, e: forward_outcome(cell, r, e))
    return cell


class DataflowNode:
    """Fires ``action(values)`` once, after every input future is terminal."""

    def __init__(self, inputs: Sequence[FutureCell], action: Callable, runtime):
        self.inputs = list(inputs)
        self.action = action
        self.output = FutureCell()
        self.fired = 0
        self._runtime = runtime
        self._lock = threading.Lock()
        self.pending_count = len(self.inputs)
        if not self.inputs:
            self._fire()
            return
        for cell in self.inputs:
            cell.add_done_callback(self._on_input)

    def _on_input(self, _cell) -> None:
        with self._lock:
            self.pending_count -= 1
            last = self.pending_count == 0
        if last:
            self._fire()

    def _fire(self) -> None:
        for cell in self.inputs:
            if cell.failed():
                self.output.try_fail(cell.exception())
                return
        self.fired += 1
        values = [cell._value for cell in self.inputs]
        self._runtime.spawn(self.action, values,
                            on_done=lambda r, e: forward_outcome(self.output, r, e))


def dataflow(inputs: Iterable[FutureCell], action: Callable, *, runtime=None) -> FutureCell:
    """Output future of ``action(values)``, run once all ``inputs`` are written.

    Values are passed as a list in input order.  A failed input fails the
    output without running the action.
    """
    rt = runtime or current_runtime()
    if rt is None:
        raise RuntimeStateError("dataflow needs a runtime (pass runtime= outside a task)")
    return DataflowNode(list(inputs), action, rt).output


async def wait_all(cells: Iterable[FutureCell]) -> list:
    """Read every cell in order; suspends at most once per unready cell."""
    return [await cell for cell in cells]
