"""Per-locality task engine.

Tasks are plain callables or coroutine functions.  A coroutine task suspends
by awaiting an LCO; the worker that was running it is released and picks up
other work, and the task is re-enqueued when the LCO is written.  There is no
preemption.
"""

from __future__ import annotations

import enum
import itertools
import logging
import threading
import types
from collections import deque
from dataclasses import dataclass
from typing import Any, Callable, Optional

log = logging.getLogger(__name__)


class RuntimeStateError(RuntimeError):
    pass


class TaskState(enum.Enum):
    PENDING = "pending"
    RUNNING = "running"
    SUSPENDED = "suspended"
    FINISHED = "finished"


class SchedulerKind(str, enum.Enum):
    GLOBAL_QUEUE = "global_queue"
    LOCAL_QUEUE = "local_queue"

    @classmethod
    def parse(cls, value) -> "SchedulerKind":
        if isinstance(value, cls):
            return value
        aliases = {"global": cls.GLOBAL_QUEUE, "local": cls.LOCAL_QUEUE}
        return aliases.get(value) or cls(value)


@dataclass(frozen=True)
class SchedulerPolicy:
    kind: SchedulerKind = SchedulerKind.GLOBAL_QUEUE
    worker_count: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kind", SchedulerKind.parse(self.kind))
        if self.worker_count < 1:
            raise ValueError("worker_count must be at least 1")


@dataclass(frozen=True)
class LocalityId:
    index: int
    endpoint: str = ""


class Task:
    __slots__ = ("id", "fn", "args", "coro", "state", "on_done", "_lock", "worker")

    def __init__(self, task_id: int, fn: Callable, args: tuple, on_done=None):
        self.id = task_id
        self.fn = fn
        self.args = args
        self.coro = None
        self.state = TaskState.PENDING
        self.on_done = on_done
        self._lock = threading.Lock()
        self.worker = None

    def __repr__(self):
        return f"<Task {self.id} {self.state.value}>"


class _WorkQueue:
    __slots__ = ("_items", "_lock")

    def __init__(self):
        self._items = deque()
        self._lock = threading.Lock()

    def push(self, task):
        with self._lock:
            self._items.append(task)

    def pop_head(self):
        with self._lock:
            return self._items.popleft() if self._items else None

    def steal_tail(self):
        with self._lock:
            return self._items.pop() if self._items else None

    def __len__(self):
        return len(self._items)


class _Suspend:
    """Awaitable that parks the current task until ``resume_task`` is called."""

    def _park(self, task) -> bool:
        with task._lock:
            task.state = TaskState.SUSPENDED
        return True

    def __await__(self):
        yield self


_tls = threading.local()


def current_task() -> Optional[Task]:
    return getattr(_tls, "task", None)


def current_runtime() -> Optional["Runtime"]:
    return getattr(_tls, "runtime", None)


def current_worker() -> Optional[int]:
    return getattr(_tls, "worker", None)


class Runtime:
    """A pool of worker threads executing tasks under one scheduling policy."""

    def __init__(self, policy: SchedulerPolicy, locality: LocalityId = LocalityId(0)):
        self.policy = policy
        self.locality = locality
        n = policy.worker_count
        if policy.kind is SchedulerKind.LOCAL_QUEUE:
            self.queues = [_WorkQueue() for _ in range(n)]
            self.ingress = _WorkQueue()
        else:
            self.queues = []
            self.ingress = _WorkQueue()
        self.executed = [0] * n
        self.stolen = [0] * n
        self.suspensions = 0
        self.spawned = 0
        self.errors: list[BaseException] = []
        self._ids = itertools.count(1)
        self._tasks: dict[int, Task] = {}
        self._wake = threading.Condition()
        self._n_idle = 0
        self._stopping = False
        self._started = False
        self._threads: list[threading.Thread] = []
        self._count_lock = threading.Lock()

    # lifecycle

    def start(self) -> "Runtime":
        if self._started:
            raise RuntimeStateError("runtime already started")
        self._started = True
        for wid in range(self.policy.worker_count):
            t = threading.Thread(target=self._worker_main, args=(wid,),
                                 name=f"px-L{self.locality.index}-W{wid}", daemon=True)
            self._threads.append(t)
            t.start()
        return self

    def stop(self, timeout: float = 10.0) -> None:
        self._stopping = True
        with self._wake:
            self._wake.notify_all()
        me = threading.current_thread()
        for t in self._threads:
            if t is not me:
                t.join(timeout)

    @property
    def running(self) -> bool:
        return self._started and not self._stopping

    @property
    def completed(self) -> int:
        return sum(self.executed)

    # spawning

    def spawn(self, fn: Callable, *args, on_done=None, worker: Optional[int] = None) -> int:
        """Enqueue ``fn(*args)`` as a new task and return its id.

        ``on_done(result, error)`` runs on the worker when the task finishes.
        ``worker`` pins the initial queue under the local-queue policy.
        """
        if self._stopping:
            raise RuntimeStateError("runtime is shutting down")
        task = Task(next(self._ids), fn, args, on_done)
        with self._count_lock:
            self.spawned += 1
        self._enqueue(task, worker)
        return task.id

    def _enqueue(self, task: Task, worker: Optional[int] = None) -> None:
        if self.queues:
            if worker is None and getattr(_tls, "runtime", None) is self:
                worker = _tls.worker
            q = self.queues[worker] if worker is not None else self.ingress
        else:
            q = self.ingress
        q.push(task)
        if self._n_idle:
            with self._wake:
                self._wake.notify()

    def steal_work(self, thief: int) -> Optional[Task]:
        """Take one task from the tail of another worker's queue, ring order from thief+1."""
        if not self.queues:
            return None
        n = len(self.queues)
        for k in range(1, n):
            task = self.queues[(thief + k) % n].steal_tail()
            if task is not None:
                self.stolen[thief] += 1
                return task
        return None

    def _next_task(self, wid: int) -> Optional[Task]:
        if self.queues:
            task = self.queues[wid].pop_head()
            if task is None:
                task = self.ingress.pop_head()
            if task is None:
                task = self.steal_work(wid)
            return task
        return self.ingress.pop_head()

    def _has_work(self) -> bool:
        return bool(len(self.ingress) or any(len(q) for q in self.queues))

    # suspension

    def suspend_current(self) -> _Suspend:
        """Awaitable; ``await rt.suspend_current()`` parks the calling task."""
        if current_task() is None:
            raise RuntimeStateError("suspend_current called outside a task")
        return _Suspend()

    def resume_task(self, task_id: int) -> None:
        task = self._tasks.get(task_id)
        if task is None:
            raise RuntimeStateError(f"task {task_id} is not suspended")
        self.resume(task)

    def resume(self, task: Task) -> None:
        with task._lock:
            if task.state is not TaskState.SUSPENDED:
                raise RuntimeStateError(f"task {task.id} is {task.state.value}, not suspended")
            task.state = TaskState.PENDING
        self._tasks.pop(task.id, None)
        self._enqueue(task)

    def task_state(self, task_id: int) -> Optional[TaskState]:
        task = self._tasks.get(task_id)
        return task.state if task is not None else None

    # execution

    def _worker_main(self, wid: int) -> None:
        _tls.runtime = self
        _tls.worker = wid
        while True:
            task = self._next_task(wid)
            if task is not None:
                self._execute(task, wid)
                continue
            if self._stopping:
                break
            with self._wake:
                self._n_idle += 1
                try:
                    if not self._has_work() and not self._stopping:
                        self._wake.wait(0.05)
                finally:
                    self._n_idle -= 1

    def _execute(self, task: Task, wid: int) -> None:
        task.state = TaskState.RUNNING
        task.worker = wid
        _tls.task = task
        try:
            coro = task.coro
            if coro is None:
                result = task.fn(*task.args)
                if not isinstance(result, types.CoroutineType):
                    self._finish(task, wid, result, None)
                    return
                coro = task.coro = result
            while True:
                waitable = coro.send(None)
                # registered before parking: a concurrent resume may pop it
                self._tasks[task.id] = task
                if waitable._park(task):
                    with self._count_lock:
                        self.suspensions += 1
                    return
                self._tasks.pop(task.id, None)
        except StopIteration as stop:
            self._finish(task, wid, stop.value, None)
        except BaseException as exc:  # noqa: BLE001 - surfaced via on_done / errors
            self._finish(task, wid, None, exc)
        finally:
            _tls.task = None

    def _finish(self, task: Task, wid: int, result: Any, error: Optional[BaseException]):
        task.state = TaskState.FINISHED
        task.coro = None
        self.executed[wid] += 1
        if task.on_done is not None:
            try:
                task.on_done(result, error)
            except BaseException as exc:  # noqa: BLE001
                log.exception("task completion callback failed")
                self.errors.append(exc)
        elif error is not None:
            log.error("task %d failed: %r", task.id, error)
            self.errors.append(error)

    # convenience

    def run(self, fn: Callable, *args, timeout: Optional[float] = None):
        """Run ``fn`` as a task from an external thread and return its result."""
        if getattr(_tls, "runtime", None) is self:
            raise RuntimeStateError("Runtime.run blocks; call it from outside the workers")
        done = threading.Event()
        box = {}

        def on_done(result, error):
            box["result"], box["error"] = result, error
            done.set()

        self.spawn(fn, *args, on_done=on_done)
        if not done.wait(timeout):
            raise TimeoutError(f"task did not finish within {timeout} s")
        if box["error"] is not None:
            raise box["error"]
        return box["result"]


class CountdownLatch:
    """Application-owned quiescence latch."""

    def __init__(self, count: int):
        if count < 0:
            raise ValueError("count must be non-negative")
        self._count = count
        self._cond = threading.Condition()

    def count_down(self, n: int = 1) -> None:
        with self._cond:
            if n > self._count:
                raise ValueError("latch count would go negative")
            self._count -= n
            if self._count == 0:
                self._cond.notify_all()

    @property
    def count(self) -> int:
        return self._count

    def wait(self, timeout: Optional[float] = None) -> bool:
        with self._cond:
            return self._cond.wait_for(lambda: self._count == 0, timeout)


_process_runtime: Optional[Runtime] = None
_process_lock = threading.Lock()


def start_runtime(policy: SchedulerPolicy, locality: LocalityId = LocalityId(0)) -> Runtime:
    """Start the process-wide runtime instance."""
    global _process_runtime
    with _process_lock:
        if _process_runtime is not None and _process_runtime.running:
            raise RuntimeStateError("a runtime is already started in this process")
        _process_runtime = Runtime(policy, locality).start()
        return _process_runtime


def stop_runtime() -> None:
    global _process_runtime
    with _process_lock:
        if _process_runtime is not None:
            _process_runtime.stop()
            _process_runtime = None


def spawn_task(handle: Runtime, action: Callable, *args) -> int:
    return handle.spawn(action, *args)


def steal_work(handle: Runtime, thief: int) -> Optional[Task]:
    return handle.steal_work(thief)


def suspend_current(handle: Runtime) -> _Suspend:
    return handle.suspend_current()


def resume_task(handle: Runtime, task_id: int) -> None:
    handle.resume_task(task_id)
