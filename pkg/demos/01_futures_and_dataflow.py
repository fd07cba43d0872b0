"""Futures and dataflow on one runtime.

A future is written once.  A task that reads an empty future suspends and
gives its worker back; the write resumes it.  A dataflow node fires once every
input is written, which is how the solver avoids barriers.

    python demos/01_futures_and_dataflow.py
"""

import time

from pxamr import FutureCell, Runtime, SchedulerPolicy, dataflow
from pxamr.runtime import LocalityId

rt = Runtime(SchedulerPolicy("local", 2), LocalityId(0)).start()

# a reader that parks on an empty future
answer = FutureCell()


async def reader():
    value = await answer
    return f"reader woke up with {value}"


out = FutureCell()
rt.spawn(reader, on_done=lambda r, e: out.set_from(r, e))
while not rt.suspensions:
    time.sleep(0.001)
print("reader suspended; suspensions so far:", rt.suspensions)
answer.write(42)
print(out.get(5))
print("second write allowed?", answer.try_write(43))

# a small dataflow graph: d = (a + b) * c, nothing waits on a barrier
a, b, c = FutureCell(), FutureCell(), FutureCell()
s = dataflow([a, b], lambda v: v[0] + v[1], runtime=rt)
d = dataflow([s, c], lambda v: v[0] * v[1], runtime=rt)
c.write(10)
b.write(2)
print("d ready before a is written?", d.done())
a.write(1)
print("d =", d.get(5))

rt.stop()
