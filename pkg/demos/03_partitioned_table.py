"""A table cut into slabs and queried through a routing client.

The table is written to disk, loaded as 8 slabs spread over two localities,
and queried with eager futures.  Every answer is checked against a single
unpartitioned copy.

    python demos/03_partitioned_table.py
"""

import os
import tempfile

import numpy as np

from pxamr import Locality
from pxamr.bench import random_points, relative_error, table_oracle
from pxamr.table import TableSpec, create_partitions, generate_table, read_spec

path = os.path.join(tempfile.mkdtemp(prefix="pxamr-demo-"), "mixed.eos")
spec = TableSpec.uniform(33, 9, 9, fields=19)
generate_table(spec, "mixed", path)
print(f"wrote {path} ({os.path.getsize(path)} bytes)")

with Locality(0, workers=2, host_agas=True).start() as a, \
        Locality(1, workers=2, agas=a.endpoint).start():
    client = a.run(create_partitions, a, path, 8, [0, 1], "demo", timeout=30)
    for lo, hi, gid, owner in client.entries:
        print(f"  planes [{lo:2d}, {hi:2d}) on locality {owner}")
    pts = random_points(read_spec(path), 2000, seed=1)
    got = np.array(client.bulk_query_sync(pts, timeout=60))
    err = relative_error(got, table_oracle(path, pts))
    print(f"2000 queries, largest relative difference from the single copy: {err:.1e}")
    # a point on a slab boundary goes to the lower slab
    x = spec.x.points()[4]
    print(f"x={x} is answered by slab {client.owner(x)}")
