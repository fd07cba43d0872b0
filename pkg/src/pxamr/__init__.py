"""A small asynchronous many-task runtime hosting a partitioned interpolation table
and a refined domain-wall solver.

The core pieces are tasks and futures (``runtime``, ``lco``), a global address
service (``agas``), parcels over TCP (``parcel``, ``transport``) and the
``Locality`` that ties them together.  ``table``, ``cosmo`` and ``amr`` are the
applications; ``bench`` and ``cli`` drive them.
"""

from .gid import Gid
from .lco import FutureCell, dataflow, wait_all
from .locality import Locality
from .runtime import Runtime, SchedulerPolicy

__all__ = ["FutureCell", "Gid", "Locality", "Runtime", "SchedulerPolicy", "dataflow", "wait_all"]
__version__ = "0.1.0"
