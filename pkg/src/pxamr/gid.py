"""128-bit global identifiers.

Layout of the most significant word: ``(locality << 32) | epoch``.  Epoch 0
of every locality is reserved for identifiers minted locally without a
round trip to the address server (futures, continuations, the locality
root object).  Epochs with the top bit set are reserved for plan-scoped
LCOs whose lower words are chosen deterministically by a driver.  AGAS
allocations start at epoch 1.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass

MASK64 = (1 << 64) - 1
MASK32 = (1 << 32) - 1

#: Locality index used by a standalone AGAS server process.
AGAS_LOCALITY = MASK32

LOCAL_EPOCH = 0
PLAN_EPOCH_BIT = 1 << 31


@dataclass(frozen=True, order=True, slots=True)
class Gid:
    msb: int
    lsb: int

    def __post_init__(self):
        if not (0 <= self.msb <= MASK64 and 0 <= self.lsb <= MASK64):
            raise ValueError(f"gid words out of range: {self.msb:#x}, {self.lsb:#x}")

    @property
    def valid(self) -> bool:
        return bool(self.msb or self.lsb)

    @property
    def locality(self) -> int:
        """Locality index encoded in the identifier (the allocator)."""
        return self.msb >> 32

    @property
    def epoch(self) -> int:
        return self.msb & MASK32

    @property
    def is_local_minted(self) -> bool:
        return self.epoch == LOCAL_EPOCH or bool(self.epoch & PLAN_EPOCH_BIT)

    def __int__(self) -> int:
        return (self.msb << 64) | self.lsb

    @classmethod
    def from_int(cls, value: int) -> "Gid":
        return cls((value >> 64) & MASK64, value & MASK64)

    def __repr__(self) -> str:
        return f"Gid({self.msb:#x}, {self.lsb:#x})"


INVALID_GID = Gid(0, 0)


def make_msb(locality: int, epoch: int) -> int:
    if not 0 <= locality <= MASK32 or not 0 <= epoch <= MASK32:
        raise ValueError("locality and epoch must fit in 32 bits")
    return (locality << 32) | epoch


def root_gid(locality: int) -> Gid:
    """Well-known identifier of a locality's runtime-support object."""
    return Gid(make_msb(locality, LOCAL_EPOCH), 1)


AGAS_SERVER_GID = root_gid(AGAS_LOCALITY)


def plan_gid(locality: int, plan_id: int, node: int) -> Gid:
    """Deterministic identifier for node ``node`` of plan ``plan_id`` on a locality."""
    if not 0 <= plan_id < PLAN_EPOCH_BIT:
        raise ValueError("plan id out of range")
    return Gid(make_msb(locality, PLAN_EPOCH_BIT | plan_id), node + 1)


class LocalMinter:
    """Thread-safe source of epoch-0 identifiers for one locality."""

    def __init__(self, locality: int):
        self._msb = make_msb(locality, LOCAL_EPOCH)
        # lsb 1 is the root object
        self._counter = itertools.count(2)
        self._lock = threading.Lock()

    def mint(self) -> Gid:
        with self._lock:
            return Gid(self._msb, next(self._counter))
