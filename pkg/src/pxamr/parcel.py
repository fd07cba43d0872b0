"""Parcel wire format and action tables.

Frame layout (little-endian)::

    "PXP1" | u32 frame_len | u64 dest.msb | u64 dest.lsb | u32 action_id
           | u64 cont.msb | u64 cont.lsb | u32 source | u32 payload_len | payload

``frame_len`` counts every byte after itself.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

from .gid import INVALID_GID, Gid
from .serialization import SCHEMA_CODES, register_error_type

MAGIC = b"PXP1"
_PREFIX = struct.Struct("<4sI")
_HEADER = struct.Struct("<QQIQQII")
HEADER_SIZE = _PREFIX.size + _HEADER.size
MAX_PAYLOAD = (1 << 32) - 1 - _HEADER.size

# reserved action ids
ACTION_AGAS_ALLOCATE = 1
ACTION_AGAS_BIND = 2
ACTION_AGAS_RESOLVE = 3
ACTION_AGAS_REGISTER = 4
ACTION_AGAS_LOOKUP = 5
ACTION_AGAS_INCREF = 6
ACTION_AGAS_DECREF = 7
ACTION_AGAS_UNBIND_NOTIFY = 8
ACTION_WRITE_CONTINUATION = 9
ACTION_REGISTER_LOCALITY = 10
ACTION_LIST_LOCALITIES = 11
ACTION_FUTURE_GET = 12
ACTION_SHUTDOWN = 13
ACTION_TABLE_LOAD = 16
ACTION_TABLE_INTERPOLATE = 17
ACTION_TABLE_INFO = 18
FIRST_USER_ACTION = 32

#: Set on the action id of a parcel re-sent by a locality that found the
#: destination was not local; such a parcel is never forwarded again.
FORWARDED_BIT = 1 << 31


@register_error_type
class ParcelError(ValueError):
    pass


@register_error_type
class TruncatedFrame(ParcelError):
    pass


@register_error_type
class BadMagic(ParcelError):
    pass


@register_error_type
class UnknownAction(ParcelError):
    pass


@dataclass(frozen=True)
class Parcel:
    dest_gid: Gid
    action_id: int
    payload: bytes = b""
    continuation_gid: Gid = INVALID_GID
    source_locality: int = 0


def encode(parcel: Parcel) -> bytes:
    payload = bytes(parcel.payload)
    if len(payload) > MAX_PAYLOAD:
        raise ParcelError("payload too large for a frame")
    d, c = parcel.dest_gid, parcel.continuation_gid
    header = _HEADER.pack(d.msb, d.lsb, parcel.action_id, c.msb, c.lsb,
                          parcel.source_locality, len(payload))
    return _PREFIX.pack(MAGIC, len(header) + len(payload)) + header + payload


def _decode_body(body, actions: Optional["ActionTable"]) -> Parcel:
    dmsb, dlsb, action_id, cmsb, clsb, source, plen = _HEADER.unpack_from(body, 0)
    if plen != len(body) - _HEADER.size:
        raise ParcelError(f"payload length {plen} disagrees with frame length")
    if actions is not None and action_id not in actions:
        raise UnknownAction(f"unknown action id {action_id}")
    return Parcel(Gid(dmsb, dlsb), action_id, bytes(body[_HEADER.size:]),
                  Gid(cmsb, clsb), source)


def decode(frame: bytes, actions: Optional["ActionTable"] = None) -> Parcel:
    """Decode exactly one frame."""
    if len(frame) < _PREFIX.size:
        raise TruncatedFrame("frame shorter than its prefix")
    magic, length = _PREFIX.unpack_from(frame, 0)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if length < _HEADER.size or len(frame) < _PREFIX.size + length:
        raise TruncatedFrame(f"frame needs {length} bytes after prefix")
    if len(frame) > _PREFIX.size + length:
        raise ParcelError("trailing bytes after frame")
    return _decode_body(memoryview(frame)[_PREFIX.size:], actions)


class FrameDecoder:
    """Incremental decoder for a byte stream of concatenated frames."""

    def __init__(self, actions: Optional["ActionTable"] = None):
        self._buf = bytearray()
        self._actions = actions

    def feed(self, data: bytes) -> list[Parcel]:
        self._buf += data
        parcels = []
        pos = 0
        buf = self._buf
        while len(buf) - pos >= _PREFIX.size:
            magic, length = _PREFIX.unpack_from(buf, pos)
            if magic != MAGIC:
                raise BadMagic(f"bad magic {magic!r}")
            if length < _HEADER.size:
                raise ParcelError(f"frame length {length} below header size")
            end = pos + _PREFIX.size + length
            if end > len(buf):
                break
            parcels.append(_decode_body(memoryview(buf)[pos + _PREFIX.size:end], self._actions))
            pos = end
        if pos:
            del self._buf[:pos]
        return parcels

    @property
    def pending(self) -> int:
        return len(self._buf)


ANY_TYPE = -1


@dataclass(frozen=True)
class ActionRegistration:
    action_id: int
    name: str
    schema: str
    handler: Callable = field(compare=False)
    type_tag: int = ANY_TYPE

    def __post_init__(self):
        bad = set(self.schema) - SCHEMA_CODES
        if bad:
            raise ValueError(f"unknown schema codes {sorted(bad)} for {self.name}")


class ActionTable:
    def __init__(self):
        self._actions: dict[int, ActionRegistration] = {}

    def register(self, action_id: int, name: str, schema: str, handler: Callable,
                 type_tag: int = ANY_TYPE) -> ActionRegistration:
        if action_id in self._actions:
            raise ValueError(f"action id {action_id} already registered "
                             f"({self._actions[action_id].name})")
        reg = ActionRegistration(action_id, name, schema, handler, type_tag)
        self._actions[action_id] = reg
        return reg

    def __contains__(self, action_id: int) -> bool:
        return action_id in self._actions

    def __getitem__(self, action_id: int) -> ActionRegistration:
        try:
            return self._actions[action_id]
        except KeyError:
            raise UnknownAction(f"unknown action id {action_id}") from None

    def __len__(self):
        return len(self._actions)

    def table_hash(self) -> str:
        """Digest over ids, names, schemas and type tags, used in the join handshake."""
        h = hashlib.sha256()
        for aid in sorted(self._actions):
            r = self._actions[aid]
            h.update(f"{aid}:{r.name}:{r.schema}:{r.type_tag};".encode())
        return h.hexdigest()[:16]
