"""Little-endian argument and value codecs.

Action arguments are encoded against a fixed per-action schema string, one
code per argument:

    i  int64        u  uint64      I  uint32      d  float64
    ?  bool         g  Gid         s  utf-8 str   b  bytes
    a  ndarray      v  tagged value

Values travelling back through continuations carry a one-byte tag so the
receiver can decode them without knowing the producing action.
"""

from __future__ import annotations

import struct

import numpy as np

from .gid import Gid


class CodecError(ValueError):
    pass


class RemoteError(Exception):
    """An exception raised on another locality, rebuilt from the wire."""

    def __init__(self, kind: str, message: str):
        super().__init__(f"{kind}: {message}")
        self.kind = kind
        self.message = message


_ERROR_TYPES: dict[str, type] = {}


def register_error_type(cls: type) -> type:
    """Let errors of ``cls`` cross the wire as themselves (must accept one message arg)."""
    _ERROR_TYPES[cls.__name__] = cls
    return cls


def _rebuild_error(kind: str, message: str) -> BaseException:
    cls = _ERROR_TYPES.get(kind)
    if cls is None:
        return RemoteError(kind, message)
    return cls(message)


_U8 = struct.Struct("<B")
_U32 = struct.Struct("<I")
_I64 = struct.Struct("<q")
_U64 = struct.Struct("<Q")
_F64 = struct.Struct("<d")
_GID = struct.Struct("<QQ")

_DTYPES = {b"d": np.dtype("<f8"), b"q": np.dtype("<i8"), b"B": np.dtype("u1")}
_DTYPE_CODES = {v: k for k, v in _DTYPES.items()}

SCHEMA_CODES = frozenset("iuId?gsbav")


def _pack_array(out: bytearray, arr) -> None:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    if dt.kind == "f":
        dt = np.dtype("<f8")
    elif dt.kind in "iu" and dt != np.dtype("u1"):
        dt = np.dtype("<i8")
    elif dt.kind == "b":
        dt = np.dtype("u1")
    code = _DTYPE_CODES.get(dt)
    if code is None:
        raise CodecError(f"unsupported array dtype {arr.dtype}")
    arr = np.ascontiguousarray(arr, dtype=dt)
    out += code
    out += _U8.pack(arr.ndim)
    for n in arr.shape:
        out += _U32.pack(n)
    out += arr.tobytes()


def _unpack_array(buf, pos: int):
    code = bytes(buf[pos:pos + 1])
    dt = _DTYPES.get(code)
    if dt is None:
        raise CodecError(f"bad array dtype code {code!r}")
    ndim = buf[pos + 1]
    pos += 2
    shape = []
    for _ in range(ndim):
        shape.append(_U32.unpack_from(buf, pos)[0])
        pos += 4
    count = int(np.prod(shape)) if shape else 1
    nbytes = count * dt.itemsize
    if pos + nbytes > len(buf):
        raise CodecError("truncated array")
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=pos).reshape(shape).copy()
    return arr, pos + nbytes


def _pack_str(out: bytearray, raw: bytes) -> None:
    out += _U32.pack(len(raw))
    out += raw


def _unpack_raw(buf, pos: int):
    (n,) = _U32.unpack_from(buf, pos)
    pos += 4
    if pos + n > len(buf):
        raise CodecError("truncated string")
    return bytes(buf[pos:pos + n]), pos + n


def _pack_one(out: bytearray, code: str, value) -> None:
    if code == "i":
        out += _I64.pack(int(value))
    elif code == "u":
        out += _U64.pack(int(value))
    elif code == "I":
        out += _U32.pack(int(value))
    elif code == "d":
        out += _F64.pack(float(value))
    elif code == "?":
        out += _U8.pack(1 if value else 0)
    elif code == "g":
        out += _GID.pack(value.msb, value.lsb)
    elif code == "s":
        _pack_str(out, str(value).encode("utf-8"))
    elif code == "b":
        _pack_str(out, bytes(value))
    elif code == "a":
        _pack_array(out, value)
    elif code == "v":
        pack_value(out, value)
    else:
        raise CodecError(f"unknown schema code {code!r}")


def _unpack_one(buf, pos: int, code: str):
    try:
        if code == "i":
            return _I64.unpack_from(buf, pos)[0], pos + 8
        if code == "u":
            return _U64.unpack_from(buf, pos)[0], pos + 8
        if code == "I":
            return _U32.unpack_from(buf, pos)[0], pos + 4
        if code == "d":
            return _F64.unpack_from(buf, pos)[0], pos + 8
        if code == "?":
            return bool(buf[pos]), pos + 1
        if code == "g":
            msb, lsb = _GID.unpack_from(buf, pos)
            return Gid(msb, lsb), pos + 16
        if code == "s":
            raw, pos = _unpack_raw(buf, pos)
            return raw.decode("utf-8"), pos
        if code == "b":
            return _unpack_raw(buf, pos)
        if code == "a":
            return _unpack_array(buf, pos)
        if code == "v":
            return unpack_value(buf, pos)
    except (struct.error, IndexError) as exc:
        raise CodecError(f"truncated argument ({code})") from exc
    raise CodecError(f"unknown schema code {code!r}")


def encode_args(schema: str, args) -> bytes:
    if len(args) != len(schema):
        raise CodecError(f"schema {schema!r} expects {len(schema)} args, got {len(args)}")
    out = bytearray()
    for code, value in zip(schema, args):
        try:
            _pack_one(out, code, value)
        except (struct.error, TypeError, ValueError, AttributeError) as exc:
            raise CodecError(f"cannot encode {value!r} as {code!r}: {exc}") from None
    return bytes(out)


def decode_args(schema: str, payload) -> tuple:
    pos = 0
    values = []
    for code in schema:
        value, pos = _unpack_one(payload, pos, code)
        values.append(value)
    if pos != len(payload):
        raise CodecError(f"{len(payload) - pos} trailing bytes after arguments")
    return tuple(values)


# tagged values


def pack_value(out: bytearray, value) -> None:
    if value is None:
        out += b"N"
    elif isinstance(value, (bool, np.bool_)):
        out += b"?" + _U8.pack(1 if value else 0)
    elif isinstance(value, (int, np.integer)):
        out += b"i" + _I64.pack(int(value))
    elif isinstance(value, (float, np.floating)):
        out += b"d" + _F64.pack(float(value))
    elif isinstance(value, str):
        out += b"s"
        _pack_str(out, value.encode("utf-8"))
    elif isinstance(value, (bytes, bytearray, memoryview)):
        out += b"b"
        _pack_str(out, bytes(value))
    elif isinstance(value, Gid):
        out += b"g" + _GID.pack(value.msb, value.lsb)
    elif isinstance(value, np.ndarray):
        out += b"a"
        _pack_array(out, value)
    elif isinstance(value, (list, tuple)):
        out += b"l" + _U32.pack(len(value))
        for item in value:
            pack_value(out, item)
    elif isinstance(value, BaseException):
        if isinstance(value, RemoteError):
            kind, message = value.kind, value.message
        else:
            kind, message = type(value).__name__, str(value)
        out += b"e"
        _pack_str(out, kind.encode("utf-8"))
        _pack_str(out, message.encode("utf-8"))
    else:
        raise CodecError(f"cannot serialize {type(value).__name__}")


def unpack_value(buf, pos: int = 0):
    if pos >= len(buf):
        raise CodecError("truncated value")
    tag = bytes(buf[pos:pos + 1])
    pos += 1
    try:
        if tag == b"N":
            return None, pos
        if tag == b"?":
            return bool(buf[pos]), pos + 1
        if tag == b"i":
            return _I64.unpack_from(buf, pos)[0], pos + 8
        if tag == b"d":
            return _F64.unpack_from(buf, pos)[0], pos + 8
        if tag == b"s":
            raw, pos = _unpack_raw(buf, pos)
            return raw.decode("utf-8"), pos
        if tag == b"b":
            return _unpack_raw(buf, pos)
        if tag == b"g":
            msb, lsb = _GID.unpack_from(buf, pos)
            return Gid(msb, lsb), pos + 16
        if tag == b"a":
            return _unpack_array(buf, pos)
        if tag == b"l":
            (n,) = _U32.unpack_from(buf, pos)
            pos += 4
            items = []
            for _ in range(n):
                item, pos = unpack_value(buf, pos)
                items.append(item)
            return items, pos
        if tag == b"e":
            kind, pos = _unpack_raw(buf, pos)
            message, pos = _unpack_raw(buf, pos)
            return _rebuild_error(kind.decode("utf-8"), message.decode("utf-8")), pos
    except (struct.error, IndexError) as exc:
        raise CodecError("truncated value") from exc
    raise CodecError(f"unknown value tag {tag!r}")


def encode_value(value) -> bytes:
    out = bytearray()
    pack_value(out, value)
    return bytes(out)


def decode_value(buf):
    value, pos = unpack_value(buf, 0)
    if pos != len(buf):
        raise CodecError("trailing bytes after value")
    return value


for _cls in (ValueError, TypeError, KeyError, IndexError, RuntimeError,
             ZeroDivisionError, ArithmeticError, TimeoutError):
    register_error_type(_cls)
del _cls
