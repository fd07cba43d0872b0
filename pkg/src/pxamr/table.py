"""Partitioned interpolation tables (a stand-in for tabulated equations of state).

A table is a uniform 3-D grid of records with ``F`` fields.  It is cut into
slabs along the first axis; each slab carries one read-only ghost plane so
that every cell it owns can be interpolated without communication.  An
:class:`EosClient` routes each query to the slab that owns the cell.

File layout (little-endian)::

    "EOST" u32 version=1, u32 nx, ny, nz, F,
    f64 xmin, xmax, ymin, ymax, zmin, zmax,
    nx*ny*nz*F f64 values: x slowest, z fastest, field innermost
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .lco import FutureCell
from .parcel import ACTION_TABLE_INFO, ACTION_TABLE_INTERPOLATE, ACTION_TABLE_LOAD
from .serialization import register_error_type

TABLE_MAGIC = b"EOST"
TABLE_VERSION = 1
_HEADER = struct.Struct("<4sIIIII6d")
HEADER_SIZE = _HEADER.size

PARTITION_TYPE = 16
MAP_TYPE = 17


@register_error_type
class OutOfRange(ValueError):
    pass


@register_error_type
class TableFormatError(ValueError):
    pass


class BulkQueryError(RuntimeError):
    def __init__(self, index: int, cause: BaseException):
        super().__init__(f"query {index} failed: {cause}")
        self.index = index
        self.cause = cause


@dataclass(frozen=True)
class Axis:
    min: float
    max: float
    n: int

    def __post_init__(self):
        if self.n < 2:
            raise ValueError(f"axis needs at least 2 points, got {self.n}")
        if not self.min < self.max:
            raise ValueError(f"axis min {self.min} must be below max {self.max}")

    @property
    def spacing(self) -> float:
        return (self.max - self.min) / (self.n - 1)

    def points(self) -> np.ndarray:
        return self.min + self.spacing * np.arange(self.n)


@dataclass(frozen=True)
class TableSpec:
    x: Axis
    y: Axis
    z: Axis
    fields: int = 19

    def __post_init__(self):
        if self.fields < 1:
            raise ValueError("field count must be positive")

    @classmethod
    def uniform(cls, nx: int, ny: int, nz: int, fields: int = 19,
                bounds=((0.0, 1.0), (0.0, 1.0), (0.0, 1.0))) -> "TableSpec":
        (x0, x1), (y0, y1), (z0, z1) = bounds
        return cls(Axis(x0, x1, nx), Axis(y0, y1, ny), Axis(z0, z1, nz), fields)

    @property
    def axes(self) -> tuple[Axis, Axis, Axis]:
        return (self.x, self.y, self.z)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return (self.x.n, self.y.n, self.z.n, self.fields)

    @property
    def record_count(self) -> int:
        return self.x.n * self.y.n * self.z.n

    @property
    def file_size(self) -> int:
        return HEADER_SIZE + self.record_count * self.fields * 8

    def to_list(self) -> list:
        return [[a.n for a in self.axes] + [self.fields],
                [v for a in self.axes for v in (a.min, a.max)]]

    @classmethod
    def from_list(cls, value) -> "TableSpec":
        (nx, ny, nz, f), b = value
        return cls(Axis(b[0], b[1], nx), Axis(b[2], b[3], ny), Axis(b[4], b[5], nz), f)


# synthetic generators; each maps coordinate arrays to (..., F) values


def _linear(x, y, z, nfields):
    k = np.arange(nfields)
    return (1.0 + 2.0 * x + 3.0 * y + 4.0 * z)[..., None] + k


def _trilinear(x, y, z, nfields):
    k = np.arange(nfields)
    return ((1.0 + x) * (2.0 - y) * (0.5 + z))[..., None] * (1.0 + k) + x[..., None] * k


def _smooth(x, y, z, nfields):
    k = np.arange(nfields)
    return (np.sin(2.0 * x[..., None] + 0.3 * k) * np.cos(1.5 * y[..., None])
            * np.exp(0.5 * z[..., None]))


def _mixed(x, y, z, nfields):
    out = np.empty(np.broadcast(x, y, z).shape + (nfields,))
    for k in range(nfields):
        kind = k % 3
        if kind == 0:
            out[..., k] = 1.0 + x * x - 0.5 * y * z + 0.1 * k
        elif kind == 1:
            out[..., k] = np.sin(x + 0.2 * k) * np.cos(y - z)
        else:
            out[..., k] = np.exp(-x) * np.log1p(y + 0.5 * z + 1.0) + k
    return out


GENERATORS: dict[str, Callable] = {
    "linear": _linear,
    "trilinear": _trilinear,
    "smooth": _smooth,
    "mixed": _mixed,
}


def evaluate_generator(name: str, x, y, z, nfields: int) -> np.ndarray:
    """Closed-form field values of a generator at arbitrary points."""
    try:
        gen = GENERATORS[name]
    except KeyError:
        raise ValueError(f"unknown generator {name!r}; choose from {sorted(GENERATORS)}") from None
    x, y, z = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (x, y, z)))
    return gen(x, y, z, nfields)


def generate_table(spec: TableSpec, generator: str, path) -> str:
    """Sample ``generator`` on the grid of ``spec`` and write a table file."""
    X, Y, Z = np.meshgrid(spec.x.points(), spec.y.points(), spec.z.points(), indexing="ij")
    values = evaluate_generator(generator, X, Y, Z, spec.fields).astype("<f8", copy=False)
    path = os.fspath(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(TABLE_MAGIC, TABLE_VERSION, spec.x.n, spec.y.n, spec.z.n,
                              spec.fields, spec.x.min, spec.x.max, spec.y.min, spec.y.max,
                              spec.z.min, spec.z.max))
        fh.write(np.ascontiguousarray(values).tobytes())
    return path


def read_spec(path) -> TableSpec:
    with open(path, "rb") as fh:
        raw = fh.read(HEADER_SIZE)
    if len(raw) < HEADER_SIZE:
        raise TableFormatError("file shorter than header")
    magic, version, nx, ny, nz, f, *b = _HEADER.unpack(raw)
    if magic != TABLE_MAGIC:
        raise TableFormatError(f"bad magic {magic!r}")
    if version != TABLE_VERSION:
        raise TableFormatError(f"unsupported version {version}")
    spec = TableSpec(Axis(b[0], b[1], nx), Axis(b[2], b[3], ny), Axis(b[4], b[5], nz), f)
    if os.path.getsize(path) != spec.file_size:
        raise TableFormatError(f"file size {os.path.getsize(path)} != {spec.file_size}")
    return spec


def read_planes(path, spec: TableSpec, lo: int, hi: int) -> np.ndarray:
    """x-planes ``[lo, hi)`` as an array of shape (hi-lo, ny, nz, F)."""
    plane = spec.y.n * spec.z.n * spec.fields
    with open(path, "rb") as fh:
        fh.seek(HEADER_SIZE + lo * plane * 8)
        data = np.fromfile(fh, dtype="<f8", count=(hi - lo) * plane)
    if data.size != (hi - lo) * plane:
        raise TableFormatError("table file truncated")
    return data.reshape(hi - lo, spec.y.n, spec.z.n, spec.fields)


def read_table(path) -> tuple[TableSpec, np.ndarray]:
    spec = read_spec(path)
    return spec, read_planes(path, spec, 0, spec.x.n)


def slab_bounds(nx: int, parts: int) -> list[tuple[int, int]]:
    """Disjoint ``[lo, hi)`` plane intervals tiling ``[0, nx)``; sizes differ by at most one."""
    if parts < 1:
        raise ValueError("need at least one partition")
    if parts > nx:
        raise ValueError(f"{parts} partitions exceed {nx} x-planes")
    base, extra = divmod(nx, parts)
    bounds, lo = [], 0
    for p in range(parts):
        hi = lo + base + (1 if p < extra else 0)
        bounds.append((lo, hi))
        lo = hi
    return bounds


def _grid_coordinate(value: float, axis: Axis) -> float:
    if not axis.min <= value <= axis.max:
        raise OutOfRange(f"{value!r} outside [{axis.min}, {axis.max}]")
    t = (value - axis.min) / axis.spacing
    # snap rounding noise so that grid nodes reproduce stored values exactly
    r = round(t)
    return float(r) if abs(t - r) <= 1e-12 * max(1.0, abs(t)) else t


def _fraction(value: float, axis: Axis, first_cell: int, last_cell: int) -> tuple[int, float]:
    t = _grid_coordinate(value, axis)
    i = min(max(math.floor(t), 0), axis.n - 2)
    if i == last_cell + 1 and t == i:
        # the plane at the top of the owned range, reached through the ghost plane
        return last_cell, 1.0
    if not first_cell <= i <= last_cell:
        raise OutOfRange(f"{value!r} is not in cells [{first_cell}, {last_cell}]")
    return i, t - i


def route_cell(x: float, axis: Axis) -> int:
    """Cell used for routing; a point on interior plane k goes to cell k-1."""
    t = _grid_coordinate(x, axis)
    return min(max(math.ceil(t) - 1, 0), axis.n - 2)


def _lerp3(block: np.ndarray, fx: float, fy: float, fz: float) -> np.ndarray:
    c = block[0] * (1.0 - fx) + block[1] * fx
    c = c[0] * (1.0 - fy) + c[1] * fy
    return c[0] * (1.0 - fz) + c[1] * fz


class TablePartition:
    """Owned x-planes ``[lo, hi)`` plus a ghost plane at ``hi`` when ``hi < nx``."""

    def __init__(self, index: int, lo: int, hi: int, spec: TableSpec, data: np.ndarray):
        expected = hi - lo + (1 if hi < spec.x.n else 0)
        if data.shape != (expected, spec.y.n, spec.z.n, spec.fields):
            raise ValueError(f"partition data shape {data.shape} does not match "
                             f"({expected}, {spec.y.n}, {spec.z.n}, {spec.fields})")
        self.index = index
        self.lo = lo
        self.hi = hi
        self.spec = spec
        self.data = data
        self.destroyed = False

    @classmethod
    def load(cls, path, index: int, lo: int, hi: int) -> "TablePartition":
        spec = read_spec(path)
        top = min(hi + 1, spec.x.n)
        return cls(index, lo, hi, spec, read_planes(path, spec, lo, top))

    @property
    def nbytes(self) -> int:
        return self.data.nbytes

    @property
    def cell_range(self) -> tuple[int, int]:
        return self.lo, min(self.hi, self.spec.x.n - 1) - 1

    def interpolate(self, x: float, y: float, z: float) -> np.ndarray:
        s = self.spec
        first, last = self.cell_range
        if last < first:
            raise OutOfRange(f"partition {self.index} owns no cells")
        try:
            i, fx = _fraction(x, s.x, first, last)
        except OutOfRange as exc:
            raise OutOfRange(f"partition {self.index}: {exc}") from None
        j, fy = _fraction(y, s.y, 0, s.y.n - 2)
        k, fz = _fraction(z, s.z, 0, s.z.n - 2)
        il = i - self.lo
        return _lerp3(self.data[il:il + 2, j:j + 2, k:k + 2], fx, fy, fz)

    def info(self) -> list:
        return [self.index, self.lo, self.hi, self.nbytes]

    def destroy(self) -> None:
        self.destroyed = True
        self.data = self.data[:0]


def interpolate_local(partition: TablePartition, point: Sequence[float]) -> np.ndarray:
    x, y, z = point
    return partition.interpolate(x, y, z)


class PartitionMap:
    """Component holding the routing map, published under ``<name>/map``."""

    def __init__(self, spec: TableSpec, entries: list):
        self.spec = spec
        self.entries = entries

    def info(self) -> list:
        return [self.spec.to_list(), [[lo, hi, gid, loc] for lo, hi, gid, loc in self.entries]]


class EosClient:
    """Routes point queries to the owning partition; one eager future per query."""

    def __init__(self, locality, spec: TableSpec, entries: list):
        self.locality = locality
        self.spec = spec
        self.entries = sorted(entries, key=lambda e: e[0])
        self._owner = np.empty(spec.x.n - 1, dtype=np.int64)
        covered = 0
        for e, (lo, hi, _gid, _loc) in enumerate(self.entries):
            if lo != covered:
                raise ValueError("partition map does not tile the x axis")
            self._owner[lo:min(hi, spec.x.n - 1)] = e
            covered = hi
        if covered != spec.x.n:
            raise ValueError("partition map does not cover the x axis")

    @classmethod
    async def connect(cls, locality, name: str = "eos") -> "EosClient":
        gid = await locality.agas.lookup_symbol(f"{name}/map")
        spec_l, entries = await locality.async_action(gid, ACTION_TABLE_INFO)
        return cls(locality, TableSpec.from_list(spec_l), [tuple(e) for e in entries])

    def owner(self, x: float) -> int:
        return int(self._owner[route_cell(x, self.spec.x)])

    def query(self, point: Sequence[float]) -> FutureCell:
        x, y, z = (float(v) for v in point)
        try:
            entry = self.entries[self.owner(x)]
            for v, axis in ((y, self.spec.y), (z, self.spec.z)):
                if not axis.min <= v <= axis.max:
                    raise OutOfRange(f"{v!r} outside [{axis.min}, {axis.max}]")
        except OutOfRange as exc:
            cell = FutureCell()
            cell.fail(exc)
            return cell
        return self.locality.async_action(entry[2], ACTION_TABLE_INTERPOLATE, x, y, z)

    async def bulk_query(self, points) -> list:
        cells = [self.query(p) for p in points]
        out = []
        for i, cell in enumerate(cells):
            try:
                out.append(await cell)
            except Exception as exc:  # noqa: BLE001
                raise BulkQueryError(i, exc) from exc
        return out

    def bulk_query_sync(self, points, timeout=None) -> list:
        return self.locality.run(self.bulk_query, points, timeout=timeout)


async def create_partitions(locality, path, parts: int, localities: Sequence[int],
                            name: str = "eos") -> EosClient:
    """Load ``parts`` slabs round-robin over ``localities`` and publish the map."""
    if not localities:
        raise ValueError("need at least one locality")
    from .gid import root_gid

    spec = read_spec(path)
    bounds = slab_bounds(spec.x.n, parts)
    path = os.path.abspath(os.fspath(path))
    cells = []
    for p, (lo, hi) in enumerate(bounds):
        owner = localities[p % len(localities)]
        cells.append((lo, hi, owner, locality.async_action(
            root_gid(owner), ACTION_TABLE_LOAD, path, p, lo, hi, name)))
    entries, failure = [], None
    for lo, hi, owner, cell in cells:
        try:
            entries.append((lo, hi, await cell, owner))
        except Exception as exc:  # noqa: BLE001
            failure = failure or exc
    if failure is not None:
        for _lo, _hi, gid, _owner in entries:
            try:
                await locality.agas.decref(gid, 1)
            except Exception:  # noqa: BLE001 - best effort cleanup
                pass
        raise failure
    gid = await locality.new_component(PartitionMap(spec, entries), MAP_TYPE)
    await locality.agas.register_symbol(f"{name}/map", gid)
    return EosClient(locality, spec, entries)


async def _load_action(loc, _root, path, index, lo, hi, name):
    part = TablePartition.load(path, index, lo, hi)
    gid = await loc.new_component(part, PARTITION_TYPE)
    await loc.agas.register_symbol(f"{name}/partition/{index}", gid)
    return gid


def register_actions(table) -> None:
    from .locality import ROOT_TYPE

    table.register(ACTION_TABLE_LOAD, "eos.load", "sIIIs", _load_action, type_tag=ROOT_TYPE)
    table.register(ACTION_TABLE_INTERPOLATE, "eos.interpolate", "ddd",
                   lambda loc, part, x, y, z: part.interpolate(x, y, z),
                   type_tag=PARTITION_TYPE)
    table.register(ACTION_TABLE_INFO, "eos.info", "", lambda loc, obj: obj.info())
