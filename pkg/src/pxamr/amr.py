"""Berger-Oliger refinement in 1-D with tapered coarse-fine interfaces.

Grids are vertex centered with refinement ratio 2: fine index ``2j`` sits on
coarse index ``j``.  A patch owns cells ``[lo, hi)`` of its level (indices wrap
modulo the level size, so a patch may straddle the periodic seam).  Before a
level advances it is padded with a buffer filled from sibling interiors or,
where no sibling owns a cell, by linear prolongation of the parent level at
the start of the parent step.  The buffer is wide enough that the interior is
still valid after all substeps, so no time interpolation is ever needed.

One coarse step is expressed as a dataflow plan: a list of nodes whose inputs
are earlier nodes.  ``run_plan_sequential`` evaluates it in order,
``run_plan_dataflow`` wires every node to a dataflow LCO, and
``evolve_recursive`` is an independent recursive reference schedule built from
the same kernels.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np

from .cosmo import (NFIELDS, PHI, B as B_ROW, CosmoParams, CosmoState, SingularState,
                    diagnostics as cosmo_diagnostics, rhs, ssp_rk3)

RATIO = 2
STAGES = 3


class NestingError(AssertionError):
    pass


class PatchTooSmall(ValueError):
    pass


class TimeMismatch(ValueError):
    pass


class PatchSingular(SingularState):
    """Solver singularity inside a patch; carries the patch level and interval."""

    def __init__(self, level: int, lo: int, hi: int, cause: SingularState):
        super().__init__(f"level {level} patch [{lo}, {hi}): {cause}", index=cause.index)
        self.level, self.lo, self.hi = level, lo, hi


def required_buffer(substeps: int, stencil_half_width: int = 1) -> int:
    return substeps * STAGES * stencil_half_width


@dataclass(frozen=True)
class AmrConfig:
    max_level: int = 1
    tau: Optional[float] = None          # default 0.02 * v
    regrid_interval: int = 4
    margin: int = 4
    buffer: Optional[int] = None         # fine-level buffer, default 2 * 3 * W
    coarse_patches: int = 1
    max_patch_cells: Optional[int] = None
    refine_all: bool = False

    def __post_init__(self):
        if self.max_level < 0 or self.regrid_interval < 1 or self.margin < 0:
            raise ValueError("invalid refinement configuration")
        if self.coarse_patches < 1:
            raise ValueError("need at least one coarse patch")
        if self.max_patch_cells is not None and self.max_patch_cells < 1:
            raise ValueError("max_patch_cells must be positive")

    def threshold(self, params: CosmoParams) -> float:
        return 0.02 * params.v if self.tau is None else self.tau


@dataclass
class Patch:
    level: int
    lo: int
    hi: int
    u: np.ndarray
    t: float = 0.0
    owner: int = 0
    gid: object = None

    def __post_init__(self):
        if self.hi <= self.lo:
            raise PatchTooSmall(f"empty patch [{self.lo}, {self.hi})")
        if self.u.shape != (NFIELDS, self.hi - self.lo):
            raise ValueError(f"patch data shape {self.u.shape} does not match [{self.lo}, {self.hi})")

    @property
    def n(self) -> int:
        return self.hi - self.lo

    def source(self) -> tuple:
        return (self.u, self.lo, self.lo, self.hi)


# index kernels ---------------------------------------------------------------

def _owned(N: int, idx: np.ndarray, lo: int, hi: int) -> np.ndarray:
    return (idx - lo) % N < hi - lo


def _values_at(N: int, idx: np.ndarray, sources: Sequence[tuple],
               parent: Optional[tuple] = None) -> np.ndarray:
    """Level values at (unwrapped) indices ``idx``.

    ``sources`` holds ``(array, arr_lo, own_lo, own_hi)`` entries: column 0 of
    ``array`` is level index ``arr_lo`` and the cells ``[own_lo, own_hi)`` are
    valid.  Cells no source owns come from ``parent = (N_parent, sources)`` by
    linear prolongation.
    """
    out = np.empty((NFIELDS, idx.size))
    need = np.ones(idx.size, dtype=bool)
    for arr, arr_lo, own_lo, own_hi in sources:
        rel = (idx - own_lo) % N
        sel = need & (rel < own_hi - own_lo)
        if sel.any():
            out[:, sel] = arr[:, own_lo - arr_lo + rel[sel]]
            need &= ~sel
    if need.any():
        if parent is None:
            raise NestingError(f"cells {idx[need][:4].tolist()}... of a level with {N} cells "
                               "have no owner and no parent data")
        fi = idx[need]
        j = fi // RATIO
        odd = fi % RATIO == 1
        cj = np.unique(np.concatenate([j, j[odd] + 1]))
        cvals = _values_at(parent[0], cj, parent[1])
        pos = np.searchsorted(cj, j)
        vals = cvals[:, pos]
        if odd.any():
            vals[:, odd] = 0.5 * (cvals[:, pos[odd]] + cvals[:, pos[odd] + 1])
        out[:, need] = vals
    return out


def prolong_needs(N: int, idx: np.ndarray, sources: Sequence[tuple]) -> np.ndarray:
    """Parent-level indices needed to fill ``idx`` beyond what ``sources`` own."""
    need = np.ones(idx.size, dtype=bool)
    for _arr_lo, own_lo, own_hi in sources:
        need &= ~_owned(N, idx, own_lo, own_hi)
    fi = idx[need]
    j = fi // RATIO
    return np.unique(np.concatenate([j, j[fi % RATIO == 1] + 1]))


@lru_cache(maxsize=64)
def _level_params(N, z_min, z_max, lam, v, cfl, diss) -> CosmoParams:
    return CosmoParams(N=N, z_min=z_min, z_max=z_max, lam=lam, v=v, cfl=cfl, dissipation=diss)


def _params_key(p: CosmoParams) -> list:
    return [p.N, p.z_min, p.z_max, p.lam, p.v, p.cfl, p.dissipation]


def fill_kernel(prm: dict, inputs: Sequence[np.ndarray]) -> np.ndarray:
    ns = len(prm["sib"])
    sib = [(a, *s) for a, s in zip(inputs[:ns], prm["sib"])]
    parent = None
    if "par" in prm:
        par = prm["par"]
        parent = (par["N"], [(a, *s) for a, s in zip(inputs[ns:], par["src"])])
    idx = np.arange(prm["lo"] - prm["G"], prm["hi"] + prm["G"])
    return _values_at(prm["N"], idx, sib, parent)


def step_kernel(prm: dict, inputs: Sequence[np.ndarray]) -> np.ndarray:
    p = _level_params(*prm["params"])
    try:
        return ssp_rk3(inputs[0], p.dt, lambda w: rhs(w, p, periodic=False))
    except SingularState as exc:
        raise PatchSingular(prm["level"], prm["lo"], prm["hi"], exc) from exc


def restrict_kernel(prm: dict, inputs: Sequence[np.ndarray]) -> np.ndarray:
    out = inputs[0].copy()
    N, lo, hi, G = prm["N"], prm["lo"], prm["hi"], prm["G"]
    for arr, (c_arr_lo, c_lo, c_hi) in zip(inputs[1:], prm["children"]):
        fi = np.arange(c_lo + (c_lo % RATIO), c_hi, RATIO)
        rel = (fi // RATIO - lo) % N
        sel = rel < hi - lo
        out[:, G + rel[sel]] = arr[:, fi[sel] - c_arr_lo]
    return out


KERNELS: dict[str, Callable] = {
    "fill": fill_kernel,
    "step": step_kernel,
    "restrict": restrict_kernel,
}


# hierarchy -------------------------------------------------------------------

class LevelHierarchy:
    def __init__(self, params: CosmoParams, config: AmrConfig, levels: list[list[Patch]],
                 t: float = 0.0):
        self.params = params
        self.config = config
        self.levels = [sorted(lv, key=lambda p: p.lo) for lv in levels if lv]
        self.t = t
        if len(self.levels) > config.max_level + 1:
            raise NestingError("more levels than max_level allows")
        self.check_nesting()

    # geometry

    def N(self, level: int) -> int:
        return self.params.N * RATIO ** level

    def level_params(self, level: int) -> CosmoParams:
        return replace(self.params, N=self.N(level))

    def dt(self, level: int) -> float:
        return self.level_params(level).dt

    def substeps(self, level: int) -> int:
        return 1 if level == 0 else RATIO

    def buffer(self, level: int) -> int:
        W = self.params.stencil_half_width
        need = required_buffer(self.substeps(level), W)
        if level == 0 or self.config.buffer is None:
            return need
        if self.config.buffer < need:
            raise ValueError(f"buffer {self.config.buffer} below the {need} cells "
                             f"{self.substeps(level)} substeps x {STAGES} stages x {W} consume")
        return self.config.buffer

    @property
    def depth(self) -> int:
        return len(self.levels)

    def coverage(self, level: int) -> np.ndarray:
        N = self.N(level)
        mask = np.zeros(N, dtype=bool)
        if level < self.depth:
            for p in self.levels[level]:
                mask[np.arange(p.lo, p.hi) % N] = True
        return mask

    def layout(self) -> list[tuple[int, int, int]]:
        return [(p.level, p.lo, p.hi) for lv in self.levels for p in lv]

    def check_nesting(self) -> None:
        if not self.levels:
            raise NestingError("hierarchy has no levels")
        N0 = self.N(0)
        cov0 = self.coverage(0)
        if not cov0.all():
            raise NestingError("level 0 does not cover the domain")
        total = sum(p.n for p in self.levels[0])
        if total != N0:
            raise NestingError("level 0 patches overlap")
        m = self.config.margin
        for lv in range(1, self.depth):
            N = self.N(lv)
            seen = np.zeros(N, dtype=int)
            for p in self.levels[lv]:
                if p.level != lv or not 0 <= p.lo < N or p.n > N:
                    raise NestingError(f"bad patch {p.level}:[{p.lo}, {p.hi}) on level {lv}")
                seen[np.arange(p.lo, p.hi) % N] += 1
            if (seen > 1).any():
                raise NestingError(f"level {lv} patches overlap")
            parent_ok = _erode(self.coverage(lv - 1), m)
            for p in self.levels[lv]:
                if p.n == N:
                    if not self.coverage(lv - 1).all():
                        raise NestingError(f"whole-domain level {lv} over a partial parent")
                    continue
                j = np.arange(p.lo // RATIO, (p.hi - 1) // RATIO + 1)
                if not parent_ok[j % self.N(lv - 1)].all():
                    raise NestingError(f"level {lv} patch [{p.lo}, {p.hi}) violates the "
                                       f"{m}-cell nesting margin")

    def check_times(self) -> None:
        tol = 1e-14 * max(abs(self.t), 1.0)
        for lv in self.levels:
            for p in lv:
                if abs(p.t - self.t) > tol:
                    raise TimeMismatch(f"level {p.level} patch at t={p.t}, hierarchy at {self.t}")

    # data access

    def level_array(self, level: int) -> np.ndarray:
        """Full level array, NaN where the level has no patch."""
        N = self.N(level)
        out = np.full((NFIELDS, N), np.nan)
        for p in self.levels[level]:
            out[:, np.arange(p.lo, p.hi) % N] = p.u
        return out

    def state(self) -> CosmoState:
        """Level 0 data; restriction keeps it equal to the finest data at coincident points."""
        return CosmoState(self.level_array(0), self.t)

    def finest_at(self, level: int) -> np.ndarray:
        """Values on the level-``level`` grid where that level is refined."""
        return self.level_array(level)

    def copy(self) -> "LevelHierarchy":
        levels = [[replace(p, u=p.u.copy()) for p in lv] for lv in self.levels]
        return LevelHierarchy(self.params, self.config, levels, self.t)

    def with_patches(self, arrays: dict, t: float) -> "LevelHierarchy":
        levels = [[replace(p, u=arrays[(lv, i)], t=t) for i, p in enumerate(patches)]
                  for lv, patches in enumerate(self.levels)]
        return LevelHierarchy(self.params, self.config, levels, t)

    def diagnostics(self) -> dict:
        return cosmo_diagnostics(self.state(), self.params)

    def write_layout_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["level", "i_lo", "i_hi", "t"])
            for p in (p for lv in self.levels for p in lv):
                w.writerow([p.level, p.lo, p.hi, p.t])


def _erode(mask: np.ndarray, m: int) -> np.ndarray:
    out = mask.copy()
    for s in range(1, m + 1):
        out &= np.roll(mask, s) & np.roll(mask, -s)
    return out


def _dilate(mask: np.ndarray, m: int) -> np.ndarray:
    out = mask.copy()
    for s in range(1, m + 1):
        out |= np.roll(mask, s) | np.roll(mask, -s)
    return out


# flagging and clustering -----------------------------------------------------

def flag_cells(patches: Sequence[Patch], N: int, tau: float, margin: int = 0) -> np.ndarray:
    """Gradient flags on one level, dilated by ``margin`` cells (periodic).

    A cell is flagged when half the centered difference of phi or of b
    reaches ``tau``.  Cells at a patch edge whose neighbour lies outside the
    level are never flagged.
    """
    full = np.full((NFIELDS, N), np.nan)
    for p in patches:
        full[:, np.arange(p.lo, p.hi) % N] = p.u
    flags = np.zeros(N, dtype=bool)
    for row in (PHI, B_ROW):
        d = 0.5 * np.abs(np.roll(full[row], -1) - np.roll(full[row], 1))
        with np.errstate(invalid="ignore"):
            flags |= np.nan_to_num(d, nan=-1.0) >= tau if tau > 0 else ~np.isnan(d)
    return _dilate(flags, margin)


def cluster_flags(mask: np.ndarray, min_gap: int) -> list[tuple[int, int]]:
    """Maximal runs of flagged cells on a ring, merging runs separated by fewer than ``min_gap`` cells.

    Runs are ``(lo, hi)`` with ``0 <= lo < N`` and ``hi`` possibly beyond ``N``
    for a run that crosses the seam.  A fully flagged ring gives ``[(0, N)]``.
    """
    N = mask.size
    if mask.all():
        return [(0, N)]
    if not mask.any():
        return []
    start = int(np.flatnonzero(~mask)[0])
    rolled = np.roll(mask, -start)
    runs = []
    i = 0
    while i < N:
        if rolled[i]:
            j = i
            while j < N and rolled[j]:
                j += 1
            runs.append([i, j])
            i = j
        else:
            i += 1
    merged = [runs[0]]
    for lo, hi in runs[1:]:
        if lo - merged[-1][1] < min_gap:
            merged[-1][1] = hi
        else:
            merged.append([lo, hi])
    if len(merged) > 1 and (merged[0][0] + N) - merged[-1][1] < min_gap:
        merged[0][0] = merged[-1][0] - N
        merged.pop()
    out = []
    for lo, hi in merged:
        lo, hi = lo + start, hi + start
        if hi - lo >= N:
            return [(0, N)]
        out.append((lo % N, lo % N + (hi - lo)))
    return sorted(out)


def _restrict_runs(runs, allowed: np.ndarray) -> list[tuple[int, int]]:
    N = allowed.size
    out = []
    for lo, hi in runs:
        ok = allowed[np.arange(lo, hi) % N]
        i = 0
        n = hi - lo
        while i < n:
            if ok[i]:
                j = i
                while j < n and ok[j]:
                    j += 1
                out.append((lo + i, lo + j))
                i = j
            else:
                i += 1
    return out


def _split(lo: int, hi: int, max_cells: Optional[int]) -> list[tuple[int, int]]:
    n = hi - lo
    if max_cells is None or n <= max_cells:
        return [(lo, hi)]
    k = -(-n // max_cells)
    base, extra = divmod(n, k)
    out, a = [], lo
    for i in range(k):
        b = a + base + (1 if i < extra else 0)
        out.append((a, b))
        a = b
    return out


def _fine_intervals(h_levels, level: int, cfg: AmrConfig, params: CosmoParams) -> list:
    """Level ``level + 1`` intervals derived from the level ``level`` patches."""
    N = params.N * RATIO ** level
    patches = h_levels[level]
    cov = np.zeros(N, dtype=bool)
    for p in patches:
        cov[np.arange(p.lo, p.hi) % N] = True
    if cfg.refine_all:
        runs = [(0, N)] if cov.all() else cluster_flags(_erode(cov, cfg.margin), 1)
    else:
        mask = flag_cells(patches, N, cfg.threshold(params), cfg.margin)
        allowed = cov if cov.all() else _erode(cov, cfg.margin)
        mask &= allowed
        runs = cluster_flags(mask, 2 * cfg.margin)
        if not (len(runs) == 1 and runs[0] == (0, N)):
            runs = _restrict_runs(runs, allowed)
    Nf = N * RATIO
    out = []
    for lo, hi in runs:
        if hi - lo == N:
            out.extend(_split(0, Nf, cfg.max_patch_cells))
            continue
        flo, fhi = lo * RATIO, (hi - 1) * RATIO + 1
        for a, b in _split(flo, fhi, cfg.max_patch_cells):
            out.append((a % Nf, a % Nf + (b - a)))
    return out


def level0_patches(state: CosmoState, count: int) -> list[Patch]:
    N = state.N
    if count > N:
        raise ValueError("more coarse patches than cells")
    base, extra = divmod(N, count)
    out, lo = [], 0
    for i in range(count):
        hi = lo + base + (1 if i < extra else 0)
        out.append(Patch(0, lo, hi, state.u[:, lo:hi].copy(), state.t))
        lo = hi
    return out


def initial_hierarchy(params: CosmoParams, config: AmrConfig,
                      init: Callable[[CosmoParams], CosmoState]) -> LevelHierarchy:
    """Build every level from analytic data at its own resolution."""
    base = init(params)
    levels = [level0_patches(base, config.coarse_patches)]
    for lv in range(config.max_level):
        intervals = _fine_intervals(levels, lv, config, params)
        if not intervals:
            break
        fine = init(replace(params, N=params.N * RATIO ** (lv + 1))).u
        Nf = fine.shape[1]
        levels.append([Patch(lv + 1, lo, hi, fine[:, np.arange(lo, hi) % Nf].copy(), base.t)
                       for lo, hi in intervals])
    return LevelHierarchy(params, config, levels, base.t)


def regrid(h: LevelHierarchy) -> LevelHierarchy:
    """New patch layout from the current flags; data copied where the old level had it, else prolonged."""
    h.check_times()
    cfg = h.config
    levels = [[replace(p, u=p.u.copy()) for p in h.levels[0]]]
    for lv in range(cfg.max_level):
        intervals = _fine_intervals(levels, lv, cfg, h.params)
        if not intervals:
            break
        Nf = h.N(lv + 1)
        old = [p.source() for p in h.levels[lv + 1]] if lv + 1 < h.depth else []
        parent = (h.N(lv), [p.source() for p in levels[lv]])
        patches = []
        for lo, hi in intervals:
            u = _values_at(Nf, np.arange(lo, hi), old, parent)
            patches.append(Patch(lv + 1, lo, hi, u, h.t))
        levels.append(patches)
    out = LevelHierarchy(h.params, cfg, levels, h.t)
    _keep_owners(h, out)
    return out


def _keep_owners(old: LevelHierarchy, new: LevelHierarchy) -> None:
    prev = {(p.level, p.lo, p.hi): p.owner for lv in old.levels for p in lv}
    for lv in new.levels:
        for p in lv:
            p.owner = prev.get((p.level, p.lo, p.hi), p.owner)


def assign_owners(h: LevelHierarchy, localities: Sequence[int]) -> None:
    """Level-then-interval round-robin placement."""
    k = 0
    for lv in h.levels:
        for p in lv:
            p.owner = localities[k % len(localities)]
            k += 1


# patch-level operations ------------------------------------------------------

def taper_fill(patch: Patch, siblings: Sequence[Patch], parents: Sequence[Patch],
               width: int, N: int) -> np.ndarray:
    """Patch data padded by ``width`` cells per side.

    Buffer cells come from sibling interiors where available, otherwise by
    linear prolongation of ``parents`` (which must be at the patch time).
    """
    if patch.n < 1:
        raise PatchTooSmall("patch has no interior")
    for q in parents:
        if abs(q.t - patch.t) > 1e-14 * max(abs(patch.t), 1.0):
            raise TimeMismatch(f"parent at t={q.t}, patch at t={patch.t}")
    sib = [patch.source()] + [q.source() for q in siblings if q is not patch]
    parent = (N // RATIO, [q.source() for q in parents]) if parents else None
    return _values_at(N, np.arange(patch.lo - width, patch.hi + width), sib, parent)


def restrict(fine: Patch, parent: Patch, parent_cells: int) -> Patch:
    """Inject fine values at even fine indices into the coincident parent cells.

    ``parent_cells`` is the size of the parent level.
    """
    if abs(fine.t - parent.t) > 1e-14 * max(abs(parent.t), 1.0):
        raise TimeMismatch(f"fine patch at t={fine.t}, parent at t={parent.t}")
    if fine.level != parent.level + 1:
        raise ValueError("restriction needs a child one level finer")
    prm = {"N": parent_cells, "lo": parent.lo, "hi": parent.hi, "G": 0,
           "Nc": parent_cells * RATIO, "children": [[fine.lo, fine.lo, fine.hi]]}
    return replace(parent, u=restrict_kernel(prm, [parent.u, fine.u]))


# dataflow plan ---------------------------------------------------------------

@dataclass
class PlanNode:
    id: int
    kind: str
    owner: int
    inputs: list[int]
    params: dict = field(default_factory=dict)


@dataclass
class Ref:
    node: int
    arr_lo: int
    lo: int
    hi: int

    def source(self) -> list:
        return [self.arr_lo, self.lo, self.hi]


@dataclass
class Plan:
    nodes: list[PlanNode]
    init: dict                 # (level, index) -> node id
    final: dict                # (level, index) -> Ref
    checkpoints: list          # per coarse step: list of level-0 Refs
    t0: float = 0.0
    dt0: float = 0.0

    def outputs(self) -> list[int]:
        ids = {r.node for r in self.final.values()}
        for refs in self.checkpoints:
            ids.update(r.node for r in refs)
        return sorted(ids)

    def to_json(self) -> str:
        return json.dumps({
            "nodes": [[n.id, n.kind, n.owner, n.inputs, n.params] for n in self.nodes],
            "init": [[lv, i, nid] for (lv, i), nid in self.init.items()],
            "final": [[lv, i, r.node, r.arr_lo, r.lo, r.hi] for (lv, i), r in self.final.items()],
            "checkpoints": [[[r.node, r.arr_lo, r.lo, r.hi] for r in refs]
                            for refs in self.checkpoints],
            "t0": self.t0, "dt0": self.dt0,
        })

    @classmethod
    def from_json(cls, text: str) -> "Plan":
        d = json.loads(text)
        return cls(nodes=[PlanNode(*n) for n in d["nodes"]],
                   init={(lv, i): nid for lv, i, nid in d["init"]},
                   final={(lv, i): Ref(*r) for lv, i, *r in d["final"]},
                   checkpoints=[[Ref(*r) for r in refs] for refs in d["checkpoints"]],
                   t0=d["t0"], dt0=d["dt0"])


class _PlanBuilder:
    def __init__(self, h: LevelHierarchy):
        self.h = h
        self.nodes: list[PlanNode] = []

    def add(self, kind, owner, inputs, params) -> int:
        nid = len(self.nodes)
        self.nodes.append(PlanNode(nid, kind, owner, list(inputs), params))
        return nid

    def fill(self, level: int, i: int, refs: list, parents: Optional[list]) -> Ref:
        h = self.h
        p = h.levels[level][i]
        N, G = h.N(level), h.buffer(level)
        if p.n < 1:
            raise PatchTooSmall("patch has no interior")
        idx = np.arange(p.lo - G, p.hi + G)
        own = refs[i]
        sib = [own] + [r for k, r in enumerate(refs)
                       if k != i and _owned(N, idx, r.lo, r.hi).any()]
        prm = {"N": N, "lo": p.lo, "hi": p.hi, "G": G, "sib": [r.source() for r in sib]}
        inputs = [r.node for r in sib]
        needs = prolong_needs(N, idx, prm["sib"])
        if needs.size:
            if parents is None:
                raise NestingError(f"level {level} patch [{p.lo}, {p.hi}) needs parent data")
            Nc = h.N(level - 1)
            par = [r for r in parents if _owned(Nc, needs, r.lo, r.hi).any()]
            covered = np.zeros(needs.size, dtype=bool)
            for r in par:
                covered |= _owned(Nc, needs, r.lo, r.hi)
            if not covered.all():
                raise NestingError(f"buffer of level {level} patch [{p.lo}, {p.hi}) reaches "
                                   "outside the parent level; increase the nesting margin")
            prm["par"] = {"N": Nc, "src": [r.source() for r in par]}
            inputs += [r.node for r in par]
        nid = self.add("fill", p.owner, inputs, prm)
        return Ref(nid, p.lo - G, p.lo, p.hi)

    def advance(self, level: int, refs: dict, parents: Optional[list]) -> dict:
        h = self.h
        patches = h.levels[level]
        G = h.buffer(level)
        pkey = _params_key(h.level_params(level))
        ext = [self.fill(level, i, refs[level], parents) for i in range(len(patches))]
        has_children = level + 1 < h.depth
        for s in range(h.substeps(level)):
            stepped = []
            for i, (p, e) in enumerate(zip(patches, ext)):
                nid = self.add("step", p.owner, [e.node],
                               {"params": pkey, "level": level, "lo": p.lo, "hi": p.hi})
                stepped.append(Ref(nid, e.arr_lo, e.lo, e.hi))
            if has_children:
                now = refs[level] if s == 0 else ext
                refs = self.advance(level + 1, refs, now)
                kids = refs[level + 1]
                ext = []
                for p, st in zip(patches, stepped):
                    Np, Nc = h.N(level), h.N(level + 1)
                    use = [r for r in kids if _child_overlaps(r, p, Np, Nc)]
                    prm = {"N": Np, "lo": p.lo, "hi": p.hi, "G": G, "Nc": Nc,
                           "children": [r.source() for r in use]}
                    nid = self.add("restrict", p.owner, [st.node] + [r.node for r in use], prm)
                    ext.append(Ref(nid, st.arr_lo, st.lo, st.hi))
            else:
                ext = stepped
        refs = dict(refs)
        refs[level] = ext
        return refs


def _child_overlaps(child: Ref, parent: Patch, Np: int, Nc: int) -> bool:
    j = np.arange(child.lo + child.lo % RATIO, child.hi, RATIO) // RATIO
    return bool(_owned(Np, j, parent.lo, parent.hi).any())


def build_plan(h: LevelHierarchy, coarse_steps: int) -> Plan:
    """Dataflow plan advancing ``h`` by ``coarse_steps`` coarse steps without regridding."""
    h.check_nesting()
    b = _PlanBuilder(h)
    init = {}
    refs = {}
    for lv, patches in enumerate(h.levels):
        refs[lv] = []
        for i, p in enumerate(patches):
            nid = b.add("init", p.owner, [], {"level": lv, "index": i})
            init[(lv, i)] = nid
            refs[lv].append(Ref(nid, p.lo, p.lo, p.hi))
    checkpoints = []
    for _ in range(coarse_steps):
        refs = b.advance(0, refs, None)
        checkpoints.append(list(refs[0]))
    final = {(lv, i): r for lv in refs for i, r in enumerate(refs[lv])}
    return Plan(b.nodes, init, final, checkpoints, h.t, h.dt(0))


def initial_values(h: LevelHierarchy, plan: Plan, owner: Optional[int] = None) -> dict:
    return {nid: h.levels[lv][i].u for (lv, i), nid in plan.init.items()
            if owner is None or h.levels[lv][i].owner == owner}


def evaluate_node(node: PlanNode, inputs: Sequence[np.ndarray]) -> np.ndarray:
    return KERNELS[node.kind](node.params, inputs)


def _interior(arr: np.ndarray, ref: Ref) -> np.ndarray:
    off = ref.lo - ref.arr_lo
    return arr[:, off:off + ref.hi - ref.lo]


def collect(plan: Plan, values: dict) -> tuple[dict, list]:
    """Final patch arrays and per-step level-0 arrays from node values."""
    final = {key: _interior(values[r.node], r).copy() for key, r in plan.final.items()}
    steps = [[_interior(values[r.node], r) for r in refs] for refs in plan.checkpoints]
    return final, steps


def run_plan_sequential(plan: Plan, init: dict) -> dict:
    values = {}
    for node in plan.nodes:
        if node.kind == "init":
            values[node.id] = init[node.id]
        else:
            values[node.id] = evaluate_node(node, [values[i] for i in node.inputs])
    return values


def run_plan_dataflow(plan: Plan, init: dict, runtime) -> dict:
    """Wire every node to a dataflow LCO and return the output futures by node id."""
    from .lco import FutureCell, dataflow

    cells = {}
    for node in plan.nodes:
        if node.kind == "init":
            cells[node.id] = FutureCell.ready_with(init[node.id])
        else:
            cells[node.id] = dataflow([cells[i] for i in node.inputs],
                                      lambda vals, n=node: evaluate_node(n, vals),
                                      runtime=runtime)
    return cells


# drivers ---------------------------------------------------------------------

def _assemble_level0(h: LevelHierarchy, parts: list) -> np.ndarray:
    N = h.N(0)
    u = np.empty((NFIELDS, N))
    for p, arr in zip(h.levels[0], parts):
        u[:, np.arange(p.lo, p.hi) % N] = arr
    return u


def evolve_hierarchy(h: LevelHierarchy, coarse_steps: int,
                     executor: Optional[Callable[[Plan, LevelHierarchy], dict]] = None,
                     on_regrid: Optional[Callable[[LevelHierarchy], None]] = None
                     ) -> tuple[LevelHierarchy, list[dict]]:
    """Advance ``coarse_steps`` coarse steps, regridding every ``regrid_interval`` steps.

    ``executor(plan, hierarchy)`` returns node values for ``plan.outputs()``;
    the default evaluates the plan sequentially in this thread.
    """
    if coarse_steps < 0:
        raise ValueError("steps must be non-negative")
    if executor is None:
        executor = lambda plan, hh: run_plan_sequential(plan, initial_values(hh, plan))  # noqa: E731
    diags = []
    done = 0
    interval = h.config.regrid_interval
    while done < coarse_steps:
        if done and done % interval == 0 and h.config.max_level > 0:
            h = regrid(h)
            if on_regrid is not None:
                on_regrid(h)
        n = min(interval - done % interval, coarse_steps - done)
        plan = build_plan(h, n)
        values = executor(plan, h)
        final, steps = collect(plan, values)
        t = h.t
        for k, parts in enumerate(steps, start=1):
            st = CosmoState(_assemble_level0(h, parts), t + k * h.dt(0))
            diags.append(cosmo_diagnostics(st, h.params))
        h = h.with_patches(final, _advance_time(h, n))
        h.check_times()
        done += n
    return h, diags


def _advance_time(h: LevelHierarchy, n: int) -> float:
    # accumulate level by level so every level agrees with the coarse clock
    t = h.t
    for _ in range(n):
        t = t + h.dt(0)
    return t


def evolve_recursive(h: LevelHierarchy, coarse_steps: int) -> LevelHierarchy:
    """Reference schedule: plain recursive Berger-Oliger over the same kernels, no plan."""
    state = {lv: [p.u for p in patches] for lv, patches in enumerate(h.levels)}
    for _ in range(coarse_steps):
        _recurse(h, 0, state, None)
    arrays = {(lv, i): a for lv, arrs in state.items() for i, a in enumerate(arrs)}
    return h.with_patches(arrays, _advance_time(h, coarse_steps))


def _recurse(h: LevelHierarchy, level: int, state: dict, parents: Optional[list]) -> None:
    patches = h.levels[level]
    N, G = h.N(level), h.buffer(level)
    p_level = h.level_params(level)
    sib = [(a, p.lo, p.lo, p.hi) for a, p in zip(state[level], patches)]
    parent = (h.N(level - 1), parents) if parents is not None else None
    ext = [_values_at(N, np.arange(p.lo - G, p.hi + G), sib, parent) for p in patches]
    for s in range(h.substeps(level)):
        stepped = []
        for p, e in zip(patches, ext):
            try:
                stepped.append(ssp_rk3(e, p_level.dt, lambda w: rhs(w, p_level, periodic=False)))
            except SingularState as exc:
                raise PatchSingular(level, p.lo, p.hi, exc) from exc
        if level + 1 < h.depth:
            now = sib if s == 0 else [(e, p.lo - G, p.lo, p.hi) for e, p in zip(ext, patches)]
            _recurse(h, level + 1, state, now)
            kids = [(a, c.lo, c.lo, c.hi) for a, c in zip(state[level + 1], h.levels[level + 1])]
            Nc = h.N(level + 1)
            ext = []
            for p, st in zip(patches, stepped):
                prm = {"N": N, "lo": p.lo, "hi": p.hi, "G": G, "Nc": Nc,
                       "children": [[k[1], k[2], k[3]] for k in kids]}
                ext.append(restrict_kernel(prm, [st] + [k[0] for k in kids]))
        else:
            ext = stepped
    state[level] = [e[:, G:G + p.n] for e, p in zip(ext, patches)]
