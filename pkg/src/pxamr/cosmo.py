"""Method-of-lines solver for a scalar-field domain wall coupled to two metric functions.

State layout is a ``(9, N)`` array with rows ``phi, Pi, chi, a, f, g, b, q, r``
on a periodic grid in ``z``.  Space is discretized with second-order central
differences and time with the three-stage strong-stability-preserving
Runge-Kutta scheme of Shu and Osher.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .serialization import register_error_type

FIELDS = ("phi", "Pi", "chi", "a", "f", "g", "b", "q", "r")
PHI, PI, CHI, A, F, G, B, Q, R = range(9)
NFIELDS = len(FIELDS)

DIAGNOSTIC_COLUMNS = ("t", "max_abs_phi", "wall_position", "min_a", "min_b")


@register_error_type
class SingularState(ArithmeticError):
    """Non-finite values or a vanishing metric function."""

    def __init__(self, message: str, index: Optional[int] = None, step: Optional[int] = None):
        super().__init__(message)
        self.index = index
        self.step = step


@register_error_type
class UnderResolved(ValueError):
    pass


@dataclass(frozen=True)
class CosmoParams:
    N: int = 256
    z_min: float = 0.0
    z_max: float = 400.0
    lam: float = 1.0
    v: float = 0.1
    cfl: float = 0.25
    dissipation: float = 0.0

    def __post_init__(self):
        if self.lam <= 0 or self.v <= 0:
            raise ValueError("lam and v must be positive")
        if self.N < 8:
            raise ValueError("need at least 8 cells")
        if not 0 < self.cfl <= 1:
            raise ValueError("cfl must lie in (0, 1]")
        if not self.z_min < self.z_max:
            raise ValueError("empty domain")

    @property
    def length(self) -> float:
        return self.z_max - self.z_min

    @property
    def dz(self) -> float:
        return (self.z_max - self.z_min) / self.N

    @property
    def dt(self) -> float:
        return self.cfl * self.dz

    def z(self) -> np.ndarray:
        return self.z_min + self.dz * np.arange(self.N)

    def refined(self, factor: int = 2) -> "CosmoParams":
        return replace(self, N=self.N * factor)

    @property
    def stencil_half_width(self) -> int:
        return 2 if self.dissipation else 1


@dataclass
class CosmoState:
    u: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float)
        if self.u.ndim != 2 or self.u.shape[0] != NFIELDS:
            raise ValueError(f"state must have shape (9, N), got {self.u.shape}")

    def __getattr__(self, name):
        try:
            return self.__dict__["u"][FIELDS.index(name)]
        except ValueError:
            raise AttributeError(name) from None

    @property
    def N(self) -> int:
        return self.u.shape[1]

    def copy(self) -> "CosmoState":
        return CosmoState(self.u.copy(), self.t)


def central_diff(u: np.ndarray, dz: float, periodic: bool = True) -> np.ndarray:
    """Second-order centered first derivative along the last axis.

    Without periodic wrap the two end points are left at zero; callers that
    evolve padded arrays treat them as invalid.
    """
    n = u.shape[-1]
    if n < 3:
        raise ValueError("central_diff needs at least 3 points")
    if periodic:
        return (np.roll(u, -1, axis=-1) - np.roll(u, 1, axis=-1)) / (2.0 * dz)
    d = np.zeros_like(u)
    d[..., 1:-1] = (u[..., 2:] - u[..., :-2]) / (2.0 * dz)
    return d


def _fourth_difference(u: np.ndarray, periodic: bool) -> np.ndarray:
    if periodic:
        return (np.roll(u, -2, -1) - 4.0 * np.roll(u, -1, -1) + 6.0 * u
                - 4.0 * np.roll(u, 1, -1) + np.roll(u, 2, -1))
    d = np.zeros_like(u)
    d[..., 2:-2] = (u[..., 4:] - 4.0 * u[..., 3:-1] + 6.0 * u[..., 2:-2]
                    - 4.0 * u[..., 1:-3] + u[..., :-4])
    return d


def check_state(u: np.ndarray) -> None:
    if not np.isfinite(u).all():
        bad = int(np.argwhere(~np.isfinite(u))[0][1])
        raise SingularState(f"non-finite value at index {bad}", index=bad)
    for row, name in ((A, "a"), (B, "b")):
        zero = np.flatnonzero(u[row] == 0.0)
        if zero.size:
            raise SingularState(f"{name} vanishes at index {zero[0]}", index=int(zero[0]))


def rhs(u: np.ndarray, params: CosmoParams, periodic: bool = True,
        dz: Optional[float] = None) -> np.ndarray:
    """Time derivatives of the nine evolved fields."""
    check_state(u)
    dz = params.dz if dz is None else dz
    lam, v = params.lam, params.v
    phi, Pi, chi, a, f, g, b, q, r = u
    dPi_z = central_diff(Pi, dz, periodic)
    dchi_z = central_diff(chi, dz, periodic)
    df_z = central_diff(f, dz, periodic)
    dg_z = central_diff(g, dz, periodic)
    dq_z = central_diff(q, dz, periodic)

    # overflow surfaces as non-finite values, caught by the next stage's check
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        b2 = b * b
        b3 = b2 * b
        a2 = a * a
        pot = phi * phi - v * v
        fq_ab = (f * q) / (a * b)

        out = np.empty_like(u)
        out[PHI] = Pi
        out[PI] = (Pi * (f / a + q / b) + (3.0 * a * g / b2 - a2 * r / b3) * chi
                   + (a / b) * (a / b) * dchi_z - a2 * lam * phi * pot)
        out[CHI] = dPi_z
        out[A] = f
        out[F] = a * (-fq_ab + 2.0 * g * g / b2 - a * g * r / b3 + a * dg_z / b2
                      + a2 * lam * pot / 4.0)
        out[G] = df_z
        out[B] = q
        out[Q] = b * (-fq_ab - 3.0 * a * g * r / b3 + 3.0 * a * dg_z / b2
                      + a2 * lam * pot / 4.0)
        out[R] = dq_z
    if params.dissipation:
        out -= (params.dissipation / (16.0 * dz)) * _fourth_difference(u, periodic)
    return out


def ssp_rk3(u: np.ndarray, dt: float, f: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """One Shu-Osher SSP-RK3 step of ``du/dt = f(u)``."""
    u1 = u + dt * f(u)
    u2 = 0.75 * u + 0.25 * (u1 + dt * f(u1))
    return (1.0 / 3.0) * u + (2.0 / 3.0) * (u2 + dt * f(u2))


def rk3_step(state: CosmoState, params: CosmoParams, dt: Optional[float] = None) -> CosmoState:
    dt = params.dt if dt is None else dt
    u = ssp_rk3(state.u, dt, lambda w: rhs(w, params))
    return CosmoState(u, state.t + dt)


def kink_profile(z, params: CosmoParams, z1: float, z2: float, w: float) -> np.ndarray:
    """Kink-antikink pair: -v outside [z1, z2], +v between, walls of width w."""
    z = np.asarray(z, dtype=float)
    return params.v * (np.tanh((z - z1) / w) - np.tanh((z - z2) / w) - 1.0)


def kink_profile_dz(z, params: CosmoParams, z1: float, z2: float, w: float) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    return params.v / w * (1.0 / np.cosh((z - z1) / w) ** 2 - 1.0 / np.cosh((z - z2) / w) ** 2)


def kink_init(params: CosmoParams, z1: Optional[float] = None, z2: Optional[float] = None,
              w: float = 10.0) -> CosmoState:
    """Kink-antikink initial data on flat metric functions."""
    if z1 is None:
        z1 = params.z_min + 0.25 * params.length
    if z2 is None:
        z2 = params.z_min + 0.75 * params.length
    if not (params.z_min <= z1 < z2 < params.z_max):
        raise ValueError("need z_min <= z1 < z2 < z_max")
    if w <= params.dz:
        raise UnderResolved(f"wall width {w} not above grid spacing {params.dz}")
    u = np.zeros((NFIELDS, params.N))
    u[PHI] = kink_profile(params.z(), params, z1, z2, w)
    u[CHI] = central_diff(u[PHI], params.dz)
    u[A] = 1.0
    u[B] = 1.0
    return CosmoState(u, 0.0)


def vacuum_state(params: CosmoParams, sign: float = -1.0) -> CosmoState:
    u = np.zeros((NFIELDS, params.N))
    u[PHI] = sign * params.v
    u[A] = 1.0
    u[B] = 1.0
    return CosmoState(u, 0.0)


def wall_position(phi: np.ndarray, z: np.ndarray) -> float:
    """Location of the first upward zero crossing of phi (linear interpolation), NaN if none."""
    s = np.signbit(phi)
    idx = np.flatnonzero(s[:-1] & ~s[1:])
    if idx.size == 0:
        return math.nan
    i = idx[0]
    p0, p1 = phi[i], phi[i + 1]
    return float(z[i] + (z[i + 1] - z[i]) * (-p0) / (p1 - p0))


def diagnostics(state: CosmoState, params: CosmoParams) -> dict:
    u = state.u
    return {
        "t": state.t,
        "max_abs_phi": float(np.max(np.abs(u[PHI]))),
        "wall_position": wall_position(u[PHI], params.z()),
        "min_a": float(np.min(u[A])),
        "min_b": float(np.min(u[B])),
    }


def evolve_unigrid(state: CosmoState, params: CosmoParams, steps: int,
                   with_diagnostics: bool = True) -> tuple[CosmoState, list[dict]]:
    if steps < 0:
        raise ValueError("steps must be non-negative")
    diags = []
    for n in range(steps):
        try:
            state = rk3_step(state, params)
        except SingularState as exc:
            exc.step = n + 1
            raise
        if with_diagnostics:
            diags.append(diagnostics(state, params))
    return state, diags


def self_convergence(params: CosmoParams, coarse_steps: int,
                     init: Optional[Callable[[CosmoParams], CosmoState]] = None,
                     rows=(PHI, PI, CHI, A, F, G, B, Q, R)) -> tuple[float, float, float]:
    """Observed order from runs at N, 2N and 4N that end at the same time.

    Returns ``(order, |u_N - u_2N|, |u_2N - u_4N|)`` with max norms taken on
    the coarse grid points.
    """
    init = init or kink_init
    finals = []
    for k in range(3):
        p = params.refined(2 ** k)
        state, _ = evolve_unigrid(init(p), p, coarse_steps * 2 ** k, with_diagnostics=False)
        finals.append(state.u[list(rows), :: 2 ** k])
    e1 = float(np.max(np.abs(finals[0] - finals[1])))
    e2 = float(np.max(np.abs(finals[1] - finals[2])))
    return math.log2(e1 / e2), e1, e2


def write_diagnostics_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=DIAGNOSTIC_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: row[k] for k in DIAGNOSTIC_COLUMNS})


_SNAP = struct.Struct("<4sIIIII6d")


def write_snapshot(path, state: CosmoState, params: CosmoParams) -> None:
    """State dump in the table file layout: nx=N, ny=nz=1, F=9."""
    dz = params.dz
    with open(path, "wb") as fh:
        fh.write(_SNAP.pack(b"EOST", 1, state.N, 1, 1, NFIELDS, params.z_min,
                            params.z_min + dz * (state.N - 1), state.t, state.t, 0.0, 0.0))
        fh.write(np.ascontiguousarray(state.u.T, dtype="<f8").tobytes())


def read_snapshot(path) -> CosmoState:
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, _version, n, ny, nz, nf, _z0, _z1, t, _t1, _a, _b = _SNAP.unpack_from(raw, 0)
    if magic != b"EOST" or ny != 1 or nz != 1 or nf != NFIELDS:
        raise ValueError("not a state snapshot")
    u = np.frombuffer(raw, dtype="<f8", offset=_SNAP.size).reshape(n, NFIELDS).T.copy()
    return CosmoState(u, t)
