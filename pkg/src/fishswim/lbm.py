"""D2Q9 lattice-Boltzmann solver: BGK collision, Guo forcing, half-way bounce-back walls.

Velocity set, numbered as

    6   2   5
      \\ | /
    3 - 0 - 1
      / | \\
    7   4   8

All grid state is kept in lattice units (dx = dt = 1, mean density 1); the
`UnitScaling` returned by `unit_convert` carries the factors to and from
physical units. Arrays are laid out (nx, ny, 9) so each cell's populations
are contiguous for the fused numba kernels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import ConfigError, NumericFault

CS2 = 1.0 / 3.0  # lattice speed of sound squared
MACH_LIMIT = 0.3  # low-Mach validity bound on |u| in lattice units

WEIGHTS = np.array([4 / 9, 1 / 9, 1 / 9, 1 / 9, 1 / 9, 1 / 36, 1 / 36, 1 / 36, 1 / 36])
VELOCITIES = np.array(
    [[0, 0], [1, 0], [0, 1], [-1, 0], [0, -1], [1, 1], [-1, 1], [-1, -1], [1, -1]],
    dtype=np.int64,
)
OPPOSITE = np.array([0, 3, 4, 1, 2, 7, 8, 5, 6], dtype=np.int64)

_CX = VELOCITIES[:, 0].copy()
_CY = VELOCITIES[:, 1].copy()
_W = WEIGHTS.copy()


@dataclass
class FluidParams:
    """Physical fluid description; `slip_ratio` is stored but unused."""

    physical_density: float = 1000.0  # kg/m^3
    kinematic_viscosity: float | None = None  # m^2/s; None -> tau = DEFAULT_TAU
    domain_size: tuple[float, float] = (3.6, 3.6)  # m
    slip_ratio: float = 1.013


DEFAULT_TAU = 0.55  # effective-viscosity default (Reynolds number reduced for stability)


@dataclass
class UnitScaling:
    """Bidirectional physical <-> lattice conversion factors.

    force_scale is N per lattice force unit and per metre of slab depth;
    the body coupling multiplies by its slab depth.
    """

    dx: float  # m per cell
    dt: float  # s per step
    tau: float
    velocity: float  # m/s per lattice velocity unit
    nu_lattice: float
    density: float  # kg/m^3
    force_scale: float  # N/m per lattice force unit

    def to_lattice_length(self, x):
        return np.asarray(x) / self.dx

    def to_physical_length(self, x):
        return np.asarray(x) * self.dx

    def to_lattice_velocity(self, v):
        return np.asarray(v) / self.velocity

    def to_physical_velocity(self, v):
        return np.asarray(v) * self.velocity


def effective_viscosity_for_tau(tau: float, dx: float, dt: float) -> float:
    """Viscosity (m^2/s) that yields the requested relaxation time on this grid."""
    return (tau - 0.5) * dx * dx / (3.0 * dt)


def unit_convert(params: FluidParams, nx: int, dt_fluid: float) -> UnitScaling:
    """Derive lattice scaling for a square domain resolved with nx cells.

    Raises ConfigError when the implied tau leaves (0.5, 2.0], with a
    suggested fix. Warns (via the returned tau) for barely-resolved
    viscosity; callers decide whether to raise.
    """
    lx = params.domain_size[0]
    dx = lx / nx
    nu = params.kinematic_viscosity
    if nu is None:
        nu = effective_viscosity_for_tau(DEFAULT_TAU, dx, dt_fluid)
    nu_lattice = nu * dt_fluid / (dx * dx)
    tau = 3.0 * nu_lattice + 0.5
    if not (0.5 < tau <= 2.0):
        dt_suggest = (1.0 - 0.5) * dx * dx / (3.0 * nu)
        raise ConfigError(
            f"relaxation time tau={tau:.6g} outside (0.5, 2.0]; "
            f"with nu={nu:.3g} m^2/s and dx={dx:.4g} m try dt_fluid={dt_suggest:.3g} s "
            f"(gives tau=1.0) or change the resolution"
        )
    return UnitScaling(
        dx=dx,
        dt=dt_fluid,
        tau=tau,
        velocity=dx / dt_fluid,
        nu_lattice=nu_lattice,
        density=params.physical_density,
        force_scale=params.physical_density * dx**3 / dt_fluid**2,
    )


class LatticeGrid:
    """D2Q9 state: distributions f, macroscopic rho/u, per-cell body force.

    `cell_flags` is True at solid wall cells. With walls=True the outermost
    ring of cells is solid, which places half-way bounce-back walls half a
    cell inside the domain edge.
    """

    def __init__(self, nx, ny, dx, dt_fluid, tau, walls=True):
        if tau <= 0.5:
            raise ConfigError(f"tau={tau} violates BGK stability bound tau > 0.5")
        self.nx = int(nx)
        self.ny = int(ny)
        self.dx = float(dx)
        self.dt_fluid = float(dt_fluid)
        self.tau = float(tau)
        self.cell_flags = np.zeros((self.nx, self.ny), dtype=np.bool_)
        if walls:
            self.cell_flags[0, :] = True
            self.cell_flags[-1, :] = True
            self.cell_flags[:, 0] = True
            self.cell_flags[:, -1] = True
        self.rho = np.ones((self.nx, self.ny))
        self.u = np.zeros((self.nx, self.ny, 2))
        self.body_force = np.zeros((self.nx, self.ny, 2))
        self.f = equilibrium(self.rho, self.u)
        self.f[self.cell_flags] = 0.0
        self._scratch = np.empty_like(self.f)
        self.steps = 0
        self.last_wall_impulse = np.zeros(2)

    @property
    def fluid_mask(self):
        return ~self.cell_flags

    def total_mass(self) -> float:
        return float(np.sum(self.f))

    def momentum(self) -> np.ndarray:
        """Raw first moment sum_i c_i f_i summed over cells (no half-force shift)."""
        mx = float(np.sum(self.f @ _CX.astype(float)))
        my = float(np.sum(self.f @ _CY.astype(float)))
        return np.array([mx, my])


def equilibrium(rho, u):
    """Standard D2Q9 equilibrium w_i rho (1 + 3 c.u + 4.5 (c.u)^2 - 1.5 |u|^2).

    rho: (...,), u: (..., 2); returns (..., 9).
    """
    rho = np.asarray(rho, dtype=float)
    u = np.asarray(u, dtype=float)
    cu = u[..., 0, None] * _CX + u[..., 1, None] * _CY
    usq = u[..., 0] ** 2 + u[..., 1] ** 2
    return _W * rho[..., None] * (1.0 + 3.0 * cu + 4.5 * cu * cu - 1.5 * usq[..., None])


def macroscopics(f):
    """Zeroth and first moments: rho = sum f, u = sum c f / rho."""
    f = np.asarray(f, dtype=float)
    rho = f.sum(axis=-1)
    if np.any(rho <= 0.0) or not np.all(np.isfinite(rho)):
        bad = np.argwhere(~((rho > 0.0) & np.isfinite(rho)))
        cell = tuple(bad[0]) if bad.size else None
        raise NumericFault("non-positive or non-finite density", cell=cell)
    ux = (f @ _CX.astype(float)) / rho
    uy = (f @ _CY.astype(float)) / rho
    return rho, np.stack([ux, uy], axis=-1)


@njit(cache=True)
def _collide_kernel(f, force, solid, tau, fpost):
    nx, ny = f.shape[0], f.shape[1]
    cx = np.array([0, 1, 0, -1, 0, 1, -1, -1, 1])
    cy = np.array([0, 0, 1, 0, -1, 1, 1, -1, -1])
    w = np.array([4 / 9, 1 / 9, 1 / 9, 1 / 9, 1 / 9, 1 / 36, 1 / 36, 1 / 36, 1 / 36])
    omega = 1.0 / tau
    half = 1.0 - 0.5 * omega
    for x in range(nx):
        for y in range(ny):
            if solid[x, y]:
                for i in range(9):
                    fpost[x, y, i] = 0.0
                continue
            rho = 0.0
            mx = 0.0
            my = 0.0
            for i in range(9):
                fi = f[x, y, i]
                rho += fi
                mx += fi * cx[i]
                my += fi * cy[i]
            gx = force[x, y, 0]
            gy = force[x, y, 1]
            ux = (mx + 0.5 * gx) / rho
            uy = (my + 0.5 * gy) / rho
            usq = ux * ux + uy * uy
            for i in range(9):
                cu = cx[i] * ux + cy[i] * uy
                feq = w[i] * rho * (1.0 + 3.0 * cu + 4.5 * cu * cu - 1.5 * usq)
                # Guo source: w_i (1 - 1/(2 tau)) [3 (c - u) + 9 (c.u) c] . F
                sx = 3.0 * (cx[i] - ux) + 9.0 * cu * cx[i]
                sy = 3.0 * (cy[i] - uy) + 9.0 * cu * cy[i]
                src = half * w[i] * (sx * gx + sy * gy)
                fpost[x, y, i] = f[x, y, i] - omega * (f[x, y, i] - feq) + src


@njit(cache=True)
def _stream_kernel(fpost, solid, fout):
    """Pull streaming with half-way bounce-back; returns momentum the walls
    imparted to the fluid this step (lattice units)."""
    nx, ny = fpost.shape[0], fpost.shape[1]
    cx = np.array([0, 1, 0, -1, 0, 1, -1, -1, 1])
    cy = np.array([0, 0, 1, 0, -1, 1, 1, -1, -1])
    opp = np.array([0, 3, 4, 1, 2, 7, 8, 5, 6])
    wx = 0.0
    wy = 0.0
    for x in range(nx):
        for y in range(ny):
            if solid[x, y]:
                for i in range(9):
                    fout[x, y, i] = 0.0
                continue
            for i in range(9):
                sx = x - cx[i]
                sy = y - cy[i]
                if sx < 0:
                    sx += nx
                elif sx >= nx:
                    sx -= nx
                if sy < 0:
                    sy += ny
                elif sy >= ny:
                    sy -= ny
                if solid[sx, sy]:
                    # half-way bounce-back: own outgoing population returns
                    val = fpost[x, y, opp[i]]
                    fout[x, y, i] = val
                    wx += 2.0 * val * cx[i]
                    wy += 2.0 * val * cy[i]
                else:
                    fout[x, y, i] = fpost[sx, sy, i]
    return wx, wy


@njit(cache=True)
def _moments_kernel(f, force, solid, rho, u):
    """Refresh rho/u (Guo half-force corrected) and report the first fault.

    Returns (code, x, y): code 0 ok, 1 non-finite, 2 rho <= 0, 3 Mach bound.
    """
    nx, ny = f.shape[0], f.shape[1]
    cx = np.array([0, 1, 0, -1, 0, 1, -1, -1, 1])
    cy = np.array([0, 0, 1, 0, -1, 1, 1, -1, -1])
    limit2 = MACH_LIMIT * MACH_LIMIT
    code = 0
    bx = -1
    by = -1
    for x in range(nx):
        for y in range(ny):
            if solid[x, y]:
                rho[x, y] = 1.0
                u[x, y, 0] = 0.0
                u[x, y, 1] = 0.0
                continue
            r = 0.0
            mx = 0.0
            my = 0.0
            for i in range(9):
                fi = f[x, y, i]
                r += fi
                mx += fi * cx[i]
                my += fi * cy[i]
            if not np.isfinite(r):
                if code == 0:
                    code, bx, by = 1, x, y
                rho[x, y] = r
                continue
            if r <= 0.0:
                if code == 0:
                    code, bx, by = 2, x, y
                rho[x, y] = r
                continue
            ux = (mx + 0.5 * force[x, y, 0]) / r
            uy = (my + 0.5 * force[x, y, 1]) / r
            rho[x, y] = r
            u[x, y, 0] = ux
            u[x, y, 1] = uy
            if code == 0 and ux * ux + uy * uy >= limit2:
                code, bx, by = 3, x, y
    return code, bx, by


_FAULTS = {
    1: "non-finite distribution",
    2: "non-positive density",
    3: f"lattice speed exceeded low-Mach bound {MACH_LIMIT}",
}


def collide_stream(grid: LatticeGrid) -> LatticeGrid:
    """One BGK collision (Guo forcing) + streaming step with wall bounce-back.

    Mutates and returns the grid; advances fluid time by dt_fluid. The
    momentum the walls imparted this step is left on grid.last_wall_impulse.
    """
    _collide_kernel(grid.f, grid.body_force, grid.cell_flags, grid.tau, grid._scratch)
    wx, wy = _stream_kernel(grid._scratch, grid.cell_flags, grid.f)
    code, x, y = _moments_kernel(grid.f, grid.body_force, grid.cell_flags, grid.rho, grid.u)
    grid.steps += 1
    grid.last_wall_impulse = np.array([wx, wy])
    if code:
        raise NumericFault(_FAULTS[code], cell=(x, y))
    return grid


def apply_body_force(grid: LatticeGrid, force_field: np.ndarray) -> LatticeGrid:
    """Set the per-cell body force (lattice units) used by the next collision."""
    force_field = np.asarray(force_field, dtype=float)
    if force_field.shape != (grid.nx, grid.ny, 2):
        raise ConfigError(
            f"force field shape {force_field.shape} does not match grid "
            f"({grid.nx}, {grid.ny}, 2)"
        )
    grid.body_force[...] = force_field
    return grid


def clear_body_force(grid: LatticeGrid) -> None:
    grid.body_force[...] = 0.0


def kinetic_energy(grid: LatticeGrid) -> float:
    """Total 0.5 rho |u|^2 over fluid cells, lattice units."""
    m = grid.fluid_mask
    usq = grid.u[..., 0] ** 2 + grid.u[..., 1] ** 2
    return float(0.5 * np.sum(grid.rho[m] * usq[m]))
