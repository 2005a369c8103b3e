"""Two-way immersed-boundary coupling between the lattice fluid and the fish.

Direct (non-iterative) forcing with the 4-point regularized delta kernel:
fluid velocity is interpolated to the outline markers, the no-slip defect
becomes a marker force, the reaction is spread back onto the grid, and the
marker forces drive the body. The impulse handed to the fluid equals minus
the impulse handed to the body, identically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import body as fishbody
from . import lbm
from .errors import ConfigError, OutOfDomainFault

MARKER_SPACING_CELLS = 0.7


def neutral_slab_depth(body, fluid_density, fine_spacing=0.005):
    """Slab depth at which the outline displaces exactly the fish's mass.

    The physical fish is trimmed to near-neutral buoyancy, so the 2D slab
    is chosen to preserve the body/fluid mass ratio.
    """
    import numpy as _np

    from . import body as _fb

    st = _fb.assemble_state(body, (0.0, 0.0), 0.0)
    p = _fb.marker_geometry(body, st, fine_spacing).positions
    area = 0.5 * abs(float(_np.sum(p[:, 0] * _np.roll(p[:, 1], -1)
                                   - _np.roll(p[:, 0], -1) * p[:, 1])))
    return body.total_mass / (fluid_density * area)


def peskin4(r):
    """Peskin 4-point regularized delta, support |r| < 2, partition of unity."""
    r = np.abs(np.asarray(r, dtype=float))
    out = np.zeros_like(r)
    near = r <= 1.0
    far = (r > 1.0) & (r < 2.0)
    rn = r[near]
    out[near] = (3.0 - 2.0 * rn + np.sqrt(1.0 + 4.0 * rn - 4.0 * rn * rn)) / 8.0
    rf = r[far]
    out[far] = (5.0 - 2.0 * rf - np.sqrt(-7.0 + 12.0 * rf - 4.0 * rf * rf)) / 8.0
    return out


@dataclass
class MarkerForces:
    """Per-marker hydrodynamic force on the body plus resultants."""

    forces: np.ndarray  # (n, 2)
    total_force: np.ndarray  # (2,)
    total_torque_about_com: float

    @classmethod
    def from_markers(cls, forces, positions, com):
        forces = np.asarray(forces, dtype=float)
        r = positions - com
        torque = float(np.sum(r[:, 0] * forces[:, 1] - r[:, 1] * forces[:, 0]))
        return cls(forces, forces.sum(axis=0), torque)


def _support(grid: lbm.LatticeGrid, positions_lattice):
    """Kernel support cells and tensor-product weights for each marker."""
    xl = np.asarray(positions_lattice, dtype=float)
    base = np.floor(xl).astype(np.int64) - 1
    if np.any(base < 0) or np.any(base[:, 0] + 3 >= grid.nx) or np.any(base[:, 1] + 3 >= grid.ny):
        raise OutOfDomainFault("marker kernel support leaves the fluid domain")
    offs = np.arange(4)
    jx = base[:, 0, None] + offs  # (n, 4)
    jy = base[:, 1, None] + offs
    wx = peskin4(xl[:, 0, None] - jx)
    wy = peskin4(xl[:, 1, None] - jy)
    w = wx[:, :, None] * wy[:, None, :]  # (n, 4, 4)
    return jx, jy, w


def interpolate_velocity(grid: lbm.LatticeGrid, positions_lattice):
    """Fluid velocity (and density) at marker positions, lattice units."""
    jx, jy, w = _support(grid, positions_lattice)
    cells_u = grid.u[jx[:, :, None], jy[:, None, :]]  # (n, 4, 4, 2)
    cells_rho = grid.rho[jx[:, :, None], jy[:, None, :]]
    u = np.sum(w[..., None] * cells_u, axis=(1, 2))
    rho = np.sum(w * cells_rho, axis=(1, 2))
    return u, rho


def direct_forcing(marker_fluid_u, marker_body_u, ds_lattice, rho_marker, dt=1.0):
    """Marker forces on the body from the no-slip defect (lattice units).

    The fluid must be driven toward the body velocity over one coupling
    interval, so it receives rho (u_body - u_fluid) / dt * ds per marker;
    the body force returned here is the reaction. Doubling dt halves the
    forces.
    """
    uf = np.asarray(marker_fluid_u, dtype=float)
    ub = np.asarray(marker_body_u, dtype=float)
    ds = np.asarray(ds_lattice, dtype=float)
    rho = np.asarray(rho_marker, dtype=float)
    return rho[:, None] * (uf - ub) / dt * ds[:, None]


def spread_force(grid: lbm.LatticeGrid, positions_lattice, body_forces):
    """Spread the reaction of the marker forces onto the grid body-force field.

    Returns the (nx, ny, 2) field; sum over cells equals minus the summed
    body forces, up to kernel truncation under wall cells.
    """
    jx, jy, w = _support(grid, positions_lattice)
    field = np.zeros((grid.nx, grid.ny, 2))
    contrib = -w[..., None] * np.asarray(body_forces, dtype=float)[:, None, None, :]
    np.add.at(field, (jx[:, :, None], jy[:, None, :]), contrib)
    return field


@dataclass
class SubstepDiag:
    """Per-substep momentum bookkeeping, lattice units."""

    body_impulse: np.ndarray  # sum of marker forces on the body * dt
    fluid_impulse: np.ndarray  # sum of the spread field * dt
    wall_impulse: np.ndarray  # momentum imparted by wall bounce-back


class CoupledSim:
    """One fish two-way coupled to one grid; exclusively owned by its stepper."""

    def __init__(self, grid: lbm.LatticeGrid, state: fishbody.FishState,
                 servo: fishbody.ServoModel, latency: fishbody.LatencyBuffer,
                 scaling: lbm.UnitScaling, slab_depth: float = None,
                 coupling_iterations: int = 4):
        if abs(scaling.dx - grid.dx) > 1e-12 or abs(scaling.dt - grid.dt_fluid) > 1e-12:
            raise ConfigError("unit scaling does not match the grid")
        self.grid = grid
        self.state = state
        self.servo = servo
        self.latency = latency
        self.scaling = scaling
        if slab_depth is None:
            slab_depth = neutral_slab_depth(state.body, scaling.density)
        self.slab_depth = float(slab_depth)
        self.coupling_iterations = int(coupling_iterations)
        if self.coupling_iterations < 1:
            raise ConfigError("coupling_iterations must be >= 1")
        self.substeps = 0
        self.marker_spacing = MARKER_SPACING_CELLS * grid.dx
        # N per lattice force unit
        self.force_to_newton = scaling.force_scale * self.slab_depth

    def to_lattice(self, positions_m):
        return np.asarray(positions_m, dtype=float) / self.grid.dx - 0.5

    def substep(self, j_des, audit=False):
        """One ordered coupling pass; fluid and body both advance dt_fluid.

        j_des is recorded in the latency buffer; the command actually served
        to the PD servo is the one delay_steps substeps old.

        The marker forces come out of drag-implicit increments of the body
        velocity (the fish engages more fluid mass per substep than its own
        mass, so a fully explicit exchange diverges), iterated against a
        running estimate of the forced fluid velocity so the thin fin holds
        a pressure jump instead of leaking. The accumulated forces are then
        spread, negated, onto the grid: the impulse the body absorbed is
        exactly what the fluid is handed.
        """
        grid, state = self.grid, self.state
        dt = grid.dt_fluid
        self.latency.push_command(j_des)

        markers = fishbody.marker_geometry(state.body, state, self.marker_spacing)
        pos_l = self.to_lattice(markers.positions)
        jx, jy, w = _support(grid, pos_l)
        rho_m = np.sum(w * grid.rho[jx[:, :, None], jy[:, None, :]], axis=(1, 2))
        ds_l = markers.ds / grid.dx
        # kg/s per marker: rho ds (Delta u) / dt in lattice, converted
        drag = rho_m * ds_l * self.force_to_newton * dt / grid.dx

        j_used = self.latency.delayed_command(self.substeps)
        torques = fishbody.servo_torque(
            self.servo, j_used, state.joint_angles, state.joint_velocities)
        load_f, load_t = fishbody._accumulate_wrenches(state, torques, None, None)

        u_work = grid.u.copy()  # lattice; refined as forcing accumulates
        f_total = np.zeros((len(markers), 2))  # Newtons, on the body
        zero_f = np.zeros_like(load_f)
        zero_t = np.zeros_like(load_t)
        for it in range(self.coupling_iterations):
            u_m_lat = np.sum(w[..., None] * u_work[jx[:, :, None], jy[:, None, :]],
                             axis=(1, 2))
            u_m = self.scaling.to_physical_velocity(u_m_lat)
            df = fishbody.drag_velocity_update(
                state, load_f if it == 0 else zero_f, load_t if it == 0 else zero_t,
                markers, u_m, drag, dt)
            f_total += df
            if it + 1 < self.coupling_iterations:
                df_lat = df / self.force_to_newton
                incr = np.zeros_like(u_work)
                contrib = -w[..., None] * df_lat[:, None, None, :]
                np.add.at(incr, (jx[:, :, None], jy[:, None, :]), contrib)
                u_work += incr / grid.rho[..., None]
        fishbody.project_and_integrate(state, dt)

        f_body_lattice = f_total / self.force_to_newton
        field = spread_force(grid, pos_l, f_body_lattice)
        lbm.apply_body_force(grid, field)
        lbm.collide_stream(grid)
        self.substeps += 1

        if audit:
            return SubstepDiag(
                body_impulse=f_body_lattice.sum(axis=0),
                fluid_impulse=field.sum(axis=(0, 1)),
                wall_impulse=grid.last_wall_impulse.copy(),
            )
        return None
