"""Free-floating planar fish: 4-link chain, PD servo surrogate, command latency.

The chain is integrated in maximal coordinates (per-link pose + velocity)
with an exact velocity-level constraint solve at the three pin joints.
Constraint impulses are applied equal-and-opposite at a common point, so
total linear and angular momentum are conserved to round-off regardless of
solver tolerances. Joint drift is held down by Baumgarte stabilization.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericFault

TWO_PI = 2.0 * math.pi


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    out = a - TWO_PI * np.round(a / TWO_PI)
    out = np.where(out <= -math.pi, out + TWO_PI, out)
    return out if out.ndim else float(out)


def normalized_density(masses, lengths):
    """Per-link density relative to the chain mean: (m_i/l_i) * (sum l / sum m).

    The length-weighted mean of the result is exactly 1.
    """
    m = np.asarray(masses, dtype=float)
    l = np.asarray(lengths, dtype=float)
    if m.size == 0 or m.shape != l.shape:
        raise ConfigError("masses and lengths must be equal-length, non-empty")
    if np.any(m <= 0) or np.any(l <= 0):
        raise ConfigError("masses and lengths must be positive")
    return (m / l) * (l.sum() / m.sum())


@dataclass
class LinkSpec:
    mass: float  # kg
    length: float  # m
    width: float  # m, lateral extent for the outline and link inertia

    def __post_init__(self):
        if self.mass <= 0 or self.length <= 0 or self.width <= 0:
            raise ConfigError("link mass/length/width must be positive")

    @property
    def inertia(self) -> float:
        # uniform rectangle about its centre
        return self.mass * (self.length**2 + self.width**2) / 12.0


@dataclass
class ServoModel:
    """PD torque surrogate for the position-controlled servos."""

    kp: np.ndarray = field(default_factory=lambda: np.full(3, 8.0))  # N*m/rad
    kd: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))  # N*m*s/rad
    torque_limit: float = 1.667  # N*m  (17 kg*cm)
    speed_limit: float = 5.236  # rad/s (60 deg / 0.2 s)

    def __post_init__(self):
        self.kp = np.atleast_1d(np.asarray(self.kp, dtype=float))
        self.kd = np.atleast_1d(np.asarray(self.kd, dtype=float))
        if np.any(self.kp <= 0) or np.any(self.kd <= 0):
            raise ConfigError("servo gains must be positive")


def servo_torque(model: ServoModel, j_des, j, jdot):
    """PD law T = kp (J_des - J) - kd Jdot, torque-limited, with speed gating.

    Accelerating torque is zeroed once a joint is at the speed limit; braking
    torque passes through, which keeps momentum bookkeeping clean.
    """
    j_des = np.asarray(j_des, dtype=float)
    j = np.asarray(j, dtype=float)
    jdot = np.asarray(jdot, dtype=float)
    t = model.kp * (j_des - j) - model.kd * jdot
    t = np.clip(t, -model.torque_limit, model.torque_limit)
    gate = (np.abs(jdot) >= model.speed_limit) & (np.sign(t) == np.sign(jdot))
    return np.where(gate, 0.0, t)


class LatencyBuffer:
    """Ring of past commands; reads return the command delay_steps substeps ago."""

    def __init__(self, initial_command, delay_steps: int, capacity: int = 64):
        self.initial_command = np.asarray(initial_command, dtype=float).copy()
        self.delay_steps = int(delay_steps)
        if self.delay_steps < 0:
            raise ConfigError("delay_steps must be >= 0")
        if capacity < self.delay_steps + 1:
            raise ConfigError(
                f"latency buffer capacity {capacity} < delay {self.delay_steps} + 1"
            )
        self.capacity = int(capacity)
        self._ring = np.tile(self.initial_command, (self.capacity, 1))
        self.count = 0

    def push_command(self, command):
        self._ring[self.count % self.capacity] = command
        self.count += 1

    def delayed_command(self, t: int):
        """Command recorded at substep t - delay_steps; initial pose before that."""
        q = t - self.delay_steps
        if q < 0:
            return self.initial_command.copy()
        if q >= self.count or q < self.count - self.capacity:
            raise ConfigError(f"substep {q} not held in latency buffer")
        return self._ring[q % self.capacity].copy()


def default_links():
    """0.52 m / 1.1 kg fish split head-heavy: most mass sits in the electronics head."""
    return [
        LinkSpec(mass=0.62, length=0.24, width=0.13),
        LinkSpec(mass=0.15, length=0.07, width=0.10),
        LinkSpec(mass=0.15, length=0.07, width=0.07),
        LinkSpec(mass=0.18, length=0.14, width=0.04),
    ]


class FishBody:
    """Morphology: link specs, joint limit, and chain mass properties."""

    def __init__(self, links=None, joint_limit=math.radians(60.0)):
        self.links = list(links) if links is not None else default_links()
        if len(self.links) < 2:
            raise ConfigError("chain needs at least two links")
        self.joint_limit = float(joint_limit)
        self.n_links = len(self.links)
        self.n_joints = self.n_links - 1
        self.masses = np.array([s.mass for s in self.links])
        self.lengths = np.array([s.length for s in self.links])
        self.widths = np.array([s.width for s in self.links])
        self.inertias = np.array([s.inertia for s in self.links])
        self.total_mass = float(self.masses.sum())
        self.total_length = float(self.lengths.sum())

    def normalized_densities(self):
        return normalized_density(self.masses, self.lengths)


class FishState:
    """Per-link poses and velocities; canonical fields are derived views.

    Link 0 is the head (the base); +x of a link's frame points toward the
    nose, so a straight fish has every link at the heading angle.
    """

    def __init__(self, body: FishBody, pos, angle, vel, omega):
        self.body = body
        self.pos = np.asarray(pos, dtype=float).reshape(body.n_links, 2)
        self.angle = np.asarray(angle, dtype=float).reshape(body.n_links)
        self.vel = np.asarray(vel, dtype=float).reshape(body.n_links, 2)
        self.omega = np.asarray(omega, dtype=float).reshape(body.n_links)

    def copy(self):
        return FishState(self.body, self.pos.copy(), self.angle.copy(),
                         self.vel.copy(), self.omega.copy())

    # canonical views -------------------------------------------------------

    @property
    def base_position(self):
        return self.pos[0].copy()

    @property
    def heading(self):
        return wrap_angle(self.angle[0])

    @property
    def base_linear_velocity(self):
        """Head velocity expressed in the body (heading-aligned) frame."""
        c, s = math.cos(self.angle[0]), math.sin(self.angle[0])
        vx, vy = self.vel[0]
        return np.array([c * vx + s * vy, -s * vx + c * vy])

    @property
    def base_angular_velocity(self):
        return float(self.omega[0])

    @property
    def joint_angles(self):
        return wrap_angle(np.diff(self.angle))

    @property
    def joint_velocities(self):
        return np.diff(self.omega)

    # chain geometry --------------------------------------------------------

    def _axis(self, i):
        return np.array([math.cos(self.angle[i]), math.sin(self.angle[i])])

    def front_point(self, i):
        return self.pos[i] + 0.5 * self.body.lengths[i] * self._axis(i)

    def back_point(self, i):
        return self.pos[i] - 0.5 * self.body.lengths[i] * self._axis(i)

    def com(self):
        m = self.body.masses
        return (self.pos * m[:, None]).sum(axis=0) / self.body.total_mass

    def linear_momentum(self):
        return (self.vel * self.body.masses[:, None]).sum(axis=0)

    def angular_momentum_about_com(self):
        com = self.com()
        r = self.pos - com
        spin = float(np.sum(self.body.inertias * self.omega))
        orbital = float(np.sum(self.body.masses * (r[:, 0] * self.vel[:, 1] - r[:, 1] * self.vel[:, 0])))
        return spin + orbital

    def kinetic_energy(self):
        trans = 0.5 * np.sum(self.body.masses * np.sum(self.vel**2, axis=1))
        rot = 0.5 * np.sum(self.body.inertias * self.omega**2)
        return float(trans + rot)


def assemble_state(body: FishBody, base_position, heading, base_linear_velocity=(0.0, 0.0),
                   base_angular_velocity=0.0, joint_angles=None, joint_velocities=None):
    """Build a consistent FishState from the canonical description."""
    nj = body.n_joints
    j = np.zeros(nj) if joint_angles is None else np.asarray(joint_angles, dtype=float)
    jd = np.zeros(nj) if joint_velocities is None else np.asarray(joint_velocities, dtype=float)
    if j.shape != (nj,) or jd.shape != (nj,):
        raise ConfigError(f"expected {nj} joint angles/velocities")
    if np.any(np.abs(j) > body.joint_limit + 1e-9):
        raise ConfigError("joint angle outside limit")

    angle = np.concatenate([[heading], heading + np.cumsum(j)])
    omega = np.concatenate([[base_angular_velocity], base_angular_velocity + np.cumsum(jd)])
    c, s = math.cos(heading), math.sin(heading)
    v0 = np.asarray(base_linear_velocity, dtype=float)
    vel0 = np.array([c * v0[0] - s * v0[1], s * v0[0] + c * v0[1]])  # body -> world

    pos = np.zeros((body.n_links, 2))
    vel = np.zeros((body.n_links, 2))
    pos[0] = base_position
    vel[0] = vel0
    for k in range(1, body.n_links):
        axis_p = np.array([math.cos(angle[k - 1]), math.sin(angle[k - 1])])
        axis_c = np.array([math.cos(angle[k]), math.sin(angle[k])])
        joint = pos[k - 1] - 0.5 * body.lengths[k - 1] * axis_p
        pos[k] = joint - 0.5 * body.lengths[k] * axis_c
        r_p = joint - pos[k - 1]
        v_joint = vel[k - 1] + omega[k - 1] * np.array([-r_p[1], r_p[0]])
        r_c = joint - pos[k]
        vel[k] = v_joint - omega[k] * np.array([-r_c[1], r_c[0]])
    return FishState(body, pos, angle, vel, omega)


# ----------------------------------------------------------------- markers

@dataclass
class MarkerSet:
    """Closed-outline boundary markers with rigid-body velocities."""

    positions: np.ndarray  # (n, 2) world metres
    velocities: np.ndarray  # (n, 2) m/s
    ds: np.ndarray  # (n,) segment length per marker, m
    link_index: np.ndarray  # (n,) owning link

    def __len__(self):
        return len(self.positions)


def _halfwidth_nodes(body: FishBody):
    # taper the nose and tail tip; interior nodes take the link widths
    w = body.widths
    nodes = np.empty(body.n_links + 1)
    nodes[0] = 0.3 * w[0]
    nodes[1:-1] = w[:-1]
    nodes[-1] = 0.15 * w[-1]
    return 0.5 * nodes


def _outline_samples(body: FishBody, state: FishState, per_link=24):
    """Fine sampling of midline point, right normal, half-width, link id."""
    hw_nodes = _halfwidth_nodes(body)
    pts, nrm, hws, lid = [], [], [], []
    for i in range(body.n_links):
        a = state._axis(i)
        n = np.array([a[1], -a[0]])  # right-hand normal
        front = state.front_point(i)
        ts = np.linspace(0.0, 1.0, per_link, endpoint=False)
        for t in ts:
            pts.append(front - t * body.lengths[i] * a)
            nrm.append(n)
            hws.append(hw_nodes[i] * (1 - t) + hw_nodes[i + 1] * t)
            lid.append(i)
    # tail tip closes the profile
    pts.append(state.back_point(body.n_links - 1))
    a = state._axis(body.n_links - 1)
    nrm.append(np.array([a[1], -a[0]]))
    hws.append(hw_nodes[-1])
    lid.append(body.n_links - 1)
    return np.array(pts), np.array(nrm), np.array(hws), np.array(lid)


def _resample_closed(points, attrs, spacing):
    """Resample a closed polyline at uniform arclength spacing."""
    d = np.diff(np.vstack([points, points[:1]]), axis=0)
    seglen = np.hypot(d[:, 0], d[:, 1])
    total = seglen.sum()
    n = max(int(round(total / spacing)), 8)
    s_targets = np.arange(n) * total / n
    cum = np.concatenate([[0.0], np.cumsum(seglen)])
    idx = np.searchsorted(cum, s_targets, side="right") - 1
    idx = np.clip(idx, 0, len(points) - 1)
    frac = (s_targets - cum[idx]) / np.maximum(seglen[idx], 1e-300)
    nxt = (idx + 1) % len(points)
    out_pts = points[idx] * (1 - frac[:, None]) + points[nxt] * frac[:, None]
    out_attrs = [a[idx] for a in attrs]
    ds = np.full(n, total / n)
    return out_pts, out_attrs, ds


def _polygon_self_intersects(poly):
    """Any pair of non-adjacent edges crossing (coarse O(n^2) check)."""
    p = poly
    q = np.roll(poly, -1, axis=0)
    n = len(p)
    d = q - p
    for i in range(n):
        ax, ay = p[i]
        bx, by = q[i]
        ex, ey = bx - ax, by - ay
        j = np.arange(n)
        mask = (j != i) & (j != (i - 1) % n) & (j != (i + 1) % n)
        cx, cy = p[mask, 0], p[mask, 1]
        dx, dy = d[mask, 0], d[mask, 1]
        denom = ex * dy - ey * dx
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((cx - ax) * dy - (cy - ay) * dx) / denom
            s = ((cx - ax) * ey - (cy - ay) * ex) / denom
        hit = (np.abs(denom) > 1e-14) & (t > 0) & (t < 1) & (s > 0) & (s < 1)
        if np.any(hit):
            return True
    return False


def marker_geometry(body: FishBody, state: FishState, spacing: float) -> MarkerSet:
    """Boundary markers tracing the closed fish outline at ~spacing arclength.

    Warns (without failing) if extreme joint angles fold the outline onto
    itself.
    """
    pts, nrm, hws, lid = _outline_samples(body, state)
    right = pts + hws[:, None] * nrm
    left = (pts - hws[:, None] * nrm)[::-1]
    outline = np.vstack([right, left])
    attrs_lid = np.concatenate([lid, lid[::-1]])
    positions, (link_idx,), ds = _resample_closed(outline, [attrs_lid], spacing)

    jmax = np.max(np.abs(state.joint_angles)) if body.n_joints else 0.0
    if jmax > 0.8 * body.joint_limit and _polygon_self_intersects(positions[::3]):
        warnings.warn("fish outline self-intersects at extreme joint angles", stacklevel=2)

    r = positions - state.pos[link_idx]
    w = state.omega[link_idx]
    velocities = state.vel[link_idx] + np.stack([-w * r[:, 1], w * r[:, 0]], axis=1)
    return MarkerSet(positions, velocities, ds, link_idx.astype(int))


# ----------------------------------------------------------------- dynamics

BAUMGARTE_BETA = 0.2  # fraction of joint gap corrected per substep


def _accumulate_wrenches(state: FishState, joint_torques, marker_set, marker_forces):
    """Per-link force/torque from marker forces and internal joint torques."""
    body = state.body
    nl, nj = body.n_links, body.n_joints
    torques = np.zeros(nj) if joint_torques is None else np.asarray(joint_torques, dtype=float)
    force = np.zeros((nl, 2))
    torque = np.zeros(nl)
    if marker_set is not None and marker_forces is not None:
        mf = np.asarray(marker_forces, dtype=float)
        if mf.shape != marker_set.positions.shape:
            raise ConfigError("marker force array does not match marker set")
        r = marker_set.positions - state.pos[marker_set.link_index]
        np.add.at(force, marker_set.link_index, mf)
        np.add.at(torque, marker_set.link_index,
                  r[:, 0] * mf[:, 1] - r[:, 1] * mf[:, 0])
    if nj:
        torque[:-1] -= torques
        torque[1:] += torques
    return force, torque


def body_step(state: FishState, joint_torques, marker_set, marker_forces, dt,
              joint_limit_slack=1e-9):
    """Advance the chain one substep of semi-implicit Euler.

    Joint torques act internally (+T on the child link, -T on its parent);
    marker_forces (N, world frame) act at marker_set positions. Pin joints
    are enforced by an exact velocity-level impulse solve with Baumgarte
    position bias; joint limits become extra constraint rows when the next
    step would cross them.
    """
    body = state.body
    force, torque = _accumulate_wrenches(state, joint_torques, marker_set, marker_forces)

    # explicit velocity update
    state.vel += dt * force / body.masses[:, None]
    state.omega += dt * torque / body.inertias
    return project_and_integrate(state, dt, joint_limit_slack)


def drag_velocity_update(state: FishState, force, torque, marker_set, u_fluid, drag, dt):
    """One drag-implicit velocity increment; returns the marker forces (N).

    Each marker exerts f_k = drag_k (u_fluid_k - u_marker_k) with u_marker
    taken at the post-increment link velocity; the light fish engages more
    fluid mass per substep than its own, so the explicit form diverges.
    Mutates only velocities; callers finish the step with
    project_and_integrate.
    """
    body = state.body
    nl = body.n_links
    u_fluid = np.asarray(u_fluid, dtype=float)
    drag = np.asarray(drag, dtype=float)
    r = marker_set.positions - state.pos[marker_set.link_index]

    # per-link 3x3 implicit solve: (M + dt K) v' = M v + dt (load + drag pull)
    v_new = np.zeros((nl, 3))
    for i in range(nl):
        sel = marker_set.link_index == i
        m, inertia = body.masses[i], body.inertias[i]
        a = np.diag([m, m, inertia])
        rhs = np.array([m * state.vel[i, 0] + dt * force[i, 0],
                        m * state.vel[i, 1] + dt * force[i, 1],
                        inertia * state.omega[i] + dt * torque[i]])
        if np.any(sel):
            dk = drag[sel]
            rx, ry = r[sel, 0], r[sel, 1]
            ufx, ufy = u_fluid[sel, 0], u_fluid[sel, 1]
            s = dk.sum()
            a[0, 0] += dt * s
            a[1, 1] += dt * s
            a[0, 2] += dt * np.sum(-dk * ry)
            a[2, 0] = a[0, 2]
            a[1, 2] += dt * np.sum(dk * rx)
            a[2, 1] = a[1, 2]
            a[2, 2] += dt * np.sum(dk * (rx * rx + ry * ry))
            rhs[0] += dt * np.sum(dk * ufx)
            rhs[1] += dt * np.sum(dk * ufy)
            rhs[2] += dt * np.sum(dk * (rx * ufy - ry * ufx))
        v_new[i] = np.linalg.solve(a, rhs)

    w = v_new[marker_set.link_index, 2]
    u_marker = v_new[marker_set.link_index, :2] + np.stack([-w * r[:, 1], w * r[:, 0]], axis=1)
    forces = drag[:, None] * (u_fluid - u_marker)

    state.vel[:] = v_new[:, :2]
    state.omega[:] = v_new[:, 2]
    return forces


def coupled_body_step(state: FishState, joint_torques, marker_set, u_fluid, drag, dt,
                      joint_limit_slack=1e-9):
    """Advance the chain one substep with implicit marker drag (single exchange)."""
    force, torque = _accumulate_wrenches(state, joint_torques, None, None)
    forces = drag_velocity_update(state, force, torque, marker_set, u_fluid, drag, dt)
    project_and_integrate(state, dt, joint_limit_slack)
    return forces


def project_and_integrate(state: FishState, dt, joint_limit_slack=1e-9):
    """Joint-constraint impulse solve, then position integration and checks."""
    body = state.body
    nl, nj = body.n_links, body.n_joints

    # constraint rows: 2 per pin joint (+1 per active joint limit)
    joints = np.array([0.5 * (state.back_point(k) + state.front_point(k + 1))
                       for k in range(nj)])
    gaps = np.array([state.front_point(k + 1) - state.back_point(k) for k in range(nj)])
    jang = state.joint_angles
    lim = body.joint_limit
    v0 = np.column_stack([state.vel, state.omega]).ravel()
    minv = 1.0 / np.column_stack([body.masses, body.masses, body.inertias]).ravel()

    def solve(active_limits):
        nc = 2 * nj + len(active_limits)
        J = np.zeros((nc, 3 * nl))
        rhs = np.zeros(nc)
        for k in range(nj):
            p, c = k, k + 1
            rp = joints[k] - state.pos[p]
            rc = joints[k] - state.pos[c]
            for ax in range(2):
                row = 2 * k + ax
                J[row, 3 * p + ax] = 1.0
                J[row, 3 * c + ax] = -1.0
            J[2 * k, 3 * p + 2] = -rp[1]
            J[2 * k, 3 * c + 2] = rc[1]
            J[2 * k + 1, 3 * p + 2] = rp[0]
            J[2 * k + 1, 3 * c + 2] = -rc[0]
            rhs[2 * k:2 * k + 2] = (BAUMGARTE_BETA / dt) * gaps[k]
        for row, (k, sign) in enumerate(sorted(active_limits), start=2 * nj):
            J[row, 3 * k + 2] = -1.0
            J[row, 3 * (k + 1) + 2] = 1.0
            # land exactly on the limit this step (inelastic stop)
            rhs[row] = (sign * lim - jang[k]) / dt
        a = J * minv
        try:
            lam = np.linalg.solve(a @ J.T, -(J @ v0) + rhs)
        except np.linalg.LinAlgError:
            raise NumericFault("singular joint constraint system")
        return v0 + minv * (J.T @ lam)

    # active-set loop: solving can push a previously-safe joint across its
    # limit, so re-check predictions until the set stops growing
    active = set()
    for _ in range(nj + 1):
        v = solve(active)
        jvel_new = v.reshape(nl, 3)[1:, 2] - v.reshape(nl, 3)[:-1, 2]
        grew = False
        for k in range(nj):
            predicted = jang[k] + dt * jvel_new[k]
            if predicted > lim + joint_limit_slack and (k, 1.0) not in active:
                active.add((k, 1.0))
                grew = True
            elif predicted < -lim - joint_limit_slack and (k, -1.0) not in active:
                active.add((k, -1.0))
                grew = True
        if not grew:
            break

    vw = v.reshape(nl, 3)
    state.vel[:] = vw[:, :2]
    state.omega[:] = vw[:, 2]

    # position update
    state.pos += dt * state.vel
    state.angle += dt * state.omega

    if not (np.all(np.isfinite(state.pos)) and np.all(np.isfinite(state.vel))
            and np.all(np.isfinite(state.angle)) and np.all(np.isfinite(state.omega))):
        raise NumericFault("non-finite body state")
    return state
