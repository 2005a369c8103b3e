"""Articulated body: density matching, servo law, latency, kinematics, dynamics."""

import math

import numpy as np
import pytest

from fishswim import body as fb
from fishswim.errors import ConfigError, NumericFault


# ---------------------------------------------------------- normalized density

def test_normalized_density_reference_case():
    out = fb.normalized_density([0.6, 0.2, 0.1, 0.1], [0.2, 0.1, 0.1, 0.1])
    np.testing.assert_allclose(out, [1.5, 1.0, 0.5, 0.5], rtol=1e-15)


def test_normalized_density_uniform_chain():
    lengths = [0.2, 0.3, 0.1]
    masses = [2.0 * l for l in lengths]
    np.testing.assert_allclose(fb.normalized_density(masses, lengths), 1.0, rtol=1e-15)


def test_normalized_density_single_link():
    np.testing.assert_allclose(fb.normalized_density([0.7], [0.3]), [1.0])


def test_normalized_density_rejects_bad_input():
    with pytest.raises(ConfigError):
        fb.normalized_density([], [])
    with pytest.raises(ConfigError):
        fb.normalized_density([1.0, -1.0], [0.1, 0.1])
    with pytest.raises(ConfigError):
        fb.normalized_density([1.0], [0.1, 0.2])


def test_normalized_density_weighted_mean_is_one():
    # acceptance: length-weighted mean == 1 exactly, 100 random morphologies
    rng = np.random.default_rng(11)
    for _ in range(100):
        n = rng.integers(1, 8)
        m = rng.uniform(0.05, 2.0, n)
        l = rng.uniform(0.02, 0.5, n)
        rho = fb.normalized_density(m, l)
        assert np.sum(rho * l) / np.sum(l) == pytest.approx(1.0, abs=1e-14)


# ---------------------------------------------------------------- servo torque

def make_servo(**kw):
    return fb.ServoModel(**kw)


def test_servo_zero_error_zero_rate():
    model = make_servo()
    np.testing.assert_allclose(
        fb.servo_torque(model, [0.1, -0.2, 0.3], [0.1, -0.2, 0.3], np.zeros(3)), 0.0)


def test_servo_direct_substitution():
    model = make_servo(kp=np.full(3, 2.0), kd=np.full(3, 0.5), torque_limit=10.0)
    t = fb.servo_torque(model, np.full(3, 1.0), np.full(3, 0.5), np.full(3, 0.2))
    np.testing.assert_allclose(t, 2 * 0.5 - 0.5 * 0.2)
    assert t[0] == pytest.approx(0.9)


def test_servo_saturates():
    model = make_servo(kp=np.full(3, 1e6))
    t = fb.servo_torque(model, np.full(3, 0.5), np.zeros(3), np.zeros(3))
    np.testing.assert_allclose(t, model.torque_limit)


def test_servo_odd_in_error():
    model = make_servo(kp=np.full(3, 3.0), kd=np.full(3, 0.2), torque_limit=100.0)
    err = np.array([0.2, -0.4, 0.1])
    t_pos = fb.servo_torque(model, err, np.zeros(3), np.zeros(3))
    t_neg = fb.servo_torque(model, -err, np.zeros(3), np.zeros(3))
    np.testing.assert_allclose(t_pos, -t_neg, rtol=1e-14)


def test_servo_speed_gate():
    model = make_servo(kp=np.full(3, 2.0), kd=np.full(3, 0.01))
    fast = np.full(3, model.speed_limit)
    # accelerating torque (same sign as velocity) is cut
    t = fb.servo_torque(model, np.full(3, 10.0), np.zeros(3), fast)
    np.testing.assert_allclose(t, 0.0)
    # braking torque passes
    t = fb.servo_torque(model, np.full(3, -10.0), np.zeros(3), fast)
    assert np.all(t < 0)


# --------------------------------------------------------------- latency buffer

def test_latency_zero_delay_returns_current():
    buf = fb.LatencyBuffer(np.zeros(3), delay_steps=0)
    buf.push_command([1.0, 2.0, 3.0])
    np.testing.assert_allclose(buf.delayed_command(0), [1.0, 2.0, 3.0])


def test_latency_seventeen_substeps():
    # 0.068 s at dt = 0.004 s is exactly 17 substeps
    assert round(0.068 / 0.004) == 17
    buf = fb.LatencyBuffer(np.zeros(3), delay_steps=17)
    for t in range(21):
        buf.push_command(np.full(3, float(t)))
    np.testing.assert_allclose(buf.delayed_command(20), np.full(3, 3.0))


def test_latency_underflow_returns_initial():
    init = np.array([0.1, 0.2, 0.3])
    buf = fb.LatencyBuffer(init, delay_steps=17)
    for t in range(6):
        buf.push_command(np.full(3, float(t + 5)))
    np.testing.assert_allclose(buf.delayed_command(5), init)


def test_latency_is_exact_shift_operator():
    rng = np.random.default_rng(3)
    seq = rng.normal(size=(200, 3))
    for d in (0, 1, 5, 22):
        buf = fb.LatencyBuffer(np.full(3, -9.0), delay_steps=d)
        for t in range(200):
            buf.push_command(seq[t])
            expected = seq[t - d] if t - d >= 0 else np.full(3, -9.0)
            np.testing.assert_array_equal(buf.delayed_command(t), expected)


def test_latency_capacity_validation():
    with pytest.raises(ConfigError):
        fb.LatencyBuffer(np.zeros(3), delay_steps=70, capacity=64)


# ------------------------------------------------------------------ kinematics

def straight_fish(heading=0.0, base=(1.0, 1.0), **kw):
    return fb.assemble_state(fb.FishBody(), base, heading, **kw)


def test_assemble_round_trip():
    bdy = fb.FishBody()
    j = np.array([0.3, -0.2, 0.5])
    jd = np.array([1.0, 0.5, -2.0])
    st = fb.assemble_state(bdy, (1.5, 2.0), 0.7, (0.2, -0.1), 0.4, j, jd)
    np.testing.assert_allclose(st.base_position, [1.5, 2.0], rtol=1e-14)
    assert st.heading == pytest.approx(0.7)
    np.testing.assert_allclose(st.base_linear_velocity, [0.2, -0.1], atol=1e-14)
    assert st.base_angular_velocity == pytest.approx(0.4)
    np.testing.assert_allclose(st.joint_angles, j, rtol=1e-14)
    np.testing.assert_allclose(st.joint_velocities, jd, rtol=1e-13)


def test_assemble_chain_is_connected():
    bdy = fb.FishBody()
    st = fb.assemble_state(bdy, (0.0, 0.0), 0.3, joint_angles=[0.5, -0.4, 0.2])
    for k in range(bdy.n_joints):
        np.testing.assert_allclose(st.back_point(k), st.front_point(k + 1), atol=1e-14)


def test_straight_fish_extent_and_symmetry():
    st = straight_fish(heading=0.0, base=(0.4, 0.0))
    markers = fb.marker_geometry(st.body, st, spacing=0.013)
    xs = markers.positions[:, 0]
    ys = markers.positions[:, 1]
    assert xs.max() - xs.min() == pytest.approx(0.52, abs=1e-3)
    # outline symmetric about the midline (up to resampling phase, << spacing)
    assert abs(ys.max() + ys.min()) < 1e-3
    assert abs(np.mean(ys)) < 1e-3
    assert ys.max() == pytest.approx(0.13 / 2, abs=5e-3)


def test_marker_rotation_equivariance():
    bdy = fb.FishBody()
    j = [0.3, 0.1, -0.2]
    base = np.array([1.0, 2.0])
    phi = 1.1
    m0 = fb.marker_geometry(bdy, fb.assemble_state(bdy, base, 0.2, joint_angles=j), 0.013)
    m1 = fb.marker_geometry(bdy, fb.assemble_state(bdy, base, 0.2 + phi, joint_angles=j), 0.013)
    c, s = math.cos(phi), math.sin(phi)
    rot = np.array([[c, -s], [s, c]])
    rotated = (m0.positions - base) @ rot.T + base
    np.testing.assert_allclose(m1.positions, rotated, atol=1e-12)


def test_marker_velocities_from_joint_rate():
    # only joint 1 moving: distal markers rotate about the joint-1 axis
    bdy = fb.FishBody()
    st = fb.assemble_state(bdy, (0.0, 0.0), 0.0, joint_velocities=[1.0, 0.0, 0.0])
    joint1 = st.back_point(0)
    markers = fb.marker_geometry(bdy, st, 0.013)
    distal = markers.link_index >= 1
    r = markers.positions[distal] - joint1
    expected = np.stack([-r[:, 1], r[:, 0]], axis=1)  # omega = 1 rad/s
    np.testing.assert_allclose(markers.velocities[distal], expected, atol=1e-12)
    np.testing.assert_allclose(markers.velocities[~distal], 0.0, atol=1e-14)


def test_marker_spacing_near_request():
    st = straight_fish()
    spacing = 0.7 * (3.6 / 190)
    markers = fb.marker_geometry(st.body, st, spacing)
    assert np.allclose(markers.ds, markers.ds[0])
    assert markers.ds[0] == pytest.approx(spacing, rel=0.1)


def test_degenerate_geometry_warns():
    bdy = fb.FishBody()
    lim = bdy.joint_limit
    st = fb.assemble_state(bdy, (0.0, 0.0), 0.0, joint_angles=[lim, lim, lim])
    with pytest.warns(UserWarning):
        fb.marker_geometry(bdy, st, 0.004)


# -------------------------------------------------------------------- dynamics

def test_body_step_rest_is_fixed_point():
    st = straight_fish()
    before = (st.pos.copy(), st.angle.copy())
    fb.body_step(st, np.zeros(3), None, None, dt=0.004)
    np.testing.assert_allclose(st.pos, before[0], atol=1e-12)
    np.testing.assert_allclose(st.angle, before[1], atol=1e-12)
    np.testing.assert_allclose(st.vel, 0.0, atol=1e-12)


def test_internal_torques_conserve_momentum():
    st = straight_fish(base=(0.0, 0.0), heading=0.2,
                       base_linear_velocity=(0.1, -0.05), base_angular_velocity=0.5)
    rng = np.random.default_rng(5)
    p0 = st.linear_momentum()
    l0 = st.angular_momentum_about_com()
    for _ in range(200):
        torques = rng.uniform(-1.5, 1.5, 3)
        fb.body_step(st, torques, None, None, dt=0.004)
        p = st.linear_momentum()
        l = st.angular_momentum_about_com()
        assert np.max(np.abs(p - p0)) < 1e-8 * max(np.linalg.norm(p0), 1e-3)
        assert abs(l - l0) < 1e-8 * max(abs(l0), 1e-3)
        p0, l0 = p, l


def test_external_force_impulse_momentum():
    st = straight_fish()
    bdy = st.body
    F = np.array([0.3, -0.1])
    nose = st.front_point(0)
    mset = fb.MarkerSet(positions=nose[None, :], velocities=np.zeros((1, 2)),
                        ds=np.array([0.01]), link_index=np.array([0]))
    n, dt = 250, 0.004
    for _ in range(n):
        mset = fb.MarkerSet(st.front_point(0)[None, :], np.zeros((1, 2)),
                            np.array([0.01]), np.array([0]))
        fb.body_step(st, np.zeros(3), mset, F[None, :], dt)
    dv = st.linear_momentum() / bdy.total_mass
    np.testing.assert_allclose(dv, F * n * dt / bdy.total_mass, rtol=1e-6)


def test_vacuum_energy_non_increasing():
    st = straight_fish(base_linear_velocity=(0.05, 0.0),
                       joint_velocities=[2.0, -1.5, 1.0])
    e = st.kinetic_energy()
    for _ in range(500):
        fb.body_step(st, np.zeros(3), None, None, dt=0.004)
        e_next = st.kinetic_energy()
        assert e_next <= e + 1e-6
        e = e_next


def test_joint_limits_hold():
    st = straight_fish()
    lim = st.body.joint_limit
    for _ in range(800):
        fb.body_step(st, np.array([5.0, 5.0, 5.0]), None, None, dt=0.004)
        assert np.all(np.abs(st.joint_angles) <= lim + 1e-4)
    # the driven joints actually reached the limit
    assert np.max(st.joint_angles) > 0.9 * lim


def test_body_step_nan_fault():
    st = straight_fish()
    st.vel[0, 0] = np.nan
    with pytest.raises(NumericFault):
        fb.body_step(st, np.zeros(3), None, None, dt=0.004)


def test_heading_wraps():
    st = straight_fish(heading=3.0)
    st.angle += 1.0  # push past pi
    assert -math.pi < st.heading <= math.pi


def test_default_chain_matches_totals():
    bdy = fb.FishBody()
    assert bdy.total_length == pytest.approx(0.52)
    assert bdy.total_mass == pytest.approx(1.1)
    rho = bdy.normalized_densities()
    assert np.sum(rho * bdy.lengths) / bdy.total_length == pytest.approx(1.0, abs=1e-14)
