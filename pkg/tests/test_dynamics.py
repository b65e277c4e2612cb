from __future__ import annotations

import numpy as np
import pytest

from quadbench.dynamics import (
    QUAT,
    STATE_DIM,
    PhysParams,
    QuadState,
    RandomizationSpec,
    nominal_batch,
    prop_wrench,
    sample_params,
    state_derivative,
    step_symplectic_euler,
    step_symplectic_euler_reference,
)
from quadbench.mathcore import quat_from_yaw, quat_multiply, quat_rotate, random_quat

P = PhysParams()
W_HOVER = np.sqrt(P.mass * 9.81 / (4 * P.c_l))


def hover_state(p=(0.0, 0.0, 5.0)):
    return QuadState.hover(P, p).to_array()


def rk4_full(x, params, cmd, dt, steps):
    for _ in range(steps):
        k1 = state_derivative(x, params, cmd)
        k2 = state_derivative(x + 0.5 * dt * k1, params, cmd)
        k3 = state_derivative(x + 0.5 * dt * k2, params, cmd)
        k4 = state_derivative(x + dt * k3, params, cmd)
        x = x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        x[QUAT] /= np.linalg.norm(x[QUAT])
    return x


def test_nominal_values():
    assert P.mass == 0.768
    assert np.array_equal(P.inertia, [2.5e-3, 2.1e-3, 4.3e-3])
    assert np.array_equal(P.gravity, [0.0, 0.0, -9.81])
    assert np.array_equal(P.drag, [0.3, 0.3, 0.15])
    assert P.c_l == 1.563e-6 and P.c_d == 1.909e-8
    assert abs(W_HOVER - 1097.76) < 0.01
    with pytest.raises(ValueError, match="mass"):
        PhysParams(mass=-1.0)


def test_prop_wrench_examples():
    f, tau = prop_wrench(np.zeros(4), P)
    assert np.array_equal(f, np.zeros(3)) and np.array_equal(tau, np.zeros(3))
    f, tau = prop_wrench(np.full(4, 1097.8), P)
    assert np.allclose(f, [0, 0, 4 * P.c_l * 1097.8**2]) and abs(f[2] - 7.534) < 1e-3
    assert np.allclose(tau, 0.0, atol=1e-15)


@pytest.mark.parametrize("i", range(4))
def test_single_rotor_torque(i):
    w = 1000.0
    Om = np.zeros(4)
    Om[i] = w
    f, tau = prop_wrench(Om, P)
    r = P.rotor_positions[i]
    expected = np.cross(r, [0.0, 0.0, P.c_l * w**2])
    assert np.allclose(tau[:2], expected[:2], rtol=1e-12)
    assert np.isclose(tau[2], P.spin[i] * P.c_d * w**2, rtol=1e-12)


def test_state_derivative_examples():
    d = state_derivative(hover_state(), P, np.full(4, W_HOVER))
    assert np.allclose(d[7:], 0.0, atol=1e-12)
    x = hover_state()
    x[13:] = 0.0
    assert np.allclose(state_derivative(x, P, np.zeros(4))[7:10], [0, 0, -9.81], atol=0)
    # body-frame drag: level attitude, 1 m/s along body x
    x[7:10] = [1.0, 0.0, 0.0]
    assert np.allclose(state_derivative(x, P, np.zeros(4))[7:10] * P.mass, [-0.3, 0, -9.81 * P.mass])
    # drag rotates with the body: yawed by 90 deg, world v along body x
    x[3:7] = quat_from_yaw(np.pi / 2)
    x[7:10] = [0.0, 1.0, 0.0]
    assert np.allclose(state_derivative(x, P, np.zeros(4))[7:9] * P.mass, [0.0, -0.3], atol=1e-15)


def test_hover_equilibrium_drift():
    x = hover_state()
    x0 = x.copy()
    for _ in range(1000):
        x = step_symplectic_euler(x, P, np.full(4, W_HOVER))
    assert np.abs(x[:3] - x0[:3]).max() <= 1e-6


def test_zero_dt_is_identity():
    x = hover_state()
    x[7:10] = [1.0, 2.0, 3.0]
    assert np.array_equal(step_symplectic_euler(x, P, np.zeros(4), 0.0), x)


def test_fused_step_matches_reference():
    rng = np.random.default_rng(3)
    x = np.zeros((64, STATE_DIM))
    x[:, :3] = rng.normal(size=(64, 3))
    x[:, 3:7] = random_quat(rng, 64)
    x[:, 7:13] = rng.normal(size=(64, 6)) * 3
    x[:, 13:] = rng.uniform(500, 2000, size=(64, 4))
    cmd = rng.uniform(0, 2200, size=(64, 4))
    params = sample_params(P, RandomizationSpec(), rng, size=64)
    a = step_symplectic_euler(x, params, cmd)
    b = step_symplectic_euler_reference(x, params, cmd)
    assert np.abs(a - b).max() <= 1e-12
    a1 = step_symplectic_euler(x[0], P, cmd[0])
    assert np.abs(a1 - step_symplectic_euler_reference(x[0], P, cmd[0])).max() <= 1e-12


def test_first_order_convergence_against_rk4():
    x0 = hover_state()
    x0[7:13] = [1.0, -0.5, 0.3, 1.0, -2.0, 0.5]
    cmd = np.array([1200.0, 1000.0, 1150.0, 1050.0])
    T = 0.05
    ref = rk4_full(x0, P, cmd, 1e-5, int(T / 1e-5))
    errs = []
    for dt in (1e-3, 5e-4, 2.5e-4):
        x = x0.copy()
        for _ in range(int(round(T / dt))):
            x = step_symplectic_euler(x, P, cmd, dt)
        errs.append(np.abs(x[:13] - ref[:13]).max())
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    assert np.all((ratios > 1.7) & (ratios < 2.3)), ratios


def test_ballistic_energy_drift():
    params = P.copy(drag=np.zeros(3))
    x = hover_state()
    x[13:] = 0.0
    x[7:10] = [3.0, -2.0, 4.0]

    def energy(s):
        return 0.5 * params.mass * s[7:10] @ s[7:10] + params.mass * 9.81 * s[2]

    e0 = energy(x)
    for _ in range(1000):
        x = step_symplectic_euler(x, params, np.zeros(4))
    assert abs(energy(x) - e0) / e0 <= 1e-3


def test_motor_lag_time_constant():
    x = hover_state()
    x[13:] = 0.0
    cmd = np.full(4, 1000.0)
    steps = int(round(P.k_mot / 1e-3))
    for _ in range(steps):
        x = step_symplectic_euler(x, P, cmd)
    frac = x[13] / 1000.0
    assert abs(frac - (1 - np.exp(-1))) <= 0.02


def test_yaw_symmetry():
    x = hover_state((1.0, 2.0, 5.0))
    x[3:7] = quat_multiply(quat_from_yaw(0.0), [np.cos(0.1), np.sin(0.1), 0.0, 0.0])
    x[7:13] = [1.0, 0.5, 0.0, 0.3, -0.2, 0.4]
    cmd = np.array([1150.0, 1050.0, 1100.0, 1120.0])
    qy = quat_from_yaw(0.7)
    y = x.copy()
    y[:3] = quat_rotate(qy, x[:3])
    y[7:10] = quat_rotate(qy, x[7:10])
    y[3:7] = quat_multiply(qy, x[3:7])
    for _ in range(300):
        x = step_symplectic_euler(x, P, cmd)
        y = step_symplectic_euler(y, P, cmd)
    assert np.allclose(quat_rotate(qy, x[:3]), y[:3], atol=1e-9)
    assert np.allclose(quat_rotate(qy, x[7:10]), y[7:10], atol=1e-9)
    assert np.allclose(x[10:], y[10:], atol=1e-9)


def test_rotor_speeds_clamped():
    x = hover_state()
    x = step_symplectic_euler(x, P, np.full(4, 1e6), 0.1)
    assert np.all(x[13:] <= P.omega_max + 1e-9)
    x = step_symplectic_euler(x, P, np.full(4, -1e6), 0.1)
    assert np.all(x[13:] >= 0.0)


def test_sample_params_bounds_and_determinism():
    spec = RandomizationSpec()
    s = sample_params(P, spec, 5, size=20000)
    assert s.mass.min() >= 0.768 * 0.7 and s.mass.max() <= 0.768 * 1.3
    assert np.all(np.abs(s.inertia / P.inertia - 1) <= 0.3 + 1e-12)
    assert np.all(np.abs(s.drag - P.drag) <= spec.drag + 1e-12)
    assert np.all(np.abs(s.gravity[:, 2] + 9.81) <= 0.4 + 1e-12)
    assert np.all(s.gravity[:, :2] == 0.0)
    assert np.all(s.c_l == P.c_l) and np.all(s.c_d == P.c_d)
    t = sample_params(P, spec, 5, size=20000)
    assert all(np.array_equal(s.to_dict()[k], t.to_dict()[k]) for k in s.to_dict())


def test_zero_width_returns_nominal():
    s = sample_params(P, RandomizationSpec.none(), 9)
    for k, v in P.to_dict().items():
        assert np.array_equal(np.asarray(s.to_dict()[k]), np.asarray(v)), k


def test_param_batch_helpers_round_trip():
    b = nominal_batch(P, 3)
    assert b.batch_shape == (3,)
    one = b.index(1)
    assert one.to_dict() == P.to_dict()
    assert PhysParams.from_dict(P.to_dict()).to_dict() == P.to_dict()
    with pytest.raises(KeyError, match="masss"):
        PhysParams.from_dict({"masss": 1.0})
