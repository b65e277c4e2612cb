from __future__ import annotations

import numpy as np
import pytest

from quadbench.dynamics import PhysParams
from quadbench.mathcore import quat_to_rotmat
from quadbench.trajgen import (
    CSV_HEADER,
    FlatnessSingularity,
    InfeasibleTrajectory,
    Limits,
    Trajectory,
    flatness_map,
    gen_circle,
    gen_ess_random,
    generate_training_set,
    hover_trajectory,
    sample_trajectory,
    traj_metrics,
    validate,
)

P = PhysParams()
C_CIRCLE = np.sqrt(9.81**2 + 5.0**2)


def test_circle_steady_state_values():
    assert abs(C_CIRCLE - 11.01) < 0.01
    tr = sample_trajectory(gen_circle(5.0, 0.0, 5.0, 10.0), P)
    steady = tr.t >= 2.0
    assert np.allclose(np.linalg.norm(tr.v[steady], axis=-1), 5.0, atol=1e-9)
    assert np.allclose(np.linalg.norm(tr.a[steady], axis=-1), 5.0, atol=1e-9)
    assert np.allclose(tr.c[steady], C_CIRCLE, atol=1e-9)
    # heading-following turn: the body spins about world z at v / r
    tf = sample_trajectory(gen_circle(5.0, 0.0, 5.0, 10.0, follow_heading=True), P)
    w = np.linalg.norm(tf.omega[steady], axis=-1)
    assert np.allclose(w, 1.0, atol=1e-9)
    # without the ramp-in the maxima are the steady-turn values; the ramp adds
    # tangential acceleration on top
    m = traj_metrics(sample_trajectory(gen_circle(5.0, 0.0, 5.0, 10.0, ramp_time=0.0), P))
    assert abs(m["v_max"] - 5.0) < 1e-9 and abs(m["c_max"] - C_CIRCLE) < 1e-9
    assert traj_metrics(tr)["c_max"] > C_CIRCLE
    assert np.allclose(tr.p[:, 2], 5.0, atol=1e-12)


def test_circle_degenerate_cases():
    tr = sample_trajectory(gen_circle(3.0, 0.4, 0.0, 4.0), P)
    assert np.ptp(tr.p, axis=0).max() < 1e-12
    assert np.allclose(tr.c, 9.81)
    with pytest.raises(ValueError):
        gen_circle(0.0, 0.0, 1.0, 1.0)
    with pytest.raises(InfeasibleTrajectory, match="acceleration"):
        gen_circle(2.5, 0.0, 10.0, 6.0)


def test_inclined_circle_leaves_plane():
    tr = sample_trajectory(gen_circle(5.0, 0.5, 5.0, 10.0), P)
    assert np.ptp(tr.p[:, 2]) > 1.0


def test_validate_names_violated_limit():
    sig = gen_circle(2.5, 0.0, 10.0, 6.0, a_limit=100.0)
    ok, problems = validate(sample_trajectory(sig, P), Limits(f_max=100.0))
    assert not ok and any("acceleration" in p for p in problems)
    ok, problems = validate(hover_trajectory(params=P))
    assert ok and problems == []


def test_hover_flatness_values():
    tr = hover_trajectory(params=P)
    m = traj_metrics(tr)
    assert m["v_max"] == 0.0 and m["omega_max"] == 0.0 and abs(m["c_max"] - 9.81) < 1e-12
    assert np.allclose(tr.q, [1.0, 0.0, 0.0, 0.0])
    assert np.allclose(tr.u_srt, P.mass * 9.81 / 4, atol=1e-12)


def test_body_z_parallel_to_thrust():
    sig = gen_ess_random(amplitude=4.0, seed=3)
    tr = sample_trajectory(sig, P)
    zb = quat_to_rotmat(tr.q)[..., :, 2]
    thrust = tr.a - P.gravity
    assert np.allclose(zb, thrust / np.linalg.norm(thrust, axis=-1, keepdims=True), atol=1e-12)
    assert np.allclose(np.linalg.norm(tr.q, axis=-1), 1.0, atol=1e-12)


@pytest.mark.parametrize("sig", [gen_circle(4.0, 0.3, 6.0, 8.0), gen_ess_random(amplitude=3.0, seed=5)])
def test_analytic_derivatives_match_finite_differences(sig):
    t = np.linspace(0.3, 5.7, 41)
    h = 1e-5
    d = sig.position_derivatives(t)
    fd = (sig.position_derivatives(t + h) - sig.position_derivatives(t - h)) / (2 * h)
    for k in range(4):
        scale = max(np.abs(d[:, k + 1]).max(), 1.0)
        assert np.abs(fd[:, k] - d[:, k + 1]).max() <= 1e-6 * scale


def test_body_rates_match_attitude_finite_differences():
    sig = gen_ess_random(amplitude=4.0, seed=8)
    h = 1e-6
    for t in (1.0, 2.5, 4.0):
        R0 = quat_to_rotmat(flatness_map(sig, P, t - h).q)
        R1 = quat_to_rotmat(flatness_map(sig, P, t + h).q)
        W = R0.T @ (R1 - R0) / (2 * h)
        w_fd = np.array([W[2, 1], W[0, 2], W[1, 0]])
        assert np.allclose(w_fd, flatness_map(sig, P, t).omega, atol=1e-5)


def test_ess_properties():
    flat = sample_trajectory(gen_ess_random(amplitude=0.0, seed=1), P)
    assert np.ptp(flat.p, axis=0).max() == 0.0
    a = gen_ess_random(amplitude=1.0, seed=4)
    b = gen_ess_random(amplitude=1.0, seed=4)
    t = np.linspace(0, 8, 50)
    assert np.array_equal(a.position_derivatives(t), b.position_derivatives(t))
    m1 = traj_metrics(sample_trajectory(gen_ess_random(amplitude=1.0, seed=4), P))
    m3 = traj_metrics(sample_trajectory(gen_ess_random(amplitude=3.0, seed=4), P))
    assert abs(m3["v_max"] - 3 * m1["v_max"]) < 1e-9
    assert abs(m3["a_max"] - 3 * m1["a_max"]) < 1e-9


def test_free_fall_singularity_reported():
    class FreeFall(type(gen_circle(1.0, 0.0, 0.0, 1.0))):
        def position_derivatives(self, t):
            t = np.asarray(t, dtype=float)
            d = np.zeros(t.shape + (5, 3))
            d[..., 2, 2] = -9.81
            return d

    sig = FreeFall(np.zeros(3), 1.0, 0.0, 0.0, 1.0, 1.0)
    with pytest.raises(FlatnessSingularity):
        flatness_map(sig, P, 0.5)


def test_sampled_velocity_consistent_with_position():
    tr = sample_trajectory(gen_ess_random(amplitude=3.0, seed=2), P)
    fd = (tr.p[2:] - tr.p[:-2]) / (2 * tr.dt)
    assert np.abs(fd - tr.v[1:-1]).max() <= 5.0 * tr.dt**2 * np.abs(tr.a).max() * 10


def test_csv_round_trip(tmp_path):
    tr = sample_trajectory(gen_circle(5.0, 0.2, 5.0, 6.0), P, meta={"name": "c"})
    path = tmp_path / "c.csv"
    tr.to_csv(path)
    assert path.read_text().splitlines()[0] == CSV_HEADER
    back = Trajectory.from_csv(path)
    assert np.allclose(back.p, tr.p, atol=1e-10) and np.allclose(back.u_srt, tr.u_srt, atol=1e-10)
    assert back.meta["name"] == "c"
    import json
    meta = json.loads(path.with_suffix(".json").read_text())
    assert meta["v_max"] == traj_metrics(tr)["v_max"]
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError, match="header"):
        Trajectory.from_csv(bad)


def test_sample_interpolates_and_clamps():
    tr = sample_trajectory(gen_circle(5.0, 0.0, 5.0, 6.0), P)
    s = tr.sample(tr.t[10])
    assert np.allclose(s["p"], tr.p[10]) and np.allclose(s["q"], tr.q[10])
    s = tr.sample(100.0)
    assert np.allclose(s["p"], tr.p[-1])
    mid = tr.sample(0.5 * (tr.t[100] + tr.t[101]))
    exact = flatness_map(tr.signal, P, 0.5 * (tr.t[100] + tr.t[101]))
    assert np.linalg.norm(mid["p"] - exact.p) < 1e-5


@pytest.fixture(scope="module")
def training_set():
    return generate_training_set(600, seed=0, params=P)


def test_training_set_coverage_and_feasibility(training_set):
    assert len(training_set) == 600
    m = np.array([[traj_metrics(t)[k] for k in ("v_max", "a_max")] for t in training_set])
    assert m[:, 0].min() < 1.0 and m[:, 0].max() > 18.0 and m[:, 0].max() <= 20.0
    assert m[:, 1].max() > 25.0 and m[:, 1].max() <= 35.0
    assert all(validate(t)[0] for t in training_set)
    names = {t.meta["name"] for t in training_set}
    assert len(names) == 600


def test_training_set_is_deterministic():
    a = generate_training_set(5, seed=3, params=P)
    b = generate_training_set(5, seed=3, params=P)
    assert all(np.array_equal(x.p, y.p) and np.array_equal(x.u_srt, y.u_srt) for x, y in zip(a, b))
