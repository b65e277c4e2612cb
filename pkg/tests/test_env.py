from __future__ import annotations

import dataclasses

import numpy as np
import pytest

from quadbench.actuation import CTBR, SRT
from quadbench.dynamics import PhysParams
from quadbench.env import (
    Q_DIAG,
    R_DIAG,
    ClosedLoop,
    EnvConfig,
    QuadEnv,
    compute_reward,
    tracking_error_vector,
)
from quadbench.mathcore import quat_from_yaw, quat_to_rotmat
from quadbench.trajgen import gen_circle, hover_trajectory, sample_trajectory

P = PhysParams()
QUIET = dict(randomize=False, observation_noise=False,
             init_bounds={"position": 0.0, "velocity": 0.0, "attitude_deg": 0.0, "bodyrate": 0.0})


def test_reward_diagonals_and_spot_values():
    assert np.array_equal(Q_DIAG, np.r_[np.full(3, 0.1), np.full(9, 0.02), np.full(3, 0.002), np.full(3, 0.01)])
    assert np.array_equal(R_DIAG, np.full(4, 0.001))
    e = np.zeros(18)
    assert compute_reward(e, np.ones(4), np.ones(4)) == 0.0
    e[0] = 1.0
    assert compute_reward(e, np.ones(4), np.ones(4)) == -0.1
    assert compute_reward(np.zeros(18), np.ones(4), np.ones(4), crashed=True) == -500.0


def test_reward_non_positive_and_monotone():
    rng = np.random.default_rng(0)
    e = rng.normal(size=(1000, 18))
    u, ur = rng.normal(size=(1000, 4)), rng.normal(size=(1000, 4))
    assert np.all(compute_reward(e, u, ur) <= 0.0)
    base = np.zeros(18)
    vals = [compute_reward(np.r_[d, base[1:]], np.zeros(4), np.zeros(4)) for d in (0.0, 0.1, 0.5, 1.0)]
    assert np.all(np.diff(vals) < 0)


def test_error_vector_layout():
    x = np.zeros(17)
    x[3] = 1.0
    x[0:3] = [1.0, 2.0, 3.0]
    x[7:10] = [4.0, 5.0, 6.0]
    x[10:13] = [7.0, 8.0, 9.0]
    e = tracking_error_vector(x, np.zeros(3), np.eye(3).ravel(), np.zeros(3), np.zeros(3))
    assert np.array_equal(e, np.r_[1.0, 2.0, 3.0, np.zeros(9), 4.0, 5.0, 6.0, 7.0, 8.0, 9.0])


@pytest.mark.parametrize("H", [1, 5, 10])
@pytest.mark.parametrize("R", [1, 5, 10])
def test_observation_dims(H, R):
    cfg = EnvConfig(history=H, ref_length=R, **QUIET)
    env = QuadEnv(cfg, 2)
    obs = env.reset(hover_trajectory(params=P), seed=0)
    assert obs["state"].shape == (2, H * (16 + 4)) and obs["ref"].shape == (2, R * 18)
    assert obs["priv"].shape == (2, 8)
    assert cfg.obs_dims() == {"state": H * 20, "ref": R * 18, "priv": 8}
    table = EnvConfig(history=H, ref_length=R, action_history=False, privileged_gravity=False,
                      stack_privileged=True, **QUIET)
    assert table.obs_dims() == {"state": H * 16, "ref": R * 18, "priv": H * 7}
    obs = QuadEnv(table, 2).reset(hover_trajectory(params=P), seed=0)
    assert {k: v.shape[1] for k, v in obs.items()} == table.obs_dims()


def test_hover_reference_residuals_are_zero():
    env = QuadEnv(EnvConfig(**QUIET), 3)
    obs = env.reset(hover_trajectory(params=P), seed=0)
    for _ in range(5):
        res = env.step(np.tile([9.81, 0.0, 0.0, 0.0], (3, 1)))
        ref = res.obs["ref"].reshape(3, -1, 18)
        assert np.abs(ref[..., 0:6]).max() <= 1e-12
        assert np.abs(res.reward).max() <= 1e-20
    assert obs["state"].reshape(3, 10, 20)[0, -1, 0] == pytest.approx(0.5)


def test_reset_without_perturbation_matches_reference():
    tr = sample_trajectory(gen_circle(5.0, 0.2, 5.0, 6.0), P)
    env = QuadEnv(EnvConfig(**QUIET), 1)
    env.reset(tr, seed=1)
    x = env.loop.x[0]
    assert np.array_equal(x[0:3], tr.p[0]) and np.array_equal(x[3:7], tr.q[0])
    assert np.array_equal(x[7:10], tr.v[0]) and np.array_equal(x[10:13], tr.omega[0])


def test_reset_determinism_and_bounds():
    cfg = EnvConfig(randomize=True, observation_noise=True)
    tr = hover_trajectory(params=P)
    a = QuadEnv(cfg, 10000)
    oa = a.reset(tr, seed=5)
    d = a.loop.x[:, 0:3] - tr.p[0]
    assert np.abs(d).max() <= 0.2 and np.abs(a.loop.x[:, 7:10]).max() <= 0.2
    assert np.abs(a.loop.x[:, 10:13]).max() <= 0.2
    tilt = np.arccos(np.clip(quat_to_rotmat(a.loop.x[:, 3:7])[:, 2, 2], -1, 1))
    assert np.rad2deg(tilt).max() <= 10.0 * np.sqrt(2) + 1e-9
    assert np.all(np.abs(a.loop.params.mass / P.mass - 1) <= 0.3)
    b = QuadEnv(cfg, 10000)
    ob = b.reset(tr, seed=5)
    assert all(np.array_equal(oa[k], ob[k]) for k in oa)
    assert np.array_equal(a.loop.x, b.loop.x)


def test_zero_thrust_crashes_with_penalty():
    env = QuadEnv(EnvConfig(action_space="srt", **QUIET), 1)
    env.reset(hover_trajectory(params=P), seed=0)
    z0 = env.loop.x[0, 2]
    res = env.step(SRT(np.zeros((1, 4))))
    assert env.loop.x[0, 2] < z0 and not res.done[0]
    for _ in range(200):
        res = env.step(np.zeros((1, 4)))
        if res.done[0]:
            break
    assert res.done[0] and res.info["crashed"][0]
    assert res.reward[0] <= -500.0
    # the penalty is exactly additive on top of the quadratic terms
    x_err = tracking_error_vector(res.info["state"], np.array([0, 0, 5.0]), np.eye(3).ravel(), 0, 0)
    quad = compute_reward(x_err, np.zeros(4), np.full(4, P.mass * 9.81 / 4))
    assert res.reward[0] == quad[0] - 500.0


def test_wrong_command_type_rejected():
    env = QuadEnv(EnvConfig(action_space="srt", **QUIET), 1)
    env.reset(hover_trajectory(params=P), seed=0)
    with pytest.raises(TypeError, match="SRT"):
        env.step(CTBR(np.array([9.81]), np.zeros((1, 3))))


def test_latency_impulse_arrives_one_control_step_late():
    hover = np.full(4, P.mass * 9.81 / 4)
    impulse = hover + np.array([0.2, -0.2, 0.1, -0.1])
    results = {}
    for latency in (0.0, 0.02):
        loop = ClosedLoop(1, "srt", latency=latency)
        x0 = np.zeros(17)
        x0[2], x0[3] = 5.0, 1.0
        x0[13:] = P.hover_rotor_speed()
        loop.reset(x0, hover)
        seen = []
        for k in range(4):
            info = loop.advance((impulse if k == 1 else hover)[None], 20)
            seen.append(np.allclose(info["thrusts"][0], impulse))
        results[latency] = seen
    assert results[0.0] == [False, True, False, False]
    assert results[0.02] == [False, False, True, False]


def test_z_channel_is_yaw_invariant():
    cfg = EnvConfig(**QUIET)
    obs = []
    for yaw in (0.0, 1.2):
        tr = hover_trajectory((1.0, -2.0, 4.0), params=P)
        tr.q = np.tile(quat_from_yaw(yaw), (len(tr), 1))
        env = QuadEnv(cfg, 1)
        obs.append(env.reset(tr, seed=0)["state"].reshape(10, 20)[:, 0])
    assert np.array_equal(obs[0], obs[1])


def test_privileged_block_reports_parameter_offsets():
    env = QuadEnv(EnvConfig(randomize=True, observation_noise=False), 4)
    obs = env.reset(hover_trajectory(params=P), seed=2)
    p = env.loop.params
    assert np.allclose(obs["priv"][:, 0], p.mass / P.mass - 1)
    assert np.allclose(obs["priv"][:, 4:7], p.drag)
    assert np.allclose(obs["priv"][:, 7], p.gravity[:, 2] + 9.81)


def test_h_r_change_only_observations():
    tr = sample_trajectory(gen_circle(3.0, 0.0, 3.0, 3.0), P)
    states = []
    for H, R in ((1, 1), (10, 5)):
        env = QuadEnv(dataclasses.replace(EnvConfig(**QUIET), history=H, ref_length=R), 1)
        env.reset(tr, seed=0)
        for k in range(20):
            env.step(tr.u_ref("ctbr")[k][None])
        states.append(env.loop.x.copy())
    assert np.array_equal(states[0], states[1])


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        EnvConfig(latency=0.0015)
    with pytest.raises(ValueError):
        EnvConfig(history=0)
    cfg = EnvConfig(history=3)
    assert EnvConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()
    with pytest.raises(KeyError, match="bogus"):
        EnvConfig.from_dict({"bogus": 1})
