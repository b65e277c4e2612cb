from __future__ import annotations

import numpy as np
import pytest

from quadbench.bench import (
    RESULT_HEADER,
    STANDIN_BINS,
    FeedForward,
    MpcAgent,
    Row,
    SimConfig,
    TrackerCtbr,
    ZeroThrust,
    error_grid,
    gain_sweep,
    grid_axis,
    latency_sweep,
    make_controller,
    read_results,
    result_from_log,
    run_row,
    run_tracking,
    standin_trajectory,
    write_results,
)
from quadbench.trajgen import hover_trajectory, traj_metrics, validate

HOVER = hover_trajectory((0, 0, 5), 2.0)


def test_feedforward_holds_hover():
    ep = run_tracking(FeedForward("srt"), HOVER)
    assert not ep.crashed
    assert ep.avg_error_cm() < 1e-6


def test_zero_thrust_falls_no_faster_than_free_fall():
    ep = run_tracking(ZeroThrust(), HOVER)
    assert ep.crashed
    t_free = np.sqrt(2 * 5.0 / 9.81)
    # rotors spin down with the motor lag, so the vehicle lands a little later
    assert t_free <= ep.crash_time <= t_free + 0.1
    assert ep.t[-1] == pytest.approx(ep.crash_time, abs=0.02)


def test_drag_free_zero_thrust_matches_ballistic_height():
    ep = run_tracking(ZeroThrust(), HOVER, SimConfig(drag_free=True))
    k = len(ep.t) // 2
    # motors decay from hover: z(t) >= 5 - g t^2 / 2 at every sample
    assert np.all(ep.state[:, 2] >= 5.0 - 0.5 * 9.81 * ep.t**2 - 1e-9)
    assert ep.state[k, 2] < 5.0 - 0.5 * 9.81 * ep.t[k] ** 2 + 0.2


@pytest.mark.parametrize("variant", ["srt", "ctbr"])
def test_mpc_hover_error_below_half_centimetre(variant):
    ep = run_tracking(MpcAgent(variant), HOVER)
    assert not ep.crashed
    assert ep.avg_error_cm() <= 0.5


def test_tracker_recovers_from_perturbation():
    pert = {"position": 0.3, "velocity": 0.3, "attitude_deg": 10.0, "bodyrate": 0.5}
    ep = run_tracking(TrackerCtbr(), hover_trajectory((0, 0, 5), 4.0), SimConfig(init_perturbation=pert), seed=3)
    assert not ep.crashed
    assert ep.pos_error[-1] < 0.02


def test_latency_zero_row_equals_direct_run():
    spec = {"controller": "tracker-ctbr"}
    (res,) = latency_sweep(spec, HOVER, latencies=[0.0], duration=1.0)
    direct = result_from_log(run_tracking(TrackerCtbr(), HOVER, SimConfig(), 0, 1.0), 0)
    assert res.avg_error_cm == direct.avg_error_cm
    assert res.max_error_cm == direct.max_error_cm


def test_latency_must_be_simulation_multiple():
    with pytest.raises(ValueError, match="multiple"):
        latency_sweep({"controller": "zero"}, HOVER, latencies=[0.0005])


def test_grid_axis_values():
    g = grid_axis(0.0, 100.0, 11)
    assert g[0] == 0.0 and g[1] == 0.1 and g[4] == 1.0 and g[-1] == 100.0
    assert np.all(np.diff(g) > 0)
    np.testing.assert_allclose(np.diff(np.log10(g[1:])), 1 / 3, atol=1e-12)
    np.testing.assert_allclose(grid_axis(1.0, 8.0, 4), [1, 2, 4, 8], atol=1e-12)
    assert list(grid_axis(0, 5, 1)) == [5.0]
    with pytest.raises(ValueError):
        grid_axis(0, 1, 0)


def test_gain_sweep_nominal_cell_matches_plain_run():
    spec = {"controller": "tracker-ctbr"}
    ps, ds, res = gain_sweep(spec, HOVER, [0.1, 1.0], [1.0, 10.0], duration=1.0)
    grid = error_grid(ps, ds, res)
    assert grid.shape == (2, 2)
    nominal = run_row(Row(spec, HOVER, SimConfig(), 0, duration=1.0))
    cell = res[1 * 2 + 0]
    assert (cell.scale_p, cell.scale_d) == (1.0, 1.0)
    assert cell.to_row() == nominal.to_row()


def test_result_csv_round_trip_and_crash_cells(tmp_path):
    ok = result_from_log(run_tracking(FeedForward("srt"), HOVER), 0)
    crash = result_from_log(run_tracking(ZeroThrust(), HOVER), 1)
    path = tmp_path / "r.csv"
    write_results(path, [ok, crash])
    assert path.read_text().splitlines()[0] == ",".join(RESULT_HEADER)
    rows = read_results(path)
    assert rows[0]["crashed"] == "0" and float(rows[0]["avg_error_cm"]) < 1e-6
    assert rows[1]["avg_error_cm"] == "crash" and rows[1]["crashed"] == "1"
    assert float(rows[1]["clipped_error_cm"]) == 500.0
    assert float(rows[1]["crash_time"]) == pytest.approx(crash.crash_time, abs=1e-6)


def test_make_controller_names():
    assert make_controller({"controller": "mpc-srt"}).space == "srt"
    assert make_controller({"controller": "ff-ctbr"}).space == "ctbr"
    assert make_controller({"controller": "tracker-ctbr", "kp": 2.0}).kp == 2.0
    with pytest.raises(ValueError, match="unknown controller"):
        make_controller({"controller": "pid"})


@pytest.mark.parametrize("name", sorted(STANDIN_BINS))
def test_standins_match_bin_speed_and_are_feasible(name):
    tr = standin_trajectory(name)
    assert traj_metrics(tr)["v_max"] == pytest.approx(STANDIN_BINS[name]["v_max"], rel=0.01)
    assert validate(tr)[0]
    tr2 = standin_trajectory(name)
    np.testing.assert_array_equal(tr.p, tr2.p)


def test_standin_analytic_names():
    circ = standin_trajectory("circle_r5_v5")
    assert traj_metrics(circ)["v_max"] == pytest.approx(5.0, rel=1e-6)
    assert standin_trajectory("hover").meta["name"] == "hover"
    with pytest.raises(KeyError):
        standin_trajectory("nope")


def test_episode_csv_columns(tmp_path):
    ep = run_tracking(FeedForward("ctbr", rate_hz=50.0), HOVER, duration=0.5)
    ep.to_csv(tmp_path / "e.csv")
    header = (tmp_path / "e.csv").read_text().splitlines()[0].split(",")
    assert header[:2] == ["t", "x0"] and header[18:21] == ["ref_px", "ref_py", "ref_pz"]
    data = np.loadtxt(tmp_path / "e.csv", delimiter=",", skiprows=1)
    assert data.shape == (len(ep.t), len(header))
