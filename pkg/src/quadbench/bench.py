"""Benchmark harness: closed-loop tracking runs and the experiment sweeps.

Controllers are described by small picklable spec dicts (see
:func:`make_controller`) so rows of a sweep can be shipped to worker
processes; every row is independent and fully determined by its spec,
trajectory, simulation config and seed.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .actuation import LowLevelGains, VelocityStackGains, thrust_to_speed
from .dynamics import STATE_DIM, PhysParams, RandomizationSpec, sample_params
from .env import ClosedLoop, EnvConfig, QuadEnv, compute_reward, tracking_error_vector
from .mathcore import quat_exp, quat_multiply, quat_to_rotmat
from .mpc import MpcConfig, MpcController
from .trajgen import (
    _flat_states,
    gen_circle,
    gen_ess_random,
    hover_trajectory,
    sample_trajectory,
    traj_metrics,
    validate,
)

log = logging.getLogger(__name__)

ERROR_CLIP_CM = 500.0


# ----------------------------------------------------------------------------
# configuration


@dataclass
class SimConfig:
    """Simulation settings for one benchmark run."""

    latency: float = 0.0
    sim_dt: float = 1e-3
    drag_free: bool = False
    randomize: bool = False
    observe_delayed: bool = False
    params: PhysParams = field(default_factory=PhysParams)
    randomization: RandomizationSpec = field(default_factory=RandomizationSpec)
    gains: LowLevelGains = field(default_factory=LowLevelGains)
    lv_gains: VelocityStackGains = field(default_factory=VelocityStackGains)
    init_perturbation: dict | None = None

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return {
            "latency": self.latency, "sim_dt": self.sim_dt, "drag_free": self.drag_free,
            "randomize": self.randomize, "observe_delayed": self.observe_delayed,
            "params": self.params.to_dict(), "randomization": self.randomization.to_dict(),
            "gains": self.gains.to_dict(), "lv_gains": dataclasses.asdict(self.lv_gains),
            "init_perturbation": self.init_perturbation,
        }


# ----------------------------------------------------------------------------
# controllers


class FeedForward:
    """Open-loop reference feed-forward.

    In the SRT space the rotor commands invert the discrete simulator step
    rather than the continuous model: with velocities updated before
    configurations, the simulated velocity and body rate at step ``k`` sit
    half a step behind the grid point ``t_k``. Thrust and torque at step
    ``k`` are chosen so the next half-step velocity and rate land on the
    reference, and the explicit rotor-lag update is inverted exactly
    (``Omega_cmd = Omega_k + k_mot * (Omega_{k+1} - Omega_k) / dt``). The
    first step is fixed by the initial rotor speeds; the half-step offset
    it leaves is blended out over ``blend_steps``. Drag is not compensated.
    """

    def __init__(self, space="srt", rate_hz=1000.0, params=None, motor_compensation=True, blend_steps=100):
        self.space = space
        self.blend_steps = blend_steps
        self.rate_hz = rate_hz
        self.params = params or PhysParams()
        self.motor_compensation = motor_compensation
        self.name = f"ff-{space}"
        self._table = None

    def _flat(self, traj, t):
        sig = traj.signal
        if sig is None:
            # trajectory loaded from file: derive what the signal would give
            s = traj.sample(t)
            g = np.asarray(self.params.gravity)
            w_dot = np.gradient(s["omega"], t, axis=0) if len(t) > 1 else np.zeros_like(s["omega"])
            return {"v": s["v"], "c": np.linalg.norm(s["a"] - g, axis=-1), "R": quat_to_rotmat(s["q"]),
                    "omega": s["omega"], "omega_dot": w_dot}
        t = np.clip(t, 0.0, None)
        d = sig.position_derivatives(t)
        fs = _flat_states(d, sig.yaw_derivatives(t), np.asarray(self.params.gravity))
        fs["v"] = d[:, 1]
        return fs

    def _srt_table(self, traj, dt, n):
        from .actuation import allocate
        from .trajgen import srt_feedforward
        P = self.params
        m = float(P.mass)
        J = np.asarray(P.inertia)
        g = np.asarray(P.gravity)
        t = traj.t[0] + np.arange(n + 1) * dt
        A = self._flat(traj, t)
        Hf = self._flat(traj, t - 0.5 * dt)
        zb = A["R"][..., :, 2]
        # step 0 is fixed by the initial rotor speeds; blend its half-step
        # offset out with a zero-sum doublet so no attitude error is left
        v1 = A["v"][0] + dt * (A["c"][0] * zb[0] + g)
        w1 = A["omega"][0] + dt * A["omega_dot"][0]
        phi = self._doublet(min(self.blend_steps, n - 1))
        v = Hf["v"].copy()
        w = Hf["omega"].copy()
        v[0], w[0] = A["v"][0], A["omega"][0]
        k = np.arange(1, 1 + len(phi))
        v[k] += np.outer(phi, v1 - Hf["v"][1])
        w[k] += np.outer(phi, w1 - Hf["omega"][1])
        T = m * np.einsum("ki,ki->k", zb[:-1], (v[1:] - v[:-1]) / dt - g)
        wk = w[:-1]
        tau = J * (w[1:] - wk) / dt + np.cross(wk, J * wk)
        f, _ = allocate(T, tau, P, clamp=False)
        f[0] = srt_feedforward(A["c"][0], A["omega"][0], A["omega_dot"][0], P)
        if not self.motor_compensation:
            return f[:-1]
        c_l = float(np.mean(P.c_l))
        Om = thrust_to_speed(f, P)
        Om_cmd = Om[:-1] + float(P.k_mot) * (Om[1:] - Om[:-1]) / dt
        return c_l * np.maximum(Om_cmd, 0.0) ** 2

    @staticmethod
    def _doublet(K):
        """Weights ``(1 - s)(1 - a s)`` on ``s = j/K`` summing to zero."""
        if K < 2:
            return np.ones(1)
        s = np.arange(K + 1) / K
        a = np.sum(1 - s) / np.sum(s * (1 - s))
        return (1 - s) * (1 - a * s)

    def reset(self, traj):
        if self.space != "srt":
            self._table = traj.u_ref(self.space)
            self._dt = traj.dt
            return
        dt = 1.0 / self.rate_hz
        n = int(round(traj.duration * self.rate_hz)) + 1
        self._table = self._srt_table(traj, dt, n)
        self._dt = dt

    def act(self, x, traj, t):
        i = min(int(round((t - traj.t[0]) / self._dt)), len(self._table) - 1)
        return self._table[i].copy()


class ZeroThrust:
    space = "srt"
    name = "zero"

    def __init__(self, rate_hz=50.0):
        self.rate_hz = rate_hz

    def reset(self, traj):
        pass

    def act(self, x, traj, t):
        return np.zeros(4)


class MpcAgent:
    """Adapter running an :class:`~quadbench.mpc.MpcController` at its rate."""

    def __init__(self, variant="ctbr", config=None, params=None):
        cfg = dataclasses.replace(config, variant=variant) if config else MpcConfig(variant=variant)
        self.mpc = MpcController(cfg, params)
        self.space = variant
        self.rate_hz = cfg.rate_hz
        self.name = f"mpc-{variant}"
        self.diagnostics = []

    def reset(self, traj):
        self.mpc.reset()
        self.diagnostics = []

    def act(self, x, traj, t):
        u = self.mpc.control(x, traj, t)
        d = self.mpc.last
        self.diagnostics.append((d.kkt_residual, d.active_set, d.solve_time, d.fallback))
        return u


class TrackerCtbr:
    """Flatness-based geometric tracking controller emitting CTBR commands.

    A cheap, deterministic CTBR controller used where a learned policy
    would be too expensive (for example the low-level gain grid).
    """

    space = "ctbr"
    name = "tracker-ctbr"

    def __init__(self, kp=6.0, kd=4.0, k_att=8.0, rate_hz=50.0, params=None):
        self.kp, self.kd, self.k_att = kp, kd, k_att
        self.rate_hz = rate_hz
        self.params = params or PhysParams()

    def reset(self, traj):
        pass

    def act(self, x, traj, t):
        from .actuation import _vee, action_box, attitude_from_thrust_and_yaw
        from .mathcore import quat_yaw
        ref = traj.sample(t)
        g = np.asarray(self.params.gravity)
        a_cmd = ref["a"] + self.kp * (ref["p"] - x[0:3]) + self.kd * (ref["v"] - x[7:10]) - g
        R = quat_to_rotmat(x[3:7])
        c = float(a_cmd @ R[:, 2])
        z_des = a_cmd / max(np.linalg.norm(a_cmd), 1e-6)
        R_des = attitude_from_thrust_and_yaw(z_des, quat_yaw(ref["q"]))
        e_R = 0.5 * _vee(R_des.T @ R - R.T @ R_des)
        w_ref_body = R.T @ (R_des @ ref["omega"])
        u = np.concatenate([[c], w_ref_body - self.k_att * e_R])
        lo, hi = action_box("ctbr", self.params)
        return np.clip(u, lo, hi)


class PolicyAgent:
    """A trained policy evaluated through :class:`~quadbench.env.QuadEnv`."""

    def __init__(self, policy, env_config, name=None):
        self.policy = policy
        self.env_config = env_config
        self.space = env_config.action_space
        self.rate_hz = 1.0 / env_config.control_dt
        self.name = name or f"policy-{self.space}"


def make_controller(spec, params=None):
    """Instantiate a controller from a spec dict ``{"controller": name, ...}``.

    Names: ``mpc-srt``, ``mpc-ctbr``, ``ff-srt``, ``ff-ctbr``, ``zero``,
    ``tracker-ctbr`` and ``policy`` (with ``checkpoint`` and ``env``).
    """
    params = params or PhysParams()
    spec = dict(spec)
    name = spec.pop("controller")
    if name in ("mpc-srt", "mpc-ctbr"):
        cfg = MpcConfig.from_dict(spec.get("mpc", {})) if spec.get("mpc") else None
        return MpcAgent(name.split("-")[1], cfg, params)
    if name.startswith("ff-"):
        return FeedForward(name[3:], spec.get("rate_hz", 1000.0), params)
    if name == "zero":
        return ZeroThrust()
    if name == "tracker-ctbr":
        return TrackerCtbr(params=params, **spec)
    if name == "policy":
        from .policy import load_checkpoint
        pol, meta = load_checkpoint(spec["checkpoint"])
        env_cfg = EnvConfig.from_dict(spec.get("env") or meta["config"].get("env", {}))
        return PolicyAgent(pol, env_cfg)
    raise ValueError(f"unknown controller {name!r}")


# ----------------------------------------------------------------------------
# episode logs and results


@dataclass
class EpisodeLog:
    controller: str
    trajectory: str
    t: np.ndarray
    state: np.ndarray
    ref_p: np.ndarray
    command: np.ndarray
    thrusts: np.ndarray
    reward: np.ndarray
    status: str = "completed"
    crash_time: float | None = None
    ramp_time: float = 0.0

    @property
    def crashed(self):
        return self.status == "crashed"

    @property
    def pos_error(self):
        return np.linalg.norm(self.state[:, 0:3] - self.ref_p, axis=-1)

    def avg_error_cm(self, post_ramp=False):
        e = self.pos_error
        if post_ramp:
            e = e[self.t >= self.ramp_time]
        return float(100.0 * e.mean()) if len(e) else float("nan")

    def to_csv(self, path):
        cols = (["t"] + [f"x{i}" for i in range(STATE_DIM)] + ["ref_px", "ref_py", "ref_pz"]
                + [f"u{i}" for i in range(4)] + [f"f{i}" for i in range(4)] + ["reward"])
        data = np.column_stack([self.t, self.state, self.ref_p, self.command, self.thrusts, self.reward])
        np.savetxt(path, data, delimiter=",", header=",".join(cols), comments="", fmt="%.10g")


RESULT_HEADER = ["controller", "trajectory", "seed", "latency_ms", "scale_p", "scale_d", "H", "R",
                 "avg_error_cm", "post_ramp_error_cm", "max_error_cm", "clipped_error_cm", "crashed",
                 "crash_time"]


@dataclass
class BenchResult:
    controller: str
    trajectory: str
    seed: int
    avg_error_cm: float
    post_ramp_error_cm: float
    max_error_cm: float
    crashed: bool
    crash_time: float | None = None
    latency_ms: float = 0.0
    scale_p: float = 1.0
    scale_d: float = 1.0
    H: int | str = ""
    R: int | str = ""

    @property
    def clipped_error_cm(self):
        """Error for heatmaps: clipped at 5 m, crashes pinned at the clip."""
        return ERROR_CLIP_CM if self.crashed else min(self.avg_error_cm, ERROR_CLIP_CM)

    def error_cell(self):
        return "crash" if self.crashed else f"{self.avg_error_cm:.6f}"

    def to_row(self):
        fmt = lambda v: "" if v is None else f"{v:.6f}"  # noqa: E731
        return {
            "controller": self.controller, "trajectory": self.trajectory, "seed": self.seed,
            "latency_ms": f"{self.latency_ms:g}", "scale_p": f"{self.scale_p:.12g}",
            "scale_d": f"{self.scale_d:.12g}", "H": self.H, "R": self.R,
            "avg_error_cm": self.error_cell(),
            "post_ramp_error_cm": "crash" if self.crashed else fmt(self.post_ramp_error_cm),
            "max_error_cm": fmt(self.max_error_cm), "clipped_error_cm": f"{self.clipped_error_cm:.6f}",
            "crashed": int(self.crashed), "crash_time": fmt(self.crash_time),
        }


def result_from_log(ep, seed=0, **meta):
    return BenchResult(
        controller=ep.controller, trajectory=ep.trajectory, seed=seed,
        avg_error_cm=ep.avg_error_cm(), post_ramp_error_cm=ep.avg_error_cm(post_ramp=True),
        max_error_cm=float(100.0 * ep.pos_error.max()) if len(ep.t) else float("nan"),
        crashed=ep.crashed, crash_time=ep.crash_time, **meta)


def write_results(path, results):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_HEADER, lineterminator="\n")
        w.writeheader()
        for r in results:
            w.writerow(r.to_row())


def read_results(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ----------------------------------------------------------------------------
# tracking runs


def _traj_name(traj):
    return str(traj.meta.get("name", "trajectory"))


def _ramp_time(traj):
    sig = traj.meta.get("signal", {})
    return float(sig.get("ramp_time", 0.0)) if isinstance(sig, dict) else 0.0


def _true_params(sim, rng):
    params = sim.params
    if sim.randomize:
        params = sample_params(params, sim.randomization, rng)
    if sim.drag_free:
        params = params.copy(drag=np.zeros(3))
    return params


def initial_state(traj, params, perturbation=None, rng=None):
    """Exact reference start state, optionally perturbed uniformly."""
    x = np.zeros(STATE_DIM)
    x[0:3] = traj.p[0]
    x[3:7] = traj.q[0]
    x[7:10] = traj.v[0]
    x[10:13] = traj.omega[0]
    x[13:17] = np.clip(thrust_to_speed(traj.u_srt[0], params), 0.0, float(params.omega_max))
    if perturbation:
        b = perturbation
        x[0:3] += rng.uniform(-b["position"], b["position"], 3)
        x[7:10] += rng.uniform(-b["velocity"], b["velocity"], 3)
        rv = np.deg2rad(rng.uniform(-b["attitude_deg"], b["attitude_deg"], 3))
        x[3:7] = quat_multiply(x[3:7], quat_exp(rv))
        x[10:13] += rng.uniform(-b["bodyrate"], b["bodyrate"], 3)
    return x


def _episode_rewards(traj, t, state, command, space, ctrl_dt):
    s = traj.sample(t)
    R = quat_to_rotmat(s["q"]).reshape(-1, 9)
    err = tracking_error_vector(state, s["p"], R, s["v"], s["omega"])
    u_ref = traj.u_ref(space)
    idx = np.clip(np.rint((t - ctrl_dt - traj.t[0]) / traj.dt).astype(int), 0, len(u_ref) - 1)
    return compute_reward(err, command, u_ref[idx]), s["p"]


def run_tracking(controller, traj, sim=None, seed=0, duration=None):
    """Closed-loop run of ``controller`` on ``traj``; returns an :class:`EpisodeLog`."""
    sim = sim or SimConfig()
    if isinstance(controller, PolicyAgent):
        return _run_policy(controller, traj, sim, seed, duration)
    rng = np.random.default_rng(seed)
    true = _true_params(sim, rng)
    from .dynamics import stack_params
    loop = ClosedLoop(1, controller.space, stack_params([true]), sim.params, sim.gains, sim.lv_gains,
                      sim.sim_dt, sim.latency, sim.observe_delayed)
    x0 = initial_state(traj, sim.params, sim.init_perturbation, rng)
    controller.reset(traj)
    u0 = traj.u_ref(controller.space)[0]
    loop.reset(x0, u0)
    substeps = int(round(1.0 / (controller.rate_hz * sim.sim_dt)))
    ctrl_dt = substeps * sim.sim_dt
    duration = traj.duration if duration is None else min(duration, traj.duration)
    steps = int(round(duration / ctrl_dt))
    ts, xs, us, fs = [], [], [], []
    status, crash_time = "completed", None
    for k in range(steps):
        t = traj.t[0] + k * ctrl_dt
        try:
            u = np.asarray(controller.act(loop.observed_state()[0], traj, t), dtype=float)
        except Exception as exc:  # controller failure ends the episode
            log.warning("controller %s failed at t=%.3f: %s", controller.name, t, exc)
            status, crash_time = "crashed", float(t)
            break
        info = loop.advance(u[None], substeps)
        ts.append(t + ctrl_dt)
        xs.append(loop.x[0].copy())
        us.append(u)
        fs.append(info["thrusts"][0])
        if loop.crashed[0]:
            status, crash_time = "crashed", float(traj.t[0] + loop.t[0])
            break
    return _make_log(controller.name, traj, ts, xs, us, fs, status, crash_time, controller.space, ctrl_dt)


def _make_log(name, traj, ts, xs, us, fs, status, crash_time, space, ctrl_dt):
    t = np.asarray(ts, dtype=float)
    state = np.asarray(xs, dtype=float).reshape(-1, STATE_DIM)
    command = np.asarray(us, dtype=float).reshape(-1, 4)
    if len(t):
        reward, ref_p = _episode_rewards(traj, t, state, command, space, ctrl_dt)
    else:
        reward, ref_p = np.zeros(0), np.zeros((0, 3))
    return EpisodeLog(name, _traj_name(traj), t, state, ref_p, command,
                      np.asarray(fs, dtype=float).reshape(-1, 4), reward, status, crash_time, _ramp_time(traj))


def _run_policy(agent, traj, sim, seed, duration):
    b0 = {"position": 0.0, "velocity": 0.0, "attitude_deg": 0.0, "bodyrate": 0.0}
    cfg = dataclasses.replace(agent.env_config, latency=sim.latency, randomize=sim.randomize,
                              init_bounds=sim.init_perturbation or b0, sim_dt=sim.sim_dt)
    nominal = sim.params.copy(drag=np.zeros(3)) if sim.drag_free else sim.params
    env = QuadEnv(cfg, 1, nominal, sim.randomization, sim.gains, sim.lv_gains)
    obs = env.reset(traj, seed=seed)
    duration = traj.duration if duration is None else min(duration, traj.duration)
    steps = int(round(duration / cfg.control_dt))
    ts, xs, us, fs = [], [], [], []
    status, crash_time = "completed", None
    for k in range(steps):
        cmd, _, _ = agent.policy.act(obs, deterministic=True)
        res = env.step(cmd)
        obs = res.obs
        ts.append(traj.t[0] + (k + 1) * cfg.control_dt)
        xs.append(res.info["state"][0])
        us.append(cmd[0])
        fs.append(res.info["thrusts"][0])
        if res.info["crashed"][0]:
            status, crash_time = "crashed", float(traj.t[0] + env.loop.t[0])
            break
        if res.done[0]:
            break
    return _make_log(agent.name, traj, ts, xs, us, fs, status, crash_time, agent.space, cfg.control_dt)


# ----------------------------------------------------------------------------
# stand-in evaluation trajectories

# peak speeds of the evaluation bins; the generated stand-ins match these
STANDIN_BINS = {
    "rand_a": {"v_max": 3.87, "base_period": 8.0, "length_scale": 1.0, "seed": 11},
    "rand_b": {"v_max": 6.36, "base_period": 8.0, "length_scale": 1.0, "seed": 12},
    "rand_c": {"v_max": 8.92, "base_period": 8.0, "length_scale": 1.0, "seed": 13},
    "race_a": {"v_max": 10.48, "base_period": 8.0, "length_scale": 1.3, "seed": 19},
}


def standin_trajectory(name, params=None, duration=None):
    """Deterministic stand-in for a named evaluation trajectory.

    ``hover`` and ``circle_r5_v5`` are analytic; the random bins are ESS
    signals whose amplitude is scaled so their peak speed matches the bin.
    """
    params = params or PhysParams()
    if name == "hover":
        tr = hover_trajectory(duration=duration or 5.0, params=params)
        return tr
    if name == "circle_r5_v5":
        sig = gen_circle(5.0, 0.0, 5.0, duration or 10.0)
        return sample_trajectory(sig, params, meta={"name": name})
    if name not in STANDIN_BINS:
        raise KeyError(f"unknown stand-in trajectory {name!r}")
    b = STANDIN_BINS[name]
    kw = dict(num_harmonics=8, base_period=b["base_period"], length_scale=b["length_scale"], seed=b["seed"])
    unit = gen_ess_random(amplitude=1.0, **kw)
    t = np.linspace(0.0, unit.base_period, 2001)
    v_unit = np.linalg.norm(unit.position_derivatives(t)[:, 1], axis=-1).max()
    sig = gen_ess_random(amplitude=b["v_max"] / v_unit, **kw)
    lo = sig.position_derivatives(t)[:, 0, 2].min()
    sig.center = sig.center + np.array([0.0, 0.0, max(0.0, 2.0 - lo)])
    sig.duration = duration or sig.base_period
    tr = sample_trajectory(sig, params, meta={"name": name})
    ok, problems = validate(tr)
    if not ok:
        raise RuntimeError(f"stand-in {name} infeasible: {problems}")
    return tr


# ----------------------------------------------------------------------------
# sweeps


@dataclass
class Row:
    spec: dict
    traj: object
    sim: SimConfig
    seed: int = 0
    meta: dict = field(default_factory=dict)
    duration: float | None = None


def run_row(row):
    ctrl = make_controller(row.spec, row.sim.params)
    ep = run_tracking(ctrl, row.traj, row.sim, row.seed, row.duration)
    meta = dict(row.meta)
    meta.setdefault("latency_ms", 1000.0 * row.sim.latency)
    meta.setdefault("scale_p", row.sim.gains.scale_p)
    meta.setdefault("scale_d", row.sim.gains.scale_d)
    return result_from_log(ep, row.seed, **meta)


def run_rows(rows, workers=1, strict=False):
    """Execute rows in order; ``workers > 1`` uses a process pool unless strict."""
    if strict or workers <= 1 or len(rows) <= 1:
        return [run_row(r) for r in rows]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_row, rows))


def latency_sweep(spec, traj, latencies=None, seeds=(0,), sim=None, workers=1, strict=False, duration=None):
    """One result per (latency, seed); latencies in seconds, multiples of sim dt."""
    sim = sim or SimConfig()
    latencies = np.arange(0, 61, 10) * 1e-3 if latencies is None else latencies
    rows = []
    for lat in latencies:
        steps = lat / sim.sim_dt
        if abs(steps - round(steps)) > 1e-9:
            raise ValueError(f"latency {lat} is not a multiple of the simulation step")
        for s in seeds:
            rows.append(Row(spec, traj, sim.replace(latency=float(round(steps) * sim.sim_dt)), s, duration=duration))
    return run_rows(rows, workers, strict)


def grid_axis(lo, hi, count):
    """Scale grid: log-spaced from ``lo`` to ``hi``; with ``lo == 0`` the grid is
    zero plus ``count - 1`` log-spaced points spanning three decades below ``hi``.
    Values are rounded to 12 significant digits so exact decades stay exact.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if count == 1:
        return np.array([float(hi)])
    if lo > 0:
        vals = np.geomspace(lo, hi, count)
    else:
        vals = np.concatenate([[0.0], 10.0 ** np.linspace(np.log10(hi) - 3.0, np.log10(hi), count - 1)])
    return np.array([float(f"{v:.12g}") for v in vals])


def gain_sweep(spec, traj, p_scales=None, d_scales=None, sim=None, seed=0, workers=1, strict=False,
               duration=None):
    """Low-level gain sensitivity grid; returns ``(p_scales, d_scales, results)``
    with results ordered row-major over (p, d)."""
    sim = sim or SimConfig()
    p_scales = grid_axis(0.0, 100.0, 11) if p_scales is None else np.asarray(p_scales, dtype=float)
    d_scales = grid_axis(0.0, 100.0, 11) if d_scales is None else np.asarray(d_scales, dtype=float)
    rows = []
    for sp in p_scales:
        for sd in d_scales:
            rows.append(Row(spec, traj, sim.replace(gains=sim.gains.scaled(sp, sd)), seed, duration=duration))
    return p_scales, d_scales, run_rows(rows, workers, strict)


def error_grid(p_scales, d_scales, results):
    return np.array([r.clipped_error_cm for r in results]).reshape(len(p_scales), len(d_scales)) / 100.0


ABLATION_HEADER = ["axis", "value", "action_space", "mean_error_cm", "std_error_cm", "crash_rate",
                   "state_dim", "ref_dim", "priv_dim"]


def ablation_batch(axis, values, train_trajs, eval_trajs, action_space="ctbr", ppo=None, env=None, seeds=(0,),
                   n_envs=50, sim=None, out_dir=None):
    """Train and evaluate one policy per (value, seed) along the H or R axis."""
    from .policy import train
    if axis not in ("H", "R"):
        raise ValueError("axis must be 'H' or 'R'")
    base = env or EnvConfig(action_space=action_space)
    sim = sim or SimConfig()
    table = []
    for value in values:
        key = "history" if axis == "H" else "ref_length"
        cfg = dataclasses.replace(base, **{key: int(value)}, action_space=action_space)
        errors, crashes, total = [], 0, 0
        for seed in seeds:
            qenv = QuadEnv(cfg, n_envs, sim.params, sim.randomization, sim.gains, sim.lv_gains)
            sub = Path(out_dir) / f"{axis}{value}_seed{seed}" if out_dir else None
            res = train(qenv, train_trajs, ppo, seed=seed, out_dir=sub, config_snapshot={"env": cfg.to_dict()})
            agent = PolicyAgent(res.policy, cfg)
            for tr in eval_trajs:
                ep = run_tracking(agent, tr, sim, seed)
                total += 1
                if ep.crashed:
                    crashes += 1
                else:
                    errors.append(ep.avg_error_cm())
        dims = cfg.obs_dims()
        table.append({
            "axis": axis, "value": int(value), "action_space": action_space,
            "mean_error_cm": f"{np.mean(errors):.6f}" if errors else "crash",
            "std_error_cm": f"{np.std(errors):.6f}" if errors else "",
            "crash_rate": f"{crashes / max(total, 1):.6f}",
            "state_dim": dims["state"], "ref_dim": dims["ref"], "priv_dim": dims["priv"],
        })
    return table


def write_table(path, rows, header):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)
