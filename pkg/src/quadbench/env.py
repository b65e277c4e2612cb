"""Closed-loop simulation and the batched tracking environment.

:class:`ClosedLoop` owns the physics of a batch of vehicles: a held command
passes through a FIFO delay line and the actuation layer once per 1 ms
physics step. :class:`QuadEnv` adds the learning interface on top of it:
observations (state history plus receding reference window), the quadratic
tracking reward, initial-state perturbation, randomization and termination.
"""

from __future__ import annotations

import dataclasses
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .actuation import LowLevelGains, LowLevelStack, VelocityStackGains, action_box, COMMAND_TYPES
from .dynamics import (
    POS,
    QUAT,
    RATE,
    ROTOR,
    STATE_DIM,
    VEL,
    PhysParams,
    RandomizationSpec,
    sample_params,
    stack_params,
    step_symplectic_euler,
)
from .mathcore import quat_exp, quat_multiply, quat_to_rotmat
from .actuation import thrust_to_speed

Q_DIAG = np.concatenate([np.full(3, 0.1), np.full(9, 0.02), np.full(3, 0.002), np.full(3, 0.01)])
R_DIAG = np.full(4, 0.001)
STATE_FEATURES = 16  # z, velocity, rotation matrix, body rates
REF_FEATURES = 18  # relative position, relative velocity, rotation matrix, body rates


@dataclass
class EnvConfig:
    action_space: str = "ctbr"
    history: int = 10
    ref_length: int = 10
    control_dt: float = 0.02
    sim_dt: float = 1e-3
    latency: float = 0.0
    randomize: bool = True
    observation_noise: bool = True
    noise_std: dict = field(default_factory=lambda: {
        "position": 0.005, "velocity": 0.01, "bodyrate": 0.01, "attitude_deg": 0.3})
    init_bounds: dict = field(default_factory=lambda: {
        "position": 0.2, "velocity": 0.2, "attitude_deg": 10.0, "bodyrate": 0.2})
    action_history: bool = True
    privileged_gravity: bool = True
    # repeat the (episode-constant) privileged block once per history slot
    stack_privileged: bool = False
    crash_penalty: float = 500.0
    q_diag: np.ndarray = field(default_factory=lambda: Q_DIAG.copy())
    r_diag: np.ndarray = field(default_factory=lambda: R_DIAG.copy())
    scales: dict = field(default_factory=lambda: {
        "position": 0.1, "velocity": 1 / 20, "bodyrate": 1 / 12, "attitude": 1.0})

    def __post_init__(self):
        self.q_diag = np.asarray(self.q_diag, dtype=float)
        self.r_diag = np.asarray(self.r_diag, dtype=float)
        if self.history < 1 or self.ref_length < 1:
            raise ValueError("history and reference length must be >= 1")
        if self.action_space not in COMMAND_TYPES:
            raise ValueError(f"unknown action space {self.action_space!r}")
        if self.latency < 0:
            raise ValueError("latency must be non-negative")
        steps = self.latency / self.sim_dt
        if abs(steps - round(steps)) > 1e-9:
            raise ValueError("latency must be an integer multiple of the simulation step")
        sub = self.control_dt / self.sim_dt
        if abs(sub - round(sub)) > 1e-9:
            raise ValueError("control_dt must be an integer multiple of sim_dt")

    @property
    def substeps(self):
        return int(round(self.control_dt / self.sim_dt))

    @property
    def delay_steps(self):
        return int(round(self.latency / self.sim_dt))

    @property
    def privileged_dim(self):
        return (8 if self.privileged_gravity else 7) * (self.history if self.stack_privileged else 1)

    @property
    def state_dim(self):
        return self.history * (STATE_FEATURES + (4 if self.action_history else 0))

    @property
    def ref_dim(self):
        return self.ref_length * REF_FEATURES

    def obs_dims(self):
        return {"state": self.state_dim, "ref": self.ref_dim, "priv": self.privileged_dim}

    def to_dict(self):
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            out[f.name] = value.tolist() if isinstance(value, np.ndarray) else value
        return out

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise KeyError(f"unknown env key(s): {', '.join(sorted(unknown))}")
        return cls(**data)


# ----------------------------------------------------------------------------
# reward


def tracking_error_vector(x, x_ref_p, x_ref_R, x_ref_v, x_ref_w):
    """Stacked ``[position, rotation matrix, velocity, body rate]`` error (18,)."""
    x = np.asarray(x, dtype=float)
    R = quat_to_rotmat(x[..., QUAT]).reshape(x.shape[:-1] + (9,))
    return np.concatenate([
        x[..., POS] - x_ref_p,
        R - np.reshape(x_ref_R, R.shape),
        x[..., VEL] - x_ref_v,
        x[..., RATE] - x_ref_w,
    ], axis=-1)


def compute_reward(x_err, u, u_ref, q_diag=Q_DIAG, r_diag=R_DIAG, crashed=False, crash_penalty=500.0):
    """Negative quadratic tracking cost minus the crash penalty.

    ``x_err`` is the 18-dim stacked state error (see
    :func:`tracking_error_vector`); ``u`` and ``u_ref`` are commands of the
    active action space.
    """
    x_err = np.asarray(x_err, dtype=float)
    du = np.asarray(u, dtype=float) - np.asarray(u_ref, dtype=float)
    r = -np.sum(q_diag * x_err**2, axis=-1) - np.sum(r_diag * du**2, axis=-1)
    return r - crash_penalty * np.asarray(crashed, dtype=float)


# ----------------------------------------------------------------------------
# physics loop


def set_param_rows(batch, idx, single):
    """Overwrite rows ``idx`` of a batched parameter set in place."""
    for f in dataclasses.fields(PhysParams):
        arr = getattr(batch, f.name)
        arr[idx] = getattr(single, f.name)


class ClosedLoop:
    """Physics + delay line + actuation layer for ``n`` vehicles.

    ``params`` is the (possibly batched) true plant; ``nominal`` is what the
    actuation layer believes. With ``observe_delayed`` the controller-facing
    state lags by the same latency as the command path.
    """

    def __init__(self, n, space, params=None, nominal=None, gains=None, lv_gains=None,
                 sim_dt=1e-3, latency=0.0, observe_delayed=False):
        self.n = n
        self.space = space
        self.nominal = nominal or PhysParams()
        self.params = params if params is not None else stack_params([self.nominal] * n)
        self.sim_dt = sim_dt
        self.delay_steps = int(round(latency / sim_dt))
        self.observe_delayed = observe_delayed
        self.stack = LowLevelStack(space, self.nominal, gains or LowLevelGains(), lv_gains or VelocityStackGains())
        self.x = np.zeros((n, STATE_DIM))
        self.crashed = np.zeros(n, dtype=bool)
        self.t = np.zeros(n)
        self._delay = deque()
        self._state_hist = deque()
        self._prev_rate = None

    def reset(self, x0, u0, idx=None):
        """Reset agents ``idx`` (default all) to ``x0`` with the delay line primed by ``u0``."""
        x0 = np.asarray(x0, dtype=float).reshape(-1, STATE_DIM)
        u0 = np.asarray(u0, dtype=float).reshape(-1, 4)
        if idx is None:
            idx = np.arange(self.n)
            self.x = np.broadcast_to(x0, (self.n, STATE_DIM)).copy()
            self.crashed[:] = False
            self.t[:] = 0.0
            u_full = np.broadcast_to(u0, (self.n, 4)).copy()
            self._delay = deque(u_full.copy() for _ in range(self.delay_steps))
            self._state_hist = deque(self.x.copy() for _ in range(self.delay_steps))
            self.stack = LowLevelStack(self.space, self.nominal, self.stack.gains, self.stack.lv_gains)
            self.stack.reset(self.x)
            self._prev_rate = None
            return
        idx = np.asarray(idx)
        self.x[idx] = x0
        self.crashed[idx] = False
        self.t[idx] = 0.0
        for entry in self._delay:
            entry[idx] = u0
        for entry in self._state_hist:
            entry[idx] = self.x[idx]
        self.stack.reset_rows(self.x, idx)

    def observed_state(self):
        if self.observe_delayed and self.delay_steps:
            return self._state_hist[0].copy()
        return self.x.copy()

    def advance(self, u, substeps):
        """Hold command ``u`` for ``substeps`` physics steps.

        Returns a dict with the last applied rotor thrusts, per-agent
        saturation flags and the agents that crashed during the interval.
        """
        u = np.asarray(u, dtype=float).reshape(self.n, 4)
        saturated = np.zeros(self.n, dtype=bool)
        thrusts = np.zeros((self.n, 4))
        newly_crashed = np.zeros(self.n, dtype=bool)
        for _ in range(substeps):
            if self.delay_steps:
                self._delay.append(u.copy())
                applied = self._delay.popleft()
            else:
                applied = u
            Omega_cmd, thrusts, sat = self.stack.rotor_commands(self.x, applied, self.sim_dt)
            saturated |= sat
            alive = ~self.crashed
            x_new = step_symplectic_euler(self.x, self.params, Omega_cmd, self.sim_dt)
            self.x = np.where(alive[:, None], x_new, self.x)
            self.t = np.where(alive, self.t + self.sim_dt, self.t)
            hit = alive & (self.x[:, 2] <= 0.0)
            self.crashed |= hit
            newly_crashed |= hit
            if self.delay_steps:
                self._state_hist.append(self.x.copy())
                self._state_hist.popleft()
        return {"thrusts": thrusts, "saturated": saturated, "crashed": newly_crashed}


# ----------------------------------------------------------------------------
# environment


@dataclass
class StepResult:
    obs: dict
    reward: np.ndarray
    done: np.ndarray
    info: dict


def build_observation(state_hist, action_hist, ref_window, privileged, config):
    """Assemble the network inputs.

    ``state_hist`` (n, H, 16) holds measured ``[z, v, R, omega]`` rows, most
    recent last; ``action_hist`` (n, H, 4) normalized past commands;
    ``ref_window`` (n, R, 18) holds ``[p_ref - p, v_ref - v, R_ref, omega_ref]``
    rows; ``privileged`` (n, 8). Scales are applied here.
    """
    sc = config.scales
    s = np.asarray(state_hist, dtype=float).copy()
    s[..., 0] *= sc["position"]
    s[..., 1:4] *= sc["velocity"]
    s[..., 4:13] *= sc["attitude"]
    s[..., 13:16] *= sc["bodyrate"]
    if config.action_history:
        s = np.concatenate([s, np.asarray(action_hist, dtype=float)], axis=-1)
    r = np.asarray(ref_window, dtype=float).copy()
    r[..., 0:3] *= sc["position"]
    r[..., 3:6] *= sc["velocity"]
    r[..., 6:15] *= sc["attitude"]
    r[..., 15:18] *= sc["bodyrate"]
    priv = np.asarray(privileged, dtype=float)
    if not config.privileged_gravity:
        priv = priv[..., :7]
    if config.stack_privileged:
        priv = np.tile(priv, (1, config.history))
    n = s.shape[0]
    return {"state": s.reshape(n, -1), "ref": r.reshape(n, -1), "priv": priv.reshape(n, -1)}


class QuadEnv:
    """Batched trajectory-tracking environment (``n`` independent agents)."""

    def __init__(self, config=None, n=1, nominal=None, randomization=None, gains=None, lv_gains=None):
        self.config = config or EnvConfig()
        self.n = n
        self.nominal = nominal or PhysParams()
        self.randomization = randomization or RandomizationSpec()
        self.gains = gains or LowLevelGains()
        self.lv_gains = lv_gains or VelocityStackGains()
        self.box_lo, self.box_hi = action_box(self.config.action_space, self.nominal)
        self.rng = np.random.default_rng(0)
        self.loop = None
        self.trajs = [None] * n

    # -- helpers ------------------------------------------------------------
    def normalize_action(self, u):
        return 2.0 * (np.asarray(u) - self.box_lo) / (self.box_hi - self.box_lo) - 1.0

    def denormalize_action(self, a):
        return self.box_lo + 0.5 * (np.asarray(a) + 1.0) * (self.box_hi - self.box_lo)

    def _ref_table(self, traj):
        """Reference arrays resampled on the control grid."""
        dt = self.config.control_dt
        steps = int(round(traj.duration / dt))
        t = np.arange(steps + 1) * dt + traj.t[0]
        if abs(traj.dt - dt) < 1e-12 and len(traj) == steps + 1:
            ref = {"p": traj.p, "v": traj.v, "q": traj.q, "omega": traj.omega}
        else:
            ref = traj.sample(t)
        R = quat_to_rotmat(ref["q"]).reshape(-1, 9)
        u_ref = traj.u_ref(self.config.action_space)
        if len(u_ref) != len(t):
            idx = np.clip(np.rint((t - traj.t[0]) / traj.dt).astype(int), 0, len(traj) - 1)
            u_ref = u_ref[idx]
        return {"p": np.asarray(ref["p"]), "v": np.asarray(ref["v"]), "R": R,
                "omega": np.asarray(ref["omega"]), "q": np.asarray(ref["q"]), "u": u_ref,
                "u_srt": traj.u_srt if len(traj.u_srt) == len(t) else traj.sample(t)["u_srt"],
                "steps": steps}

    def _alloc_tables(self, max_len):
        n = self.n
        self._tab = {"p": np.zeros((n, max_len, 3)), "v": np.zeros((n, max_len, 3)),
                     "R": np.zeros((n, max_len, 9)), "omega": np.zeros((n, max_len, 3)),
                     "u": np.zeros((n, max_len, 4))}
        self._tab_len = max_len

    def _store_table(self, i, tab):
        L = tab["steps"] + 1
        if L > self._tab_len:
            old = self._tab
            self._alloc_tables(L)
            for k in old:
                self._tab[k][:, :old[k].shape[1]] = old[k]
                self._tab[k][:, old[k].shape[1]:] = old[k][:, -1:]
        for k in ("p", "v", "R", "omega", "u"):
            self._tab[k][i, :L] = tab[k]
            self._tab[k][i, L:] = tab[k][-1]
        self.steps[i] = tab["steps"]

    def _measure(self, x):
        """Noisy measured ``[z, v, R, omega]`` and position for each agent."""
        cfg = self.config
        x = np.asarray(x)
        p = x[:, POS].copy()
        v = x[:, VEL].copy()
        w = x[:, RATE].copy()
        q = x[:, QUAT].copy()
        if cfg.observation_noise:
            ns = cfg.noise_std
            p += self.rng.normal(0.0, ns["position"], p.shape)
            v += self.rng.normal(0.0, ns["velocity"], v.shape)
            w += self.rng.normal(0.0, ns["bodyrate"], w.shape)
            dq = quat_exp(self.rng.normal(0.0, np.deg2rad(ns["attitude_deg"]), (len(q), 3)))
            q = quat_multiply(q, dq)
        R = quat_to_rotmat(q).reshape(-1, 9)
        return np.concatenate([p[:, 2:3], v, R, w], axis=-1), p

    def _privileged(self):
        P, N = self.loop.params, self.nominal
        return np.column_stack([
            P.mass / N.mass - 1.0,
            P.inertia / N.inertia - 1.0,
            P.drag,
            P.gravity[:, 2] - N.gravity[2],
        ])

    def _ref_window(self, meas_p, meas_v):
        cfg = self.config
        j = np.clip(self.k[:, None] + np.arange(cfg.ref_length)[None, :], 0, self._tab_len - 1)
        rows = np.arange(self.n)[:, None]
        return np.concatenate([
            self._tab["p"][rows, j] - meas_p[:, None, :],
            self._tab["v"][rows, j] - meas_v[:, None, :],
            self._tab["R"][rows, j],
            self._tab["omega"][rows, j],
        ], axis=-1)

    def _observe(self):
        meas, p = self._measure(self.loop.x)
        self.state_hist = np.roll(self.state_hist, -1, axis=1)
        self.state_hist[:, -1] = meas
        ref = self._ref_window(p, meas[:, 1:4])
        return build_observation(self.state_hist, self.action_hist, ref, self._privileged(), self.config)

    def initial_state(self, tab, perturb=True):
        """Reference start state plus a uniform bounded perturbation."""
        b = self.config.init_bounds
        x = np.zeros(STATE_DIM)
        x[POS] = tab["p"][0]
        x[VEL] = tab["v"][0]
        x[QUAT] = tab["q"][0]
        x[RATE] = tab["omega"][0]
        x[ROTOR] = np.clip(thrust_to_speed(tab["u_srt"][0], self.nominal), 0.0, float(self.nominal.omega_max))
        if perturb:
            x[POS] += self.rng.uniform(-b["position"], b["position"], 3)
            x[VEL] += self.rng.uniform(-b["velocity"], b["velocity"], 3)
            rv = np.deg2rad(self.rng.uniform(-b["attitude_deg"], b["attitude_deg"], 3))
            x[QUAT] = quat_multiply(x[QUAT], quat_exp(rv))
            x[RATE] += self.rng.uniform(-b["bodyrate"], b["bodyrate"], 3)
        return x

    # -- api ----------------------------------------------------------------
    def reset(self, trajs, seed=None):
        """Reset every agent. ``trajs`` is one trajectory or one per agent."""
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        if not isinstance(trajs, (list, tuple)):
            trajs = [trajs] * self.n
        cfg = self.config
        tables = [self._ref_table(tr) for tr in trajs]
        self.steps = np.zeros(self.n, dtype=int)
        self._alloc_tables(max(t["steps"] for t in tables) + 1)
        self.k = np.zeros(self.n, dtype=int)
        self.loop = ClosedLoop(self.n, cfg.action_space, stack_params([self.nominal] * self.n), self.nominal,
                               self.gains, self.lv_gains, cfg.sim_dt, cfg.latency)
        x0 = np.zeros((self.n, STATE_DIM))
        u0 = np.zeros((self.n, 4))
        for i, (tr, tab) in enumerate(zip(trajs, tables)):
            self.trajs[i] = tr
            self._store_table(i, tab)
            if cfg.randomize:
                set_param_rows(self.loop.params, i, sample_params(self.nominal, self.randomization, self.rng))
            x0[i] = self.initial_state(tab)
            u0[i] = tab["u"][0]
        self.loop.reset(x0, u0)
        self.loop.stack.reset(self.loop.x)
        self.state_hist = np.zeros((self.n, cfg.history, STATE_FEATURES))
        meas, _ = self._measure(self.loop.x)
        self.state_hist[:] = meas[:, None, :]
        self.action_hist = np.repeat(self.normalize_action(u0)[:, None, :], cfg.history, axis=1)
        self.state_hist = np.roll(self.state_hist, 1, axis=1)
        return self._observe()

    def reset_agents(self, idx, trajs):
        """Reset a subset of agents onto new trajectories (used by rollouts)."""
        cfg = self.config
        for i, tr in zip(idx, trajs):
            tab = self._ref_table(tr)
            self.trajs[i] = tr
            self._store_table(i, tab)
            if cfg.randomize:
                set_param_rows(self.loop.params, i, sample_params(self.nominal, self.randomization, self.rng))
            x0 = self.initial_state(tab)
            self.loop.reset(x0, tab["u"][0], idx=np.array([i]))
            self.k[i] = 0
            meas, _ = self._measure(x0[None])
            self.state_hist[i] = meas[0]
            self.action_hist[i] = self.normalize_action(tab["u"][0])

    def observe(self):
        """Observation for the current state without advancing the history."""
        meas, p = self._measure(self.loop.x)
        hist = self.state_hist.copy()
        hist[:, -1] = meas
        ref = self._ref_window(p, meas[:, 1:4])
        return build_observation(hist, self.action_hist, ref, self._privileged(), self.config)

    def step(self, action):
        """Advance one control period with ``action`` (command or (n, 4) array)."""
        cfg = self.config
        if hasattr(action, "to_array"):
            if action.space != cfg.action_space:
                raise TypeError(f"expected a {cfg.action_space.upper()} command, got {action.space.upper()}")
            action = action.to_array()
        u = np.asarray(action, dtype=float).reshape(self.n, 4)
        rows = np.arange(self.n)
        u_ref = self._tab["u"][rows, self.k]
        info = self.loop.advance(u, cfg.substeps)
        self.k = self.k + 1
        kk = np.minimum(self.k, self._tab_len - 1)
        x_err = tracking_error_vector(self.loop.x, self._tab["p"][rows, kk], self._tab["R"][rows, kk],
                                      self._tab["v"][rows, kk], self._tab["omega"][rows, kk])
        crashed = self.loop.crashed.copy()
        reward = compute_reward(x_err, u, u_ref, cfg.q_diag, cfg.r_diag, crashed, cfg.crash_penalty)
        done = crashed | (self.k >= self.steps)
        self.action_hist = np.roll(self.action_hist, -1, axis=1)
        self.action_hist[:, -1] = np.clip(self.normalize_action(u), -1.0, 1.0)
        obs = self._observe()
        info.update({
            "state": self.loop.x.copy(),
            "crashed": crashed,
            "pos_error": np.linalg.norm(x_err[:, 0:3], axis=-1),
            "t": self.k * cfg.control_dt,
        })
        return StepResult(obs, reward, done, info)
