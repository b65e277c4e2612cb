"""Action-space abstraction layers between a controller and the rotors.

Three command types are supported:

* ``SRT``  -- four individual rotor thrusts (N), applied directly.
* ``CTBR`` -- mass-normalized collective thrust (m/s^2) and body rates
  (rad/s), closed by a PD rate loop running at the simulation rate.
* ``LV``   -- linear velocity (m/s) and yaw rate (rad/s), executed by a
  velocity -> attitude -> rate cascade feeding the same rate loop.

Controllers only ever see the *nominal* vehicle parameters; the simulated
plant may be randomized.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import QUAT, RATE, VEL, PhysParams, mixer_matrix
from .mathcore import cross, quat_to_rotmat

SPACES = ("srt", "ctbr", "lv")
BODYRATE_LIMIT = 12.0
VELOCITY_LIMIT = 20.0
YAW_RATE_LIMIT = 3.0


@dataclass
class SRT:
    thrusts: np.ndarray

    space = "srt"

    def to_array(self):
        return np.asarray(self.thrusts, dtype=float)


@dataclass
class CTBR:
    c: float
    omega_des: np.ndarray

    space = "ctbr"

    def to_array(self):
        return np.concatenate([np.asarray(self.c, dtype=float)[..., None],
                               np.asarray(self.omega_des, dtype=float)], axis=-1)


@dataclass
class LV:
    v_des: np.ndarray
    yaw_rate: float

    space = "lv"

    def to_array(self):
        return np.concatenate([np.asarray(self.v_des, dtype=float),
                               np.asarray(self.yaw_rate, dtype=float)[..., None]], axis=-1)


COMMAND_TYPES = {"srt": SRT, "ctbr": CTBR, "lv": LV}


def command_from_array(space, u):
    u = np.asarray(u, dtype=float)
    if space == "srt":
        return SRT(u)
    if space == "ctbr":
        return CTBR(u[..., 0], u[..., 1:4])
    if space == "lv":
        return LV(u[..., 0:3], u[..., 3])
    raise ValueError(f"unknown action space {space!r}")


def action_box(space, params=None):
    """Lower and upper command bounds for an action space."""
    params = params or PhysParams()
    if space == "srt":
        return np.zeros(4), np.full(4, float(params.f_max))
    if space == "ctbr":
        c_max = 4.0 * float(params.f_max) / float(params.mass)
        return (np.array([0.0, -BODYRATE_LIMIT, -BODYRATE_LIMIT, -BODYRATE_LIMIT]),
                np.array([c_max, BODYRATE_LIMIT, BODYRATE_LIMIT, BODYRATE_LIMIT]))
    if space == "lv":
        v = VELOCITY_LIMIT
        return np.array([-v, -v, -v, -YAW_RATE_LIMIT]), np.array([v, v, v, YAW_RATE_LIMIT])
    raise ValueError(f"unknown action space {space!r}")


@dataclass
class LowLevelGains:
    """PD rate-loop gains. ``scale_p``/``scale_d`` are sweep multipliers."""

    kp: np.ndarray = field(default_factory=lambda: np.array([20.0, 20.0, 8.0]))
    kd: np.ndarray = field(default_factory=lambda: np.array([0.3, 0.3, 0.15]))
    scale_p: float = 1.0
    scale_d: float = 1.0

    def __post_init__(self):
        self.kp = np.asarray(self.kp, dtype=float)
        self.kd = np.asarray(self.kd, dtype=float)
        if np.any(self.kp < 0) or np.any(self.kd < 0):
            raise ValueError("gains must be non-negative")
        if not (0.0 <= self.scale_p <= 100.0 and 0.0 <= self.scale_d <= 100.0):
            raise ValueError("gain scales must lie in [0, 100]")

    def scaled(self, scale_p, scale_d):
        return LowLevelGains(self.kp.copy(), self.kd.copy(), float(scale_p), float(scale_d))

    def to_dict(self):
        return {"kp": self.kp.tolist(), "kd": self.kd.tolist(),
                "scale_p": self.scale_p, "scale_d": self.scale_d}


@dataclass
class VelocityStackGains:
    kv: float = 3.0
    k_att: float = 8.0


def allocate(collective_thrust, tau_des, params, clamp=True, Minv=None):
    """Distribute a collective thrust (N) and body torque onto four rotors.

    Returns ``(thrusts, saturated)``. When clamping, collective thrust has
    priority: the torque part is scaled down until every rotor fits in
    ``[0, f_max]``.
    """
    if Minv is None:
        Minv = np.linalg.inv(mixer_matrix(params))
    T = np.asarray(collective_thrust, dtype=float)
    tau = np.asarray(tau_des, dtype=float)
    wrench = np.concatenate([T[..., None], tau], axis=-1)
    f = wrench @ Minv.T
    if not clamp:
        return f, np.zeros(T.shape, dtype=bool)

    f_max = float(params.f_max)
    T_c = np.clip(T, 0.0, 4.0 * f_max)
    base = T_c / 4.0
    f_tau = np.concatenate([np.zeros(T.shape + (1,)), tau], axis=-1) @ Minv.T
    with np.errstate(divide="ignore", invalid="ignore"):
        up = np.where(f_tau > 0, (f_max - base[..., None]) / f_tau, np.inf)
        down = np.where(f_tau < 0, base[..., None] / -f_tau, np.inf)
    alpha = np.clip(np.minimum(up, down).min(axis=-1), 0.0, 1.0)
    out = np.clip(base[..., None] + alpha[..., None] * f_tau, 0.0, f_max)
    saturated = (alpha < 1.0) | (T_c != T)
    return out, saturated


def thrust_to_speed(f, params):
    """Rotor speed setpoint for a desired thrust; negative thrust maps to 0."""
    return np.sqrt(np.maximum(np.asarray(f, dtype=float), 0.0) / float(np.mean(params.c_l)))


def ctbr_to_srt(x, cmd, gains, params, omega_dot_est=0.0, Minv=None):
    """One evaluation of the PD rate loop.

    ``cmd`` is a :class:`CTBR` or an array ``[c, wx, wy, wz]``;
    ``omega_dot_est`` is the measured angular acceleration used by the D-term.
    Returns ``(thrusts, saturated)``.
    """
    u = cmd.to_array() if isinstance(cmd, CTBR) else np.asarray(cmd, dtype=float)
    x = np.asarray(x, dtype=float)
    J = np.asarray(params.inertia)
    err = u[..., 1:4] - x[..., RATE]
    alpha_des = gains.kp * gains.scale_p * err - gains.kd * gains.scale_d * np.asarray(omega_dot_est)
    tau = J * alpha_des
    return allocate(float(params.mass) * u[..., 0], tau, params, Minv=Minv)


def _vee(M):
    return np.stack([M[..., 2, 1], M[..., 0, 2], M[..., 1, 0]], axis=-1)


def attitude_from_thrust_and_yaw(z_body, yaw):
    """Rotation matrix with third column ``z_body`` and heading ``yaw``."""
    z_body = np.asarray(z_body, dtype=float)
    yaw = np.asarray(yaw, dtype=float)
    y_c = np.stack([-np.sin(yaw), np.cos(yaw), np.zeros_like(yaw)], axis=-1)
    x_b = cross(y_c, z_body)
    x_b /= np.linalg.norm(x_b, axis=-1, keepdims=True)
    y_b = cross(z_body, x_b)
    return np.stack([x_b, y_b, z_body], axis=-1)


def lv_to_ctbr(x, cmd, gains, params, yaw_des, fallback_z=None, eps=1e-3):
    """Velocity cascade: returns ``(ctbr_array, z_des)``.

    ``yaw_des`` is the integrated heading target; ``fallback_z`` is the
    thrust direction used when the desired acceleration degenerates.
    """
    u = cmd.to_array() if isinstance(cmd, LV) else np.asarray(cmd, dtype=float)
    x = np.asarray(x, dtype=float)
    a_des = gains.kv * (u[..., 0:3] - x[..., VEL]) - np.asarray(params.gravity)
    norm = np.linalg.norm(a_des, axis=-1, keepdims=True)
    safe = norm > eps
    z_des = a_des / np.where(safe, norm, 1.0)
    if fallback_z is None:
        fallback_z = np.broadcast_to(np.array([0.0, 0.0, 1.0]), z_des.shape)
    z_des = np.where(safe, z_des, fallback_z)
    R = quat_to_rotmat(x[..., QUAT])
    R_des = attitude_from_thrust_and_yaw(z_des, yaw_des)
    Rt = np.swapaxes(R, -1, -2)
    e_R = 0.5 * _vee(np.swapaxes(R_des, -1, -2) @ R - Rt @ R_des)
    yaw_ff = u[..., 3:4] * Rt[..., :, 2]
    omega_des = -gains.k_att * e_R + yaw_ff
    lo, hi = action_box("ctbr", params)
    out = np.concatenate([norm, omega_des], axis=-1)
    return np.clip(out, lo, hi), z_des


class LowLevelStack:
    """Stateful actuation layer for a batch of vehicles.

    Converts a held command of the configured action space into rotor-speed
    setpoints once per simulation step. Holds the D-term differentiator and
    the LV yaw integrator; one instance per batch of agents.
    """

    def __init__(self, space, params=None, gains=None, lv_gains=None):
        if space not in SPACES:
            raise ValueError(f"unknown action space {space!r}")
        self.space = space
        self.params = params or PhysParams()
        self.gains = gains or LowLevelGains()
        self.lv_gains = lv_gains or VelocityStackGains()
        self._prev_rate = None
        self._yaw_des = None
        self._z_des = None
        self._Minv = np.linalg.inv(mixer_matrix(self.params))

    def reset(self, x):
        x = np.asarray(x, dtype=float)
        self._prev_rate = None
        R = quat_to_rotmat(x[..., QUAT])
        self._yaw_des = np.arctan2(R[..., 1, 0], R[..., 0, 0])
        self._z_des = R[..., :, 2].copy()

    def reset_rows(self, x, idx):
        """Reset the internal state of agents ``idx`` of a batched stack."""
        if self._yaw_des is None:
            self.reset(x)
            return
        x = np.asarray(x, dtype=float)
        R = quat_to_rotmat(x[idx][..., QUAT])
        self._yaw_des[idx] = np.arctan2(R[..., 1, 0], R[..., 0, 0])
        self._z_des[idx] = R[..., :, 2]
        if self._prev_rate is not None:
            self._prev_rate[idx] = x[idx][..., RATE]

    def rotor_commands(self, x, u, dt):
        """Returns ``(Omega_cmd, thrusts, saturated)`` for held command ``u``."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if self.space == "srt":
            lo, hi = action_box("srt", self.params)
            thrusts = np.clip(u, lo, hi)
            saturated = np.any(thrusts != u, axis=-1)
            return thrust_to_speed(thrusts, self.params), thrusts, saturated
        if self._yaw_des is None:
            self.reset(x)
        if self.space == "lv":
            self._yaw_des = self._yaw_des + dt * np.clip(u[..., 3], -YAW_RATE_LIMIT, YAW_RATE_LIMIT)
            u, self._z_des = lv_to_ctbr(x, u, self.lv_gains, self.params, self._yaw_des, self._z_des)
        rate = x[..., RATE]
        if self._prev_rate is None:
            omega_dot = np.zeros_like(rate)
        else:
            omega_dot = (rate - self._prev_rate) / dt
        self._prev_rate = rate.copy()
        thrusts, saturated = ctbr_to_srt(x, u, self.gains, self.params, omega_dot, self._Minv)
        return thrust_to_speed(thrusts, self.params), thrusts, saturated
