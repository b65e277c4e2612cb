"""Rigid-body quadrotor model with rotor lag, linear drag and randomization.

The 17-dimensional state vector is laid out as::

    [0:3]   p_WB     position, world frame (m)
    [3:7]   q_WB     attitude quaternion (w, x, y, z)
    [7:10]  v_WB     velocity, world frame (m/s)
    [10:13] omega_B  body rates (rad/s)
    [13:17] Omega    rotor speeds (rad/s)

All functions broadcast over leading batch axes. ``PhysParams`` fields may be
scalars/vectors (one vehicle) or carry a leading batch axis (one vehicle per
agent), see :func:`sample_params`.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .mathcore import (
    IDENTITY_QUAT,
    cross,
    quat_conjugate,
    quat_derivative,
    quat_normalize,
    quat_rotate,
)

POS = slice(0, 3)
QUAT = slice(3, 7)
VEL = slice(7, 10)
RATE = slice(10, 13)
ROTOR = slice(13, 17)
STATE_DIM = 17

# rotor layout in units of L/sqrt(2): front-right, rear-left, rear-right, front-left
_ROTOR_XY = np.array([[1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, 1.0]])
_ROTOR_SPIN = np.array([1.0, 1.0, -1.0, -1.0])


@dataclass
class PhysParams:
    """Physical constants of the vehicle (SI units)."""

    mass: float = 0.768
    inertia: np.ndarray = field(default_factory=lambda: np.array([2.5e-3, 2.1e-3, 4.3e-3]))
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))
    drag: np.ndarray = field(default_factory=lambda: np.array([0.3, 0.3, 0.15]))
    c_l: float = 1.563e-6
    c_d: float = 1.909e-8
    k_mot: float = 0.033
    arm_length: float = 0.125
    f_max: float = 8.0
    thrust_scale: np.ndarray = field(default_factory=lambda: np.ones(4))

    def __post_init__(self):
        for name in ("inertia", "gravity", "drag", "thrust_scale"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        for name in ("mass", "c_l", "c_d", "k_mot", "arm_length", "f_max"):
            value = getattr(self, name)
            setattr(self, name, float(value) if np.ndim(value) == 0 else np.asarray(value, dtype=float))
        self.validate()

    def validate(self):
        checks = {
            "mass": np.all(np.asarray(self.mass) > 0),
            "inertia": np.all(self.inertia > 0),
            "c_l": np.all(np.asarray(self.c_l) > 0),
            "c_d": np.all(np.asarray(self.c_d) >= 0),
            "k_mot": np.all(np.asarray(self.k_mot) > 0),
            "f_max": np.all(np.asarray(self.f_max) > 0),
            "drag": np.all(self.drag >= 0),
        }
        bad = [k for k, ok in checks.items() if not ok]
        if bad:
            raise ValueError(f"invalid physical parameters: {', '.join(bad)}")

    @property
    def rotor_positions(self):
        """Rotor positions in the body frame, shape (4, 3)."""
        xy = _ROTOR_XY * (float(np.mean(self.arm_length)) / np.sqrt(2.0))
        return np.column_stack([xy, np.zeros(4)])

    @property
    def spin(self):
        return _ROTOR_SPIN.copy()

    @property
    def omega_max(self):
        return np.sqrt(np.asarray(self.f_max) / np.asarray(self.c_l))

    @property
    def batch_shape(self):
        return np.shape(self.mass)

    def hover_rotor_speed(self):
        return np.sqrt(np.asarray(self.mass) * -np.asarray(self.gravity)[..., 2] / (4 * np.asarray(self.c_l)))

    def copy(self, **changes):
        fields = {f.name: np.copy(getattr(self, f.name)) for f in dataclasses.fields(self)}
        fields.update(changes)
        return PhysParams(**fields)

    def index(self, i):
        """Vehicle ``i`` of a batched parameter set."""
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            batched = np.ndim(value) > (1 if f.name in ("inertia", "gravity", "drag", "thrust_scale") else 0)
            out[f.name] = np.copy(value[i]) if batched else np.copy(value)
        return PhysParams(**out)

    def to_dict(self):
        return {f.name: np.asarray(getattr(self, f.name)).tolist() for f in dataclasses.fields(self)}

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise KeyError(f"unknown physical parameter(s): {', '.join(sorted(unknown))}")
        return cls(**data)


def stack_params(params_list):
    """Combine single-vehicle parameter sets into one batched set."""
    fields = {}
    for f in dataclasses.fields(PhysParams):
        fields[f.name] = np.stack([np.asarray(getattr(p, f.name), dtype=float) for p in params_list])
    return PhysParams(**fields)


@dataclass
class RandomizationSpec:
    """Uniform half-widths around the nominal parameters.

    ``mass`` and ``inertia`` are relative; everything else is absolute.
    ``thrust_scale`` draws an independent multiplicative factor per rotor.
    """

    mass: float = 0.30
    inertia: float = 0.30
    gravity: float = 0.4
    drag: np.ndarray = field(default_factory=lambda: np.array([0.3, 0.3, 0.15]))
    c_l: float = 0.0
    c_d: float = 0.0
    thrust_scale: float = 0.0

    def __post_init__(self):
        self.drag = np.asarray(self.drag, dtype=float)
        widths = [self.mass, self.inertia, self.gravity, self.c_l, self.c_d, self.thrust_scale, *self.drag]
        if min(widths) < 0:
            raise ValueError("randomization half-widths must be non-negative")

    @classmethod
    def none(cls):
        return cls(0.0, 0.0, 0.0, np.zeros(3), 0.0, 0.0, 0.0)

    def to_dict(self):
        return {f.name: np.asarray(getattr(self, f.name)).tolist() for f in dataclasses.fields(self)}

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise KeyError(f"unknown randomization key(s): {', '.join(sorted(unknown))}")
        return cls(**data)


@dataclass
class QuadState:
    """Single-vehicle state; see the module docstring for the flat layout."""

    p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q: np.ndarray = field(default_factory=lambda: IDENTITY_QUAT.copy())
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    omega: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotor_speeds: np.ndarray = field(default_factory=lambda: np.zeros(4))

    def to_array(self):
        return np.concatenate([self.p, self.q, self.v, self.omega, self.rotor_speeds]).astype(float)

    @classmethod
    def from_array(cls, x):
        x = np.asarray(x, dtype=float)
        return cls(x[POS].copy(), x[QUAT].copy(), x[VEL].copy(), x[RATE].copy(), x[ROTOR].copy())

    @classmethod
    def hover(cls, params=None, position=(0.0, 0.0, 5.0)):
        params = params or PhysParams()
        return cls(p=np.asarray(position, dtype=float), rotor_speeds=np.full(4, params.hover_rotor_speed()))


def _col(x):
    return np.asarray(x, dtype=float)[..., None]


def mixer_matrix(params):
    """4x4 map from rotor thrusts to ``[collective thrust, tau_x, tau_y, tau_z]``."""
    r = params.rotor_positions
    kappa = float(np.mean(params.c_d) / np.mean(params.c_l))
    return np.array([np.ones(4), r[:, 1], -r[:, 0], params.spin * kappa])


def rotor_thrusts(Omega, params):
    Omega = np.asarray(Omega, dtype=float)
    return np.asarray(params.thrust_scale) * _col(params.c_l) * Omega**2


def prop_wrench(Omega, params):
    """Body-frame propeller force and torque from rotor speeds."""
    Omega = np.asarray(Omega, dtype=float)
    f = rotor_thrusts(Omega, params)
    r = params.rotor_positions
    drag_torque = _col(params.c_d) * Omega**2 * params.spin
    zeros = np.zeros(f.shape[:-1])
    force = np.stack([zeros, zeros, f.sum(axis=-1)], axis=-1)
    torque = np.stack([f @ r[:, 1], -(f @ r[:, 0]), drag_torque.sum(axis=-1)], axis=-1)
    return force, torque


def drag_force_body(q, v_world, params):
    v_body = quat_rotate(quat_conjugate(q), v_world)
    return -np.asarray(params.drag) * v_body


def state_derivative(x, params, Omega_cmd):
    """Time derivative of the 17-dimensional state."""
    x = np.asarray(x, dtype=float)
    q = x[..., QUAT]
    v = x[..., VEL]
    w = x[..., RATE]
    Omega = x[..., ROTOR]
    f_prop, tau_prop = prop_wrench(Omega, params)
    f_body = f_prop + drag_force_body(q, v, params)
    J = np.asarray(params.inertia)
    dv = quat_rotate(q, f_body) / _col(params.mass) + np.asarray(params.gravity)
    dw = (tau_prop - cross(w, J * w)) / J
    dOmega = (np.asarray(Omega_cmd, dtype=float) - Omega) / _col(params.k_mot)
    return np.concatenate([v, quat_derivative(q, w), dv, dw, dOmega], axis=-1)


def step_symplectic_euler(x, params, Omega_cmd, dt=1e-3):
    """Advance one step: velocity-level states first, then configuration.

    Written out component-wise (no intermediate stacking) because this is the
    innermost loop of every simulation; :func:`state_derivative` is the
    readable reference it is tested against.
    """
    x = np.asarray(x, dtype=float)
    if dt == 0:
        return x.copy()
    qw, qx, qy, qz = x[..., 3], x[..., 4], x[..., 5], x[..., 6]
    vx, vy, vz = x[..., 7], x[..., 8], x[..., 9]
    wx, wy, wz = x[..., 10], x[..., 11], x[..., 12]
    Om = x[..., ROTOR]
    Om2 = Om * Om
    f = np.asarray(params.thrust_scale) * _col(params.c_l) * Om2
    r = params.rotor_positions
    T = f.sum(axis=-1)
    tx = f @ r[:, 1]
    ty = -(f @ r[:, 0])
    tz = (_col(params.c_d) * Om2) @ params.spin

    # rotation matrix entries
    xx, yy, zz = qx * qx, qy * qy, qz * qz
    xy, xz, yz = qx * qy, qx * qz, qy * qz
    sx, sy, sz = qw * qx, qw * qy, qw * qz
    R00, R01, R02 = 1 - 2 * (yy + zz), 2 * (xy - sz), 2 * (xz + sy)
    R10, R11, R12 = 2 * (xy + sz), 1 - 2 * (xx + zz), 2 * (yz - sx)
    R20, R21, R22 = 2 * (xz - sy), 2 * (yz + sx), 1 - 2 * (xx + yy)

    drag = np.asarray(params.drag)
    kx, ky, kz = drag[..., 0], drag[..., 1], drag[..., 2]
    bx = -kx * (R00 * vx + R10 * vy + R20 * vz)
    by = -ky * (R01 * vx + R11 * vy + R21 * vz)
    bz = T - kz * (R02 * vx + R12 * vy + R22 * vz)
    m = np.asarray(params.mass)
    g = np.asarray(params.gravity)
    out = np.empty(np.broadcast_shapes(x.shape, np.shape(Om_cmd := np.asarray(Omega_cmd, dtype=float))[:-1] + (STATE_DIM,)))
    nvx = vx + dt * ((R00 * bx + R01 * by + R02 * bz) / m + g[..., 0])
    nvy = vy + dt * ((R10 * bx + R11 * by + R12 * bz) / m + g[..., 1])
    nvz = vz + dt * ((R20 * bx + R21 * by + R22 * bz) / m + g[..., 2])

    J = np.asarray(params.inertia)
    Jx, Jy, Jz = J[..., 0], J[..., 1], J[..., 2]
    nwx = wx + dt * (tx - (wy * Jz * wz - wz * Jy * wy)) / Jx
    nwy = wy + dt * (ty - (wz * Jx * wx - wx * Jz * wz)) / Jy
    nwz = wz + dt * (tz - (wx * Jy * wy - wy * Jx * wx)) / Jz

    out[..., 7], out[..., 8], out[..., 9] = nvx, nvy, nvz
    out[..., 10], out[..., 11], out[..., 12] = nwx, nwy, nwz
    out[..., ROTOR] = np.clip(Om + dt * (Om_cmd - Om) / _col(params.k_mot), 0.0, _col(params.omega_max))
    out[..., 0] = x[..., 0] + dt * nvx
    out[..., 1] = x[..., 1] + dt * nvy
    out[..., 2] = x[..., 2] + dt * nvz
    h = 0.5 * dt
    nw = qw + h * (-qx * nwx - qy * nwy - qz * nwz)
    nx = qx + h * (qw * nwx + qy * nwz - qz * nwy)
    ny = qy + h * (qw * nwy - qx * nwz + qz * nwx)
    nz = qz + h * (qw * nwz + qx * nwy - qy * nwx)
    inv = 1.0 / np.sqrt(nw * nw + nx * nx + ny * ny + nz * nz)
    out[..., 3], out[..., 4], out[..., 5], out[..., 6] = nw * inv, nx * inv, ny * inv, nz * inv
    return out


def step_symplectic_euler_reference(x, params, Omega_cmd, dt=1e-3):
    """Same update as :func:`step_symplectic_euler`, built from :func:`state_derivative`."""
    x = np.asarray(x, dtype=float)
    if dt == 0:
        return x.copy()
    d = state_derivative(x, params, Omega_cmd)
    out = np.empty_like(x)
    out[..., VEL] = x[..., VEL] + dt * d[..., VEL]
    out[..., RATE] = x[..., RATE] + dt * d[..., RATE]
    out[..., ROTOR] = np.clip(x[..., ROTOR] + dt * d[..., ROTOR], 0.0, _col(params.omega_max))
    out[..., POS] = x[..., POS] + dt * out[..., VEL]
    q = x[..., QUAT] + dt * quat_derivative(x[..., QUAT], out[..., RATE])
    out[..., QUAT] = quat_normalize(q)
    return out


def sample_params(nominal, spec, seed=None, size=None):
    """Draw physical parameters uniformly around ``nominal``.

    ``seed`` may be an int or a ``numpy.random.Generator``. With ``size`` set
    the result is batched along a leading axis of that length.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    shape = () if size is None else (size,)

    def uniform(center, half, extra=()):
        center = np.asarray(center, dtype=float)
        half = np.asarray(half, dtype=float)
        u = rng.uniform(-1.0, 1.0, size=shape + extra)
        return center + half * u

    gravity = np.broadcast_to(np.asarray(nominal.gravity, dtype=float), shape + (3,)).copy()
    gravity[..., 2] = uniform(nominal.gravity[2], spec.gravity)
    return PhysParams(
        mass=uniform(nominal.mass, spec.mass * nominal.mass),
        inertia=uniform(nominal.inertia, spec.inertia * nominal.inertia, (3,)),
        gravity=gravity,
        drag=uniform(nominal.drag, spec.drag, (3,)),
        c_l=uniform(nominal.c_l, spec.c_l),
        c_d=uniform(nominal.c_d, spec.c_d),
        k_mot=np.broadcast_to(nominal.k_mot, shape).copy() if shape else nominal.k_mot,
        arm_length=np.broadcast_to(nominal.arm_length, shape).copy() if shape else nominal.arm_length,
        f_max=np.broadcast_to(nominal.f_max, shape).copy() if shape else nominal.f_max,
        thrust_scale=uniform(nominal.thrust_scale, spec.thrust_scale, (4,)),
    )


def nominal_batch(params, size):
    """Repeat a single-vehicle parameter set ``size`` times."""
    return stack_params([params] * size)
