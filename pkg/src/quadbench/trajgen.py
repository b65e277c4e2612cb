"""Reference trajectories: flat-output generators and the flatness map.

Two generators produce smooth position signals with analytic derivatives up
to snap:

* :func:`gen_circle` -- constant-speed circles in an inclined plane, with a
  smooth speed ramp-in from hover.
* :func:`gen_ess_random` -- per-axis random periodic signals whose harmonic
  variances follow the exponential-sine-squared (periodic) kernel.

:func:`flatness_map` turns a position/yaw signal into full-state references
(attitude, body rates, angular acceleration) and feed-forward commands for
every action space. A :class:`Trajectory` is the sampled result, with CSV
import/export.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ive

from .actuation import allocate
from .dynamics import PhysParams
from .mathcore import quat_normalize, quat_yaw, rotmat_to_quat

SAMPLE_DT = 0.02
CSV_HEADER = "t,px,py,pz,vx,vy,vz,ax,ay,az,qw,qx,qy,qz,wx,wy,wz,u1,u2,u3,u4"


class FlatnessSingularity(ValueError):
    """The requested acceleration equals gravity (free fall): no thrust direction."""


class InfeasibleTrajectory(ValueError):
    pass


@dataclass
class Limits:
    v_max: float = 20.0
    a_max: float = 35.0
    f_max: float = 8.0
    z_min: float = 0.5


# ----------------------------------------------------------------------------
# flat signals


class FlatSignal:
    """Base class: position with derivatives up to snap, plus yaw."""

    duration: float
    yaw: float = 0.0
    yaw_rate: float = 0.0

    def position_derivatives(self, t):
        """Array of shape ``t.shape + (5, 3)``: p, v, a, jerk, snap."""
        raise NotImplementedError

    def yaw_derivatives(self, t):
        t = np.asarray(t, dtype=float)
        psi = self.yaw + self.yaw_rate * t
        return np.stack([psi, np.full_like(t, self.yaw_rate), np.zeros_like(t)], axis=-1)

    def describe(self):
        return {"type": type(self).__name__}


def _smoothstep_derivatives(t, ramp):
    """Integral of the septic smoothstep speed profile and its derivatives.

    Returns ``(S, sigma, d sigma, d2 sigma, d3 sigma)`` with ``dS/dt = sigma``.
    The profile is C3, so position stays smooth up to snap across the ramp end.
    """
    t = np.asarray(t, dtype=float)
    if ramp <= 0:
        one = np.ones_like(t)
        z = np.zeros_like(t)
        return t.copy(), one, z, z, z
    s = np.clip(t / ramp, 0.0, 1.0)
    inside = t < ramp
    S = np.where(inside, ramp * (7 * s**5 - 14 * s**6 + 10 * s**7 - 2.5 * s**8), 0.5 * ramp + (t - ramp))
    sig = np.where(inside, 35 * s**4 - 84 * s**5 + 70 * s**6 - 20 * s**7, 1.0)
    d1 = np.where(inside, (140 * s**3 - 420 * s**4 + 420 * s**5 - 140 * s**6) / ramp, 0.0)
    d2 = np.where(inside, (420 * s**2 - 1680 * s**3 + 2100 * s**4 - 840 * s**5) / ramp**2, 0.0)
    d3 = np.where(inside, (840 * s - 5040 * s**2 + 8400 * s**3 - 4200 * s**4) / ramp**3, 0.0)
    return S, sig, d1, d2, d3


@dataclass
class CircleSignal(FlatSignal):
    center: np.ndarray
    radius: float
    inclination: float
    speed: float
    duration: float
    ramp_time: float = 2.0
    yaw: float = 0.0
    yaw_rate: float = 0.0
    follow_heading: bool = False

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        c, s = np.cos(self.inclination), np.sin(self.inclination)
        # circle plane tilted about the world x-axis
        self._plane = np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])

    def position_derivatives(self, t):
        t = np.asarray(t, dtype=float)
        w = self.speed / self.radius
        S, sig, d1, d2, d3 = _smoothstep_derivatives(t, self.ramp_time)
        th = w * S
        th1, th2, th3, th4 = w * sig, w * d1, w * d2, w * d3
        c, s, z = np.cos(th), np.sin(th), np.zeros_like(th)
        u0 = np.stack([c, s, z], -1)
        u1 = np.stack([-s, c, z], -1)
        u2, u3, u4 = -u0, -u1, u0
        e = lambda a: a[..., None]  # noqa: E731
        local = np.stack(
            [
                u0,
                u1 * e(th1),
                u2 * e(th1**2) + u1 * e(th2),
                u3 * e(th1**3) + 3 * u2 * e(th1 * th2) + u1 * e(th3),
                u4 * e(th1**4) + 6 * u3 * e(th1**2 * th2) + u2 * e(3 * th2**2 + 4 * th1 * th3) + u1 * e(th4),
            ],
            axis=-2,
        )
        out = self.radius * local @ self._plane.T
        out[..., 0, :] += self.center
        return out

    def yaw_derivatives(self, t):
        if not self.follow_heading:
            return super().yaw_derivatives(t)
        w = self.speed / self.radius
        S, sig, d1, _, _ = _smoothstep_derivatives(np.asarray(t, dtype=float), self.ramp_time)
        return np.stack([self.yaw + w * S, w * sig, w * d1], axis=-1)

    def describe(self):
        return {"type": "circle", "center": self.center.tolist(), "radius": self.radius,
                "inclination": self.inclination, "speed": self.speed, "duration": self.duration,
                "ramp_time": self.ramp_time, "yaw": self.yaw, "follow_heading": self.follow_heading}


@dataclass
class EssSignal(FlatSignal):
    """Sum of harmonics ``center + A * sum_k (a_k cos(k w t) + b_k sin(k w t))``."""

    center: np.ndarray
    cos_coef: np.ndarray  # (3, K), already scaled by amplitude and kernel spectrum
    sin_coef: np.ndarray
    base_period: float
    duration: float
    yaw: float = 0.0
    yaw_rate: float = 0.0
    meta: dict = field(default_factory=dict)

    def position_derivatives(self, t):
        t = np.asarray(t, dtype=float)
        K = self.cos_coef.shape[1]
        freq = 2 * np.pi / self.base_period * np.arange(1, K + 1)
        phase = t[..., None] * freq  # (..., K)
        c, s = np.cos(phase), np.sin(phase)
        out = []
        # d^n/dt^n of cos, sin cycle through (cos, sin) with signs
        basis = [(c, s), (-s, c), (-c, -s), (s, -c), (c, s)]
        for n, (dc, ds) in enumerate(basis):
            scale = freq**n
            val = (dc * scale) @ self.cos_coef.T + (ds * scale) @ self.sin_coef.T
            out.append(val)
        out = np.stack(out, axis=-2)
        out[..., 0, :] += self.center
        return out

    def describe(self):
        return {"type": "ess", "center": self.center.tolist(), "base_period": self.base_period,
                "duration": self.duration, "yaw": self.yaw, **self.meta}


@dataclass
class HoverSignal(FlatSignal):
    position: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 5.0]))
    duration: float = 5.0
    yaw: float = 0.0
    yaw_rate: float = 0.0

    def position_derivatives(self, t):
        t = np.asarray(t, dtype=float)
        out = np.zeros(t.shape + (5, 3))
        out[..., 0, :] = self.position
        return out

    def describe(self):
        return {"type": "hover", "position": np.asarray(self.position).tolist(), "duration": self.duration}


def gen_circle(radius, inclination, speed, duration, center=(0.0, 0.0, 5.0), ramp_time=2.0,
               a_limit=35.0, follow_heading=False):
    """Constant-speed circle; rejects combinations exceeding ``a_limit``."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    if speed < 0:
        raise ValueError("speed must be non-negative")
    sig = CircleSignal(np.asarray(center, dtype=float), float(radius), float(inclination),
                       float(speed), float(duration), float(ramp_time), follow_heading=follow_heading)
    t = np.linspace(0.0, duration, max(int(duration / 0.005), 2) + 1)
    a = np.linalg.norm(sig.position_derivatives(t)[..., 2, :], axis=-1).max()
    if a > a_limit:
        raise InfeasibleTrajectory(f"acceleration limit exceeded: {a:.2f} > {a_limit} m/s^2")
    return sig


def ess_harmonic_std(num_harmonics, length_scale):
    """Per-harmonic standard deviations of the periodic kernel spectrum.

    ``exp(-2 sin^2(pi tau / P) / l^2)`` expands into cosines with weights
    ``2 exp(-1/l^2) I_k(1/l^2)``.
    """
    x = 1.0 / length_scale**2
    k = np.arange(1, num_harmonics + 1)
    return np.sqrt(2.0 * ive(k, x))


def gen_ess_random(num_harmonics=8, base_period=8.0, amplitude=1.0, length_scale=1.0, seed=0,
                   duration=None, center=(0.0, 0.0, 5.0), axis_scale=(1.0, 1.0, 0.5)):
    """Random periodic position signal drawn from a truncated periodic-kernel GP."""
    if base_period <= 0:
        raise ValueError("base_period must be positive")
    rng = np.random.default_rng(seed)
    std = ess_harmonic_std(num_harmonics, length_scale)
    a = rng.standard_normal((3, num_harmonics))
    b = rng.standard_normal((3, num_harmonics))
    weight = amplitude * np.asarray(axis_scale, dtype=float)[:, None] * std[None, :]
    return EssSignal(
        np.asarray(center, dtype=float), weight * a, weight * b, float(base_period),
        float(duration if duration is not None else base_period),
        meta={"num_harmonics": num_harmonics, "amplitude": amplitude,
              "length_scale": length_scale, "seed": seed},
    )


# ----------------------------------------------------------------------------
# flatness map


@dataclass
class ReferencePoint:
    t: float
    p: np.ndarray
    v: np.ndarray
    a: np.ndarray
    q: np.ndarray
    omega: np.ndarray
    omega_dot: np.ndarray
    c: float
    u_ref: dict


def _flat_states(derivs, yaw_derivs, gravity, eps=1e-6):
    """Vectorized flatness relations. Returns a dict of arrays."""
    a, j, s = derivs[..., 2, :], derivs[..., 3, :], derivs[..., 4, :]
    psi, dpsi, ddpsi = yaw_derivs[..., 0], yaw_derivs[..., 1], yaw_derivs[..., 2]
    thrust = a - gravity
    c = np.linalg.norm(thrust, axis=-1)
    if np.any(c < eps):
        raise FlatnessSingularity("reference acceleration equals gravity (free fall)")
    zb = thrust / c[..., None]
    xc = np.stack([np.cos(psi), np.sin(psi), np.zeros_like(psi)], -1)
    yc = np.stack([-np.sin(psi), np.cos(psi), np.zeros_like(psi)], -1)
    xb = np.cross(yc, zb)
    xb /= np.linalg.norm(xb, axis=-1, keepdims=True)
    yb = np.cross(zb, xb)
    dot = lambda u, v: np.sum(u * v, axis=-1)  # noqa: E731

    wx = -dot(yb, j) / c
    wy = dot(xb, j) / c
    num = dpsi * dot(xc, xb) + wy * dot(yc, zb)
    den = dot(yb, yc)
    wz = num / den

    # time derivatives of the body axes and heading axes
    dc = dot(zb, j)
    dxb = wz[..., None] * yb - wy[..., None] * zb
    dyb = -wz[..., None] * xb + wx[..., None] * zb
    dzb = wy[..., None] * xb - wx[..., None] * yb
    dxc = dpsi[..., None] * yc
    dyc = -dpsi[..., None] * xc
    dwx = -(dot(dyb, j) + dot(yb, s)) / c + dot(yb, j) * dc / c**2
    dwy = (dot(dxb, j) + dot(xb, s)) / c - dot(xb, j) * dc / c**2
    dnum = (ddpsi * dot(xc, xb) + dpsi * (dot(dxc, xb) + dot(xc, dxb))
            + dwy * dot(yc, zb) + wy * (dot(dyc, zb) + dot(yc, dzb)))
    dden = dot(dyb, yc) + dot(yb, dyc)
    dwz = (dnum * den - num * dden) / den**2

    R = np.stack([xb, yb, zb], axis=-1)
    return {
        "c": c,
        "R": R,
        "omega": np.stack([wx, wy, wz], -1),
        "omega_dot": np.stack([dwx, dwy, dwz], -1),
    }


def srt_feedforward(c, omega, omega_dot, params):
    """Rotor thrusts realizing collective thrust and angular acceleration."""
    J = np.asarray(params.inertia)
    tau = J * omega_dot + np.cross(omega, J * omega)
    f, _ = allocate(float(params.mass) * np.asarray(c), tau, params, clamp=False)
    return f


def flatness_map(sig, params=None, t=0.0):
    """Full-state reference and feed-forward commands at time ``t``."""
    params = params or PhysParams()
    d = sig.position_derivatives(np.asarray(float(t)))
    y = sig.yaw_derivatives(np.asarray(float(t)))
    fs = _flat_states(d, y, np.asarray(params.gravity))
    q = rotmat_to_quat(fs["R"])
    srt = srt_feedforward(fs["c"], fs["omega"], fs["omega_dot"], params)
    return ReferencePoint(
        t=float(t), p=d[0], v=d[1], a=d[2], q=q, omega=fs["omega"], omega_dot=fs["omega_dot"],
        c=float(fs["c"]),
        u_ref={"srt": srt, "ctbr": np.concatenate([[fs["c"]], fs["omega"]]),
               "lv": np.concatenate([d[1], [y[1]]])},
    )


# ----------------------------------------------------------------------------
# sampled trajectories


@dataclass
class Trajectory:
    """Uniformly sampled full-state reference."""

    t: np.ndarray
    p: np.ndarray
    v: np.ndarray
    a: np.ndarray
    q: np.ndarray
    omega: np.ndarray
    u_srt: np.ndarray
    yaw_rate: np.ndarray
    meta: dict = field(default_factory=dict)
    signal: FlatSignal | None = field(default=None, repr=False, compare=False)
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))

    def __len__(self):
        return len(self.t)

    @property
    def duration(self):
        return float(self.t[-1] - self.t[0])

    @property
    def dt(self):
        return float(self.t[1] - self.t[0]) if len(self.t) > 1 else SAMPLE_DT

    @property
    def c(self):
        return np.linalg.norm(self.a - self.gravity, axis=-1)

    def u_ref(self, space):
        if space == "srt":
            return self.u_srt
        if space == "ctbr":
            return np.column_stack([self.c, self.omega])
        if space == "lv":
            return np.column_stack([self.v, self.yaw_rate])
        raise ValueError(f"unknown action space {space!r}")

    def sample(self, t):
        """Interpolated reference at time(s) ``t``, clamped to the trajectory span.

        Position uses cubic Hermite interpolation with the sampled velocity;
        the attitude is normalized-linear; everything else is linear.
        """
        t = np.clip(np.asarray(t, dtype=float), self.t[0], self.t[-1])
        n = len(self.t)
        if n == 1:
            idx = np.zeros(t.shape, dtype=int)
            s = np.zeros(t.shape)
            h = 1.0
        else:
            h = self.dt
            f = (t - self.t[0]) / h
            idx = np.clip(np.floor(f).astype(int), 0, n - 2)
            s = f - idx
        i1 = np.minimum(idx + 1, n - 1)
        e = s[..., None]

        def lerp(arr):
            return (1 - e) * arr[idx] + e * arr[i1]

        h00 = 2 * s**3 - 3 * s**2 + 1
        h10 = s**3 - 2 * s**2 + s
        h01 = -2 * s**3 + 3 * s**2
        h11 = s**3 - s**2
        p = (h00[..., None] * self.p[idx] + (h10 * h)[..., None] * self.v[idx]
             + h01[..., None] * self.p[i1] + (h11 * h)[..., None] * self.v[i1])
        q0, q1 = self.q[idx], self.q[i1]
        sign = np.where(np.sum(q0 * q1, axis=-1, keepdims=True) < 0, -1.0, 1.0)
        q = quat_normalize((1 - e) * q0 + e * sign * q1)
        return {"t": t, "p": p, "v": lerp(self.v), "a": lerp(self.a), "q": q,
                "omega": lerp(self.omega), "u_srt": lerp(self.u_srt),
                "yaw_rate": (1 - s) * self.yaw_rate[idx] + s * self.yaw_rate[i1]}

    def point(self, i):
        return {"t": self.t[i], "p": self.p[i], "v": self.v[i], "a": self.a[i], "q": self.q[i],
                "omega": self.omega[i], "u_srt": self.u_srt[i]}

    # -- io ------------------------------------------------------------------
    def to_csv(self, path):
        path = Path(path)
        data = np.column_stack([self.t, self.p, self.v, self.a, self.q, self.omega, self.u_srt])
        np.savetxt(path, data, delimiter=",", header=CSV_HEADER, comments="", fmt="%.12g")
        meta = dict(self.meta)
        meta.update(traj_metrics(self))
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_csv(cls, path):
        path = Path(path)
        with open(path) as fh:
            header = fh.readline().strip()
        if header.replace(" ", "") != CSV_HEADER:
            raise ValueError(f"{path}: unexpected trajectory header {header!r}")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        meta_path = path.with_suffix(".json")
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        for key in ("v_max", "c_max", "omega_max", "a_max"):
            meta.pop(key, None)
        q = quat_normalize(data[:, 10:14])
        yaw = np.unwrap(quat_yaw(q))
        yaw_rate = np.gradient(yaw, data[:, 0]) if len(data) > 1 else np.zeros(1)
        return cls(t=data[:, 0], p=data[:, 1:4], v=data[:, 4:7], a=data[:, 7:10], q=q,
                   omega=data[:, 14:17], u_srt=data[:, 17:21], yaw_rate=yaw_rate, meta=meta)


def sample_trajectory(sig, params=None, dt=SAMPLE_DT, duration=None, meta=None):
    """Sample a flat signal through the flatness map at a uniform rate."""
    params = params or PhysParams()
    duration = sig.duration if duration is None else duration
    n = int(round(duration / dt)) + 1
    t = np.arange(n) * dt
    d = sig.position_derivatives(t)
    y = sig.yaw_derivatives(t)
    fs = _flat_states(d, y, np.asarray(params.gravity))
    q = rotmat_to_quat(fs["R"])
    u = srt_feedforward(fs["c"], fs["omega"], fs["omega_dot"], params)
    info = {"signal": sig.describe()}
    info.update(meta or {})
    return Trajectory(t=t, p=d[:, 0], v=d[:, 1], a=d[:, 2], q=q, omega=fs["omega"], u_srt=u,
                      yaw_rate=y[:, 1], meta=info, signal=sig,
                      gravity=np.asarray(params.gravity, dtype=float).copy())


def hover_trajectory(position=(0.0, 0.0, 5.0), duration=5.0, params=None):
    return sample_trajectory(HoverSignal(np.asarray(position, dtype=float), duration), params,
                             meta={"name": "hover"})


def traj_metrics(traj):
    """Maxima of speed, mass-normalized collective thrust, body-rate norm, acceleration."""
    if len(traj) == 0:
        raise ValueError("empty trajectory")
    return {
        "v_max": float(np.linalg.norm(traj.v, axis=-1).max()),
        "c_max": float(traj.c.max()),
        "omega_max": float(np.linalg.norm(traj.omega, axis=-1).max()),
        "a_max": float(np.linalg.norm(traj.a, axis=-1).max()),
    }


def validate(traj, limits=None):
    """Feasibility verdict: ``(ok, [violations])``."""
    limits = limits or Limits()
    m = traj_metrics(traj)
    problems = []
    if m["v_max"] > limits.v_max:
        problems.append(f"velocity limit: {m['v_max']:.2f} > {limits.v_max} m/s")
    if m["a_max"] > limits.a_max:
        problems.append(f"acceleration limit: {m['a_max']:.2f} > {limits.a_max} m/s^2")
    if traj.u_srt.min() < 0.0 or traj.u_srt.max() > limits.f_max:
        problems.append(f"rotor thrust limit: [{traj.u_srt.min():.2f}, {traj.u_srt.max():.2f}] "
                        f"outside [0, {limits.f_max}] N")
    if traj.p[:, 2].min() < limits.z_min:
        problems.append(f"altitude limit: {traj.p[:, 2].min():.2f} < {limits.z_min} m")
    return not problems, problems


# ----------------------------------------------------------------------------
# training-set generation


@dataclass
class TrajSetConfig:
    circle_fraction: float = 0.5
    speed_range: tuple = (0.0, 20.0)
    accel_range: tuple = (1.0, 33.0)
    inclination_max: float = np.pi / 4
    ess_harmonics: int = 8
    ess_period_range: tuple = (4.0, 12.0)
    ess_amplitude_range: tuple = (0.0, 8.0)
    ess_length_scale_range: tuple = (0.6, 1.5)
    duration_range: tuple = (6.0, 12.0)
    altitude: float = 5.0


def _random_circle(rng, cfg, params, limits):
    speed = rng.uniform(*cfg.speed_range)
    accel = rng.uniform(*cfg.accel_range)
    radius = max(speed**2 / accel, 1.0)
    incl = rng.uniform(-cfg.inclination_max, cfg.inclination_max)
    ramp = max(2.0, speed / 3.0)
    duration = ramp + rng.uniform(*cfg.duration_range)
    center = (0.0, 0.0, cfg.altitude + radius * abs(np.sin(incl)))
    sig = gen_circle(radius, incl, speed, duration, center=center, ramp_time=ramp, a_limit=limits.a_max)
    return sig


def _random_ess(rng, cfg, params, limits):
    sig = gen_ess_random(
        num_harmonics=cfg.ess_harmonics,
        base_period=rng.uniform(*cfg.ess_period_range),
        amplitude=rng.uniform(*cfg.ess_amplitude_range),
        length_scale=rng.uniform(*cfg.ess_length_scale_range),
        seed=int(rng.integers(2**31)),
        center=(0.0, 0.0, cfg.altitude),
    )
    lo = sig.position_derivatives(np.linspace(0, sig.base_period, 400))[:, 0, 2].min()
    if lo < limits.z_min + 0.5:
        sig.center = sig.center + np.array([0.0, 0.0, limits.z_min + 0.5 - lo])
    sig.duration = rng.uniform(*cfg.duration_range)
    return sig


def generate_training_set(count=600, seed=0, params=None, cfg=None, limits=None, max_tries=100):
    """Deterministic batch of feasible circle and ESS trajectories."""
    params = params or PhysParams()
    cfg = cfg or TrajSetConfig()
    limits = limits or Limits(f_max=float(params.f_max))
    rng = np.random.default_rng(seed)
    out = []
    n_circle = int(round(count * cfg.circle_fraction))
    for i in range(count):
        kind = "circle" if i < n_circle else "ess"
        for _ in range(max_tries):
            try:
                sig = (_random_circle if kind == "circle" else _random_ess)(rng, cfg, params, limits)
            except InfeasibleTrajectory:
                continue
            traj = sample_trajectory(sig, params, meta={"name": f"{kind}_{i:04d}", "seed": seed, "index": i})
            ok, _ = validate(traj, limits)
            if ok:
                out.append(traj)
                break
        else:
            raise RuntimeError(f"could not generate a feasible {kind} trajectory after {max_tries} tries")
    return out
