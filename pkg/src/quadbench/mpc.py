"""Quadratic-cost nonlinear MPC on the motor-free rigid-body model.

The optimal-control problem is transcribed by multiple shooting over ``N``
intervals of an RK4-discretized 13-state model (position, quaternion,
velocity, body rate) with rotor thrusts as inputs. Each control update runs
one SQP iteration (real-time iteration): linearize around the warm start,
condense the shooting gaps into an input-only box-constrained QP, solve it
with a primal active-set method, take the full step and shift.

Both variants build the same problem; ``srt`` forwards the first thrust
vector while ``ctbr`` converts it to collective thrust and reads the body
rates of the first predicted state.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np

from .dynamics import PhysParams
from .mathcore import cross, quat_multiply, quat_normalize, quat_rotate

NX = 13
NU = 4


class QpError(RuntimeError):
    pass


@dataclass
class MpcConfig:
    horizon: int = 20
    horizon_time: float = 1.0
    q_position: float = 100.0
    q_attitude: float = 10.0
    q_velocity: float = 10.0
    q_rate: float = 1.0
    r_thrust: float = 0.1
    terminal_scale: float = 1.0
    variant: str = "ctbr"
    rate_hz: float = 100.0
    kkt_tol: float = 1e-8
    max_qp_iter: int = 500
    fd_eps: float = 1e-6
    u_min: float = 0.0
    u_max: float | None = None

    def __post_init__(self):
        if self.variant not in ("srt", "ctbr"):
            raise ValueError(f"unknown MPC variant {self.variant!r}")
        if self.horizon < 1 or self.horizon_time <= 0:
            raise ValueError("horizon must be positive")
        if self.u_max is not None and not (0.0 <= self.u_min < self.u_max):
            raise ValueError("input bounds must satisfy 0 <= u_min < u_max")

    @property
    def dt(self):
        return self.horizon_time / self.horizon

    @property
    def control_dt(self):
        return 1.0 / self.rate_hz

    def state_weights(self):
        return np.concatenate([
            np.full(3, self.q_position), [0.0], np.full(3, self.q_attitude),
            np.full(3, self.q_velocity), np.full(3, self.q_rate)])

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise KeyError(f"unknown mpc key(s): {', '.join(sorted(unknown))}")
        return cls(**data)


# ----------------------------------------------------------------------------
# model


def model_derivative(x, u, params):
    """Continuous dynamics of the 13-state model with thrust inputs."""
    q = x[..., 3:7]
    v = x[..., 7:10]
    w = x[..., 10:13]
    r = params.rotor_positions
    T = u.sum(axis=-1)
    tau = np.stack([u @ r[:, 1], -(u @ r[:, 0]),
                    (float(params.c_d) / float(params.c_l)) * (u @ params.spin)], axis=-1)
    v_body = quat_rotate(q * np.array([1.0, -1.0, -1.0, -1.0]), v)
    f_body = -np.asarray(params.drag) * v_body
    f_body[..., 2] += T
    J = np.asarray(params.inertia)
    dv = quat_rotate(q, f_body) / float(params.mass) + np.asarray(params.gravity)
    dw = (tau - cross(w, J * w)) / J
    pure = np.concatenate([np.zeros(w.shape[:-1] + (1,)), w], axis=-1)
    dq = 0.5 * quat_multiply(q, pure)
    return np.concatenate([v, dq, dv, dw], axis=-1)


def rk4_step(x, u, dt, params=None):
    """Classical RK4 step of the motor-free model; quaternion renormalized."""
    params = params or PhysParams()
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    k1 = model_derivative(x, u, params)
    k2 = model_derivative(x + 0.5 * dt * k1, u, params)
    k3 = model_derivative(x + 0.5 * dt * k2, u, params)
    k4 = model_derivative(x + dt * k3, u, params)
    out = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    out[..., 3:7] = quat_normalize(out[..., 3:7])
    return out


def linearize(x, u, dt, params=None, eps=1e-6):
    """Jacobians ``(A, B)`` of the RK4 map by central differences.

    Works on batches: ``x`` (..., 13), ``u`` (..., 4) give ``A`` (..., 13, 13)
    and ``B`` (..., 13, 4). Steps are scaled per component.
    """
    params = params or PhysParams()
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    z = np.concatenate([x, u], axis=-1)
    nz = NX + NU
    h = eps * np.maximum(1.0, np.abs(z))
    E = np.eye(nz)
    zp = z[..., None, :] + h[..., :, None] * E
    zm = z[..., None, :] - h[..., :, None] * E
    zz = np.concatenate([zp, zm], axis=-2)
    f = rk4_step(zz[..., :NX], zz[..., NX:], dt, params)
    J = (f[..., :nz, :] - f[..., nz:, :]) / (2.0 * h[..., :, None])
    J = np.swapaxes(J, -1, -2)
    return J[..., :, :NX], J[..., :, NX:]


# ----------------------------------------------------------------------------
# QP


@dataclass
class QpResult:
    x: np.ndarray
    iterations: int
    active: np.ndarray
    multipliers: np.ndarray
    kkt_residual: float
    objective: float


def kkt_residual(H, g, x, lo, hi):
    """Projected-gradient stationarity measure of a box QP."""
    grad = H @ x + g
    return float(np.max(np.abs(x - np.clip(x - grad, lo, hi)), initial=0.0))


def solve_box_qp(H, g, lo, hi, x0=None, tol=1e-8, max_iter=500):
    """Primal active-set method for ``min ½xᵀHx + gᵀx`` s.t. ``lo ≤ x ≤ hi``.

    ``H`` must be positive definite. Returns a :class:`QpResult`; multipliers
    are the gradient entries of the fixed variables (non-negative at a lower
    bound, non-positive at an upper bound at optimality).
    """
    H = np.asarray(H, dtype=float)
    g = np.asarray(g, dtype=float)
    n = len(g)
    lo = np.broadcast_to(np.asarray(lo, dtype=float), (n,))
    hi = np.broadcast_to(np.asarray(hi, dtype=float), (n,))
    if np.any(lo > hi):
        raise QpError("infeasible box: lower bound above upper bound")
    x = np.clip(np.zeros(n) if x0 is None else np.asarray(x0, dtype=float), lo, hi)
    # 0 free, -1 at lower, +1 at upper
    state = np.zeros(n, dtype=int)
    state[x <= lo] = -1
    state[x >= hi] = 1
    state[lo == hi] = -1
    for it in range(1, max_iter + 1):
        free = state == 0
        fixed = ~free
        x_target = x.copy()
        if free.any():
            rhs = -(g[free] + H[np.ix_(free, fixed)] @ x[fixed])
            x_target[free] = np.linalg.solve(H[np.ix_(free, free)], rhs)
        d = x_target - x
        # largest feasible step along d
        alpha = 1.0
        block = -1
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio_hi = np.where(free & (d > 0), (hi - x) / d, np.inf)
            ratio_lo = np.where(free & (d < 0), (lo - x) / d, np.inf)
        ratios = np.minimum(ratio_hi, ratio_lo)
        if ratios.size and ratios.min() < 1.0:
            block = int(np.argmin(ratios))
            alpha = max(float(ratios[block]), 0.0)
        x = x + alpha * d
        if block >= 0:
            x[block] = hi[block] if d[block] > 0 else lo[block]
            state[block] = 1 if d[block] > 0 else -1
            continue
        grad = H @ x + g
        # wrong-signed multipliers of fixed variables
        viol = np.where(state == -1, -grad, np.where(state == 1, grad, 0.0))
        viol[lo == hi] = 0.0
        j = int(np.argmax(viol))
        if viol[j] <= tol:
            x = np.clip(x, lo, hi)
            res = kkt_residual(H, g, x, lo, hi)
            mult = np.where(state != 0, H @ x + g, 0.0)
            return QpResult(x, it, state.copy(), mult, res, float(0.5 * x @ H @ x + g @ x))
        state[j] = 0
    raise QpError(f"active-set iteration limit ({max_iter}) reached")


# ----------------------------------------------------------------------------
# controller


def reference_window(traj, t, n_points, dt):
    """Reference states (13) and thrusts (4) at ``t + k*dt``, k = 0..n_points-1.

    Past the end of the trajectory the final sample is held, with position
    extrapolated at the final velocity so the horizon does not ask the
    vehicle to stop dead.
    """
    ts = t + dt * np.arange(n_points)
    s = traj.sample(np.clip(ts, traj.t[0], traj.t[-1]))
    overrun = np.maximum(ts - traj.t[-1], 0.0)[:, None]
    p = s["p"] + overrun * s["v"]
    x_ref = np.concatenate([p, s["q"], s["v"], s["omega"]], axis=-1)
    return x_ref, np.asarray(s["u_srt"])


def quat_error_weights(q, q_ref):
    """Sign-align reference quaternions with the predicted ones."""
    sign = np.where(np.sum(q * q_ref, axis=-1, keepdims=True) < 0, -1.0, 1.0)
    return q_ref * sign


@dataclass
class MpcDiagnostics:
    kkt_residual: float = 0.0
    active_set: int = 0
    qp_iterations: int = 0
    solve_time: float = 0.0
    fallback: bool = False
    message: str = ""


class MpcController:
    """Real-time-iteration NMPC for one vehicle (owns its warm start)."""

    def __init__(self, config=None, params=None):
        self.config = config or MpcConfig()
        self.params = params or PhysParams()
        cfg = self.config
        self.u_max = float(self.params.f_max) if cfg.u_max is None else float(cfg.u_max)
        self.u_min = float(cfg.u_min)
        self.W = cfg.state_weights()
        self.x_bar = None
        self.u_bar = None
        self.last = MpcDiagnostics()

    @property
    def space(self):
        return self.config.variant

    def reset(self):
        self.x_bar = None
        self.u_bar = None

    def _init_guess(self, x_ref, u_ref):
        self.x_bar = x_ref.copy()
        self.u_bar = np.clip(u_ref[:-1].copy(), self.u_min, self.u_max)

    def _shift(self, shift):
        """Move the warm start forward by ``shift`` shooting intervals (fractional)."""
        N = self.config.horizon
        s = np.arange(N + 1) + shift
        i0 = np.clip(np.floor(s).astype(int), 0, N)
        i1 = np.clip(i0 + 1, 0, N)
        w = np.clip(s - i0, 0.0, 1.0)[:, None]
        x = (1 - w) * self.x_bar[i0] + w * self.x_bar[i1]
        x[:, 3:7] = quat_normalize(x[:, 3:7])
        su = np.arange(N) + shift
        j0 = np.clip(np.floor(su).astype(int), 0, N - 1)
        j1 = np.clip(j0 + 1, 0, N - 1)
        wu = np.clip(su - j0, 0.0, 1.0)[:, None]
        self.x_bar = x
        self.u_bar = (1 - wu) * self.u_bar[j0] + wu * self.u_bar[j1]

    def solve(self, x0, x_ref, u_ref):
        """One SQP iteration from state ``x0`` (13) against a reference window.

        ``x_ref`` (N+1, 13) and ``u_ref`` (N+1, 4). Returns the updated input
        sequence (N, 4) and predicted states (N+1, 13).
        """
        cfg = self.config
        N, dt = cfg.horizon, cfg.dt
        x0 = np.asarray(x0, dtype=float)[:NX]
        if self.x_bar is None:
            self._init_guess(x_ref, u_ref)
        xb, ub = self.x_bar, self.u_bar
        A, B = linearize(xb[:-1], ub, dt, self.params, cfg.fd_eps)
        gaps = rk4_step(xb[:-1], ub, dt, self.params) - xb[1:]

        # condensed prediction: dx_k = S_k dx0 + sum_j G_kj du_j + c_k
        G = np.zeros((N + 1, NX, N, NU))
        c = np.zeros((N + 1, NX))
        c[0] = x0 - xb[0]
        for k in range(N):
            if k:
                G[k + 1] = np.einsum("ij,jmn->imn", A[k], G[k])
            G[k + 1, :, k, :] = B[k]
            c[k + 1] = A[k] @ c[k] + gaps[k]
        Gm = G.reshape((N + 1) * NX, N * NU)

        x_ref = x_ref.copy()
        x_ref[:, 3:7] = quat_error_weights(xb[:, 3:7], x_ref[:, 3:7])
        e0 = (xb - x_ref + c)  # state error at du = 0
        wq = np.tile(self.W, (N + 1, 1))
        wq[-1] *= cfg.terminal_scale
        wflat = wq.reshape(-1)
        H = Gm.T @ (wflat[:, None] * Gm) + cfg.r_thrust * np.eye(N * NU)
        g = Gm.T @ (wflat * e0.reshape(-1)) + cfg.r_thrust * (ub - u_ref[:-1]).reshape(-1)
        H = 0.5 * (H + H.T)
        lo = (self.u_min - ub).reshape(-1)
        hi = (self.u_max - ub).reshape(-1)
        res = solve_box_qp(H, g, lo, hi, tol=cfg.kkt_tol, max_iter=cfg.max_qp_iter)
        du = res.x
        dx = (Gm @ du).reshape(N + 1, NX) + c
        self.u_bar = np.clip(ub + du.reshape(N, NU), self.u_min, self.u_max)
        self.x_bar = xb + dx
        self.x_bar[:, 3:7] = quat_normalize(self.x_bar[:, 3:7])
        self.last = MpcDiagnostics(res.kkt_residual, int(np.count_nonzero(res.active)), res.iterations)
        self._qp = (H, g, lo, hi, res)
        return self.u_bar.copy(), self.x_bar.copy()

    def control(self, x, traj, t):
        """Command for the full simulator state ``x`` at time ``t``.

        Returns an array in the variant's action space. Solver failures fall
        back to the reference feed-forward for that step.
        """
        cfg = self.config
        x_ref, u_ref = reference_window(traj, t, cfg.horizon + 1, cfg.dt)
        start = time.perf_counter()
        try:
            u_seq, x_pred = self.solve(np.asarray(x)[:NX], x_ref, u_ref)
            u0, w1 = u_seq[0], x_pred[1, 10:13]
            fallback = False
            msg = ""
        except (QpError, np.linalg.LinAlgError) as exc:
            self.reset()
            u0, w1 = np.clip(u_ref[0], self.u_min, self.u_max), x_ref[1, 10:13]
            fallback = True
            msg = str(exc)
        self.last.solve_time = time.perf_counter() - start
        self.last.fallback = fallback
        self.last.message = msg
        if not fallback:
            self._shift(cfg.control_dt / cfg.dt)
        if cfg.variant == "srt":
            return u0.copy()
        return np.concatenate([[u0.sum() / float(self.params.mass)], w1])
