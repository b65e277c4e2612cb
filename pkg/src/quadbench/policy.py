"""Actor/critic networks and a PPO trainer, written directly in numpy.

Both networks share one architecture: a state encoder and a reference
encoder (three tanh layers each) whose outputs are concatenated and fed to a
two-layer tanh head. The actor head outputs the mean of a diagonal Gaussian
in a normalized action space ``[-1, 1]^4``; the log standard deviation is a
free parameter vector. The critic's state encoder additionally receives the
privileged block and its head outputs a scalar value.

Gradients are computed by hand (reverse mode over the dense layers) so the
package has no deep-learning dependency; they are checked against finite
differences in the tests.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class NetConfig:
    encoder: tuple = (64, 64, 64)
    head: tuple = (128, 128)
    init_log_std: float = -1.0
    output_gain: float = 0.01
    dtype: str = "float32"

    def to_dict(self):
        return {"encoder": list(self.encoder), "head": list(self.head),
                "init_log_std": self.init_log_std, "output_gain": self.output_gain, "dtype": self.dtype}


@dataclass
class PpoConfig:
    gamma: float = 0.98
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    entropy_coef: float = 1e-2
    clip: float = 0.2
    gae_lambda: float = 0.95
    rollout_length: int = 256
    epochs: int = 10
    minibatch_size: int = 4096
    value_coef: float = 0.5
    total_steps: int = 2_000_000
    checkpoint_every: int = 10

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise KeyError(f"unknown ppo key(s): {', '.join(sorted(unknown))}")
        return cls(**data)


# ----------------------------------------------------------------------------
# dense stacks


def _init_layer(rng, n_in, n_out, gain):
    """Orthogonal-style initialization (QR of a Gaussian matrix)."""
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    W = q if n_in >= n_out else q.T
    return gain * W[:n_in, :n_out], np.zeros(n_out)


def _mlp_init(rng, sizes, prefix, params, out_gain=None):
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        gain = out_gain if (last and out_gain is not None) else np.sqrt(2.0)
        W, bias = _init_layer(rng, a, b, gain)
        params[f"{prefix}.W{i}"] = W
        params[f"{prefix}.b{i}"] = bias


def _mlp_forward(params, prefix, n_layers, x, final_linear=False):
    acts = [x]
    h = x
    for i in range(n_layers):
        z = h @ params[f"{prefix}.W{i}"] + params[f"{prefix}.b{i}"]
        h = z if (final_linear and i == n_layers - 1) else np.tanh(z)
        acts.append(h)
    return h, acts


def _mlp_backward(params, prefix, n_layers, acts, grad_out, grads, final_linear=False):
    g = grad_out
    for i in reversed(range(n_layers)):
        if not (final_linear and i == n_layers - 1):
            g = g * (1.0 - acts[i + 1] ** 2)
        grads[f"{prefix}.W{i}"] = grads.get(f"{prefix}.W{i}", 0.0) + acts[i].T @ g
        grads[f"{prefix}.b{i}"] = grads.get(f"{prefix}.b{i}", 0.0) + g.sum(axis=0)
        g = g @ params[f"{prefix}.W{i}"].T
    return g


class TwoEncoderNet:
    """State encoder + reference encoder + head (see module docstring)."""

    def __init__(self, state_dim, ref_dim, out_dim, net=None, seed=0, out_gain=None):
        self.net = net or NetConfig()
        self.state_dim = state_dim
        self.ref_dim = ref_dim
        self.out_dim = out_dim
        rng = np.random.default_rng(seed)
        enc = list(self.net.encoder)
        head = list(self.net.head)
        self.params = {}
        _mlp_init(rng, [state_dim] + enc, "state", self.params)
        _mlp_init(rng, [ref_dim] + enc, "ref", self.params)
        _mlp_init(rng, [2 * enc[-1]] + head + [out_dim], "head", self.params,
                  out_gain=self.net.output_gain if out_gain is None else out_gain)
        self.n_enc = len(enc)
        self.n_head = len(head) + 1
        self.dtype = np.dtype(self.net.dtype)
        for k in self.params:
            self.params[k] = self.params[k].astype(self.dtype)

    def forward(self, state, ref, params=None):
        p = self.params if params is None else params
        state = np.asarray(state, dtype=self.dtype)
        ref = np.asarray(ref, dtype=self.dtype)
        if state.shape[-1] != self.state_dim or ref.shape[-1] != self.ref_dim:
            raise ValueError(f"observation dims {state.shape[-1]}/{ref.shape[-1]} do not match "
                             f"network inputs {self.state_dim}/{self.ref_dim}")
        hs, a_s = _mlp_forward(p, "state", self.n_enc, state)
        hr, a_r = _mlp_forward(p, "ref", self.n_enc, ref)
        out, a_h = _mlp_forward(p, "head", self.n_head, np.concatenate([hs, hr], axis=-1), final_linear=True)
        return out, (a_s, a_r, a_h)

    def backward(self, cache, grad_out, params=None):
        p = self.params if params is None else params
        a_s, a_r, a_h = cache
        grads = {}
        grad_out = np.asarray(grad_out, dtype=self.dtype)
        g = _mlp_backward(p, "head", self.n_head, a_h, grad_out, grads, final_linear=True)
        k = a_s[-1].shape[-1]
        _mlp_backward(p, "state", self.n_enc, a_s, g[:, :k], grads)
        _mlp_backward(p, "ref", self.n_enc, a_r, g[:, k:], grads)
        return grads


# ----------------------------------------------------------------------------
# policy


class Policy:
    """Gaussian actor and value critic for one action space."""

    def __init__(self, dims, box, net=None, seed=0, mean_init=None):
        self.dims = dict(dims)
        self.box_lo = np.asarray(box[0], dtype=float)
        self.box_hi = np.asarray(box[1], dtype=float)
        self.net = net or NetConfig()
        self.actor = TwoEncoderNet(dims["state"], dims["ref"], 4, self.net, seed)
        self.critic = TwoEncoderNet(dims["state"] + dims["priv"], dims["ref"], 1, self.net, seed + 1,
                                    out_gain=1.0)
        self.actor.params["log_std"] = np.full(4, float(self.net.init_log_std), dtype=self.actor.dtype)
        # running return statistics; the critic learns normalized values
        self.ret_mu = 0.0
        self.ret_sigma = 1.0
        self._ret_sq = None
        if mean_init is not None:
            self.actor.params[f"head.b{self.actor.n_head - 1}"] = self.normalize(mean_init).astype(self.actor.dtype)

    # action scaling
    def normalize(self, u):
        return 2.0 * (np.asarray(u) - self.box_lo) / (self.box_hi - self.box_lo) - 1.0

    def denormalize(self, a):
        return self.box_lo + 0.5 * (np.asarray(a) + 1.0) * (self.box_hi - self.box_lo)

    def actor_forward(self, obs, params=None):
        """Mean and std in command units."""
        mean_n, _ = self.actor.forward(obs["state"], obs["ref"], params)
        p = self.actor.params if params is None else params
        scale = 0.5 * (self.box_hi - self.box_lo)
        return self.denormalize(mean_n), np.exp(p["log_std"]) * scale

    def distribution(self, obs, params=None):
        """Mean and log-std in normalized action units."""
        mean_n, cache = self.actor.forward(obs["state"], obs["ref"], params)
        p = self.actor.params if params is None else params
        return mean_n, p["log_std"], cache

    def value_normalized(self, obs, params=None):
        s = np.concatenate([obs["state"], obs["priv"]], axis=-1)
        v, cache = self.critic.forward(s, obs["ref"], params)
        return v[:, 0], cache

    def value(self, obs, params=None):
        v, cache = self.value_normalized(obs, params)
        return self.ret_mu + self.ret_sigma * v, cache

    def update_return_stats(self, returns, beta=0.1):
        """Track return mean/std and rescale the critic output layer so that
        its denormalized predictions are unchanged."""
        mu_old, sigma_old = self.ret_mu, self.ret_sigma
        first = self._ret_sq is None
        mean, sq = float(np.mean(returns)), float(np.mean(np.square(returns)))
        if first:
            self.ret_mu, self._ret_sq = mean, sq
        else:
            self.ret_mu = (1 - beta) * mu_old + beta * mean
            self._ret_sq = (1 - beta) * self._ret_sq + beta * sq
        self.ret_sigma = float(np.sqrt(max(self._ret_sq - self.ret_mu**2, 1e-4)))
        last = self.critic.n_head - 1
        W, b = f"head.W{last}", f"head.b{last}"
        self.critic.params[W] *= sigma_old / self.ret_sigma
        self.critic.params[b] = (sigma_old * self.critic.params[b] + mu_old - self.ret_mu) / self.ret_sigma

    def act(self, obs, rng=None, deterministic=False):
        """Returns ``(command, normalized_action, log_prob)``."""
        mean, log_std, _ = self.distribution(obs)
        if deterministic:
            a = mean
        else:
            a = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
        return self.denormalize(np.clip(a, -1.0, 1.0)), a, gaussian_log_prob(a, mean, log_std)

    # persistence
    def state_dict(self):
        out = {f"actor/{k}": v for k, v in self.actor.params.items()}
        out.update({f"critic/{k}": v for k, v in self.critic.params.items()})
        out["stats/return"] = np.array([self.ret_mu, self.ret_sigma])
        return out

    def load_state_dict(self, data):
        for k, v in data.items():
            net, name = k.split("/", 1)
            if net == "stats":
                self.ret_mu, self.ret_sigma = float(v[0]), float(v[1])
                self._ret_sq = self.ret_sigma**2 + self.ret_mu**2
                continue
            target = self.actor.params if net == "actor" else self.critic.params
            if name not in target or target[name].shape != v.shape:
                raise ValueError(f"checkpoint parameter {k} does not match the network")
            target[name] = np.array(v, dtype=target[name].dtype)


def gaussian_log_prob(a, mean, log_std):
    z = (a - mean) * np.exp(-log_std)
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(log_std) - 0.5 * a.shape[-1] * LOG_2PI


def gaussian_entropy(log_std):
    return float(np.sum(log_std) + 0.5 * len(log_std) * (1.0 + LOG_2PI))


# ----------------------------------------------------------------------------
# losses and gradients


def ppo_loss_and_grads(policy, batch, cfg, actor_params=None, critic_params=None):
    """Clipped-surrogate PPO loss and analytic gradients.

    ``batch`` holds ``state``, ``ref``, ``priv``, ``actions`` (normalized),
    ``logp_old``, ``adv`` and ``ret``. Returns ``(losses, actor_grads,
    critic_grads)``.
    """
    obs = {"state": batch["state"], "ref": batch["ref"], "priv": batch["priv"]}
    M = len(batch["adv"])
    a = batch["actions"]
    adv = batch["adv"]
    mean, log_std, a_cache = policy.distribution(obs, actor_params)
    logp = gaussian_log_prob(a, mean, log_std)
    ratio = np.exp(logp - batch["logp_old"])
    clipped = np.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip)
    surr1 = ratio * adv
    surr2 = clipped * adv
    use1 = surr1 <= surr2
    pi_loss = -np.mean(np.where(use1, surr1, surr2))
    entropy = gaussian_entropy(log_std)

    values, c_cache = policy.value_normalized(obs, critic_params)
    v_err = values - (batch["ret"] - policy.ret_mu) / policy.ret_sigma
    v_loss = np.mean(v_err**2)
    total = pi_loss - cfg.entropy_coef * entropy + cfg.value_coef * v_loss
    for name, val in (("policy", pi_loss), ("entropy", entropy), ("value", v_loss)):
        if not np.isfinite(val):
            raise FloatingPointError(f"non-finite {name} loss term")

    inside = (ratio >= 1.0 - cfg.clip) & (ratio <= 1.0 + cfg.clip)
    active = use1 | inside
    dlogp = -np.where(active, ratio * adv, 0.0) / M
    inv_var = np.exp(-2.0 * log_std)
    diff = a - mean
    dmean = dlogp[:, None] * diff * inv_var
    dlog_std = np.sum(dlogp[:, None] * (diff**2 * inv_var - 1.0), axis=0) - cfg.entropy_coef
    actor_params_ = policy.actor.params if actor_params is None else actor_params
    g_actor = policy.actor.backward(a_cache, dmean, actor_params_)
    g_actor["log_std"] = dlog_std.astype(policy.actor.dtype)

    critic_params_ = policy.critic.params if critic_params is None else critic_params
    dv = (cfg.value_coef * 2.0 / M) * v_err
    g_critic = policy.critic.backward(c_cache, dv[:, None], critic_params_)
    losses = {"total": float(total), "policy": float(pi_loss), "entropy": entropy, "value": float(v_loss),
              "clip_frac": float(np.mean(~inside))}
    return losses, g_actor, g_critic


def gae(rewards, values, dones, last_value, gamma, lam):
    """Generalized advantage estimation over a (T, n) rollout.

    ``dones[t]`` marks that the episode ended after step ``t``; the
    recursion is cut there. ``last_value`` (n,) bootstraps the final step.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=float)
    T = rewards.shape[0]
    adv = np.zeros_like(rewards)
    next_adv = np.zeros(rewards.shape[1:])
    next_value = np.asarray(last_value, dtype=float)
    for t in reversed(range(T)):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * live - values[t]
        next_adv = delta + gamma * lam * live * next_adv
        adv[t] = next_adv
        next_value = values[t]
    return adv, adv + values


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


# ----------------------------------------------------------------------------
# checkpoints


def config_hash(config):
    blob = json.dumps(config, sort_keys=True, default=_json_default).encode()
    return hashlib.sha256(blob).hexdigest()


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not serializable: {type(o)}")


def save_checkpoint(path, policy, config, extra=None):
    """Write parameters plus a JSON header (shapes, scales, config, hash)."""
    sd = policy.state_dict()
    meta = {
        "dims": policy.dims,
        "box": [policy.box_lo.tolist(), policy.box_hi.tolist()],
        "net": policy.net.to_dict(),
        "shapes": {k: list(v.shape) for k, v in sd.items()},
        "config": json.loads(json.dumps(config, default=_json_default)),
        "config_hash": config_hash(config),
    }
    meta.update(extra or {})
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **sd)
    return path


def _diff_keys(a, b, prefix=""):
    keys = []
    if isinstance(a, dict) and isinstance(b, dict):
        for k in sorted(set(a) | set(b)):
            if k not in a or k not in b:
                keys.append(prefix + k)
            else:
                keys.extend(_diff_keys(a[k], b[k], prefix + k + "."))
    elif a != b:
        keys.append(prefix.rstrip("."))
    return keys


class CheckpointMismatch(ValueError):
    pass


def load_checkpoint(path, expected_config=None):
    """Rebuild a :class:`Policy`; optionally verify the stored config."""
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        sd = {k: data[k] for k in data.files if k != "__meta__"}
    if expected_config is not None:
        expected = json.loads(json.dumps(expected_config, default=_json_default))
        if config_hash(expected) != meta["config_hash"]:
            keys = _diff_keys(meta["config"], expected) or ["<config>"]
            raise CheckpointMismatch(f"checkpoint config mismatch at key(s): {', '.join(keys)}")
    net = NetConfig(tuple(meta["net"]["encoder"]), tuple(meta["net"]["head"]),
                    meta["net"]["init_log_std"], meta["net"]["output_gain"], meta["net"].get("dtype", "float64"))
    pol = Policy(meta["dims"], meta["box"], net)
    pol.load_state_dict(sd)
    return pol, meta


# ----------------------------------------------------------------------------
# training

CURVE_HEADER = ["iteration", "env_steps", "mean_return", "mean_pos_error_cm", "crash_rate"]


@dataclass
class TrainResult:
    policy: Policy
    curve: list
    env_steps: int
    aborted: bool = False


def _flatten_params(params):
    return all(np.all(np.isfinite(v)) for v in params.values())


def _copy_params(params):
    return {k: v.copy() for k, v in params.items()}


def train(env, trajectories, cfg=None, seed=0, policy=None, net=None, out_dir=None, config_snapshot=None,
          progress=None):
    """PPO on a batched :class:`~quadbench.env.QuadEnv`.

    Each agent starts on a random trajectory from ``trajectories`` and draws
    a new one whenever its episode ends. Writes ``learning_curve.csv`` and
    periodic ``checkpoint.npz`` into ``out_dir`` when given.
    """
    cfg = cfg or PpoConfig()
    rng = np.random.default_rng(seed)
    n = env.n
    dims = env.config.obs_dims()
    if policy is None:
        hover_like = np.mean([tr.u_ref(env.config.action_space)[0] for tr in trajectories], axis=0)
        policy = Policy(dims, (env.box_lo, env.box_hi), net, seed=seed, mean_init=hover_like)
    snapshot = config_snapshot if config_snapshot is not None else {}
    out_dir = Path(out_dir) if out_dir else None
    curve = []
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    if cfg.total_steps <= 0:
        return TrainResult(policy, curve, 0)

    opt_a = Adam(policy.actor.params, cfg.actor_lr)
    opt_c = Adam(policy.critic.params, cfg.critic_lr)
    pick = lambda k: [trajectories[i] for i in rng.integers(len(trajectories), size=k)]  # noqa: E731
    obs = env.reset(pick(n), seed=int(rng.integers(2**31)))
    ep_return = np.zeros(n)
    steps = 0
    iteration = 0
    last_good = _copy_params(policy.actor.params), _copy_params(policy.critic.params)
    T = cfg.rollout_length
    while steps < cfg.total_steps:
        iteration += 1
        buf = {k: [] for k in ("state", "ref", "priv", "actions", "logp", "values", "rewards", "dones")}
        finished, crashes, pos_err = [], 0, []
        for _ in range(T):
            cmd, a, logp = policy.act(obs, rng)
            v, _ = policy.value(obs)
            res = env.step(cmd)
            r = res.reward.copy()
            truncated = res.done & ~res.info["crashed"]
            if truncated.any():
                v_next, _ = policy.value(res.obs)
                r[truncated] += cfg.gamma * v_next[truncated]
            for k, val in (("state", obs["state"]), ("ref", obs["ref"]), ("priv", obs["priv"]),
                           ("actions", a), ("logp", logp), ("values", v), ("rewards", r),
                           ("dones", res.done)):
                buf[k].append(val)
            ep_return += res.reward
            pos_err.append(res.info["pos_error"])
            obs = res.obs
            if res.done.any():
                idx = np.flatnonzero(res.done)
                finished.extend(ep_return[idx].tolist())
                crashes += int(np.count_nonzero(res.info["crashed"][idx]))
                ep_return[idx] = 0.0
                env.reset_agents(idx, pick(len(idx)))
                fresh = env.observe()
                obs = {k: v.copy() for k, v in obs.items()}
                for k in obs:
                    obs[k][idx] = fresh[k][idx]
        steps += T * n
        last_v, _ = policy.value(obs)
        data = {k: np.asarray(v) for k, v in buf.items()}
        adv, ret = gae(data["rewards"], data["values"], data["dones"], last_v, cfg.gamma, cfg.gae_lambda)
        flat = {
            "state": data["state"].reshape(T * n, -1), "ref": data["ref"].reshape(T * n, -1),
            "priv": data["priv"].reshape(T * n, -1), "actions": data["actions"].reshape(T * n, -1),
            "logp_old": data["logp"].reshape(-1), "ret": ret.reshape(-1),
        }
        adv = adv.reshape(-1)
        policy.update_return_stats(ret)
        flat["adv"] = (adv - adv.mean()) / (adv.std() + 1e-8)
        N = T * n
        mb = min(cfg.minibatch_size, N)
        try:
            for _ in range(cfg.epochs):
                perm = rng.permutation(N)
                for start in range(0, N - mb + 1, mb):
                    idx = perm[start:start + mb]
                    batch = {k: v[idx] for k, v in flat.items()}
                    _, ga, gc = ppo_loss_and_grads(policy, batch, cfg)
                    opt_a.step(policy.actor.params, ga)
                    opt_c.step(policy.critic.params, gc)
            if not (_flatten_params(policy.actor.params) and _flatten_params(policy.critic.params)):
                raise FloatingPointError("non-finite parameters after update")
        except FloatingPointError as exc:
            log.error("training diverged at iteration %d: %s", iteration, exc)
            policy.actor.params, policy.critic.params = last_good
            return TrainResult(policy, curve, steps, aborted=True)
        last_good = _copy_params(policy.actor.params), _copy_params(policy.critic.params)

        row = {
            "iteration": iteration,
            "env_steps": steps,
            "mean_return": float(np.mean(finished)) if finished else float("nan"),
            "mean_pos_error_cm": float(100.0 * np.mean(pos_err)),
            "crash_rate": crashes / len(finished) if finished else 0.0,
        }
        curve.append(row)
        if progress:
            progress(row)
        if out_dir:
            write_curve(out_dir / "learning_curve.csv", curve)
            if iteration % cfg.checkpoint_every == 0:
                save_checkpoint(out_dir / "checkpoint.npz", policy, snapshot)
    if out_dir:
        save_checkpoint(out_dir / "checkpoint.npz", policy, snapshot)
    return TrainResult(policy, curve, steps)


def write_curve(path, curve):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CURVE_HEADER, lineterminator="\n")
        w.writeheader()
        for row in curve:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})
