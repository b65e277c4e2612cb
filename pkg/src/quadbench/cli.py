"""Command-line front end: ``quadbench <subcommand> [flags]``.

Every subcommand writes its artifacts into one run directory together with
a ``manifest.json`` holding the resolved configuration, the seeds, content
hashes of all inputs and outputs, and the argument vector needed to
reproduce it (``quadbench rerun <manifest>``).

Configuration precedence is built-in defaults < ``--config`` JSON file <
``--set section.key=value`` overrides < dedicated flags.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .actuation import LowLevelGains, VelocityStackGains
from .bench import (
    ABLATION_HEADER,
    STANDIN_BINS,
    PolicyAgent,
    Row,
    SimConfig,
    ablation_batch,
    gain_sweep,
    grid_axis,
    latency_sweep,
    make_controller,
    result_from_log,
    run_rows,
    run_tracking,
    standin_trajectory,
    write_results,
    write_table,
)
from .dynamics import PhysParams, RandomizationSpec
from .env import EnvConfig, QuadEnv
from .mpc import MpcConfig
from .policy import NetConfig, PpoConfig, _diff_keys, load_checkpoint, train
from .trajgen import Trajectory, generate_training_set, hover_trajectory

log = logging.getLogger("quadbench")

OUT_ENV = "QUADBENCH_OUT"
MANIFEST = "manifest.json"
SECTIONS = ("phys", "randomization", "gains", "lv_gains", "env", "mpc", "ppo", "net", "sim")
CONTROLLERS = ("mpc-srt", "mpc-ctbr", "ff-srt", "ff-ctbr", "zero", "tracker-ctbr", "policy")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


# ----------------------------------------------------------------------------
# configuration


def default_config():
    return {
        "phys": PhysParams().to_dict(),
        "randomization": RandomizationSpec().to_dict(),
        "gains": LowLevelGains().to_dict(),
        "lv_gains": dataclasses.asdict(VelocityStackGains()),
        "env": EnvConfig().to_dict(),
        "mpc": MpcConfig().to_dict(),
        "ppo": PpoConfig().to_dict(),
        "net": NetConfig().to_dict(),
        "sim": {"latency": 0.0, "sim_dt": 1e-3, "drag_free": False, "randomize": False,
                "observe_delayed": False},
    }


def _merge(base, update, prefix=""):
    for key, value in update.items():
        name = prefix + key
        if key not in base:
            raise ConfigError(f"unknown config key {name!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {name!r} must be a mapping")
            _merge(base[key], value, name + ".")
        else:
            base[key] = value
    return base


def _parse_set(expr):
    if "=" not in expr:
        raise ConfigError(f"--set expects section.key=value, got {expr!r}")
    path, raw = expr.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out = value
    for part in reversed(path.split(".")):
        out = {part: out}
    return out


def resolve_config(config_path=None, sets=(), flags=None):
    """Defaults < file < ``--set`` < dedicated flags (``{"env.latency": ...}``)."""
    cfg = default_config()
    if config_path:
        try:
            data = json.loads(Path(config_path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config file {config_path}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {config_path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config file {config_path} must hold a JSON object")
        _merge(cfg, data)
    for expr in sets:
        _merge(cfg, _parse_set(expr))
    for path, value in (flags or {}).items():
        if value is not None:
            _merge(cfg, _parse_set(f"{path}={json.dumps(value)}"))
    build_objects(cfg)
    return cfg


def build_objects(cfg):
    """Instantiate the typed config objects; errors name the section."""
    out = {}
    try:
        out["phys"] = PhysParams.from_dict(cfg["phys"])
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"phys: {exc}") from exc
    builders = {
        "randomization": lambda d: RandomizationSpec.from_dict(d),
        "gains": lambda d: LowLevelGains(**d),
        "lv_gains": lambda d: VelocityStackGains(**d),
        "env": lambda d: EnvConfig.from_dict(d),
        "mpc": lambda d: MpcConfig.from_dict(d),
        "ppo": lambda d: PpoConfig.from_dict(d),
        "net": lambda d: NetConfig(**{**d, "encoder": tuple(d["encoder"]), "head": tuple(d["head"])}),
    }
    for name, make in builders.items():
        try:
            out[name] = make(cfg[name])
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"{name}: {exc}") from exc
    s = cfg["sim"]
    out["sim"] = SimConfig(latency=float(s["latency"]), sim_dt=float(s["sim_dt"]), drag_free=bool(s["drag_free"]),
                           randomize=bool(s["randomize"]), observe_delayed=bool(s["observe_delayed"]),
                           params=out["phys"], randomization=out["randomization"], gains=out["gains"],
                           lv_gains=out["lv_gains"])
    steps = out["sim"].latency / out["sim"].sim_dt
    if abs(steps - round(steps)) > 1e-9:
        raise ConfigError("sim.latency must be a multiple of sim.sim_dt")
    return out


# ----------------------------------------------------------------------------
# run directories and manifests


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _canonical(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


@dataclasses.dataclass
class RunManifest:
    command: str
    argv: list
    config: dict
    seeds: list
    inputs: dict
    input_hash: str
    out_dir: str
    strict: bool
    artifacts: dict = dataclasses.field(default_factory=dict)
    version: str = __version__

    def write(self, run_dir):
        path = Path(run_dir) / MANIFEST
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path):
        data = json.loads(Path(path).read_text())
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


class Run:
    """Run directory bookkeeping for one subcommand invocation."""

    def __init__(self, args, config, seeds, inputs):
        self.args = args
        self.config = config
        self.seeds = [int(s) for s in seeds]
        self.inputs = {str(p): sha256_file(p) for p in inputs}
        blob = _canonical({"command": args.command, "argv": args.argv, "config": config,
                           "inputs": sorted(self.inputs.values())})
        self.input_hash = hashlib.sha256(blob.encode()).hexdigest()
        root = Path(args.out or os.environ.get(OUT_ENV) or "runs")
        self.dir = Path(args.run_dir) if args.run_dir else root / f"{args.command}-{self.input_hash[:12]}"
        self.dir.mkdir(parents=True, exist_ok=True)

    def path(self, name):
        p = self.dir / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def finish(self):
        artifacts = {}
        for p in sorted(self.dir.rglob("*")):
            if p.is_file() and p.name != MANIFEST:
                artifacts[str(p.relative_to(self.dir))] = sha256_file(p)
        man = RunManifest(self.args.command, self.args.argv, self.config, self.seeds, self.inputs,
                          self.input_hash, str(self.dir), bool(self.args.strict_determinism), artifacts)
        man.write(self.dir)
        log.info("wrote %d artifact(s) to %s", len(artifacts), self.dir)
        return man


# ----------------------------------------------------------------------------
# inputs


def _int_list(text):
    return [int(v) for v in str(text).split(",") if v.strip()]


def _float_list(text):
    return [float(v) for v in str(text).split(",") if v.strip()]


def load_trajectory(spec, params):
    """A trajectory CSV path or a stand-in name (``hover``, ``circle_r5_v5``, ``rand_a`` ...)."""
    path = Path(spec)
    if path.is_file():
        tr = Trajectory.from_csv(path)
        tr.meta.setdefault("name", path.stem)
        return tr, [path]
    name = path.stem if path.suffix == ".csv" else spec
    if name in ("hover", "circle_r5_v5") or name in STANDIN_BINS:
        return standin_trajectory(name, params), []
    raise ConfigError(f"trajectory {spec!r} is neither a file nor a known stand-in "
                      f"({', '.join(['hover', 'circle_r5_v5', *STANDIN_BINS])})")


def load_traj_set(spec, params, count=600, seed=0):
    """``hover``, ``generated`` (built in memory) or a directory of trajectory CSVs."""
    if spec == "hover":
        return [hover_trajectory((0.0, 0.0, 5.0), duration=5.0, params=params)], []
    if spec == "generated":
        return generate_training_set(count, seed, params), []
    path = Path(spec)
    if path.is_dir():
        files = sorted(path.glob("*.csv"))
        if not files:
            raise ConfigError(f"trajectory set {spec!r} contains no CSV files")
        return [Trajectory.from_csv(f) for f in files], files
    raise ConfigError(f"trajectory set {spec!r} is not 'hover', 'generated' or a directory")


def controller_spec(args, cfg, objs):
    spec = {"controller": args.controller}
    if args.controller.startswith("mpc-"):
        spec["mpc"] = cfg["mpc"]
    if args.controller == "policy":
        if not args.checkpoint:
            raise ConfigError("controller 'policy' requires --checkpoint")
        _, meta = load_checkpoint(args.checkpoint)
        stored = meta.get("config", {}).get("env")
        if stored is not None and args.user_env:
            keys = [f"env.{k}" for k in _diff_keys(stored, cfg["env"]) if k != "latency"]
            if keys:
                raise ConfigError(f"checkpoint/config hash mismatch at key(s): {', '.join(keys)}")
        spec["checkpoint"] = str(args.checkpoint)
        spec["env"] = stored if stored is not None else cfg["env"]
    return spec


# ----------------------------------------------------------------------------
# subcommands


def cmd_gen_trajs(args, cfg, objs):
    run = Run(args, cfg, [args.seed], [])
    trajs = generate_training_set(args.count, args.seed, objs["phys"])
    index = []
    for tr in trajs:
        name = tr.meta["name"]
        tr.to_csv(run.path(f"trajs/{name}.csv"))
        index.append({"name": name, **json.loads(run.path(f"trajs/{name}.json").read_text())})
    run.path("metadata.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    run.finish()
    print(f"{len(trajs)} trajectories -> {run.dir}")
    return 0


def cmd_train(args, cfg, objs):
    trajs, files = load_traj_set(args.traj_set, objs["phys"], args.count, args.seed)
    run = Run(args, cfg, [args.seed], files)
    env = QuadEnv(objs["env"], args.n_envs, objs["phys"], objs["randomization"], objs["gains"], objs["lv_gains"])

    def progress(row):
        log.info("iter %d steps %d return %.2f error %.1f cm crash %.2f", row["iteration"], row["env_steps"],
                 row["mean_return"], row["mean_pos_error_cm"], row["crash_rate"])

    res = train(env, trajs, objs["ppo"], seed=args.seed, net=objs["net"], out_dir=run.dir,
                config_snapshot=cfg, progress=progress)
    run.finish()
    print(f"trained {res.env_steps} steps{' (aborted)' if res.aborted else ''} -> {run.dir}")
    return 2 if res.aborted else 0


def cmd_eval(args, cfg, objs):
    traj, files = load_trajectory(args.traj, objs["phys"])
    spec = controller_spec(args, cfg, objs)
    if args.checkpoint:
        files.append(Path(args.checkpoint))
    seeds = _int_list(args.seeds)
    run = Run(args, cfg, seeds, files)
    results = []
    for seed in seeds:
        ctrl = make_controller(spec, objs["phys"])
        ep = run_tracking(ctrl, traj, objs["sim"], seed, args.duration)
        if args.log:
            ep.to_csv(run.path(f"episode_seed{seed}.csv"))
        meta = {"latency_ms": 1000.0 * objs["sim"].latency, "scale_p": objs["gains"].scale_p,
                "scale_d": objs["gains"].scale_d}
        if isinstance(ctrl, PolicyAgent):
            meta.update(H=ctrl.env_config.history, R=ctrl.env_config.ref_length)
        results.append(result_from_log(ep, seed, **meta))
    write_results(run.path("results.csv"), results)
    run.finish()
    for r in results:
        print(f"{r.controller} {r.trajectory} seed {r.seed}: {r.error_cell()} cm")
    return 0


def _workers(args):
    return 1 if args.strict_determinism else args.workers


def cmd_sweep_latency(args, cfg, objs):
    traj, files = load_trajectory(args.traj, objs["phys"])
    spec = controller_spec(args, cfg, objs)
    seeds = _int_list(args.seeds)
    run = Run(args, cfg, seeds, files)
    lat = np.array(_float_list(args.latencies)) * 1e-3
    results = latency_sweep(spec, traj, lat, seeds, objs["sim"], _workers(args), args.strict_determinism,
                            args.duration)
    write_results(run.path("latency.csv"), results)
    run.finish()
    print(f"{len(results)} rows -> {run.dir / 'latency.csv'}")
    return 0


def cmd_sweep_gains(args, cfg, objs):
    traj, files = load_trajectory(args.traj, objs["phys"])
    spec = controller_spec(args, cfg, objs)
    run = Run(args, cfg, [args.seed], files)
    axis = grid_axis(args.min_scale, args.max_scale, args.count)
    _, _, results = gain_sweep(spec, traj, axis, axis, objs["sim"], args.seed, _workers(args),
                               args.strict_determinism, args.duration)
    write_results(run.path("gain_grid.csv"), results)
    nominal = run_rows([Row(spec, traj, objs["sim"], args.seed, duration=args.duration)], 1, True)
    write_results(run.path("nominal.csv"), nominal)
    run.finish()
    print(f"{len(results)} cells -> {run.dir / 'gain_grid.csv'}")
    return 0


def cmd_ablate(args, cfg, objs):
    trajs, files = load_traj_set(args.traj_set, objs["phys"], args.count, args.seed)
    evals = []
    for spec in args.eval_traj.split(","):
        tr, f = load_trajectory(spec, objs["phys"])
        evals.append(tr)
        files += f
    seeds = _int_list(args.seeds)
    run = Run(args, cfg, seeds, files)
    table = ablation_batch(args.axis, _int_list(args.values), trajs, evals, objs["env"].action_space,
                           objs["ppo"], objs["env"], seeds, args.n_envs, objs["sim"], run.dir / "cells")
    write_table(run.path("ablation.csv"), table, ABLATION_HEADER)
    run.finish()
    print(f"{len(table)} cells -> {run.dir / 'ablation.csv'}")
    return 0


def cmd_plot(args, cfg, objs):
    from .plotting import plot_csv
    files = [Path(p) for p in args.inputs]
    for f in files:
        if not f.is_file():
            raise ConfigError(f"cannot read input {f}")
    run = Run(args, cfg, [], files)
    for f in files:
        out = plot_csv(f, run.path(f.stem + ".png"))
        print(f"{f} -> {out}")
    run.finish()
    return 0


def cmd_rerun(args, cfg, objs):
    man = RunManifest.read(args.manifest)
    src = Path(args.manifest).parent
    dest = Path(args.run_dir) if args.run_dir else src.parent / (src.name + "-rerun")
    dest.mkdir(parents=True, exist_ok=True)
    snapshot = dest / "config.snapshot.json"
    snapshot.write_text(json.dumps(man.config, indent=2, sort_keys=True) + "\n")
    argv = _strip(man.argv, ("--config", "--run-dir", "--out"), ("--set",))
    sub = argv[:1] + ["--config", str(snapshot), "--run-dir", str(dest), "--strict-determinism"] + argv[1:]
    status = main(sub)
    if status != 0:
        return status
    new = RunManifest.read(dest / MANIFEST)
    bad = [name for name, digest in man.artifacts.items()
           if name.endswith(".csv") and new.artifacts.get(name) != digest]
    for name in bad:
        print(f"MISMATCH {name}")
    n = sum(1 for k in man.artifacts if k.endswith(".csv"))
    print(f"rerun {'reproduced' if not bad else 'differs from'} {n} CSV artifact(s) -> {dest}")
    return 1 if bad else 0


def _strip(argv, with_value, repeat):
    out, skip = [], False
    for a in argv:
        if skip:
            skip = False
            continue
        key = a.split("=", 1)[0]
        if key in with_value + repeat or key == "--strict-determinism":
            skip = "=" not in a and key != "--strict-determinism"
            continue
        out.append(a)
    return out


# ----------------------------------------------------------------------------
# argument parsing


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (sections: " + ", ".join(SECTIONS) + ")")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (JSON literal); repeatable")
    common.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./runs)")
    common.add_argument("--run-dir", help="explicit run directory")
    common.add_argument("--workers", type=int, default=1, help="parallel worker processes for sweeps")
    common.add_argument("--strict-determinism", action="store_true", help="force serial, bit-reproducible runs")
    common.add_argument("-v", "--verbose", action="store_true")

    ctrl = argparse.ArgumentParser(add_help=False)
    ctrl.add_argument("--controller", required=True, choices=CONTROLLERS)
    ctrl.add_argument("--checkpoint", help="policy checkpoint (.npz) for --controller policy")
    ctrl.add_argument("--traj", required=True, help="trajectory CSV or stand-in name")
    ctrl.add_argument("--duration", type=float, help="truncate runs to this many seconds")

    p = argparse.ArgumentParser(prog="quadbench", description="Quadrotor action-space benchmark.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-trajs", parents=[common], help="build the training trajectory set")
    s.add_argument("--count", type=int, default=600)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gen_trajs)

    s = sub.add_parser("train", parents=[common], help="train a PPO policy")
    s.add_argument("--action-space", choices=("srt", "ctbr", "lv"))
    s.add_argument("--traj-set", default="generated", help="'hover', 'generated' or a directory of CSVs")
    s.add_argument("--count", type=int, default=600, help="size of a generated set")
    s.add_argument("--steps", type=float, help="total environment steps")
    s.add_argument("--n-envs", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common, ctrl], help="tracking runs for one controller")
    s.add_argument("--seeds", default="0")
    s.add_argument("--latency", type=float, help="control latency in ms")
    s.add_argument("--log", action="store_true", help="also write per-episode time series")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep-latency", parents=[common, ctrl], help="error versus control latency")
    s.add_argument("--latencies", default="0,10,20,30,40,50,60", help="comma-separated, ms")
    s.add_argument("--seeds", default="0")
    s.set_defaults(func=cmd_sweep_latency)

    s = sub.add_parser("sweep-gains", parents=[common, ctrl], help="low-level gain sensitivity grid")
    s.add_argument("--count", type=int, default=11)
    s.add_argument("--min-scale", type=float, default=0.0)
    s.add_argument("--max-scale", type=float, default=100.0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_sweep_gains)

    s = sub.add_parser("ablate", parents=[common], help="history / reference-length ablation")
    s.add_argument("--axis", required=True, choices=("H", "R"))
    s.add_argument("--values", default="1,5,10")
    s.add_argument("--action-space", choices=("srt", "ctbr", "lv"))
    s.add_argument("--traj-set", default="generated")
    s.add_argument("--count", type=int, default=600)
    s.add_argument("--eval-traj", default="rand_a,rand_b,rand_c,race_a")
    s.add_argument("--steps", type=float)
    s.add_argument("--n-envs", type=int, default=50)
    s.add_argument("--seeds", default="0,1,2,3,4,5,6,7,8,9")
    s.add_argument("--seed", type=int, default=0, help="seed of a generated training set")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("plot", parents=[common], help="render result CSVs to PNG figures")
    s.add_argument("inputs", nargs="+")
    s.set_defaults(func=cmd_plot)

    s = sub.add_parser("rerun", parents=[common], help="re-execute a manifest and compare its CSVs")
    s.add_argument("manifest")
    s.set_defaults(func=cmd_rerun)
    return p


def _flag_overrides(args):
    flags = {}
    if getattr(args, "action_space", None):
        flags["env.action_space"] = args.action_space
    if getattr(args, "steps", None) is not None:
        flags["ppo.total_steps"] = int(args.steps)
    if getattr(args, "latency", None) is not None:
        flags["sim.latency"] = args.latency * 1e-3
    return flags


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.argv = _strip(argv, ("--run-dir", "--out"), ())
    if args.strict_determinism and "--strict-determinism" not in args.argv:
        args.argv.append("--strict-determinism")
    args.user_env = bool(args.config) or any(s.startswith("env.") for s in args.set)
    try:
        cfg = resolve_config(args.config, args.set, _flag_overrides(args))
        objs = build_objects(cfg)
        return args.func(args, cfg, objs)
    except ConfigError as exc:
        print(f"quadbench {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except KeyError as exc:
        print(f"quadbench {args.command}: error: missing or unknown key {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
