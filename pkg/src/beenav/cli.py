"""Command-line entry point: train, rollout, explain, eval-curve, render-tunnel.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import shutil
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .env import A_MAX, TunnelEnv, episode_return, trajectory_row, write_trajectory
from .explain import (
    FeaturePartition,
    collect_explanations,
    edge_band_mask,
    edge_contrast,
    nearest_visible_obstacle,
    obstacle_edge_boundaries,
)
from .flow import CameraModel, normalize_observation, write_pgm
from .net import ActorCritic, CheckpointError, load_checkpoint
from .ppo import NumericalError, TrainConfig, checkpoint_name, config_dict, train
from .world import TunnelSpec, lateral_offset, library_hash, load_tunnel_dir, tunnel_library

log = logging.getLogger("beenav")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- config files

def read_config_file(path, _seen=None) -> dict[str, str]:
    """Flat ``key = value`` file; ``include = other.cfg`` pulls in a base file first."""
    path = Path(path).resolve()
    seen = set() if _seen is None else _seen
    if path in seen:
        raise ConfigError(f"include cycle at {path}")
    seen.add(path)
    values: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key == "include":
            values.update(read_config_file(path.parent / value, seen))
        else:
            values[key] = value
    return values


def _coerce(name: str, kind, text: str):
    if kind in (bool, "bool"):
        low = str(text).strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {text!r}")
    cast = {"int": int, "float": float, "str": str}.get(kind, kind)
    try:
        return cast(text)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {text!r} as {getattr(cast, '__name__', cast)}") from None


def build_config(values: dict[str, str]) -> TrainConfig:
    kinds = {f.name: f.type for f in fields(TrainConfig)}
    kwargs = {}
    for key, text in values.items():
        if key not in kinds:
            raise ConfigError(f"unknown config key {key!r}")
        kwargs[key] = _coerce(key, kinds[key], text)
    try:
        return TrainConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("config overrides")
    for f in fields(TrainConfig):
        flags = [f"--{f.name.replace('_', '-')}"]
        if "_" in f.name:
            flags.append(f"--{f.name}")
        group.add_argument(*flags, dest=f"cfg_{f.name}", metavar=f.name.upper(), default=None,
                           help=f"default {getattr(TrainConfig, f.name)!r}")


def _config_from_args(args) -> TrainConfig:
    values = read_config_file(args.config) if args.config else {}
    for f in fields(TrainConfig):
        override = getattr(args, f"cfg_{f.name}")
        if override is not None:
            values[f.name] = override
    return build_config(values)


# ---------------------------------------------------------------- run dirs

def prepare_dir(path, force: bool) -> Path:
    """Create ``path``; an existing non-empty directory needs ``force`` and is then cleared."""
    path = Path(path)
    if path.exists() and (not path.is_dir() or any(path.iterdir())):
        if not force:
            raise FileExistsError(f"{path} already exists; pass --force to overwrite")
        if path.is_dir():
            shutil.rmtree(path)
        else:
            path.unlink()
    path.mkdir(parents=True, exist_ok=True)
    return path


def _tunnels(tunnel_dir: str | None) -> list[TunnelSpec]:
    return load_tunnel_dir(tunnel_dir) if tunnel_dir else tunnel_library()


def _tunnel(tunnel_id: int, tunnel_dir: str | None = None) -> TunnelSpec:
    for t in _tunnels(tunnel_dir):
        if t.id == tunnel_id:
            return t
    raise ConfigError(f"unknown tunnel id {tunnel_id}")


def write_manifest(config: TrainConfig, run_dir: Path) -> Path:
    manifest = {
        "tool": "beenav",
        "version": __version__,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "config": config_dict(config),
        "agent_seeds": [config.agent_seed(k) for k in range(config.n_agents)],
        "tunnel_library_hash": library_hash(config.tunnel_specs()),
        "checkpoints": [checkpoint_name(k, e) for k in range(config.n_agents) for e in range(config.epochs + 1)],
    }
    path = run_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


# ---------------------------------------------------------------- evaluation

@dataclass
class EpisodeRecord:
    outcome: str
    rows: list
    rewards: list
    offsets: list

    @property
    def steps(self) -> int:
        return len(self.rewards)


def fly_episode(tunnel: TunnelSpec, camera: CameraModel, seed, agent: ActorCritic | None = None,
                deterministic: bool = True) -> EpisodeRecord:
    """One episode under ``agent`` (or uniform random actions in the box when None)."""
    rng = np.random.default_rng(seed)
    env = TunnelEnv([tunnel], camera)
    obs, state = env.reset(tunnel.id, seed=int(rng.integers(2**63)))
    rows = [trajectory_row(0, state, None, 0.0, "start")]
    rewards, offsets = [], [abs(lateral_offset(tunnel, state.position))]
    while True:
        if agent is None:
            action = rng.uniform(-A_MAX, A_MAX, 2)
        else:
            action, _, _ = agent.act(normalize_observation(obs, agent.obs_clip), rng, deterministic)
        result = env.step(action)
        rewards.append(result.reward)
        offsets.append(abs(lateral_offset(tunnel, env.state.position)))
        event = ""
        if result.terminated or result.truncated:
            event = "crash" if result.info["crashed"] else "success" if result.info["succeeded"] else "timeout"
        rows.append(trajectory_row(env.state.steps, env.state, result.info["action"], result.reward, event))
        if event:
            return EpisodeRecord(event, rows, rewards, offsets)
        obs = result.observation


def evaluate(tunnel: TunnelSpec, camera: CameraModel, episodes: int, seed: int,
             agent: ActorCritic | None = None, deterministic: bool = True) -> tuple[dict, list[EpisodeRecord]]:
    """Fly ``episodes`` episodes; episode i is seeded by (seed, i)."""
    records = [fly_episode(tunnel, camera, [seed, i], agent, deterministic) for i in range(episodes)]
    counts = {k: sum(r.outcome == k for r in records) for k in ("success", "crash", "timeout")}
    offsets = [o for r in records for o in r.offsets]
    summary = {
        "episodes": episodes,
        **counts,
        "success_rate": counts["success"] / episodes if episodes else math.nan,
        "mean_lateral_offset": float(np.mean(offsets)) if offsets else math.nan,
        "mean_return": float(np.mean([episode_return(r.rewards) for r in records])) if records else math.nan,
    }
    return summary, records


def _camera_for(agent: ActorCritic | None, fov_deg: float, width: int = 64, height: int = 48) -> CameraModel:
    if agent is not None:
        width, height = agent.arch.width, agent.arch.height
    return CameraModel(width, height, math.radians(fov_deg))


# ---------------------------------------------------------------- commands

def cmd_train(args) -> int:
    config = _config_from_args(args)
    run_dir = prepare_dir(args.run_dir, args.force)
    write_manifest(config, run_dir)
    log.info("training %d agent(s) x %d epochs x %d steps into %s",
             config.n_agents, config.epochs, config.steps_per_epoch, run_dir)
    result = train(config, run_dir)
    log.info("metrics: %s (obs clip %.4g)", result["metrics"], result["obs_clip"])
    return EXIT_OK


SUMMARY_COLUMNS = ["episode", "outcome", "steps", "return", "progress", "mean_abs_offset"]


def cmd_rollout(args) -> int:
    if args.random_policy == (args.checkpoint is not None):
        raise ConfigError("give either a checkpoint or --random-policy")
    agent = load_checkpoint(args.checkpoint) if args.checkpoint else None
    tunnel = _tunnel(args.tunnel, args.tunnel_dir)
    camera = _camera_for(agent, args.fov_deg)
    out = prepare_dir(args.out, args.force)
    summary, records = evaluate(tunnel, camera, args.episodes, args.seed, agent, not args.stochastic)
    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_COLUMNS)
        for i, rec in enumerate(records):
            write_trajectory(out / f"episode_{i:03d}.csv", rec.rows)
            progress = float(rec.rows[-1]["x"]) - float(rec.rows[0]["x"])
            writer.writerow([i, rec.outcome, rec.steps, repr(episode_return(rec.rewards)), repr(progress),
                             repr(float(np.mean(rec.offsets)))])
    summary.update(tunnel=tunnel.id, seed=args.seed, checkpoint=args.checkpoint,
                   policy="random" if agent is None else "stochastic" if args.stochastic else "deterministic")
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    log.info("%s: %d/%d successes, mean |offset| %.3f", tunnel.name, summary["success"], args.episodes,
             summary["mean_lateral_offset"])
    return EXIT_OK


def _parse_regions(text: str) -> tuple[int, int]:
    try:
        r, c = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"--regions expects RxC, got {text!r}") from None
    if r <= 0 or c <= 0:
        raise ConfigError("--regions sizes must be positive")
    return r, c


def cmd_explain(args) -> int:
    if not 1 <= len(args.checkpoints) <= 4:
        raise ConfigError("explain takes between 1 and 4 checkpoints")
    agents = [load_checkpoint(p) for p in args.checkpoints]
    fp = agents[0].arch.fingerprint()
    for path, a in zip(args.checkpoints, agents):
        if a.arch.fingerprint() != fp:
            raise ConfigError(f"architecture mismatch: {path} differs from {args.checkpoints[0]}")
    if not 0 <= args.designated < len(agents):
        raise ConfigError(f"--designated must index one of the {len(agents)} checkpoints")
    tunnel = _tunnel(args.tunnel, args.tunnel_dir)
    rh, rw = _parse_regions(args.regions)
    arch = agents[0].arch
    camera = _camera_for(agents[0], args.fov_deg)
    partition = FeaturePartition(arch.height, arch.width, rh, rw)
    out = prepare_dir(args.out, args.force)
    steps = collect_explanations(agents, tunnel, args.designated, args.seed, partition, args.samples, args.sigma,
                                 not args.stochastic, args.max_steps, args.every, camera)
    band = 2 * rw
    with open(out / "timesteps.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestep", "x", "y", "nearest_obstacle", "n_edges", "edge_mean", "other_mean"])
        for e in steps:
            tag = f"t{e.timestep:04d}"
            e.attention.to_csv(out / f"{tag}_attention.csv")
            e.attention.to_pgm(out / f"{tag}_attention.pgm")
            e.attention.composite(e.observation, out / f"{tag}_composite.pgm", agents[0].obs_clip)
            for k, m in enumerate(e.agent_maps):
                m.to_csv(out / f"{tag}_agent{k}.csv")
            edges = obstacle_edge_boundaries(tunnel, e.position, camera, args.near)
            near, far = edge_contrast(e.attention.values, edge_band_mask(edges, e.attention.values.shape, band))
            writer.writerow([e.timestep, repr(float(e.position[0])), repr(float(e.position[1])),
                             repr(nearest_visible_obstacle(tunnel, e.position, camera)), len(edges),
                             repr(near), repr(far)])
    meta = {
        "agents": [str(p) for p in args.checkpoints],
        "n_agents": len(agents),
        "designated": args.designated,
        "tunnel": tunnel.id,
        "seed": args.seed,
        "sigma": args.sigma,
        "regions": [rh, rw],
        "n_regions": partition.n_regions,
        "samples": args.samples,
        "exhaustive": bool(steps and steps[0].shap[0].exhaustive),
        "baseline": "zero flow",
        "edge_band_px": band,
        "near_m": args.near,
        "timesteps": [e.timestep for e in steps],
    }
    (out / "metadata.json").write_text(json.dumps(meta, indent=2) + "\n")
    log.info("explained %d timesteps with %d agent(s) into %s", len(steps), len(agents), out)
    return EXIT_OK


def cmd_eval_curve(args) -> int:
    run = Path(args.run_dir)
    manifest = run / "manifest.json"
    if manifest.exists():
        epochs = json.loads(manifest.read_text())["config"]["epochs"]
    else:
        found = [int(p.stem.split("_epoch")[1]) for p in run.glob(f"agent{args.agent}_epoch*.ckpt")]
        if not found:
            raise FileNotFoundError(f"no checkpoints for agent {args.agent} in {run}")
        epochs = max(found)
    paths = [run / checkpoint_name(args.agent, e) for e in range(epochs + 1)]
    missing = [p.name for p in paths if not p.exists()]
    if missing:
        raise FileNotFoundError(f"missing checkpoints in {run}: {', '.join(missing)}")
    tunnel = _tunnel(args.tunnel, args.tunnel_dir)
    out = Path(args.out) if args.out else run / f"eval_curve_agent{args.agent}_tunnel{tunnel.id}.csv"
    if out.exists() and not args.force:
        raise FileExistsError(f"{out} already exists; pass --force to overwrite")
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "success_rate", "crash_rate", "mean_lateral_offset"])
        for e, path in enumerate(paths):
            agent = load_checkpoint(path)
            summary, _ = evaluate(tunnel, _camera_for(agent, args.fov_deg), args.episodes, args.seed, agent,
                                  not args.stochastic)
            writer.writerow([e, repr(summary["success_rate"]), repr(summary["crash"] / args.episodes),
                             repr(summary["mean_lateral_offset"])])
            log.info("epoch %d: success %.2f", e, summary["success_rate"])
    return EXIT_OK


def render_tunnel_image(tunnel: TunnelSpec, trajectories=(), scale: float = 20.0) -> np.ndarray:
    """Top-down graymap: walls black, free space white, obstacles gray, paths dark gray.

    Row 0 is the port wall (y = +width/2); x grows to the right.
    """
    w = int(math.ceil(tunnel.length * scale)) + 1
    h = int(math.ceil(tunnel.width * scale)) + 3
    img = np.ones((h, w))
    img[0, :] = img[-1, :] = 0.0
    xs = (np.arange(w) + 0.5) / scale
    ys = tunnel.width / 2 - (np.arange(h) - 1 + 0.5) / scale
    gx, gy = np.meshgrid(xs, ys)
    for ob in tunnel.obstacles:
        img[np.hypot(gx - ob.center[0], gy - ob.center[1]) <= ob.radius] = 0.5
    for traj in trajectories:
        for x, y in traj:
            c = int(x * scale)
            r = int(round((tunnel.width / 2 - y) * scale)) + 1
            if 0 <= r < h and 0 <= c < w:
                img[r, c] = 0.2
    return img


def cmd_render_tunnel(args) -> int:
    tunnel = _tunnel(args.tunnel, args.tunnel_dir)
    trajectories = []
    for path in args.trajectory or []:
        with open(path, newline="") as fh:
            trajectories.append([(float(r["x"]), float(r["y"])) for r in csv.DictReader(fh)])
    out = Path(args.out)
    if out.exists() and not args.force:
        raise FileExistsError(f"{out} already exists; pass --force to overwrite")
    write_pgm(out, render_tunnel_image(tunnel, trajectories, args.scale), 0.0, 1.0)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="beenav", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"beenav {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train agents with PPO")
    p.add_argument("run_dir")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--force", action="store_true", help="overwrite an existing run directory")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    def common(q):
        q.add_argument("--tunnel", type=int, default=0, help="tunnel id (default 0, the easy tunnel)")
        q.add_argument("--tunnel-dir", default=None, help="directory of .tunnel files replacing the library")
        q.add_argument("--seed", type=int, default=0)
        q.add_argument("--fov-deg", type=float, default=120.0)
        q.add_argument("--stochastic", action="store_true", help="sample actions instead of using the mean")
        q.add_argument("--force", action="store_true")

    p = sub.add_parser("rollout", help="fly episodes and log trajectories")
    p.add_argument("checkpoint", nargs="?")
    p.add_argument("--random-policy", action="store_true", help="uniform random actions in the box")
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("explain", help="SHAP attention maps along a flight")
    p.add_argument("checkpoints", nargs="+")
    p.add_argument("--designated", type=int, default=0, help="index of the checkpoint that flies")
    p.add_argument("--sigma", type=float, default=4.0)
    p.add_argument("--regions", default="8x8")
    p.add_argument("--samples", type=int, default=4096)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--every", type=int, default=1)
    p.add_argument("--near", type=float, default=3.0,
                   help="obstacles within this many meters count for the edge summary")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("eval-curve", help="success rate per saved epoch")
    p.add_argument("run_dir")
    p.add_argument("--agent", type=int, default=0)
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--out", default=None)
    common(p)
    p.set_defaults(func=cmd_eval_curve)

    p = sub.add_parser("render-tunnel", help="top-down tunnel image with trajectories")
    p.add_argument("--tunnel", type=int, default=0)
    p.add_argument("--tunnel-dir", default=None)
    p.add_argument("--trajectory", action="append", help="trajectory CSV (repeatable)")
    p.add_argument("--scale", type=float, default=20.0, help="pixels per meter")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_render_tunnel)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericalError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
