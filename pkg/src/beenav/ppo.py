"""Clipped-surrogate policy optimization with generalized advantage estimation."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .env import A_MAX, GAMMA, TunnelEnv, episode_return
from .flow import CameraModel, FlowImage, normalize_observation
from .net import ActorCritic, Architecture, gaussian_log_prob, save_checkpoint
from .world import TunnelSpec, corridor, load_tunnel_dir, tunnel_library

log = logging.getLogger(__name__)

METRIC_COLUMNS = [
    "agent", "epoch", "steps", "episodes", "mean_return", "success_rate", "crash_rate", "mean_len",
    "policy_loss", "value_loss", "entropy", "kl", "clip_frac",
]


class NumericalError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    steps_per_epoch: int = 1024
    gamma: float = GAMMA
    gae_lambda: float = 0.95
    clip_epsilon: float = 0.2
    learning_rate: float = 3e-4
    lr_decay: bool = True
    minibatch_size: int = 256
    update_passes: int = 10
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    seed: int = 0
    n_agents: int = 4
    workers: int = 1
    tunnels: str = "all"
    tunnel_dir: str = ""
    width_px: int = 64
    height_px: int = 48
    fov_deg: float = 120.0
    conv_channels: int = 8
    conv_kernel: int = 8
    conv_stride: int = 4
    hidden: int = 64
    obs_clip: float = 0.0
    calibration_steps: int = 2000

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if not 0 <= self.gae_lambda <= 1:
            raise ValueError(f"gae_lambda must lie in [0, 1], got {self.gae_lambda}")
        if not self.clip_epsilon > 0:
            raise ValueError(f"clip_epsilon must be positive, got {self.clip_epsilon}")
        if self.epochs < 0 or self.steps_per_epoch <= 0 or self.minibatch_size <= 0:
            raise ValueError("epochs must be >= 0, steps_per_epoch and minibatch_size > 0")
        if self.steps_per_epoch % self.minibatch_size:
            raise ValueError(f"steps_per_epoch ({self.steps_per_epoch}) must be divisible by "
                             f"minibatch_size ({self.minibatch_size})")
        if self.n_agents < 1 or self.workers < 1 or self.update_passes < 0:
            raise ValueError("n_agents and workers must be >= 1, update_passes >= 0")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")

    @property
    def architecture(self) -> Architecture:
        return Architecture(self.height_px, self.width_px, 3, self.conv_channels,
                            self.conv_kernel, self.conv_stride, self.hidden)

    @property
    def camera(self) -> CameraModel:
        return CameraModel(self.width_px, self.height_px, math.radians(self.fov_deg))

    def agent_seed(self, k: int) -> int:
        return self.seed * 1000 + k

    def tunnel_specs(self) -> list[TunnelSpec]:
        return select_tunnels(self.tunnels, self.tunnel_dir)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def select_tunnels(selector: str = "all", tunnel_dir: str = "") -> list[TunnelSpec]:
    """``all``, ``corridor``, or a comma list of tunnel ids / names."""
    pool = load_tunnel_dir(tunnel_dir) if tunnel_dir else tunnel_library()
    selector = str(selector).strip()
    if selector == "all":
        return pool
    if selector == "corridor":
        return [corridor()]
    chosen = []
    for item in selector.split(","):
        item = item.strip()
        match = [t for t in pool if str(t.id) == item or t.name == item]
        if not match:
            raise KeyError(f"unknown tunnel {item!r}")
        chosen.append(match[0])
    return chosen


class RolloutBuffer:
    """Fixed-capacity store of one epoch of transitions.

    ``bootstrap[t]`` holds V(s_{t+1}) for steps that end an episode by
    truncation or close the buffer mid-episode; it is ignored elsewhere.
    """

    def __init__(self, capacity: int, obs_shape: tuple[int, ...], dtype=np.float32):
        self.capacity = capacity
        self.obs = np.zeros((capacity,) + tuple(obs_shape), dtype=dtype)
        self.actions = np.zeros((capacity, 2))
        self.log_probs = np.zeros(capacity)
        self.rewards = np.zeros(capacity)
        self.values = np.zeros(capacity)
        self.terminated = np.zeros(capacity, dtype=bool)
        self.truncated = np.zeros(capacity, dtype=bool)
        self.bootstrap = np.zeros(capacity)
        self.advantages = np.zeros(capacity)
        self.returns = np.zeros(capacity)
        self.size = 0

    def add(self, obs, action, log_prob, reward, value, terminated=False, truncated=False) -> None:
        if self.size >= self.capacity:
            raise IndexError("rollout buffer full")
        t = self.size
        self.obs[t] = obs
        self.actions[t] = action
        self.log_probs[t] = log_prob
        self.rewards[t] = reward
        self.values[t] = value
        self.terminated[t] = terminated
        self.truncated[t] = truncated
        self.size += 1

    @property
    def full(self) -> bool:
        return self.size == self.capacity

    def finish(self, last_value: float) -> None:
        """Mark a buffer that stops mid-episode; bootstraps from ``last_value``."""
        t = self.size - 1
        if t >= 0 and not (self.terminated[t] or self.truncated[t]):
            self.truncated[t] = True
            self.bootstrap[t] = last_value

    @classmethod
    def from_arrays(cls, rewards, values, terminated, truncated, bootstrap=None) -> RolloutBuffer:
        """Observation-free buffer, handy for advantage computations."""
        n = len(rewards)
        buf = cls(n, (0,))
        buf.rewards[:] = rewards
        buf.values[:] = values
        buf.terminated[:] = terminated
        buf.truncated[:] = truncated
        if bootstrap is not None:
            buf.bootstrap[:] = bootstrap
        buf.size = n
        return buf


def compute_gae(buffer: RolloutBuffer, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Advantages and value targets; also stored on the buffer.

    Terminated steps bootstrap 0, truncated steps bootstrap ``buffer.bootstrap``.
    The final step is treated as truncated if no flag is set.
    """
    n = buffer.size
    if n == 0:
        raise ValueError("empty rollout buffer")
    rewards, values = buffer.rewards[:n], buffer.values[:n]
    adv = np.zeros(n)
    running = 0.0
    for t in reversed(range(n)):
        ends = buffer.terminated[t] or buffer.truncated[t] or t == n - 1
        if buffer.terminated[t]:
            next_value = 0.0
        elif ends:
            next_value = buffer.bootstrap[t]
        else:
            next_value = values[t + 1]
        delta = rewards[t] + gamma * next_value - values[t]
        running = delta + (0.0 if ends else gamma * lam * running)
        adv[t] = running
    returns = adv + values
    buffer.advantages[:n] = adv
    buffer.returns[:n] = returns
    return adv, returns


class Adam:
    """Bias-corrected first/second moment optimizer over a dict of arrays."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def ppo_losses(mean, log_std, value, batch: dict, clip_epsilon: float, value_coef: float, entropy_coef: float):
    """Loss terms and gradients w.r.t. the network outputs for one minibatch.

    Returns ``(terms, d_mean, d_log_std, d_value)`` where ``terms`` holds the
    scalar losses plus ratio diagnostics.
    """
    n = len(value)
    act, adv = batch["actions"], batch["advantages"]
    logp = gaussian_log_prob(act, mean, log_std)
    ratio = np.exp(logp - batch["log_probs"])
    clipped = np.clip(ratio, 1 - clip_epsilon, 1 + clip_epsilon)
    surr_unclipped = ratio * adv
    surr_clipped = clipped * adv
    surr = np.minimum(surr_unclipped, surr_clipped)
    policy_loss = -float(np.mean(surr))
    err = value - batch["returns"]
    value_loss = float(np.mean(err * err))
    entropy = float(np.sum(log_std) + 0.5 * len(log_std) * math.log(2 * math.pi * math.e))
    loss = policy_loss + value_coef * value_loss - entropy_coef * entropy

    # d(-min(r A, clip(r) A))/d logp is -r A wherever the unclipped branch is the minimum
    d_logp = np.where(surr_unclipped <= surr_clipped, -ratio * adv / n, 0.0)
    inv_var = np.exp(-2 * log_std)
    diff = act - mean
    d_mean = d_logp[:, None] * diff * inv_var
    d_log_std = np.sum(d_logp[:, None] * (diff * diff * inv_var - 1.0), axis=0) - entropy_coef
    d_value = value_coef * 2.0 * err / n

    log_ratio = logp - batch["log_probs"]
    terms = {
        "loss": loss,
        "policy_loss": policy_loss,
        "value_loss": value_loss,
        "entropy": entropy,
        "kl": float(np.mean((ratio - 1) - log_ratio)),
        "clip_frac": float(np.mean(np.abs(ratio - 1) > clip_epsilon)),
        "surrogate": float(np.mean(surr)),
        "surrogate_unclipped": float(np.mean(surr_unclipped)),
        "mean_abs_adv": float(np.mean(np.abs(adv))),
        "max_ratio_dev": float(np.max(np.abs(ratio - 1))),
    }
    return terms, d_mean, d_log_std, d_value


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    std = adv.std()
    return (adv - adv.mean()) / (std if std > 1e-12 else 1.0)


def ppo_update(model, buffer: RolloutBuffer, config: TrainConfig, rng, lr: float | None = None,
               optimizer: Adam | None = None) -> dict:
    """Several passes of minibatch gradient steps on the clipped objective.

    ``model`` needs ``params`` (dict of arrays updated in place),
    ``forward(x) -> (mean, log_std, value, cache)`` and
    ``backward(cache, d_mean, d_log_std, d_value) -> grads``. Advantages
    must already be on the buffer (see :func:`compute_gae`); they are
    normalized over the whole buffer here.
    """
    lr = config.learning_rate if lr is None else lr
    optimizer = optimizer or Adam()
    n = buffer.size
    adv = normalize_advantages(buffer.advantages[:n])
    history = []
    params = model.params
    mb = config.minibatch_size
    for _ in range(config.update_passes):
        order = rng.permutation(n)
        for start in range(0, n, mb):
            idx = order[start:start + mb]
            batch = {
                "actions": buffer.actions[idx],
                "log_probs": buffer.log_probs[idx],
                "advantages": adv[idx],
                "returns": buffer.returns[idx],
            }
            mean, log_std, value, cache = model.forward(buffer.obs[idx])
            terms, d_mean, d_log_std, d_value = ppo_losses(
                mean.astype(float), log_std.astype(float), value.astype(float), batch,
                config.clip_epsilon, config.value_coef, config.entropy_coef)
            if not math.isfinite(terms["loss"]):
                raise NumericalError(f"non-finite loss {terms}")
            grads = model.backward(cache, d_mean, d_log_std, d_value)
            bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
            if bad:
                raise NumericalError(f"non-finite gradients in {bad}")
            optimizer.step(params, grads, lr)
            constrain = getattr(model, "apply_constraints", None)
            if constrain is not None:
                constrain()
            history.append(terms)
    stats = {"adv_mean": float(adv.mean()), "adv_std": float(adv.std()), "minibatches": history}
    for key in ("policy_loss", "value_loss", "entropy", "kl", "clip_frac"):
        stats[key] = float(np.mean([h[key] for h in history])) if history else 0.0
    return stats


class Runner:
    """Steps one environment with one agent, carrying episodes across epochs."""

    def __init__(self, env: TunnelEnv, agent: ActorCritic, rng):
        self.env = env
        self.agent = agent
        self.rng = rng
        self.obs = None
        self.episode_rewards: list[float] = []

    def _reset(self):
        flow, _ = self.env.reset(seed=int(self.rng.integers(2**63)))
        self.obs = normalize_observation(flow, self.agent.obs_clip)
        self.episode_rewards = []

    def collect(self, buffer: RolloutBuffer) -> list[dict]:
        """Fill ``buffer``; returns one summary dict per episode finished."""
        finished = []
        if self.obs is None:
            self._reset()
        while not buffer.full:
            action, logp, value = self.agent.act(self.obs, self.rng)
            result = self.env.step(action)
            self.episode_rewards.append(result.reward)
            next_obs = normalize_observation(result.observation, self.agent.obs_clip)
            buffer.add(self.obs, action, logp, result.reward, value, result.terminated, result.truncated)
            if result.truncated:
                buffer.bootstrap[buffer.size - 1] = self.agent.act(next_obs, deterministic=True)[2]
            if result.terminated or result.truncated:
                finished.append({
                    "return": episode_return(self.episode_rewards),
                    "succeeded": result.info["succeeded"],
                    "crashed": result.info["crashed"],
                    "length": len(self.episode_rewards),
                })
                self._reset()
            else:
                self.obs = next_obs
        if not (buffer.terminated[-1] or buffer.truncated[-1]):
            buffer.finish(self.agent.act(self.obs, deterministic=True)[2])
        return finished


def calibrate_obs_clip(tunnels: list[TunnelSpec], camera: CameraModel, seed: int, steps: int = 2000) -> float:
    """99th percentile of flow magnitude along scripted forward flights.

    The script accelerates forward at a random fraction of a_max and
    jitters sideways, which covers the speeds a trained agent reaches.
    """
    env = TunnelEnv(tunnels, camera)
    rng = np.random.default_rng(seed)
    env.reset(seed=int(rng.integers(2**63)))
    samples = []
    for _ in range(steps):
        action = (A_MAX * rng.uniform(0.3, 1.0), A_MAX * rng.uniform(-1.0, 1.0))
        result = env.step(action)
        samples.append(result.observation.magnitude.ravel())
        if result.terminated or result.truncated:
            env.reset(seed=int(rng.integers(2**63)))
    value = float(np.percentile(np.concatenate(samples), 99))
    if not value > 0:
        raise NumericalError("calibration produced a zero magnitude scale")
    return value


def resolve_obs_clip(config: TrainConfig) -> float:
    if config.obs_clip > 0:
        return config.obs_clip
    return calibrate_obs_clip(config.tunnel_specs(), config.camera, config.seed, config.calibration_steps)


def _summarize(agent: int, epoch: int, steps: int, episodes: list[dict], stats: dict) -> dict:
    n = len(episodes)
    row = {
        "agent": agent,
        "epoch": epoch,
        "steps": steps,
        "episodes": n,
        "mean_return": float(np.mean([e["return"] for e in episodes])) if n else float("nan"),
        "success_rate": sum(e["succeeded"] for e in episodes) / n if n else float("nan"),
        "crash_rate": sum(e["crashed"] for e in episodes) / n if n else float("nan"),
        "mean_len": float(np.mean([e["length"] for e in episodes])) if n else float("nan"),
    }
    for key in ("policy_loss", "value_loss", "entropy", "kl", "clip_frac"):
        row[key] = stats[key]
    return row


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def checkpoint_name(agent: int, epoch: int) -> str:
    return f"agent{agent}_epoch{epoch}.ckpt"


def train_agent(config: TrainConfig, k: int, out_dir, obs_clip: float) -> Path:
    """Train agent ``k``; writes its checkpoints and ``agent{k}_metrics.csv``."""
    out_dir = Path(out_dir)
    seed = config.agent_seed(k)
    arch = config.architecture
    agent = ActorCritic.create(arch, seed, obs_clip)
    env = TunnelEnv(config.tunnel_specs(), config.camera)
    rng = np.random.default_rng(seed)
    runner = Runner(env, agent, rng)
    optimizer = Adam()
    save_checkpoint(agent, out_dir / checkpoint_name(k, 0))
    metrics_path = out_dir / f"agent{k}_metrics.csv"
    with open(metrics_path, "w", newline="") as fh:
        csv.writer(fh).writerow(METRIC_COLUMNS)
    for epoch in range(1, config.epochs + 1):
        lr = config.learning_rate
        if config.lr_decay:
            lr *= 1.0 - (epoch - 1) / config.epochs
        buffer = RolloutBuffer(config.steps_per_epoch, arch.input_shape)
        episodes = runner.collect(buffer)
        compute_gae(buffer, config.gamma, config.gae_lambda)
        stats = ppo_update(agent, buffer, config, rng, lr, optimizer)
        row = _summarize(k, epoch, epoch * config.steps_per_epoch, episodes, stats)
        with open(metrics_path, "a", newline="") as fh:
            csv.writer(fh).writerow([_fmt(row[c]) for c in METRIC_COLUMNS])
        save_checkpoint(agent, out_dir / checkpoint_name(k, epoch))
        log.info("agent %d epoch %d: success %.2f crash %.2f return %.3f len %.1f",
                 k, epoch, row["success_rate"], row["crash_rate"], row["mean_return"], row["mean_len"])
    return metrics_path


def _train_agent_star(args):
    return train_agent(*args)


def train(config: TrainConfig, out_dir, obs_clip: float | None = None) -> dict:
    """Train ``config.n_agents`` independent agents into ``out_dir``.

    Returns paths of all checkpoints and the combined ``metrics.csv``.
    Agents run in worker processes when ``config.workers > 1``; each agent is
    seeded on its own, so results do not depend on the worker count.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    clip = resolve_obs_clip(config) if obs_clip is None else obs_clip
    jobs = [(config, k, out_dir, clip) for k in range(config.n_agents)]
    if config.workers > 1 and config.n_agents > 1:
        with ProcessPoolExecutor(max_workers=min(config.workers, config.n_agents)) as pool:
            per_agent = list(pool.map(_train_agent_star, jobs))
    else:
        per_agent = [train_agent(*job) for job in jobs]
    metrics = out_dir / "metrics.csv"
    with open(metrics, "w", newline="") as out:
        out.write(",".join(METRIC_COLUMNS) + "\n")
        for path in per_agent:
            lines = Path(path).read_text().splitlines(keepends=True)[1:]
            out.writelines(lines)
    checkpoints = [out_dir / checkpoint_name(k, e) for k in range(config.n_agents) for e in range(config.epochs + 1)]
    return {"metrics": metrics, "checkpoints": checkpoints, "obs_clip": clip}


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
