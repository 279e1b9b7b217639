"""Tunnel flight POMDP: kinematics, reward, termination and episode lifecycle."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .flow import CameraModel, FlowImage, observe
from .world import BODY_RADIUS, TunnelSpec, check_collision, sample_start, tunnel_library

DT = 0.05
A_MAX = 3.0
V_MAX = 2.0
EPISODE_SECONDS = 30.0
MAX_STEPS = math.ceil(EPISODE_SECONDS / DT - 1e-9)
SUBSTEPS = 4
GAMMA = 0.99
FLIGHT_HEIGHT = 1.5


class EpisodeFinishedError(RuntimeError):
    pass


def clamp_box(vec, bound: float) -> np.ndarray:
    """Clip every component of ``vec`` to [-bound, bound]."""
    if not bound > 0:
        raise ValueError("bound must be positive")
    return np.clip(np.asarray(vec, dtype=float), -bound, bound)


def episode_return(rewards, gamma: float = GAMMA) -> float:
    """Discounted return sum_i gamma**i * r_i."""
    total = 0.0
    discount = 1.0
    for r in rewards:
        total += discount * float(r)
        discount *= gamma
    return total


@dataclass
class KinematicState:
    position: np.ndarray
    target_velocity: np.ndarray
    height: float = FLIGHT_HEIGHT
    steps: int = 0
    max_x_so_far: float = 0.0

    @property
    def elapsed(self) -> float:
        return self.steps * DT

    def copy(self) -> KinematicState:
        return replace(self, position=self.position.copy(), target_velocity=self.target_velocity.copy())


@dataclass
class StepResult:
    observation: FlowImage
    reward: float
    terminated: bool
    truncated: bool
    info: dict = field(default_factory=dict)


class TunnelEnv:
    """One drone in one tunnel at a time.

    ``reset`` picks a tunnel (uniformly from ``tunnels`` unless one is named)
    and a random start; ``step`` integrates one 0.05 s control interval.
    Randomness comes only from the generator seeded in ``reset``.
    """

    def __init__(self, tunnels: list[TunnelSpec] | None = None, camera: CameraModel | None = None,
                 body_radius: float = BODY_RADIUS):
        self.tunnels = list(tunnels) if tunnels is not None else tunnel_library()
        if not self.tunnels:
            raise ValueError("environment needs at least one tunnel")
        self._by_id = {t.id: t for t in self.tunnels}
        self.camera = camera or CameraModel()
        self.body_radius = body_radius
        self.rng = np.random.default_rng()
        self.tunnel: TunnelSpec | None = None
        self.state: KinematicState | None = None
        self.done = True

    def seed(self, seed) -> None:
        self.rng = np.random.default_rng(seed)

    def tunnel_by_id(self, tunnel_id: int) -> TunnelSpec:
        try:
            return self._by_id[tunnel_id]
        except KeyError:
            raise KeyError(f"unknown tunnel id {tunnel_id}; known: {sorted(self._by_id)}") from None

    def reset(self, tunnel_id: int | None = None, seed=None) -> tuple[FlowImage, KinematicState]:
        if seed is not None:
            self.seed(seed)
        if tunnel_id is None:
            self.tunnel = self.tunnels[int(self.rng.integers(len(self.tunnels)))]
        else:
            self.tunnel = self.tunnel_by_id(tunnel_id)
        x, y = sample_start(self.tunnel, self.rng, self.body_radius)
        self.state = KinematicState(
            position=np.array([x, y]),
            target_velocity=np.zeros(2),
            steps=0,
            max_x_so_far=x,
        )
        self.done = False
        return self._observe(), self.state.copy()

    def _observe(self) -> FlowImage:
        return observe(self.tunnel, self.state.position, self.state.target_velocity, self.camera)

    def step(self, action) -> StepResult:
        if self.done:
            raise EpisodeFinishedError("episode finished")
        s = self.state
        a = clamp_box(np.asarray(action, dtype=float).reshape(2), A_MAX)
        s.target_velocity = clamp_box(s.target_velocity + a * DT, V_MAX)

        start = s.position
        crashed = False
        for k in range(1, SUBSTEPS + 1):
            p = start + s.target_velocity * (DT * k / SUBSTEPS)
            s.position = p
            if check_collision(self.tunnel, p, self.body_radius):
                crashed = True
                break
        s.steps += 1

        new_max = max(s.max_x_so_far, float(s.position[0]))
        reward = new_max - s.max_x_so_far
        s.max_x_so_far = new_max
        succeeded = False
        if crashed:
            reward = -1.0
        elif s.position[0] >= self.tunnel.length:
            succeeded = True
        terminated = crashed or succeeded
        truncated = not terminated and s.steps >= MAX_STEPS
        self.done = terminated or truncated

        info = {
            "crashed": crashed,
            "succeeded": succeeded,
            "position": s.position.copy(),
            "action": a,
        }
        return StepResult(self._observe(), float(reward), terminated, truncated, info)


TRAJECTORY_COLUMNS = ["step", "t", "x", "y", "vx", "vy", "ax", "ay", "reward", "event"]


def write_trajectory(path, rows) -> None:
    """Write one episode log. ``rows`` are dicts keyed by TRAJECTORY_COLUMNS."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRAJECTORY_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k, "")) for k in TRAJECTORY_COLUMNS})


def read_trajectory(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _fmt(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return value


def trajectory_row(step: int, state: KinematicState, action, reward: float, event: str) -> dict:
    ax, ay = (float(action[0]), float(action[1])) if action is not None else (0.0, 0.0)
    return {
        "step": step,
        "t": step * DT,
        "x": float(state.position[0]),
        "y": float(state.position[1]),
        "vx": float(state.target_velocity[0]),
        "vy": float(state.target_velocity[1]),
        "ax": ax,
        "ay": ay,
        "reward": reward,
        "event": event,
    }
