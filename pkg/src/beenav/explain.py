"""Shapley attributions over image regions and the attention-map pipeline.

Features are rectangular pixel regions. A coalition keeps the observation
inside its regions and replaces everything else with a baseline (by default
the all-zero, no-flow image). Attributions are aggregated as
|phi| summed over model outputs, broadcast to pixels, smoothed, then averaged
over agents.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .env import TunnelEnv
from .flow import CameraModel, FlowImage, normalize_observation, normalize_stack, render_columns, write_pgm
from .net import ActorCritic
from .world import HitKind, TunnelSpec

EXHAUSTIVE_LIMIT = 20
EVAL_CHUNK = 256


class SingularCoalitionError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class FeaturePartition:
    height: int
    width: int
    region_h: int = 8
    region_w: int = 8

    def __post_init__(self):
        if min(self.height, self.width, self.region_h, self.region_w) <= 0:
            raise ValueError("partition sizes must be positive")

    @property
    def rows(self) -> int:
        return math.ceil(self.height / self.region_h)

    @property
    def cols(self) -> int:
        return math.ceil(self.width / self.region_w)

    @property
    def n_regions(self) -> int:
        return self.rows * self.cols

    @property
    def region_ids(self) -> np.ndarray:
        r = np.arange(self.height) // self.region_h
        c = np.arange(self.width) // self.region_w
        return r[:, None] * self.cols + c[None, :]

    def broadcast(self, region_values) -> np.ndarray:
        """Region-indexed values (M,) -> pixel grid (H, W)."""
        return np.asarray(region_values)[self.region_ids]


@dataclass
class ShapResult:
    phi: np.ndarray          # (M, K)
    base_value: np.ndarray   # (K,)
    value: np.ndarray        # (K,), model output at the explained observation
    exhaustive: bool = False
    n_evaluations: int = 0

    def efficiency_gap(self) -> np.ndarray:
        return self.phi.sum(axis=0) - (self.value - self.base_value)


@dataclass
class AttentionMap:
    values: np.ndarray
    sigma: float
    n_agents: int
    timestep: int = -1
    agents: list = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            for row in self.values:
                writer.writerow([repr(float(v)) for v in row])

    def to_pgm(self, path, hi: float | None = None) -> None:
        write_pgm(path, self.values, 0.0, hi if hi is not None else float(self.values.max()))

    def composite(self, observation: FlowImage, path, mag_max: float | None = None, gap: int = 2) -> None:
        """Side-by-side graymap: flow magnitude | gap | attention."""
        mag = observation.magnitude
        top = mag_max if mag_max is not None else float(mag.max())
        left = np.clip(mag / (top if top > 0 else 1.0), 0, 1)
        att_top = float(self.values.max())
        right = self.values / (att_top if att_top > 0 else 1.0)
        h = mag.shape[0]
        write_pgm(path, np.hstack([left, np.ones((h, gap)), right]), 0.0, 1.0)


def _as_stack(obs) -> np.ndarray:
    return obs.stack() if isinstance(obs, FlowImage) else np.asarray(obs, dtype=float)


def mask_batch(obs, coalitions, baseline, partition: FeaturePartition) -> np.ndarray:
    """Masked observations for a batch of coalitions, shape (n, C, H, W)."""
    x = _as_stack(obs)
    b = _as_stack(baseline)
    if x.shape != b.shape or x.shape[-2:] != (partition.height, partition.width):
        raise ValueError(f"shape mismatch: obs {x.shape}, baseline {b.shape}, "
                         f"partition {(partition.height, partition.width)}")
    coalitions = np.asarray(coalitions, dtype=bool).reshape(-1, partition.n_regions)
    keep = coalitions[:, partition.region_ids]  # (n, H, W)
    return np.where(keep[:, None, :, :], x[None], b[None])


def mask_observation(obs: FlowImage, coalition, baseline: FlowImage, partition: FeaturePartition) -> FlowImage:
    """Copy present regions from ``obs`` and absent ones from ``baseline``."""
    return FlowImage.from_stack(mask_batch(obs, coalition, baseline, partition)[0])


def _evaluate(model, obs, baseline, partition, coalitions) -> np.ndarray:
    outs = []
    for start in range(0, len(coalitions), EVAL_CHUNK):
        batch = mask_batch(obs, coalitions[start:start + EVAL_CHUNK], baseline, partition)
        outs.append(np.asarray(model(batch), dtype=float).reshape(len(batch), -1))
    return np.concatenate(outs) if outs else np.zeros((0, 0))


def all_coalitions(m: int) -> np.ndarray:
    """Every subset of m features as a (2**m, m) boolean array, bit j = feature j."""
    codes = np.arange(2**m, dtype=np.int64)
    return ((codes[:, None] >> np.arange(m)) & 1).astype(bool)


def shapley_kernel_weight(m: int, size) -> np.ndarray:
    size = np.asarray(size)
    return (m - 1) / (np.vectorize(math.comb)(m, size) * size * (m - size))


def _solve_constrained(z: np.ndarray, y: np.ndarray, w: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Weighted least squares for phi with sum(phi) = delta enforced exactly.

    The last feature is eliminated: phi_M = delta - sum(phi_1..M-1).
    """
    m = z.shape[1]
    if m == 1:
        return delta[None, :].copy()
    zf = z.astype(float)
    x = zf[:, :-1] - zf[:, -1:]
    target = y - zf[:, -1:] * delta[None, :]
    xtw = x.T * w
    a = xtw @ x
    rank = np.linalg.matrix_rank(a)
    if rank < m - 1:
        raise SingularCoalitionError(_degeneracy_report(z))
    head = np.linalg.solve(a, xtw @ target)
    last = delta - head.sum(axis=0)
    return np.vstack([head, last[None, :]])


def _degeneracy_report(z: np.ndarray) -> str:
    m = z.shape[1]
    always_in = [j for j in range(m) if z[:, j].all()]
    never_in = [j for j in range(m) if not z[:, j].any()]
    twins = []
    for i in range(m):
        for j in range(i + 1, m):
            if np.array_equal(z[:, i], z[:, j]):
                twins.append((i, j))
    return (f"singular coalition regression over {len(z)} coalitions: features always present {always_in}, "
            f"never present {never_in}, always toggled together {twins[:10]}")


def kernel_shap(model, obs, baseline, partition: FeaturePartition, n_samples: int = 4096, rng=None,
                mode: str = "auto") -> ShapResult:
    """Kernel-weighted regression estimate of region Shapley values.

    ``model`` maps a batch of observation stacks (n, C, H, W) to outputs
    (n, K). ``mode`` is ``"exhaustive"`` (every coalition, exact),
    ``"sampled"`` (paired coalitions drawn with kernel-proportional sizes)
    or ``"auto"`` (exhaustive whenever 2**M <= 2**20).
    """
    m = partition.n_regions
    if m < 1:
        raise ValueError("partition has no regions")
    if mode == "auto":
        mode = "exhaustive" if m <= EXHAUSTIVE_LIMIT else "sampled"
    ends = np.vstack([np.zeros(m, bool), np.ones(m, bool)])
    base, full = _evaluate(model, obs, baseline, partition, ends)
    delta = full - base

    if m == 1:
        return ShapResult(delta[None, :].copy(), base, full, True, 2)

    if mode == "exhaustive":
        z = all_coalitions(m)[1:-1]
        w = shapley_kernel_weight(m, z.sum(axis=1))
        exhaustive = True
    elif mode == "sampled":
        if n_samples < 2 * m + 2:
            raise ValueError(f"n_samples must be >= 2M + 2 = {2 * m + 2}")
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        sizes = np.arange(1, m)
        p = (m - 1) / (sizes * (m - sizes))
        p /= p.sum()
        half = n_samples // 2
        drawn = rng.choice(sizes, size=half, p=p)
        z_half = np.zeros((half, m), bool)
        for i, s in enumerate(drawn):
            z_half[i, rng.permutation(m)[:s]] = True
        z = np.vstack([z_half, ~z_half])
        w = np.ones(len(z))
        exhaustive = False
    else:
        raise ValueError(f"unknown mode {mode!r}")

    y = _evaluate(model, obs, baseline, partition, z) - base[None, :]
    phi = _solve_constrained(z, y, w, delta)
    return ShapResult(phi, base, full, exhaustive, len(z) + 2)


def exact_shapley(model, obs, baseline, partition: FeaturePartition) -> ShapResult:
    """Classic Shapley sum over all coalitions; feasible for M <= 20."""
    m = partition.n_regions
    if m > EXHAUSTIVE_LIMIT:
        raise ValueError(f"exact Shapley needs M <= {EXHAUSTIVE_LIMIT}, got {m}")
    z = all_coalitions(m)
    f = _evaluate(model, obs, baseline, partition, z)
    codes = np.arange(2**m)
    sizes = z.sum(axis=1)
    fact = [math.factorial(i) for i in range(m + 1)]
    weight = np.array([fact[s] * fact[m - s - 1] / fact[m] if s < m else 0.0 for s in range(m + 1)])
    phi = np.zeros((m, f.shape[1]))
    for j in range(m):
        bit = 1 << j
        without = codes[(codes & bit) == 0]
        phi[j] = (weight[sizes[without]][:, None] * (f[without | bit] - f[without])).sum(axis=0)
    return ShapResult(phi, f[0], f[-1], True, len(z))


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.floor(3 * sigma))
    i = np.arange(-radius, radius + 1)
    return np.exp(-(i * i) / (2 * sigma * sigma))


def _smooth_axis(grid: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    radius = len(kernel) // 2
    g = np.moveaxis(grid, axis, 0)
    n = g.shape[0]
    num = np.zeros_like(g)
    den = np.zeros((n,) + (1,) * (g.ndim - 1))
    for k, weight in enumerate(kernel):
        off = k - radius
        lo, hi = max(0, -off), min(n, n - off)
        if lo >= hi:
            continue
        num[lo:hi] += weight * g[lo + off:hi + off]
        den[lo:hi] += weight
    return np.moveaxis(num / den, 0, axis)


def gaussian_smooth(grid, sigma: float) -> np.ndarray:
    """Separable Gaussian blur truncated at 3 sigma; border kernels are renormalized."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    grid = np.asarray(grid, dtype=float)
    if sigma == 0:
        return grid.copy()
    kernel = gaussian_kernel(sigma)
    out = grid
    for axis in range(grid.ndim):
        out = _smooth_axis(out, kernel, axis)
    return out


def region_attention(result: ShapResult) -> np.ndarray:
    """Sum of |phi| over outputs, one value per region."""
    return np.abs(result.phi).sum(axis=1)


def attention_pipeline(shap_results: list[ShapResult], partition: FeaturePartition, sigma: float = 4.0,
                       timestep: int = -1) -> AttentionMap:
    """|phi| -> per-pixel broadcast -> smoothing, per agent; then the pixelwise mean."""
    if not shap_results:
        raise ValueError("need at least one agent's attributions")
    for r in shap_results:
        if r.phi.shape[0] != partition.n_regions:
            raise ValueError(f"attribution has {r.phi.shape[0]} regions, partition has {partition.n_regions}")
    maps = [gaussian_smooth(partition.broadcast(region_attention(r)), sigma) for r in shap_results]
    return AttentionMap(np.mean(maps, axis=0), sigma, len(shap_results), timestep)


def policy_mean_model(agent: ActorCritic):
    """Raw (unnormalized) observation stacks -> policy mean (n, 2)."""
    def model(stacks):
        return agent.policy_mean(normalize_stack(stacks, agent.obs_clip))
    return model


@dataclass
class TimestepExplanation:
    timestep: int
    position: np.ndarray
    observation: FlowImage
    shap: list[ShapResult]
    attention: AttentionMap
    agent_maps: list[AttentionMap]


def rollout_observations(agent: ActorCritic, tunnel: TunnelSpec, seed, camera: CameraModel | None = None,
                         deterministic: bool = True, max_steps: int | None = None):
    """Fly one episode with ``agent``; returns [(step, position, FlowImage)] and the outcome."""
    camera = camera or CameraModel(agent.arch.width, agent.arch.height)
    env = TunnelEnv([tunnel], camera)
    rng = np.random.default_rng(seed)
    obs, state = env.reset(tunnel.id, seed=int(rng.integers(2**63)))
    records = [(0, state.position.copy(), obs)]
    outcome = "timeout"
    while max_steps is None or len(records) < max_steps:
        action, _, _ = agent.act(normalize_observation(obs, agent.obs_clip), rng, deterministic)
        result = env.step(action)
        if result.terminated or result.truncated:
            outcome = "crash" if result.info["crashed"] else "success" if result.info["succeeded"] else "timeout"
            break
        obs = result.observation
        records.append((env.state.steps, env.state.position.copy(), obs))
    return records, outcome


def collect_explanations(agents: list[ActorCritic], tunnel: TunnelSpec, designated: int = 0, seed=0,
                         partition: FeaturePartition | None = None, n_samples: int = 4096, sigma: float = 4.0,
                         deterministic: bool = True, max_steps: int | None = None, every: int = 1,
                         camera: CameraModel | None = None, mode: str = "auto") -> list[TimestepExplanation]:
    """Explain every recorded observation of the designated agent's flight under all agents."""
    if not agents:
        raise ValueError("need at least one agent")
    fp = agents[0].arch.fingerprint()
    for i, a in enumerate(agents):
        if a.arch.fingerprint() != fp:
            raise ValueError(f"agent {i} architecture {a.arch.fingerprint()} differs from agent 0 {fp}")
    arch = agents[0].arch
    partition = partition or FeaturePartition(arch.height, arch.width)
    records, _ = rollout_observations(agents[designated], tunnel, seed, camera, deterministic, max_steps)
    baseline = FlowImage.zeros(arch.height, arch.width)
    models = [policy_mean_model(a) for a in agents]
    rng = np.random.default_rng(seed)
    out = []
    for step, position, obs in records[::every]:
        results = [kernel_shap(m, obs, baseline, partition, n_samples, rng, mode) for m in models]
        per_agent = [attention_pipeline([r], partition, sigma, step) for r in results]
        combined = attention_pipeline(results, partition, sigma, step)
        combined.agents = list(range(len(agents)))
        out.append(TimestepExplanation(step, position, obs, results, combined, per_agent))
    return out


def obstacle_edge_boundaries(tunnel: TunnelSpec, position, camera: CameraModel,
                             max_distance: float = math.inf) -> list[float]:
    """Image x-coordinates (in pixels from the left border) of obstacle silhouette edges.

    An edge sits between neighbouring columns whose rays hit different
    surfaces with at least one of them an obstacle whose closest visible
    point lies within ``max_distance`` (horizontal meters).
    """
    depth, kinds, targets = render_columns(tunnel, position, camera)
    horiz = _horizontal_depth(depth, camera)
    obstacle = kinds == HitKind.OBSTACLE
    near_targets = [t for t in np.unique(targets[obstacle])
                    if horiz[obstacle & (targets == t)].min() <= max_distance]
    close = obstacle & np.isin(targets, near_targets)
    edges = []
    for c in range(1, len(kinds)):
        if (targets[c] != targets[c - 1] or kinds[c] != kinds[c - 1]) and (close[c] or close[c - 1]):
            edges.append(float(c))
    return edges


def _horizontal_depth(depth: np.ndarray, camera: CameraModel) -> np.ndarray:
    """Per-column horizontal hit distance recovered from the first image row."""
    u, v = camera.pixel_grid()
    h = np.sqrt(camera.fx**2 + u[0] ** 2)
    return depth[0] * h / np.sqrt(h**2 + v[0, 0] ** 2)


def nearest_visible_obstacle(tunnel: TunnelSpec, position, camera: CameraModel) -> float:
    """Horizontal distance to the closest obstacle any image column sees (inf if none)."""
    depth, kinds, _ = render_columns(tunnel, position, camera)
    hits = kinds == HitKind.OBSTACLE
    if not hits.any():
        return math.inf
    return float(_horizontal_depth(depth, camera)[hits].min())


def edge_band_mask(edges: list[float], shape: tuple[int, int], band_px: float) -> np.ndarray:
    """Pixels whose column center lies within ``band_px`` of any edge."""
    h, w = shape
    centers = np.arange(w) + 0.5
    near = np.zeros(w, bool)
    for e in edges:
        near |= np.abs(centers - e) <= band_px
    return np.broadcast_to(near[None, :], (h, w)).copy()


def edge_contrast(values: np.ndarray, mask: np.ndarray) -> tuple[float, float]:
    """(mean inside mask, mean outside mask)."""
    inside = values[mask]
    outside = values[~mask]
    return (float(inside.mean()) if inside.size else math.nan,
            float(outside.mean()) if outside.size else math.nan)
