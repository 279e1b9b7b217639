"""Analytic tunnel world: straight walls plus vertical cylinders.

Coordinates are global meters. +x runs along the tunnel (travel direction),
+y points to starboard, walls sit at ``y = +-width/2``. Cylinders have
infinite height, so every query is two-dimensional.
"""

from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

D_FAR = 50.0
BODY_RADIUS = 0.3
START_ZONE_FRACTION = 0.05


class OccupiedOriginError(ValueError):
    pass


class TunnelFormatError(ValueError):
    pass


class HitKind(enum.IntEnum):
    WALL = 0
    OBSTACLE = 1
    FAR_PLANE = 2


@dataclass(frozen=True)
class Obstacle:
    center: tuple[float, float]
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError(f"obstacle radius must be positive, got {self.radius}")
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))


@dataclass(frozen=True)
class TunnelSpec:
    id: int
    length: float
    width: float
    obstacles: tuple[Obstacle, ...] = field(default_factory=tuple)
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        if not self.length > 0:
            raise ValueError(f"tunnel length must be positive, got {self.length}")
        if not self.width > 0:
            raise ValueError(f"tunnel width must be positive, got {self.width}")
        half = self.width / 2
        for ob in self.obstacles:
            x, y = ob.center
            if not (0 < x < self.length and -half < y < half):
                raise ValueError(f"obstacle center {ob.center} outside tunnel footprint")
            if not ob.radius < half:
                raise ValueError(f"obstacle radius {ob.radius} must be below width/2 = {half}")

    @property
    def half_width(self) -> float:
        return self.width / 2

    def obstacle_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Centers as an (n, 2) array and radii as (n,)."""
        if not self.obstacles:
            return np.zeros((0, 2)), np.zeros(0)
        centers = np.array([ob.center for ob in self.obstacles], dtype=float)
        radii = np.array([ob.radius for ob in self.obstacles], dtype=float)
        return centers, radii


@dataclass(frozen=True)
class RayHit:
    distance: float
    hit_kind: HitKind
    # index into tunnel.obstacles for obstacle hits, 0/1 for the port/starboard wall, -1 otherwise
    target: int = -1


def in_free_space(tunnel: TunnelSpec, point) -> bool:
    x, y = float(point[0]), float(point[1])
    if not abs(y) < tunnel.half_width:
        return False
    for ob in tunnel.obstacles:
        if math.hypot(x - ob.center[0], y - ob.center[1]) <= ob.radius:
            return False
    return True


def raycast_many(tunnel: TunnelSpec, origin, directions, d_far: float = D_FAR):
    """Cast a fan of rays from one origin.

    ``directions`` is an (n, 2) array of unit vectors. Returns
    ``(distances, kinds, targets)`` arrays of length n; ``targets`` holds the
    obstacle index for obstacle hits, 0 (port, y = -w/2) or 1 (starboard)
    for wall hits and -1 for far-plane rays.
    """
    if not in_free_space(tunnel, origin):
        raise OccupiedOriginError("ray from occupied point")
    ox, oy = float(origin[0]), float(origin[1])
    dirs = np.asarray(directions, dtype=float).reshape(-1, 2)
    dx, dy = dirs[:, 0], dirs[:, 1]
    n = len(dirs)

    best = np.full(n, np.inf)
    kinds = np.full(n, int(HitKind.FAR_PLANE))
    targets = np.full(n, -1)

    half = tunnel.half_width
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        t_star = np.where(dy > 0, (half - oy) / dy, np.inf)
        t_port = np.where(dy < 0, (-half - oy) / dy, np.inf)
    for t_wall, side in ((t_port, 0), (t_star, 1)):
        closer = t_wall < best
        best = np.where(closer, t_wall, best)
        kinds = np.where(closer, int(HitKind.WALL), kinds)
        targets = np.where(closer, side, targets)

    centers, radii = tunnel.obstacle_arrays()
    for k in range(len(radii)):
        ocx, ocy = centers[k, 0] - ox, centers[k, 1] - oy
        b = dx * ocx + dy * ocy
        c = ocx * ocx + ocy * ocy - radii[k] ** 2
        disc = b * b - c
        hit = disc >= 0
        t = np.where(hit, b - np.sqrt(np.where(hit, disc, 0.0)), np.inf)
        t = np.where(t > 0, t, np.inf)
        closer = t < best
        best = np.where(closer, t, best)
        kinds = np.where(closer, int(HitKind.OBSTACLE), kinds)
        targets = np.where(closer, k, targets)

    far = best >= d_far
    best = np.where(far, d_far, best)
    kinds = np.where(far, int(HitKind.FAR_PLANE), kinds)
    targets = np.where(far, -1, targets)
    return best, kinds, targets


def raycast(tunnel: TunnelSpec, origin, direction, d_far: float = D_FAR) -> RayHit:
    """Nearest surface along a single unit-direction ray."""
    direction = np.asarray(direction, dtype=float)
    if abs(float(np.hypot(direction[0], direction[1])) - 1.0) > 1e-9:
        raise ValueError("ray direction must be a unit vector")
    dist, kinds, targets = raycast_many(tunnel, origin, direction[None, :], d_far)
    return RayHit(float(dist[0]), HitKind(int(kinds[0])), int(targets[0]))


def clearance(tunnel: TunnelSpec, position) -> float:
    """Signed distance from ``position`` to the nearest wall line or cylinder boundary."""
    x, y = float(position[0]), float(position[1])
    best = tunnel.half_width - abs(y)
    for ob in tunnel.obstacles:
        best = min(best, math.hypot(x - ob.center[0], y - ob.center[1]) - ob.radius)
    return best


def check_collision(tunnel: TunnelSpec, position, body_radius: float = BODY_RADIUS) -> bool:
    return clearance(tunnel, position) < body_radius


def sample_start(tunnel: TunnelSpec, rng_seed=None, body_radius: float = BODY_RADIUS) -> tuple[float, float]:
    """Random collision-free start inside the first 5% of the tunnel.

    ``rng_seed`` may be an int, ``None`` or a ``numpy.random.Generator``
    (consumed in place).
    """
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    x_hi = START_ZONE_FRACTION * tunnel.length
    y_lim = tunnel.half_width - body_radius
    if y_lim <= 0:
        raise ValueError(f"tunnel {tunnel.id} is narrower than the drone")
    while True:
        x = float(rng.uniform(0.0, x_hi))
        y = float(rng.uniform(-y_lim, y_lim))
        if not check_collision(tunnel, (x, y), body_radius):
            return x, y


def free_interval(tunnel: TunnelSpec, x: float, y: float) -> tuple[float, float]:
    """The open y-interval of free space at station ``x`` that contains ``y``.

    Obstacle chords at ``x`` split the wall-to-wall span; if ``y`` lies inside
    a chord, the chord itself is returned.
    """
    cuts = []
    for ob in tunnel.obstacles:
        dx = x - ob.center[0]
        if abs(dx) < ob.radius:
            h = math.sqrt(ob.radius**2 - dx * dx)
            cuts.append((ob.center[1] - h, ob.center[1] + h))
    lo, hi = -tunnel.half_width, tunnel.half_width
    for a, b in sorted(cuts):
        if a <= y <= b:
            return a, b
        if b < y:
            lo = max(lo, b)
        elif a > y:
            hi = min(hi, a)
    return lo, hi


def lateral_offset(tunnel: TunnelSpec, position) -> float:
    """Absolute distance from the centerline of the free gap the drone is in."""
    lo, hi = free_interval(tunnel, float(position[0]), float(position[1]))
    return abs(float(position[1]) - 0.5 * (lo + hi))


def _spec(id, name, length, width, obstacles):
    return TunnelSpec(id, length, width, tuple(Obstacle((x, y), r) for x, y, r in obstacles), name)


_LIBRARY = (
    _spec(0, "easy", 20.0, 4.0, [(7.0, 1.0, 0.5), (13.5, -1.0, 0.5)]),
    _spec(1, "difficult", 25.0, 5.0, [(8.0, 0.0, 0.6), (14.0, 1.4, 0.5), (19.5, -1.4, 0.5)]),
    _spec(2, "easy-wide", 25.0, 6.0, [(9.0, -1.5, 0.7), (17.0, 1.5, 0.7)]),
    _spec(3, "difficult-narrow", 24.0, 4.5, [(7.0, 0.0, 0.5), (12.5, -1.1, 0.4), (18.0, 1.1, 0.4)]),
    _spec(4, "narrow", 20.0, 3.0, [(10.0, 0.7, 0.4)]),
    _spec(5, "slalom", 30.0, 5.5, [(8.0, 1.3, 0.8), (14.0, -1.3, 0.8), (20.0, 1.3, 0.8), (26.0, -1.3, 0.8)]),
)


def tunnel_library() -> list[TunnelSpec]:
    """The six built-in tunnels (widths 3-6 m, lengths 20-30 m)."""
    return list(_LIBRARY)


def corridor(width: float = 4.0, length: float = 20.0, id: int = 100) -> TunnelSpec:
    """Straight obstacle-free corridor, used for sanity training."""
    return TunnelSpec(id, length, width, (), "corridor")


def dump_tunnel(tunnel: TunnelSpec) -> str:
    lines = [
        f"id = {tunnel.id}",
        f"name = {tunnel.name}",
        f"length = {tunnel.length!r}",
        f"width = {tunnel.width!r}",
    ]
    for ob in tunnel.obstacles:
        lines.append(f"obstacle = {ob.center[0]!r}, {ob.center[1]!r}, {ob.radius!r}")
    return "\n".join(lines) + "\n"


def parse_tunnel(text: str, default_id: int = 0) -> TunnelSpec:
    """Parse the ``key = value`` tunnel format produced by :func:`dump_tunnel`.

    ``obstacle`` may repeat; ``obstacles`` accepts ``x,y,r; x,y,r; ...``.
    Lines starting with ``#`` are comments.
    """
    values: dict[str, str] = {}
    triples: list[tuple[float, float, float]] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise TunnelFormatError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            if key == "obstacle":
                triples.append(_triple(value))
            elif key == "obstacles":
                triples.extend(_triple(t) for t in value.split(";") if t.strip())
            elif key in ("id", "name", "length", "width"):
                values[key] = value
            else:
                raise TunnelFormatError(f"line {lineno}: unknown key {key!r}")
        except ValueError as exc:
            raise TunnelFormatError(f"line {lineno}: {exc}") from None
    for key in ("length", "width"):
        if key not in values:
            raise TunnelFormatError(f"missing key {key!r}")
    try:
        return _spec(
            int(values.get("id", default_id)),
            values.get("name", ""),
            float(values["length"]),
            float(values["width"]),
            triples,
        )
    except ValueError as exc:
        raise TunnelFormatError(str(exc)) from None


def _triple(text: str) -> tuple[float, float, float]:
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 3:
        raise ValueError(f"obstacle needs x, y, r; got {text!r}")
    return parts[0], parts[1], parts[2]


def load_tunnel(path) -> TunnelSpec:
    return parse_tunnel(Path(path).read_text())


def load_tunnel_dir(directory) -> list[TunnelSpec]:
    """Every ``*.tunnel`` file in ``directory``, sorted by id."""
    specs = [load_tunnel(p) for p in sorted(Path(directory).glob("*.tunnel"))]
    if not specs:
        raise FileNotFoundError(f"no *.tunnel files in {directory}")
    ids = [s.id for s in specs]
    if len(set(ids)) != len(ids):
        raise TunnelFormatError(f"duplicate tunnel ids in {directory}: {ids}")
    return sorted(specs, key=lambda s: s.id)


def library_hash(tunnels) -> str:
    h = hashlib.sha256()
    for t in tunnels:
        h.update(dump_tunnel(t).encode())
    return h.hexdigest()
