"""Pinhole camera, depth rendering and geometric optic flow.

Pixel coordinates are centered: ``u`` grows to starboard, ``v`` grows
downward, and the render grid samples pixel centers
``u = col + 0.5 - W/2``, ``v = row + 0.5 - H/2`` so the image is exactly
left/right symmetric.

The flow matrix is applied as printed in the source formulation:

    u_dot = (fx/d) V1 - (u/d) V3 - (u v / fx) W1 - ((fx^2 + u^2)/fx) W2 - v W3
    v_dot = (fy/d) V2 - (v/d) V3 - ((fy^2 + u^2)/fy) W1 + (u v / fy) W2 + u W3

with ``V`` given along the camera axes (horizontal image axis, vertical
image axis, optical axis). For the forward-facing, never-rotating camera
used here that is ``V = (starboard, down, forward)`` in body terms; see
:func:`body_to_camera_velocity`.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .world import D_FAR, TunnelSpec, raycast_many

EPS_FLOW = 1e-8


@dataclass(frozen=True)
class CameraModel:
    width_px: int = 64
    height_px: int = 48
    fov_x: float = math.radians(120.0)

    def __post_init__(self):
        if self.width_px <= 0 or self.height_px <= 0:
            raise ValueError("camera resolution must be positive")
        if not 0 < self.fov_x < math.pi:
            raise ValueError("fov_x must lie in (0, pi)")

    @property
    def fx(self) -> float:
        return (self.width_px / 2) / math.tan(self.fov_x / 2)

    @property
    def fy(self) -> float:
        return self.fx

    @property
    def shape(self) -> tuple[int, int]:
        return self.height_px, self.width_px

    def pixel_grid(self) -> tuple[np.ndarray, np.ndarray]:
        """Centered (u, v) coordinates of every pixel center, each H x W."""
        u = np.arange(self.width_px) + 0.5 - self.width_px / 2
        v = np.arange(self.height_px) + 0.5 - self.height_px / 2
        return np.meshgrid(u, v)


@dataclass
class VelocityState:
    """Egomotion fed to the flow matrix.

    ``V`` (m/s) is ordered along the camera axes: image-horizontal
    (starboard), image-vertical (down), optical axis (forward). ``W`` is the
    angular velocity (rad/s); the agent-facing paths always pass zeros.
    """

    V: np.ndarray
    W: np.ndarray = None

    def __post_init__(self):
        self.V = np.asarray(self.V, dtype=float).reshape(3)
        self.W = np.zeros(3) if self.W is None else np.asarray(self.W, dtype=float).reshape(3)


def body_to_camera_velocity(forward: float, starboard: float, down: float = 0.0) -> np.ndarray:
    return np.array([starboard, down, forward], dtype=float)


@dataclass
class FlowImage:
    """Three-channel observation: magnitude and unit flow direction."""

    magnitude: np.ndarray
    dir_x: np.ndarray
    dir_y: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.magnitude.shape

    def stack(self) -> np.ndarray:
        """Channels-first (3, H, W) array."""
        return np.stack([self.magnitude, self.dir_x, self.dir_y])

    @classmethod
    def from_stack(cls, arr) -> FlowImage:
        arr = np.asarray(arr)
        return cls(arr[0].copy(), arr[1].copy(), arr[2].copy())

    @classmethod
    def zeros(cls, height: int, width: int) -> FlowImage:
        z = np.zeros((height, width))
        return cls(z, z.copy(), z.copy())

    def to_csv(self, path) -> None:
        h, w = self.shape
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["u", "v", "mag", "dir_x", "dir_y"])
            for row in range(h):
                for col in range(w):
                    writer.writerow([col, row, repr(float(self.magnitude[row, col])),
                                     repr(float(self.dir_x[row, col])), repr(float(self.dir_y[row, col]))])

    def to_pgm(self, prefix, mag_max: float | None = None) -> list[Path]:
        """Write ``<prefix>_mag.pgm``, ``<prefix>_dir_x.pgm``, ``<prefix>_dir_y.pgm``."""
        prefix = Path(prefix)
        hi = float(self.magnitude.max()) if mag_max is None else mag_max
        paths = []
        for name, grid, lo, top in (("mag", self.magnitude, 0.0, hi),
                                    ("dir_x", self.dir_x, -1.0, 1.0),
                                    ("dir_y", self.dir_y, -1.0, 1.0)):
            path = prefix.with_name(f"{prefix.name}_{name}.pgm")
            write_pgm(path, grid, lo, top)
            paths.append(path)
        return paths


def write_pgm(path, grid, lo: float | None = None, hi: float | None = None) -> None:
    """8-bit binary portable graymap, linearly mapping [lo, hi] to [0, 255]."""
    grid = np.asarray(grid, dtype=float)
    lo = float(grid.min()) if lo is None else lo
    hi = float(grid.max()) if hi is None else hi
    span = hi - lo if hi > lo else 1.0
    img = np.clip(np.round((grid - lo) / span * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def pixel_ray(camera: CameraModel, u: float, v: float) -> np.ndarray:
    """Unit viewing direction of pixel (u, v) as (forward, starboard, down)."""
    ray = np.array([camera.fx, u, v], dtype=float)
    return ray / np.linalg.norm(ray)


def render_depth(tunnel: TunnelSpec, position, camera: CameraModel, d_far: float = D_FAR) -> np.ndarray:
    """Per-pixel slant distance d[v, u] from the drone to the scene.

    Walls and cylinders are vertical, so one horizontal raycast per image
    column serves the whole column; the slant distance of a pixel is that
    horizontal distance over the cosine of its elevation, capped at d_far.
    """
    depth, _, _ = render_columns(tunnel, position, camera, d_far)
    return depth


def render_columns(tunnel: TunnelSpec, position, camera: CameraModel, d_far: float = D_FAR):
    """Depth map plus the per-column hit kinds and targets."""
    u, v = camera.pixel_grid()
    u_row = u[0]
    horiz = np.stack([np.full_like(u_row, camera.fx), u_row], axis=1)
    horiz_norm = np.linalg.norm(horiz, axis=1)
    dist, kinds, targets = raycast_many(tunnel, position, horiz / horiz_norm[:, None], d_far)
    # cos(elevation) = |horizontal part| / |full ray|
    cos_el = horiz_norm[None, :] / np.sqrt(horiz_norm[None, :] ** 2 + v**2)
    depth = np.minimum(dist[None, :] / cos_el, d_far)
    return depth, kinds, targets


def flow_matrix(u: float, v: float, d: float, fx: float, fy: float) -> np.ndarray:
    """The 2x6 map from [V; W] to (u_dot, v_dot) at one pixel."""
    return np.array([
        [fx / d, 0.0, -u / d, -u * v / fx, -(fx**2 + u**2) / fx, -v],
        [0.0, fy / d, -v / d, -(fy**2 + u**2) / fy, u * v / fy, u],
    ])


def optic_flow(depth, vel: VelocityState, camera: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel image velocity (u_dot, v_dot) in px/s."""
    depth = np.asarray(depth, dtype=float)
    if depth.shape != camera.shape:
        raise ValueError(f"depth shape {depth.shape} does not match camera {camera.shape}")
    u, v = camera.pixel_grid()
    fx, fy = camera.fx, camera.fy
    V1, V2, V3 = vel.V
    W1, W2, W3 = vel.W
    u_dot = (fx / depth) * V1 - (u / depth) * V3 - (u * v / fx) * W1 - ((fx**2 + u**2) / fx) * W2 - v * W3
    v_dot = (fy / depth) * V2 - (v / depth) * V3 - ((fy**2 + u**2) / fy) * W1 + (u * v / fy) * W2 + u * W3
    return u_dot, v_dot


def encode_observation(u_dot, v_dot, eps: float = EPS_FLOW) -> FlowImage:
    u_dot = np.asarray(u_dot, dtype=float)
    v_dot = np.asarray(v_dot, dtype=float)
    mag = np.hypot(u_dot, v_dot)
    moving = mag > eps
    safe = np.where(moving, mag, 1.0)
    dir_x = np.where(moving, u_dot / safe, 0.0)
    dir_y = np.where(moving, v_dot / safe, 0.0)
    return FlowImage(mag, dir_x, dir_y)


def observe(tunnel: TunnelSpec, position, velocity_xy, camera: CameraModel) -> FlowImage:
    """Render the flow observation of a drone at ``position`` moving at ``velocity_xy``.

    ``velocity_xy`` is (forward, starboard) in m/s; the body frame is aligned
    with the global frame because the drone never yaws.
    """
    depth = render_depth(tunnel, position, camera)
    vel = VelocityState(body_to_camera_velocity(velocity_xy[0], velocity_xy[1]))
    return encode_observation(*optic_flow(depth, vel, camera))


def normalize_observation(obs: FlowImage, mag_clip: float, dtype=np.float32) -> np.ndarray:
    """Network input: magnitude clipped at ``mag_clip`` and scaled to [0, 1]."""
    out = np.empty((3,) + obs.shape, dtype=dtype)
    out[0] = np.minimum(obs.magnitude, mag_clip) / mag_clip
    out[1] = obs.dir_x
    out[2] = obs.dir_y
    return out


def normalize_stack(stacks, mag_clip: float, dtype=np.float32) -> np.ndarray:
    """Batched :func:`normalize_observation` over (..., 3, H, W) arrays."""
    stacks = np.asarray(stacks)
    out = stacks.astype(dtype, copy=True)
    out[..., 0, :, :] = np.minimum(stacks[..., 0, :, :], mag_clip) / mag_clip
    return out
