"""Policy and value networks with hand-written backpropagation.

Both networks share one layer stack::

    conv (k x k, stride s, no padding) -> ReLU -> dense -> tanh -> dense

The policy head emits the 2-D Gaussian mean; a state-independent log-std
vector completes the distribution. The value head emits one scalar.

Parameter layout (also the checkpoint order)::

    conv_w (F, C, k, k), conv_b (F,), fc_w (Ho*Wo*F, hidden), fc_b (hidden,),
    out_w (hidden, n_out), out_b (n_out,)[, log_std (2,)]

The conv feature map is flattened channels-last, i.e. index
``(row * Wo + col) * F + channel``.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
LOG_STD_INIT = math.log(0.5)
ACTION_DIM = 2

PARAM_ORDER = ("conv_w", "conv_b", "fc_w", "fc_b", "out_w", "out_b")


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class Architecture:
    height: int = 48
    width: int = 64
    in_channels: int = 3
    conv_channels: int = 8
    kernel: int = 8
    stride: int = 4
    hidden: int = 64

    def __post_init__(self):
        if self.kernel > min(self.height, self.width):
            raise ValueError(f"kernel {self.kernel} larger than input {self.height}x{self.width}")
        if min(self.in_channels, self.conv_channels, self.kernel, self.stride, self.hidden) <= 0:
            raise ValueError("architecture sizes must be positive")

    @property
    def conv_out(self) -> tuple[int, int]:
        return ((self.height - self.kernel) // self.stride + 1,
                (self.width - self.kernel) // self.stride + 1)

    @property
    def flat_features(self) -> int:
        ho, wo = self.conv_out
        return ho * wo * self.conv_channels

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return self.in_channels, self.height, self.width

    def fingerprint(self) -> tuple[int, ...]:
        return (self.height, self.width, self.in_channels, self.conv_channels,
                self.kernel, self.stride, self.hidden, ACTION_DIM, 1)

    def param_shapes(self, n_out: int) -> dict[str, tuple[int, ...]]:
        return {
            "conv_w": (self.conv_channels, self.in_channels, self.kernel, self.kernel),
            "conv_b": (self.conv_channels,),
            "fc_w": (self.flat_features, self.hidden),
            "fc_b": (self.hidden,),
            "out_w": (self.hidden, n_out),
            "out_b": (n_out,),
        }


def _orthogonal(rng, rows: int, cols: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def init_params(arch: Architecture, n_out: int, rng, out_gain: float, dtype=np.float32) -> dict[str, np.ndarray]:
    """Orthogonal init (gain sqrt 2 on hidden layers, ``out_gain`` on the head), zero biases."""
    shapes = arch.param_shapes(n_out)
    fan_in = arch.in_channels * arch.kernel * arch.kernel
    conv = _orthogonal(rng, arch.conv_channels, fan_in, math.sqrt(2)).reshape(shapes["conv_w"])
    params = {
        "conv_w": conv,
        "conv_b": np.zeros(shapes["conv_b"]),
        "fc_w": _orthogonal(rng, arch.flat_features, arch.hidden, math.sqrt(2)),
        "fc_b": np.zeros(shapes["fc_b"]),
        "out_w": _orthogonal(rng, arch.hidden, n_out, out_gain),
        "out_b": np.zeros(shapes["out_b"]),
    }
    return {k: v.astype(dtype) for k, v in params.items()}


def init_policy(arch: Architecture, rng, dtype=np.float32) -> dict[str, np.ndarray]:
    params = init_params(arch, ACTION_DIM, rng, 0.01, dtype)
    params["log_std"] = np.full(ACTION_DIM, LOG_STD_INIT, dtype=dtype)
    return params


def init_value(arch: Architecture, rng, dtype=np.float32) -> dict[str, np.ndarray]:
    return init_params(arch, 1, rng, 1.0, dtype)


def zeros_like_params(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.items()}


def _patches(x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    # (N, C, H, W) -> (N, Ho, Wo, C*k*k)
    win = sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho, wo, c * kernel * kernel)


@dataclass
class ForwardCache:
    patches: np.ndarray
    z1: np.ndarray
    h1: np.ndarray
    h2: np.ndarray


def forward(params: dict[str, np.ndarray], x, stride: int = 4,
            patches: np.ndarray | None = None) -> tuple[np.ndarray, ForwardCache]:
    """Run the shared stack on a batch (N, C, H, W); returns the head output (N, n_out).

    ``patches`` may carry a precomputed im2col of ``x`` (see :func:`_patches`).
    """
    x = np.asarray(x)
    conv_w = params["conv_w"]
    f, c, k, _ = conv_w.shape
    if x.ndim != 4 or x.shape[1] != c:
        raise ValueError(f"expected input (N, {c}, H, W), got {x.shape}")
    ho_wo_f = params["fc_w"].shape[0]
    if x.shape[2] < k or x.shape[3] < k:
        raise ValueError(f"input {x.shape[2:]} smaller than the {k}x{k} kernel")
    if patches is None:
        patches = _patches(x, k, stride)
    n = x.shape[0]
    if patches.shape[1] * patches.shape[2] * f != ho_wo_f:
        raise ValueError(f"input {x.shape[2:]} does not match parameters ({ho_wo_f} conv features)")
    z1 = patches @ conv_w.reshape(f, -1).T + params["conv_b"]
    h1 = np.maximum(z1, 0).reshape(n, -1)
    h2 = np.tanh(h1 @ params["fc_w"] + params["fc_b"])
    out = h2 @ params["out_w"] + params["out_b"]
    return out, ForwardCache(patches, z1, h1, h2)


def backward(params: dict[str, np.ndarray], cache: ForwardCache | None, d_out) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss given dLoss/d(head output), shape (N, n_out)."""
    if cache is None:
        raise ValueError("backward called without a cached forward pass")
    d_out = np.asarray(d_out, dtype=cache.h2.dtype)
    grads = {
        "out_w": cache.h2.T @ d_out,
        "out_b": d_out.sum(axis=0),
    }
    dz2 = (d_out @ params["out_w"].T) * (1.0 - cache.h2**2)
    grads["fc_w"] = cache.h1.T @ dz2
    grads["fc_b"] = dz2.sum(axis=0)
    dz1 = (dz2 @ params["fc_w"].T).reshape(cache.z1.shape) * (cache.z1 > 0)
    f = params["conv_w"].shape[0]
    dz1 = dz1.reshape(-1, f)
    grads["conv_w"] = (cache.patches.reshape(dz1.shape[0], -1).T @ dz1).T.reshape(params["conv_w"].shape)
    grads["conv_b"] = dz1.sum(axis=0)
    return grads


@dataclass
class GaussianActionDist:
    mean: np.ndarray
    std: np.ndarray

    @property
    def log_std(self) -> np.ndarray:
        return np.log(self.std)

    def log_prob(self, action) -> np.ndarray:
        return gaussian_log_prob(action, self.mean, np.log(self.std))

    def entropy(self) -> float:
        return float(np.sum(np.log(self.std)) + 0.5 * self.mean.shape[-1] * math.log(2 * math.pi * math.e))


def gaussian_log_prob(action, mean, log_std) -> np.ndarray:
    z = (np.asarray(action) - mean) * np.exp(-log_std)
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(log_std, axis=-1) - 0.5 * mean.shape[-1] * math.log(2 * math.pi)


def clamped_log_std(params) -> np.ndarray:
    return np.clip(params["log_std"], LOG_STD_MIN, LOG_STD_MAX)


def _batch(obs) -> tuple[np.ndarray, bool]:
    x = np.asarray(obs)
    if x.ndim == 3:
        return x[None], True
    return x, False


def policy_forward(params: dict[str, np.ndarray], obs, stride: int = 4) -> GaussianActionDist:
    """Action distribution for one normalized observation (3, H, W) or a batch."""
    x, single = _batch(obs)
    mean, _ = forward(params, x, stride)
    std = np.exp(clamped_log_std(params))
    if single:
        mean = mean[0]
    return GaussianActionDist(mean, np.broadcast_to(std, mean.shape).copy())


def value_forward(params: dict[str, np.ndarray], obs, stride: int = 4):
    x, single = _batch(obs)
    out, _ = forward(params, x, stride)
    v = out[:, 0]
    return float(v[0]) if single else v


def sample_action(dist: GaussianActionDist, rng) -> tuple[np.ndarray, float]:
    """Draw from the diagonal Gaussian; the log-prob refers to the unclamped draw."""
    action = dist.mean + dist.std * rng.standard_normal(dist.mean.shape)
    return action, float(dist.log_prob(action))


class ActorCritic:
    """Policy and value parameters of one agent, plus batched forward/backward.

    Keys of :attr:`params` are ``pi.<name>`` and ``vf.<name>``.
    """

    def __init__(self, arch: Architecture, policy: dict, value: dict, obs_clip: float = 1.0):
        self.arch = arch
        self.policy = policy
        self.value = value
        self.obs_clip = float(obs_clip)

    @classmethod
    def create(cls, arch: Architecture, seed, obs_clip: float = 1.0, dtype=np.float32) -> ActorCritic:
        rng = np.random.default_rng(seed)
        return cls(arch, init_policy(arch, rng, dtype), init_value(arch, rng, dtype), obs_clip)

    @property
    def params(self) -> dict[str, np.ndarray]:
        out = {f"pi.{k}": v for k, v in self.policy.items()}
        out.update({f"vf.{k}": v for k, v in self.value.items()})
        return out

    def copy(self) -> ActorCritic:
        return ActorCritic(self.arch, {k: v.copy() for k, v in self.policy.items()},
                           {k: v.copy() for k, v in self.value.items()}, self.obs_clip)

    def forward(self, x):
        """Batched pass: returns (mean (N,2), log_std (2,), value (N,), cache)."""
        x = np.asarray(x)
        patches = _patches(x, self.arch.kernel, self.arch.stride) if x.ndim == 4 else None
        mean, pc = forward(self.policy, x, self.arch.stride, patches)
        value, vc = forward(self.value, x, self.arch.stride, patches)
        return mean, clamped_log_std(self.policy), value[:, 0], (pc, vc)

    def backward(self, cache, d_mean, d_log_std, d_value) -> dict[str, np.ndarray]:
        if cache is None:
            raise ValueError("backward called without a cached forward pass")
        pc, vc = cache
        grads = {f"pi.{k}": g for k, g in backward(self.policy, pc, d_mean).items()}
        raw = self.policy["log_std"]
        inside = (raw >= LOG_STD_MIN) & (raw <= LOG_STD_MAX)
        grads["pi.log_std"] = np.where(inside, d_log_std, 0.0).astype(raw.dtype)
        d_value = np.asarray(d_value).reshape(-1, 1)
        grads.update({f"vf.{k}": g for k, g in backward(self.value, vc, d_value).items()})
        return grads

    def apply_constraints(self) -> None:
        np.clip(self.policy["log_std"], LOG_STD_MIN, LOG_STD_MAX, out=self.policy["log_std"])

    def act(self, obs_norm, rng=None, deterministic: bool = False) -> tuple[np.ndarray, float, float]:
        """(action, log_prob, value) for a single normalized observation."""
        x = obs_norm[None]
        mean, log_std, value, _ = self.forward(x)
        dist = GaussianActionDist(mean[0], np.exp(log_std))
        if deterministic:
            return dist.mean.astype(float), float(dist.log_prob(dist.mean)), float(value[0])
        action, logp = sample_action(dist, rng)
        return action.astype(float), logp, float(value[0])

    def policy_mean(self, x) -> np.ndarray:
        out, _ = forward(self.policy, x, self.arch.stride)
        return out


MAGIC = b"BNAV"
VERSION = 1
_HEADER = struct.Struct("<4sI9Id")


def serialize(agent: ActorCritic) -> bytes:
    """Checkpoint bytes: header, little-endian float32 parameters, CRC-32 trailer.

    Header: magic ``BNAV``, version (u32), fingerprint (9 x u32: height,
    width, in_channels, conv_channels, kernel, stride, hidden, policy outputs,
    value outputs), magnitude clip (f64). Parameters follow in
    :data:`PARAM_ORDER` for the policy, then ``log_std``, then the value
    network in :data:`PARAM_ORDER`.
    """
    header = _HEADER.pack(MAGIC, VERSION, *agent.arch.fingerprint(), agent.obs_clip)
    body = b"".join(
        np.ascontiguousarray(arr, dtype="<f4").tobytes()
        for arr in _ordered(agent.policy, agent.value)
    )
    payload = header + body
    return payload + struct.pack("<I", zlib.crc32(payload))


def _ordered(policy, value):
    for k in PARAM_ORDER:
        yield policy[k]
    yield policy["log_std"]
    for k in PARAM_ORDER:
        yield value[k]


def deserialize(data: bytes, expect: Architecture | None = None) -> ActorCritic:
    if len(data) < _HEADER.size + 4:
        raise CheckpointError("checkpoint truncated (header incomplete)")
    magic, version, *fp, obs_clip = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    h, w, c, f, k, s, hid, n_pi, n_vf = fp
    if (n_pi, n_vf) != (ACTION_DIM, 1):
        raise CheckpointError(f"unexpected head sizes {n_pi}, {n_vf}")
    try:
        arch = Architecture(h, w, c, f, k, s, hid)
    except ValueError as exc:
        raise CheckpointError(f"invalid architecture in header: {exc}") from None
    if expect is not None and expect.fingerprint() != arch.fingerprint():
        raise CheckpointError(f"architecture mismatch: checkpoint {arch.fingerprint()} vs expected {expect.fingerprint()}")
    pi_shapes = arch.param_shapes(ACTION_DIM)
    vf_shapes = arch.param_shapes(1)
    shapes = [pi_shapes[k] for k in PARAM_ORDER] + [(ACTION_DIM,)] + [vf_shapes[k] for k in PARAM_ORDER]
    n_floats = sum(int(np.prod(sh)) for sh in shapes)
    expected_len = _HEADER.size + 4 * n_floats + 4
    if len(data) != expected_len:
        raise CheckpointError(f"checkpoint size {len(data)} bytes, expected {expected_len} (truncated or corrupt)")
    (crc,) = struct.unpack_from("<I", data, expected_len - 4)
    if crc != zlib.crc32(data[: expected_len - 4]):
        raise CheckpointError("checkpoint checksum mismatch (corrupt file)")
    flat = np.frombuffer(data, dtype="<f4", count=n_floats, offset=_HEADER.size)
    arrays = []
    pos = 0
    for sh in shapes:
        size = int(np.prod(sh))
        arrays.append(flat[pos:pos + size].reshape(sh).astype(np.float32))
        pos += size
    policy = dict(zip(PARAM_ORDER, arrays[:6]))
    policy["log_std"] = arrays[6]
    value = dict(zip(PARAM_ORDER, arrays[7:]))
    return ActorCritic(arch, policy, value, obs_clip)


def save_checkpoint(agent: ActorCritic, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(agent))


def load_checkpoint(path, expect: Architecture | None = None) -> ActorCritic:
    with open(path, "rb") as fh:
        return deserialize(fh.read(), expect)
