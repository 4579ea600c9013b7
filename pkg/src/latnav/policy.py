"""Fast latency-aware controller: a small tanh MLP with hand-written
reverse-mode gradients mapping (rays, robot state, delayed semantic feature,
latency metadata) to 30 relative-motion chunks, plus target selection,
control conversion, smoothing, the Gaussian exploration head, and the value
network.

Input layout (all float64):
    [0:64]    ray distances / RAY_MAX
    [64:67]   robot state (v_x / V_MAX, v_y / V_MAX, omega_z / W_MAX)
    [67:103]  semantic feature vector (zeroed when the packet is not ready)
    [103]     delta_t / 10 s
    [104:107] ego offset since reasoning anchor (dx/10, dy/10, dtheta/pi)
    [107]     packet-ready flag
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, fields
from typing import Optional, Sequence

import numpy as np

from .reasoner import FEATURE_DIM, SemanticPacket
from .se2 import MotionDelta, Pose2
from .world import CONTROL_DT, N_RAYS, RAY_MAX, V_MAX, V_MIN, W_MAX, Observation

CHUNKS = 30  # action chunks per prediction (3 s horizon at 10 Hz)
CHUNK_DT = 0.1
HIDDEN = 128

INPUT_DIM = N_RAYS + 3 + FEATURE_DIM + 1 + 3 + 1
VALUE_INPUT_DIM = N_RAYS + 3 + 2

RAY_OFF = 0
STATE_OFF = N_RAYS
FEATURE_OFF = STATE_OFF + 3
DELTA_T_OFF = FEATURE_OFF + FEATURE_DIM
EGO_OFF = DELTA_T_OFF + 1
READY_OFF = EGO_OFF + 3

DELTA_T_SCALE = 10.0
EGO_XY_SCALE = RAY_MAX

# per-step kinematic limits on emitted chunks
DX_MAX = V_MAX * CHUNK_DT
DY_MAX = V_MAX * CHUNK_DT
DTH_MAX = W_MAX * CHUNK_DT
CHUNK_LIMITS = np.array([DX_MAX, DY_MAX, DTH_MAX])

TARGET_INDEX = 10  # 1.0 s into a trajectory that starts at the current pose
TARGET_HORIZON = 1.0

LOG_STD_MIN, LOG_STD_MAX = -5.0, 1.0

SMOOTH_ALPHA = 0.6
LIN_ACC_MAX = 2.0  # m/s^2 per control tick
ANG_ACC_MAX = 3.0  # rad/s^2

PARAMS_MAGIC = b"LNPV"
PARAMS_VERSION = 1


@dataclass
class PolicyParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray
    log_std: np.ndarray  # (2,) for (v, omega)
    V1: np.ndarray
    c1: np.ndarray
    V2: np.ndarray
    c2: np.ndarray
    V3: np.ndarray
    c3: np.ndarray

    POLICY_KEYS = ("W1", "b1", "W2", "b2", "W3", "b3", "log_std")
    HEAD_KEYS = ("W2", "b2", "W3", "b3", "log_std")  # trainable under freeze
    VALUE_KEYS = ("V1", "c1", "V2", "c2", "V3", "c3")

    def copy(self) -> "PolicyParams":
        return PolicyParams(**{f.name: getattr(self, f.name).copy() for f in fields(self)})

    def clamp_log_std(self) -> None:
        np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX, out=self.log_std)


def init_params(rng: np.random.Generator) -> PolicyParams:
    def layer(nin, nout, scale=1.0):
        w = rng.normal(0.0, scale / math.sqrt(nin), size=(nin, nout))
        return w, np.zeros(nout)

    W1, b1 = layer(INPUT_DIM, HIDDEN)
    W2, b2 = layer(HIDDEN, HIDDEN)
    W3, b3 = layer(HIDDEN, 3 * CHUNKS, scale=0.01)
    V1, c1 = layer(VALUE_INPUT_DIM, HIDDEN)
    V2, c2 = layer(HIDDEN, HIDDEN)
    V3, c3 = layer(HIDDEN, 1, scale=0.01)
    return PolicyParams(
        W1=W1, b1=b1, W2=W2, b2=b2, W3=W3, b3=b3,
        log_std=np.full(2, math.log(0.3)),
        V1=V1, c1=c1, V2=V2, c2=c2, V3=V3, c3=c3,
    )


def assemble_input(
    obs: Observation,
    packet: SemanticPacket,
    delta_t: float,
    ego: MotionDelta,
) -> np.ndarray:
    x = np.zeros(INPUT_DIM)
    x[RAY_OFF:STATE_OFF] = np.asarray(obs.rays) / RAY_MAX
    vx, vy, wz = obs.robot_state
    x[STATE_OFF : STATE_OFF + 3] = (vx / V_MAX, vy / V_MAX, wz / W_MAX)
    if packet.ready and packet.result is not None:
        x[FEATURE_OFF:DELTA_T_OFF] = packet.result.feature
        x[DELTA_T_OFF] = delta_t / DELTA_T_SCALE
        x[READY_OFF] = 1.0
    x[EGO_OFF] = ego.dx / EGO_XY_SCALE
    x[EGO_OFF + 1] = ego.dy / EGO_XY_SCALE
    x[EGO_OFF + 2] = ego.dtheta / math.pi
    return x


def forward(params: PolicyParams, x: np.ndarray, return_cache: bool = False):
    """Evaluate the action network.  Returns chunks of shape (T, 3) for a
    single input or (B, T, 3) for a batch."""
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    if xb.shape[1] != params.W1.shape[0]:
        raise ValueError(f"input dim {xb.shape[1]} != network dim {params.W1.shape[0]}")
    h1 = np.tanh(xb @ params.W1 + params.b1)
    h2 = np.tanh(h1 @ params.W2 + params.b2)
    u = np.tanh(h2 @ params.W3 + params.b3)
    chunks = u.reshape(-1, CHUNKS, 3) * CHUNK_LIMITS
    if single:
        chunks = chunks[0]
    if return_cache:
        return chunks, (xb, h1, h2, u)
    return chunks


def backward(params: PolicyParams, cache, dchunks: np.ndarray) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of the action network w.r.t. its parameters for
    upstream gradient dL/dchunks."""
    xb, h1, h2, u = cache
    du = (np.atleast_3d(dchunks).reshape(-1, CHUNKS, 3) * CHUNK_LIMITS).reshape(-1, 3 * CHUNKS)
    dz3 = du * (1.0 - u * u)
    dW3 = h2.T @ dz3
    db3 = dz3.sum(axis=0)
    dh2 = dz3 @ params.W3.T
    dz2 = dh2 * (1.0 - h2 * h2)
    dW2 = h1.T @ dz2
    db2 = dz2.sum(axis=0)
    dh1 = dz2 @ params.W2.T
    dz1 = dh1 * (1.0 - h1 * h1)
    dW1 = xb.T @ dz1
    db1 = dz1.sum(axis=0)
    return {"W1": dW1, "b1": db1, "W2": dW2, "b2": db2, "W3": dW3, "b3": db3}


def value_forward(params: PolicyParams, vin: np.ndarray, return_cache: bool = False):
    single = vin.ndim == 1
    xb = np.atleast_2d(vin)
    if xb.shape[1] != params.V1.shape[0]:
        raise ValueError(f"value input dim {xb.shape[1]} != {params.V1.shape[0]}")
    h1 = np.tanh(xb @ params.V1 + params.c1)
    h2 = np.tanh(h1 @ params.V2 + params.c2)
    v = h2 @ params.V3 + params.c3
    out = v[:, 0]
    if single:
        out = float(out[0])
    if return_cache:
        return out, (xb, h1, h2)
    return out


def value_backward(params: PolicyParams, cache, dv: np.ndarray) -> dict[str, np.ndarray]:
    xb, h1, h2 = cache
    dv = np.atleast_1d(dv).reshape(-1, 1)
    dV3 = h2.T @ dv
    dc3 = dv.sum(axis=0)
    dh2 = dv @ params.V3.T
    dz2 = dh2 * (1.0 - h2 * h2)
    dV2 = h1.T @ dz2
    dc2 = dz2.sum(axis=0)
    dh1 = dz2 @ params.V2.T
    dz1 = dh1 * (1.0 - h1 * h1)
    dV1 = xb.T @ dz1
    dc1 = dz1.sum(axis=0)
    return {"V1": dV1, "c1": dc1, "V2": dV2, "c2": dc2, "V3": dV3, "c3": dc3}


def assemble_value_input(
    obs: Observation, goal_relative: Sequence[float]
) -> np.ndarray:
    vin = np.zeros(VALUE_INPUT_DIM)
    vin[:N_RAYS] = np.asarray(obs.rays) / RAY_MAX
    vx, vy, wz = obs.robot_state
    vin[N_RAYS : N_RAYS + 3] = (vx / V_MAX, vy / V_MAX, wz / W_MAX)
    vin[N_RAYS + 3] = goal_relative[0] / EGO_XY_SCALE
    vin[N_RAYS + 4] = goal_relative[1] / EGO_XY_SCALE
    return vin


def select_target(trajectory: Sequence[Pose2]) -> Pose2:
    """Pose one second ahead along a trajectory that starts at the current
    pose; shorter trajectories return the last pose."""
    idx = min(TARGET_INDEX, len(trajectory) - 1)
    return trajectory[idx]


def to_control(target: Pose2) -> tuple[float, float]:
    """Convert a 1 s-ahead body-frame target into (v, omega)."""
    v = min(max(target.x / TARGET_HORIZON, V_MIN), V_MAX)
    w = min(max(2.0 * math.atan2(target.y, target.x) / TARGET_HORIZON, -W_MAX), W_MAX)
    return (v, w)


def control_mean_and_grad(chunks: np.ndarray):
    """(v, omega) mean command from the chunk sequence plus its gradient
    w.r.t. the chunks (analytic, for the PPO surrogate)."""
    grad = np.zeros((2,) + chunks.shape)
    x = float(chunks[:TARGET_INDEX, 0].sum())
    y = float(chunks[:TARGET_INDEX, 1].sum())
    v_raw = x / TARGET_HORIZON
    w_raw = 2.0 * math.atan2(y, x) / TARGET_HORIZON
    v = min(max(v_raw, V_MIN), V_MAX)
    w = min(max(w_raw, -W_MAX), W_MAX)
    if V_MIN < v_raw < V_MAX:
        grad[0, :TARGET_INDEX, 0] = 1.0 / TARGET_HORIZON
    r2 = x * x + y * y
    if -W_MAX < w_raw < W_MAX and r2 > 1e-12:
        grad[1, :TARGET_INDEX, 0] = -2.0 * y / r2 / TARGET_HORIZON
        grad[1, :TARGET_INDEX, 1] = 2.0 * x / r2 / TARGET_HORIZON
    return (v, w), grad


def smooth(
    previous: tuple[float, float],
    desired: tuple[float, float],
    alpha: float = SMOOTH_ALPHA,
    dt: float = CONTROL_DT,
) -> tuple[float, float]:
    """Exponential blend toward the desired command, rate-limited by the
    maximum accelerations per control tick."""
    out = []
    for prev, des, acc in zip(previous, desired, (LIN_ACC_MAX, ANG_ACC_MAX)):
        blended = alpha * des + (1.0 - alpha) * prev
        step = acc * dt
        out.append(min(max(blended, prev - step), prev + step))
    return (out[0], out[1])


def sample_action(
    mean: tuple[float, float], log_std: np.ndarray, rng: np.random.Generator
) -> tuple[float, float]:
    std = np.exp(np.clip(log_std, LOG_STD_MIN, LOG_STD_MAX))
    a = np.asarray(mean) + std * rng.standard_normal(2)
    return (float(a[0]), float(a[1]))


def log_prob(
    mean: Sequence[float], log_std: np.ndarray, action: Sequence[float]
) -> float:
    std = np.exp(np.clip(log_std, LOG_STD_MIN, LOG_STD_MAX))
    z = (np.asarray(action) - np.asarray(mean)) / std
    return float(-0.5 * np.sum(z * z) - np.sum(np.log(std)) - math.log(2.0 * math.pi))


def log_prob_grads(
    mean: Sequence[float], log_std: np.ndarray, action: Sequence[float]
) -> tuple[np.ndarray, np.ndarray]:
    """d log_prob / d mean and d log_prob / d log_std."""
    std = np.exp(np.clip(log_std, LOG_STD_MIN, LOG_STD_MAX))
    diff = np.asarray(action) - np.asarray(mean)
    dmean = diff / (std * std)
    dlog_std = diff * diff / (std * std) - 1.0
    return dmean, dlog_std


def entropy(log_std: np.ndarray) -> float:
    std_clipped = np.clip(log_std, LOG_STD_MIN, LOG_STD_MAX)
    return float(np.sum(std_clipped + 0.5 * math.log(2.0 * math.pi * math.e)))


_ARRAY_ORDER = (
    "W1", "b1", "W2", "b2", "W3", "b3", "log_std",
    "V1", "c1", "V2", "c2", "V3", "c3",
)


def save_params(params: PolicyParams, path: str) -> None:
    header = struct.pack(
        "<4sIIIII",
        PARAMS_MAGIC,
        PARAMS_VERSION,
        INPUT_DIM,
        HIDDEN,
        CHUNKS,
        VALUE_INPUT_DIM,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for name in _ARRAY_ORDER:
            arr = np.ascontiguousarray(getattr(params, name), dtype=np.float64)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_params(path: str) -> PolicyParams:
    with open(path, "rb") as fh:
        magic, version, in_dim, hidden, chunks, val_in = struct.unpack(
            "<4sIIIII", fh.read(24)
        )
        if magic != PARAMS_MAGIC or version != PARAMS_VERSION:
            raise ValueError(f"unrecognized parameter file {path!r}")
        if (in_dim, hidden, chunks, val_in) != (INPUT_DIM, HIDDEN, CHUNKS, VALUE_INPUT_DIM):
            raise ValueError(
                f"parameter file dimensions {(in_dim, hidden, chunks, val_in)} do not "
                f"match this build {(INPUT_DIM, HIDDEN, CHUNKS, VALUE_INPUT_DIM)}"
            )
        arrays = {}
        for name in _ARRAY_ORDER:
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            count = int(np.prod(shape))
            arrays[name] = np.frombuffer(fh.read(8 * count), dtype=np.float64).reshape(shape).copy()
    return PolicyParams(**arrays)
