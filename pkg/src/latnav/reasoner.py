"""Slow asynchronous guidance: grid A* waypoint planning over delayed world
snapshots, a compact semantic feature encoding, virtual-time compute latency,
and the single-writer stale cache consumed by the fast controller.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .se2 import MotionDelta, Pose2, displacement_in_frame, transform_points
from .world import RAY_MAX, SIM_HZ, StaticMap, WorldSnapshot

WAYPOINT_COUNT = 8
WAYPOINT_SPACING = 1.0
HIST_BINS = 16
FEATURE_DIM = 2 * WAYPOINT_COUNT + HIST_BINS + 4  # waypoints, histogram, goal dir+dist, flag
GOAL_DIST_NORM = 3.0 * RAY_MAX

SQRT2 = math.sqrt(2.0)


def _nearest_free_cell(m: StaticMap, x: float, y: float, max_radius_cells: int = 6):
    free = m.free_component()
    ix, iy = m.cell_of(x, y)
    ix = min(max(ix, 0), m.width - 1)
    iy = min(max(iy, 0), m.height - 1)
    if free[iy, ix]:
        return (ix, iy)
    best = None
    best_d = math.inf
    for dy in range(-max_radius_cells, max_radius_cells + 1):
        for dx in range(-max_radius_cells, max_radius_cells + 1):
            jx, jy = ix + dx, iy + dy
            if 0 <= jx < m.width and 0 <= jy < m.height and free[jy, jx]:
                d = dx * dx + dy * dy
                if d < best_d:
                    best_d = d
                    best = (jx, jy)
    return best


def plan_astar(
    m: StaticMap, start: Sequence[float], goal: Sequence[float]
) -> list[tuple[float, float]]:
    """8-connected A* on the robot-radius-inflated grid.  Returns cell-center
    points from start to goal, or [] when unreachable."""
    s = _nearest_free_cell(m, start[0], start[1])
    g = _nearest_free_cell(m, goal[0], goal[1])
    if s is None or g is None:
        return []
    free = ~m.inflated()
    res = m.resolution

    def heuristic(c):
        dx = abs(c[0] - g[0])
        dy = abs(c[1] - g[1])
        return res * (max(dx, dy) + (SQRT2 - 1.0) * min(dx, dy))

    dist = {s: 0.0}
    parent = {s: None}
    pq = [(heuristic(s), 0.0, s)]
    closed = set()
    while pq:
        f, d, c = heapq.heappop(pq)
        if c in closed:
            continue
        if c == g:
            break
        closed.add(c)
        cx, cy = c
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                if dx == 0 and dy == 0:
                    continue
                nx, ny = cx + dx, cy + dy
                if not (0 <= nx < m.width and 0 <= ny < m.height) or not free[ny, nx]:
                    continue
                if dx != 0 and dy != 0:
                    # no corner cutting
                    if not (free[cy, nx] and free[ny, cx]):
                        continue
                    step = res * SQRT2
                else:
                    step = res
                nd = d + step
                if nd < dist.get((nx, ny), math.inf):
                    dist[(nx, ny)] = nd
                    parent[(nx, ny)] = c
                    heapq.heappush(pq, (nd + heuristic((nx, ny)), nd, (nx, ny)))
    if g not in parent:
        return []
    cells = []
    cur: Optional[tuple[int, int]] = g
    while cur is not None:
        cells.append(cur)
        cur = parent[cur]
    cells.reverse()
    return [m.center_of(ix, iy) for ix, iy in cells]


def path_length(path: Sequence[Sequence[float]]) -> float:
    if len(path) < 2:
        return 0.0
    arr = np.asarray(path, dtype=np.float64)
    return float(np.sum(np.hypot(*np.diff(arr, axis=0).T)))


def resample_polyline(path: Sequence[Sequence[float]], arclengths: Sequence[float]) -> np.ndarray:
    """Points at the given arc-length positions along a polyline; positions past
    the end clamp to the final vertex."""
    arr = np.asarray(path, dtype=np.float64)
    if len(arr) == 1:
        return np.repeat(arr, len(arclengths), axis=0)
    seg = np.hypot(*np.diff(arr, axis=0).T)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    out = np.empty((len(arclengths), 2))
    for i, s in enumerate(arclengths):
        s = min(max(s, 0.0), cum[-1])
        j = int(np.searchsorted(cum, s, side="right")) - 1
        j = min(j, len(seg) - 1)
        frac = 0.0 if seg[j] == 0 else (s - cum[j]) / seg[j]
        out[i] = arr[j] + frac * (arr[j + 1] - arr[j])
    return out


def extract_waypoints(
    path: Sequence[Sequence[float]],
    anchor_pose: Pose2,
    spacing: float = WAYPOINT_SPACING,
    count: int = WAYPOINT_COUNT,
) -> np.ndarray:
    """count points at uniform arc-length spacing along the path, in the anchor
    pose's body frame; short paths pad by repeating the final point."""
    if len(path) == 0:
        return np.zeros((count, 2))
    targets = [spacing * (i + 1) for i in range(count)]
    world_pts = resample_polyline(path, targets)
    return transform_points(anchor_pose, world_pts, to_local=True)


def pedestrian_histogram(
    snapshots: Sequence[WorldSnapshot], anchor_pose: Pose2, bins: int = HIST_BINS
) -> np.ndarray:
    """Per-bearing-sector nearest pedestrian distance around the anchor pose,
    scaled by 1/RAY_MAX; empty sectors encode the max distance (1.0)."""
    hist = np.ones(bins)
    for snap in snapshots:
        if snap.ped_positions.shape[0] == 0:
            continue
        local = transform_points(anchor_pose, snap.ped_positions, to_local=True)
        d = np.hypot(local[:, 0], local[:, 1])
        bearing = np.arctan2(local[:, 1], local[:, 0])
        idx = np.floor((bearing + math.pi) / (2 * math.pi) * bins).astype(int) % bins
        for b, dd in zip(idx, d):
            enc = min(dd, RAY_MAX) / RAY_MAX
            if enc < hist[b]:
                hist[b] = enc
    return hist


def encode_features(
    waypoints_body: np.ndarray,
    snapshots: Sequence[WorldSnapshot],
    goal: Sequence[float],
    anchor_pose: Pose2,
    no_path: bool,
    include_waypoints: bool = True,
) -> np.ndarray:
    """Deterministic feature vector: scaled body-frame waypoints, bearing-sector
    pedestrian histogram, goal direction/distance in the anchor frame, and a
    flag marking absent waypoint guidance."""
    vec = np.zeros(FEATURE_DIM)
    if include_waypoints and not no_path:
        vec[: 2 * WAYPOINT_COUNT] = (waypoints_body / RAY_MAX).ravel()
    hist_off = 2 * WAYPOINT_COUNT
    vec[hist_off : hist_off + HIST_BINS] = pedestrian_histogram(snapshots, anchor_pose)
    g_local = transform_points(anchor_pose, [tuple(goal)], to_local=True)[0]
    dist = float(np.hypot(g_local[0], g_local[1]))
    off = hist_off + HIST_BINS
    if dist > 1e-12:
        vec[off] = g_local[0] / dist
        vec[off + 1] = g_local[1] / dist
    vec[off + 2] = min(dist, GOAL_DIST_NORM) / GOAL_DIST_NORM
    vec[off + 3] = 1.0 if (no_path or not include_waypoints) else 0.0
    return vec


@dataclass(frozen=True)
class ReasoningResult:
    waypoints: np.ndarray  # (K, 2) in the anchor pose's body frame
    feature: np.ndarray  # (FEATURE_DIM,)
    anchor_frame: int
    anchor_pose: Pose2
    no_path: bool = False
    t_infer_frames: int = 0  # finish - start; filled in at completion


@dataclass
class SemanticPacket:
    result: Optional[ReasoningResult]
    ready: bool


NOT_READY = SemanticPacket(result=None, ready=False)


@dataclass
class LatencyModel:
    """Reasoner compute-time model; samples are converted to whole sim frames."""

    kind: str  # "fixed" | "uniform" | "lognormal"
    seconds: float = 2.0  # fixed
    low: float = 1.0  # uniform
    high: float = 3.0
    median: float = 2.0  # lognormal
    sigma: float = 0.5
    clamp_min: float = 0.5
    clamp_max: float = 10.0

    def sample_seconds(self, rng: np.random.Generator) -> float:
        if self.kind == "fixed":
            return self.seconds
        if self.kind == "uniform":
            return float(rng.uniform(self.low, self.high))
        if self.kind == "lognormal":
            s = float(rng.lognormal(math.log(self.median), self.sigma))
            return min(max(s, self.clamp_min), self.clamp_max)
        raise ValueError(f"unknown latency model kind: {self.kind!r}")

    def sample_frames(self, rng: np.random.Generator) -> int:
        return max(1, int(round(self.sample_seconds(rng) * SIM_HZ)))

    @classmethod
    def from_config(cls, cfg: dict) -> "LatencyModel":
        return cls(**cfg)


def default_latency_model() -> LatencyModel:
    return LatencyModel(kind="lognormal", median=2.0, sigma=0.5)


@dataclass
class GenerationJob:
    start_frame: int
    start_pose: Pose2
    finish_frame: int
    payload: ReasoningResult
    active: bool = True


class Reasoner:
    """Scripted waypoint planner standing in for a learned reasoner.  In
    no_reasoning mode the waypoint block is omitted and compute is 8x faster."""

    def __init__(
        self,
        static_map: StaticMap,
        waypoint_count: int = WAYPOINT_COUNT,
        spacing: float = WAYPOINT_SPACING,
        no_reasoning: bool = False,
    ):
        self.map = static_map
        self.waypoint_count = waypoint_count
        self.spacing = spacing
        self.no_reasoning = no_reasoning

    def run(
        self,
        snapshots: Sequence[WorldSnapshot],
        goal: Sequence[float],
        anchor_frame: int,
        anchor_pose: Pose2,
    ) -> ReasoningResult:
        if self.no_reasoning:
            waypoints = np.zeros((self.waypoint_count, 2))
            no_path = False
        else:
            path = plan_astar(self.map, (anchor_pose.x, anchor_pose.y), goal)
            no_path = len(path) == 0
            waypoints = extract_waypoints(path, anchor_pose, self.spacing, self.waypoint_count)
        feature = encode_features(
            waypoints,
            snapshots,
            goal,
            anchor_pose,
            no_path,
            include_waypoints=not self.no_reasoning,
        )
        return ReasoningResult(
            waypoints=waypoints,
            feature=feature,
            anchor_frame=anchor_frame,
            anchor_pose=anchor_pose,
            no_path=no_path,
        )


class AsyncReasoner:
    """Virtual-time asynchronous wrapper: at most one in-flight job, results
    released at finish_frame, stale cache retained in between."""

    NO_REASONING_SPEEDUP = 8

    def __init__(
        self,
        reasoner: Reasoner,
        latency_model: LatencyModel,
        protocol: str = "default",
        defer_frames: int = 0,
        pause_cap_frames: int = SIM_HZ,
    ):
        if protocol not in ("default", "reduced", "deferred"):
            raise ValueError(f"unknown latency protocol: {protocol!r}")
        self.reasoner = reasoner
        self.latency_model = latency_model
        self.protocol = protocol
        self.defer_frames = defer_frames
        self.pause_cap_frames = pause_cap_frames
        self.job: Optional[GenerationJob] = None
        self.cache: Optional[ReasoningResult] = None

    def _effective_frames(self, native_frames: int) -> int:
        if self.reasoner.no_reasoning:
            native_frames = max(1, int(round(native_frames / self.NO_REASONING_SPEEDUP)))
        if self.protocol == "reduced":
            # world stepping pauses 1 s after job start until completion
            return min(native_frames, self.pause_cap_frames)
        if self.protocol == "deferred":
            return self.defer_frames + native_frames
        return native_frames

    def predict_async(
        self,
        snapshots: Sequence[WorldSnapshot],
        goal: Sequence[float],
        now_frame: int,
        now_pose: Pose2,
        rng: np.random.Generator,
    ) -> tuple[SemanticPacket, Optional[tuple[int, Pose2]]]:
        """Poll the in-flight job, start a new one when idle, and return the
        current cache (stale until a completion lands)."""
        if self.job is not None and self.job.active and now_frame >= self.job.finish_frame:
            self.cache = self.job.payload
            self.job.active = False
        new_ref = None
        if self.job is None or not self.job.active:
            frames = self._effective_frames(self.latency_model.sample_frames(rng))
            payload = self.reasoner.run(snapshots, goal, now_frame, now_pose)
            payload = ReasoningResult(
                waypoints=payload.waypoints,
                feature=payload.feature,
                anchor_frame=payload.anchor_frame,
                anchor_pose=payload.anchor_pose,
                no_path=payload.no_path,
                t_infer_frames=frames,
            )
            self.job = GenerationJob(
                start_frame=now_frame,
                start_pose=now_pose,
                finish_frame=now_frame + frames,
                payload=payload,
            )
            new_ref = (now_frame, now_pose)
        if self.cache is None:
            return SemanticPacket(result=None, ready=False), new_ref
        return SemanticPacket(result=self.cache, ready=True), new_ref


def effective_latency(refs: Sequence[tuple[int, Pose2]], now_frame: int) -> float:
    """Delta-t in seconds measured against the oldest retained generation
    reference; 0 when no generation has started."""
    if not refs:
        return 0.0
    return (now_frame - refs[0][0]) / SIM_HZ


def ego_offset(refs: Sequence[tuple[int, Pose2]], now_pose: Pose2) -> MotionDelta:
    if not refs:
        return MotionDelta(0.0, 0.0, 0.0)
    return displacement_in_frame(refs[0][1], now_pose)
