"""Deterministic 2D navigation environment: procedural occupancy-grid scenes,
a unicycle robot stepped at 30 Hz, waypoint-following pedestrians, ray sensing,
and collision/goal checks.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from . import kernels
from .se2 import Pose2, wrap_angle

SIM_HZ = 30
SIM_DT = 1.0 / SIM_HZ
CONTROL_PERIOD = 3  # sim frames per control tick (10 Hz)
CONTROL_DT = SIM_DT * CONTROL_PERIOD

N_RAYS = 64
RAY_FOV = math.radians(240.0)
RAY_MAX = 10.0

V_MIN, V_MAX = -0.5, 2.0
W_MAX = 1.5
ROBOT_RADIUS = 0.3

PED_COLLISION_DIST = 0.5
GOAL_THRESHOLD = 1.5

SNAPSHOT_BUFFER_FRAMES = 360  # 12 s at 30 Hz

ARCHETYPES = ("corridor", "rooms", "aisles", "open")


class SceneGenerationError(RuntimeError):
    pass


@dataclass
class StaticMap:
    resolution: float
    occupancy: np.ndarray  # (H, W) bool, [iy, ix]
    scene_archetype: str
    seed: int
    _inflated: Optional[np.ndarray] = field(default=None, repr=False)
    _free_component: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def width(self) -> int:
        return self.occupancy.shape[1]

    @property
    def height(self) -> int:
        return self.occupancy.shape[0]

    @property
    def size_m(self) -> tuple[float, float]:
        return (self.width * self.resolution, self.height * self.resolution)

    def inflated(self) -> np.ndarray:
        """Occupancy dilated by the robot radius; used for planning."""
        if self._inflated is None:
            r = int(math.ceil(ROBOT_RADIUS / self.resolution))
            yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
            footprint = xx * xx + yy * yy <= r * r
            self._inflated = ndimage.binary_dilation(self.occupancy, structure=footprint)
        return self._inflated

    def free_component(self) -> np.ndarray:
        """Largest connected free region of the inflated grid."""
        if self._free_component is None:
            free = ~self.inflated()
            labels, n = ndimage.label(free)
            if n == 0:
                raise SceneGenerationError("no free space")
            sizes = ndimage.sum_labels(free, labels, index=range(1, n + 1))
            self._free_component = labels == (1 + int(np.argmax(sizes)))
        return self._free_component

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        return (int(math.floor(x / self.resolution)), int(math.floor(y / self.resolution)))

    def center_of(self, ix: int, iy: int) -> tuple[float, float]:
        return ((ix + 0.5) * self.resolution, (iy + 0.5) * self.resolution)

    def is_free(self, x: float, y: float, inflated: bool = False) -> bool:
        ix, iy = self.cell_of(x, y)
        if ix < 0 or ix >= self.width or iy < 0 or iy >= self.height:
            return False
        grid = self.inflated() if inflated else self.occupancy
        return not grid[iy, ix]


def _carve_rect(occ: np.ndarray, x0: int, y0: int, x1: int, y1: int, value: bool) -> None:
    occ[max(y0, 0) : max(y1, 0), max(x0, 0) : max(x1, 0)] = value


def _generate(archetype: str, rng: np.random.Generator, cells: int) -> np.ndarray:
    n = cells
    if archetype == "corridor":
        occ = np.ones((n, n), dtype=bool)
        w = int(rng.integers(12, 17))  # 3-4 m wide
        cy = int(rng.integers(n // 4, 3 * n // 4))
        cx = int(rng.integers(n // 4, 3 * n // 4))
        _carve_rect(occ, 1, cy - w // 2, n - 1, cy - w // 2 + w, False)
        _carve_rect(occ, cx - w // 2, 1, cx - w // 2 + w, n - 1, False)
    elif archetype == "rooms":
        occ = np.zeros((n, n), dtype=bool)
        k = 3  # k x k rooms
        door = 8  # 2 m doors
        xs = [round(i * n / k) for i in range(k + 1)]
        for wall_x in xs[1:-1]:
            occ[:, wall_x - 1 : wall_x + 1] = True
        for wall_y in xs[1:-1]:
            occ[wall_y - 1 : wall_y + 1, :] = True
        for wall_x in xs[1:-1]:
            for ry in range(k):
                lo, hi = xs[ry], xs[ry + 1]
                d0 = int(rng.integers(lo + 2, hi - 2 - door))
                occ[d0 : d0 + door, wall_x - 1 : wall_x + 1] = False
        for wall_y in xs[1:-1]:
            for rx in range(k):
                lo, hi = xs[rx], xs[rx + 1]
                d0 = int(rng.integers(lo + 2, hi - 2 - door))
                occ[wall_y - 1 : wall_y + 1, d0 : d0 + door] = False
    elif archetype == "aisles":
        occ = np.zeros((n, n), dtype=bool)
        rack_w = 3
        gap = int(rng.integers(14, 19))  # 3.5-4.5 m aisles
        margin = 10
        x = margin + int(rng.integers(0, 6))
        while x + rack_w < n - margin:
            y0 = margin + int(rng.integers(0, 8))
            y1 = n - margin - int(rng.integers(0, 8))
            occ[y0:y1, x : x + rack_w] = True
            x += rack_w + gap
    elif archetype == "open":
        occ = np.zeros((n, n), dtype=bool)
        density_cap = 0.06
        interior = (n - 2) ** 2
        placed = 0
        for _ in range(200):
            if placed / interior >= density_cap:
                break
            bw = int(rng.integers(2, 7))
            bh = int(rng.integers(2, 7))
            bx = int(rng.integers(2, n - 2 - bw))
            by = int(rng.integers(2, n - 2 - bh))
            occ[by : by + bh, bx : bx + bw] = True
            placed += bw * bh
    else:
        raise ValueError(f"unknown archetype: {archetype!r}")
    occ[0, :] = occ[-1, :] = True
    occ[:, 0] = occ[:, -1] = True
    return occ


def build_scene(
    archetype: str, seed: int, size_m: float = 24.0, resolution: float = 0.25
) -> StaticMap:
    """Deterministic map for (archetype, seed); retries derived seeds when the
    free space comes out too fragmented, rejecting the seed after 5 attempts."""
    cells = int(round(size_m / resolution))
    for attempt in range(5):
        rng = np.random.default_rng([seed, attempt, ARCHETYPES.index(archetype)])
        occ = _generate(archetype, rng, cells)
        m = StaticMap(resolution=resolution, occupancy=occ, scene_archetype=archetype, seed=seed)
        free = ~m.inflated()
        if free.sum() < 200:
            continue
        comp = m.free_component()
        if comp.sum() >= 0.5 * free.sum():
            return m
    raise SceneGenerationError(f"could not generate a usable {archetype} scene for seed {seed}")


@dataclass
class Pedestrian:
    position: np.ndarray  # (2,)
    radius: float
    speed: float
    route: np.ndarray  # (R, 2)
    route_mode: str  # "loop" | "bounce"
    target_idx: int = 1
    direction: int = 1
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(2))


@dataclass
class RobotState:
    pose: Pose2
    v_x: float = 0.0
    v_y: float = 0.0  # always 0 for the unicycle
    omega_z: float = 0.0


@dataclass
class Observation:
    rays: np.ndarray  # (N_RAYS,) meters
    robot_state: tuple[float, float, float]  # (v_x, v_y, omega_z)
    frame_index: int


@dataclass
class EpisodeSpec:
    scene_archetype: str
    map_seed: int
    start: tuple[float, float, float]  # (x, y, theta)
    goal: tuple[float, float]
    num_pedestrians: int
    timeout: float  # seconds
    instruction_id: str
    rng_seed: int

    @property
    def start_pose(self) -> Pose2:
        return Pose2(*self.start)

    def to_json(self) -> str:
        return json.dumps(
            {
                "scene_archetype": self.scene_archetype,
                "map_seed": self.map_seed,
                "start": list(self.start),
                "goal": list(self.goal),
                "num_pedestrians": self.num_pedestrians,
                "timeout": self.timeout,
                "instruction_id": self.instruction_id,
                "rng_seed": self.rng_seed,
            }
        )

    @classmethod
    def from_json(cls, line: str) -> "EpisodeSpec":
        d = json.loads(line)
        return cls(
            scene_archetype=d["scene_archetype"],
            map_seed=d["map_seed"],
            start=tuple(d["start"]),
            goal=tuple(d["goal"]),
            num_pedestrians=d["num_pedestrians"],
            timeout=d["timeout"],
            instruction_id=d["instruction_id"],
            rng_seed=d["rng_seed"],
        )


@dataclass(frozen=True)
class WorldSnapshot:
    frame_index: int
    robot_pose: Pose2
    ped_positions: np.ndarray  # (P, 2)
    ped_velocities: np.ndarray  # (P, 2)
    static_map: StaticMap


class SnapshotBuffer:
    """Ring buffer of the last SNAPSHOT_BUFFER_FRAMES world snapshots."""

    def __init__(self, maxlen: int = SNAPSHOT_BUFFER_FRAMES):
        self.maxlen = maxlen
        self._snaps: list[WorldSnapshot] = []

    def push(self, snap: WorldSnapshot) -> None:
        self._snaps.append(snap)
        if len(self._snaps) > self.maxlen:
            del self._snaps[0]

    def get(self, frame: int) -> Optional[WorldSnapshot]:
        if not self._snaps:
            return None
        first = self._snaps[0].frame_index
        idx = frame - first
        if 0 <= idx < len(self._snaps):
            return self._snaps[idx]
        return None

    def history(
        self, anchor_frame: int, offsets_seconds: Sequence[float] = (0, 3, 6, 9)
    ) -> list[WorldSnapshot]:
        """Snapshots at anchor_frame minus each offset; missing frames are
        omitted.  Order follows offsets (most recent first by default)."""
        out = []
        for off in offsets_seconds:
            snap = self.get(anchor_frame - int(round(off * SIM_HZ)))
            if snap is not None:
                out.append(snap)
        return out


def _sample_free_point(m: StaticMap, rng: np.random.Generator) -> np.ndarray:
    comp = m.free_component()
    ys, xs = np.nonzero(comp)
    i = int(rng.integers(len(xs)))
    cx, cy = m.center_of(int(xs[i]), int(ys[i]))
    return np.array([cx, cy])


def spawn_pedestrians(
    m: StaticMap,
    count: int,
    rng: np.random.Generator,
    keep_clear: Optional[tuple[float, float]] = None,
    clear_dist: float = 2.0,
) -> list[Pedestrian]:
    peds = []
    for _ in range(count):
        for _attempt in range(50):
            pts = [_sample_free_point(m, rng) for _ in range(int(rng.integers(2, 5)))]
            # points are free-cell centers, so exact duplicates can occur;
            # drop coincident neighbors or the route stepper would never
            # consume its motion budget
            pts = [p for i, p in enumerate(pts) if i == 0 or np.hypot(*(p - pts[i - 1])) > 1e-9]
            p0 = pts[0]
            if keep_clear is not None and np.hypot(*(p0 - np.asarray(keep_clear))) < clear_dist:
                continue
            break
        peds.append(
            Pedestrian(
                position=pts[0].copy(),
                radius=0.3,
                speed=float(rng.uniform(0.5, 1.5)),
                route=np.array(pts),
                route_mode="loop" if rng.random() < 0.5 else "bounce",
            )
        )
    return peds


class World:
    """Single-owner mutable world; snapshots are immutable and shareable."""

    def __init__(self, static_map: StaticMap, spec: EpisodeSpec):
        self.map = static_map
        self.spec = spec
        self.goal = np.asarray(spec.goal, dtype=np.float64)
        self.robot = RobotState(pose=spec.start_pose)
        rng = np.random.default_rng(spec.rng_seed)
        self.pedestrians = spawn_pedestrians(
            static_map, spec.num_pedestrians, rng, keep_clear=spec.start[:2]
        )
        self.frame_index = 0

    @classmethod
    def from_spec(cls, spec: EpisodeSpec) -> "World":
        return cls(build_scene(spec.scene_archetype, spec.map_seed), spec)

    def step(self, command: tuple[float, float], dt: float = SIM_DT) -> None:
        v = min(max(command[0], V_MIN), V_MAX)
        w = min(max(command[1], -W_MAX), W_MAX)
        p = self.robot.pose
        self.robot.pose = Pose2(
            p.x + v * math.cos(p.theta) * dt,
            p.y + v * math.sin(p.theta) * dt,
            wrap_angle(p.theta + w * dt),
        )
        self.robot.v_x = v
        self.robot.omega_z = w
        for ped in self.pedestrians:
            self._step_pedestrian(ped, dt)
        self.frame_index += 1

    def _step_pedestrian(self, ped: Pedestrian, dt: float) -> None:
        old = ped.position.copy()
        budget = ped.speed * dt
        zero_hops = 0  # guards against routes with coincident waypoints
        while budget > 1e-12 and len(ped.route) >= 2 and zero_hops <= 2 * len(ped.route):
            target = ped.route[ped.target_idx]
            vec = target - ped.position
            dist = float(np.hypot(vec[0], vec[1]))
            zero_hops = zero_hops + 1 if dist <= 1e-12 else 0
            if dist <= budget:
                ped.position = target.copy()
                budget -= dist
                nxt = ped.target_idx + ped.direction
                if ped.route_mode == "loop":
                    ped.target_idx = nxt % len(ped.route)
                else:
                    if nxt < 0 or nxt >= len(ped.route):
                        ped.direction *= -1
                        nxt = ped.target_idx + ped.direction
                    ped.target_idx = nxt
            else:
                ped.position = ped.position + vec * (budget / dist)
                budget = 0.0
        ped.velocity = (ped.position - old) / dt

    def sense(self) -> Observation:
        p = self.robot.pose
        angles = p.theta + np.linspace(-RAY_FOV / 2, RAY_FOV / 2, N_RAYS)
        if self.pedestrians:
            ped_xy = np.array([ped.position for ped in self.pedestrians])
            ped_r = np.array([ped.radius for ped in self.pedestrians])
        else:
            ped_xy = np.zeros((0, 2))
            ped_r = np.zeros(0)
        rays = kernels.cast_rays(
            self.map.occupancy, self.map.resolution, p.x, p.y, angles, RAY_MAX, ped_xy, ped_r
        )
        return Observation(
            rays=rays,
            robot_state=(self.robot.v_x, self.robot.v_y, self.robot.omega_z),
            frame_index=self.frame_index,
        )

    def nearest_pedestrian_distance(self) -> float:
        if not self.pedestrians:
            return math.inf
        p = self.robot.pose
        return min(
            float(np.hypot(ped.position[0] - p.x, ped.position[1] - p.y))
            for ped in self.pedestrians
        )

    def check_collision(self) -> bool:
        if self.nearest_pedestrian_distance() < PED_COLLISION_DIST:
            return True
        return self._static_overlap()

    def _static_overlap(self) -> bool:
        p = self.robot.pose
        res = self.map.resolution
        r = ROBOT_RADIUS
        ix0 = int(math.floor((p.x - r) / res))
        ix1 = int(math.floor((p.x + r) / res))
        iy0 = int(math.floor((p.y - r) / res))
        iy1 = int(math.floor((p.y + r) / res))
        for iy in range(iy0, iy1 + 1):
            for ix in range(ix0, ix1 + 1):
                if ix < 0 or ix >= self.map.width or iy < 0 or iy >= self.map.height:
                    occupied = True
                else:
                    occupied = bool(self.map.occupancy[iy, ix])
                if not occupied:
                    continue
                cx = min(max(p.x, ix * res), (ix + 1) * res)
                cy = min(max(p.y, iy * res), (iy + 1) * res)
                if (p.x - cx) ** 2 + (p.y - cy) ** 2 < r * r:
                    return True
        return False

    def check_goal(self, goal: Optional[Sequence[float]] = None, threshold: float = GOAL_THRESHOLD) -> bool:
        g = self.goal if goal is None else np.asarray(goal)
        p = self.robot.pose
        return math.hypot(p.x - g[0], p.y - g[1]) < threshold

    def goal_distance(self) -> float:
        p = self.robot.pose
        return math.hypot(p.x - self.goal[0], p.y - self.goal[1])

    def snapshot(self) -> WorldSnapshot:
        if self.pedestrians:
            pos = np.array([ped.position for ped in self.pedestrians])
            vel = np.array([ped.velocity for ped in self.pedestrians])
        else:
            pos = np.zeros((0, 2))
            vel = np.zeros((0, 2))
        return WorldSnapshot(
            frame_index=self.frame_index,
            robot_pose=self.robot.pose,
            ped_positions=pos,
            ped_velocities=vel,
            static_map=self.map,
        )
