"""Closed-loop episode runners: the asynchronous executor (stale guidance with
latency/ego-motion bookkeeping), the synchronous halting baseline, the
no-reasoning fast path, and the latency-control protocols.  Produces
line-delimited EpisodeRecords.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, TextIO

import numpy as np

from . import policy as pol
from .reasoner import (
    AsyncReasoner,
    LatencyModel,
    Reasoner,
    default_latency_model,
    effective_latency,
    ego_offset,
)
from .se2 import IDENTITY, MotionDelta, Pose2, displacement_in_frame, integrate_chunks
from .world import (
    CONTROL_PERIOD,
    GOAL_THRESHOLD,
    SIM_HZ,
    EpisodeSpec,
    SnapshotBuffer,
    StaticMap,
    World,
    build_scene,
)

RECORD_VERSION = 1

MODES = ("async", "sync", "no_reasoning")
PROTOCOLS = ("default", "reduced", "deferred30", "deferred60", "deferred90")

SYNC_EXEC_TICKS = 5  # 0.5 s of execution per blocking cycle


@dataclass
class ExecutorConfig:
    mode: str = "async"
    latency_protocol: str = "default"
    latency_model: LatencyModel = field(default_factory=default_latency_model)
    seed: int = 0
    goal_threshold: float = GOAL_THRESHOLD
    integration_mode: str = "prefix_sum"
    # feed real (delta_t, ego offset) metadata to the controller; False zeroes
    # both inputs for latency-unaware ablations
    latency_aware: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown executor mode: {self.mode!r}")
        if self.latency_protocol not in PROTOCOLS:
            raise ValueError(f"unknown latency protocol: {self.latency_protocol!r}")


def apply_latency_protocol(name: str) -> tuple[str, int]:
    """Map a protocol name to (AsyncReasoner protocol, defer frames)."""
    if name == "default":
        return ("default", 0)
    if name == "reduced":
        return ("reduced", 0)
    if name.startswith("deferred"):
        frames = int(name[len("deferred") :])
        if frames not in (30, 60, 90):
            raise ValueError(f"deferred protocol frames must be 30/60/90, got {frames}")
        return ("deferred", frames)
    raise ValueError(f"unknown latency protocol: {name!r}")


@dataclass
class TickLog:
    frame: int
    delta_t: float
    ego: tuple[float, float, float]
    ready: bool
    command: tuple[float, float]
    anchor_frame: Optional[int]


@dataclass
class EpisodeRecord:
    spec: EpisodeSpec
    poses: np.ndarray  # (F+1, 3), one row per sim frame incl. the initial pose
    ticks: list[TickLog]
    collision_frames: list[int]
    termination: str  # "goal" | "timeout"

    @property
    def sim_frames(self) -> int:
        return self.poses.shape[0] - 1

    @property
    def duration(self) -> float:
        return self.sim_frames / SIM_HZ

    @property
    def final_position(self) -> tuple[float, float]:
        return (float(self.poses[-1, 0]), float(self.poses[-1, 1]))

    def write(self, fh: TextIO) -> None:
        fh.write(
            json.dumps(
                {
                    "version": RECORD_VERSION,
                    "spec": json.loads(self.spec.to_json()),
                    "n_frames": self.sim_frames,
                }
            )
            + "\n"
        )
        ticks_by_frame = {t.frame: t for t in self.ticks}
        for i in range(self.poses.shape[0]):
            row: dict = {"f": i, "p": [float(v) for v in self.poses[i]]}
            t = ticks_by_frame.get(i)
            if t is not None:
                row["tick"] = {
                    "dt": t.delta_t,
                    "ego": list(t.ego),
                    "ready": t.ready,
                    "cmd": list(t.command),
                    "anchor": t.anchor_frame,
                }
            fh.write(json.dumps(row) + "\n")
        fh.write(
            json.dumps(
                {
                    "termination": self.termination,
                    "collisions": self.collision_frames,
                    "n_ticks": len(self.ticks),
                }
            )
            + "\n"
        )

    @classmethod
    def read(cls, fh: TextIO) -> "EpisodeRecord":
        lines = [json.loads(line) for line in fh if line.strip()]
        header, footer = lines[0], lines[-1]
        spec = EpisodeSpec.from_json(json.dumps(header["spec"]))
        poses = np.array([row["p"] for row in lines[1:-1]])
        ticks = []
        for row in lines[1:-1]:
            if "tick" in row:
                t = row["tick"]
                ticks.append(
                    TickLog(
                        frame=row["f"],
                        delta_t=t["dt"],
                        ego=tuple(t["ego"]),
                        ready=t["ready"],
                        command=tuple(t["cmd"]),
                        anchor_frame=t["anchor"],
                    )
                )
        return cls(
            spec=spec,
            poses=poses,
            ticks=ticks,
            collision_frames=list(footer["collisions"]),
            termination=footer["termination"],
        )


def _policy_command(
    params: pol.PolicyParams,
    x: np.ndarray,
    integration_mode: str,
) -> tuple[float, float]:
    chunks = pol.forward(params, x)
    traj = [IDENTITY] + integrate_chunks(chunks, IDENTITY, mode=integration_mode)
    return pol.to_control(pol.select_target(traj))


def build_async_reasoner(
    static_map: StaticMap, config: ExecutorConfig
) -> AsyncReasoner:
    protocol, defer = apply_latency_protocol(config.latency_protocol)
    reasoner = Reasoner(static_map, no_reasoning=(config.mode == "no_reasoning"))
    return AsyncReasoner(
        reasoner, config.latency_model, protocol=protocol, defer_frames=defer
    )


def run_async_episode(
    spec: EpisodeSpec,
    params: pol.PolicyParams,
    config: ExecutorConfig,
    static_map: Optional[StaticMap] = None,
) -> EpisodeRecord:
    """30 Hz loop with 10 Hz control per the asynchronous rollout scheme:
    commands are gated to zero until the first packet completes, the last
    smoothed command is held between ticks, and (delta_t, ego offset) are
    measured against the oldest retained generation reference."""
    m = static_map if static_map is not None else build_scene(spec.scene_archetype, spec.map_seed)
    world = World(m, spec)
    buffer = SnapshotBuffer()
    rng = np.random.default_rng(config.seed)
    ar = build_async_reasoner(m, config)

    refs: list[tuple[int, Pose2]] = []
    first_ready = False
    cmd = (0.0, 0.0)
    poses = [np.array([world.robot.pose.x, world.robot.pose.y, world.robot.pose.theta])]
    ticks: list[TickLog] = []
    collisions: list[int] = []
    termination = "timeout"
    max_frames = int(round(spec.timeout * SIM_HZ))

    for k in range(max_frames):
        pose_k = world.robot.pose
        buffer.push(world.snapshot())
        if k % CONTROL_PERIOD == 0:
            snaps = buffer.history(k)
            dt_s = effective_latency(refs, k)
            ego = ego_offset(refs, pose_k)
            obs = world.sense()
            packet, new_ref = ar.predict_async(snaps, world.goal, k, pose_k, rng)
            if new_ref is not None:
                refs = (refs + [new_ref])[-2:]
            if packet.ready:
                first_ready = True
            if not first_ready:
                desired = (0.0, 0.0)
            else:
                if config.latency_aware:
                    x = pol.assemble_input(obs, packet, dt_s, ego)
                else:
                    x = pol.assemble_input(obs, packet, 0.0, MotionDelta(0.0, 0.0, 0.0))
                desired = _policy_command(params, x, config.integration_mode)
            cmd = pol.smooth(cmd, desired)
            ticks.append(
                TickLog(
                    frame=k,
                    delta_t=dt_s,
                    ego=(ego.dx, ego.dy, ego.dtheta),
                    ready=packet.ready,
                    command=cmd,
                    anchor_frame=packet.result.anchor_frame if packet.ready else None,
                )
            )
        world.step(cmd)
        poses.append(
            np.array([world.robot.pose.x, world.robot.pose.y, world.robot.pose.theta])
        )
        if world.check_collision():
            collisions.append(world.frame_index)
        if world.check_goal(threshold=config.goal_threshold):
            termination = "goal"
            break

    return EpisodeRecord(
        spec=spec,
        poses=np.array(poses),
        ticks=ticks,
        collision_frames=collisions,
        termination=termination,
    )


def run_sync_episode(
    spec: EpisodeSpec,
    params: pol.PolicyParams,
    config: ExecutorConfig,
    static_map: Optional[StaticMap] = None,
) -> EpisodeRecord:
    """Blocking baseline: the robot halts for the full inference duration each
    cycle (delta_t = 0, zero ego offsets), then follows the freshly predicted
    trajectory for 0.5 s."""
    m = static_map if static_map is not None else build_scene(spec.scene_archetype, spec.map_seed)
    world = World(m, spec)
    buffer = SnapshotBuffer()
    rng = np.random.default_rng(config.seed)
    reasoner = Reasoner(m)

    cmd = (0.0, 0.0)
    poses = [np.array([world.robot.pose.x, world.robot.pose.y, world.robot.pose.theta])]
    ticks: list[TickLog] = []
    collisions: list[int] = []
    termination = "timeout"
    max_frames = int(round(spec.timeout * SIM_HZ))
    zero = (0.0, 0.0, 0.0)

    def advance(command):
        nonlocal termination
        world.step(command)
        poses.append(
            np.array([world.robot.pose.x, world.robot.pose.y, world.robot.pose.theta])
        )
        if world.check_collision():
            collisions.append(world.frame_index)
        if world.check_goal(threshold=config.goal_threshold):
            termination = "goal"
            return False
        return world.frame_index < max_frames

    running = True
    while running:
        # halt while inference runs on fresh observations
        latency_frames = config.latency_model.sample_frames(rng)
        cmd = (0.0, 0.0)
        for _ in range(latency_frames):
            running = advance(cmd)
            if not running:
                break
        if not running:
            break
        k = world.frame_index
        buffer.push(world.snapshot())
        anchor_pose = world.robot.pose
        obs = world.sense()
        result = reasoner.run(buffer.history(k), world.goal, k, anchor_pose)
        from .reasoner import SemanticPacket

        packet = SemanticPacket(result=result, ready=True)
        x = pol.assemble_input(obs, packet, 0.0, displacement_in_frame(anchor_pose, anchor_pose))
        chunks = pol.forward(params, x)
        traj = integrate_chunks(chunks, anchor_pose, mode=config.integration_mode)
        # execute the predicted trajectory for a fixed 0.5 s horizon
        for j in range(SYNC_EXEC_TICKS):
            idx = min(pol.TARGET_INDEX + j, len(traj)) - 1
            target_world = traj[idx]
            d = displacement_in_frame(world.robot.pose, target_world)
            desired = pol.to_control(Pose2(d.dx, d.dy, d.dtheta))
            cmd = pol.smooth(cmd, desired)
            ticks.append(
                TickLog(
                    frame=world.frame_index,
                    delta_t=0.0,
                    ego=zero,
                    ready=True,
                    command=cmd,
                    anchor_frame=k,
                )
            )
            for _ in range(CONTROL_PERIOD):
                running = advance(cmd)
                if not running:
                    break
            if not running:
                break

    return EpisodeRecord(
        spec=spec,
        poses=np.array(poses),
        ticks=ticks,
        collision_frames=collisions,
        termination=termination,
    )


def run_episode(
    spec: EpisodeSpec,
    params: pol.PolicyParams,
    config: ExecutorConfig,
    static_map: Optional[StaticMap] = None,
) -> EpisodeRecord:
    if config.mode == "sync":
        return run_sync_episode(spec, params, config, static_map)
    # no_reasoning shares the async loop; build_async_reasoner switches the
    # reasoner into the feature-only fast path
    return run_async_episode(spec, params, config, static_map)
