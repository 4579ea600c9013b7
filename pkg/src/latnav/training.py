"""Latency-consistent training: scripted-expert demonstrations, imitation
learning with injected guidance delays, and PPO fine-tuning under asynchronous
guidance.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence, TextIO

import numpy as np

from . import policy as pol
from .reasoner import (
    AsyncReasoner,
    LatencyModel,
    Reasoner,
    ReasoningResult,
    SemanticPacket,
    effective_latency,
    ego_offset,
    plan_astar,
)
from .se2 import MotionDelta, Pose2, displacement_in_frame, transform_points, wrap_angle_array
from .suites import sample_episode
from .world import (
    CONTROL_PERIOD,
    SIM_HZ,
    W_MAX,
    EpisodeSpec,
    Observation,
    SnapshotBuffer,
    StaticMap,
    World,
    build_scene,
)

CONTROL_HZ = SIM_HZ // CONTROL_PERIOD
HORIZON_TICKS = pol.CHUNKS  # 3 s of future poses at 10 Hz


# ---------------------------------------------------------------------------
# optimizer

class Adam:
    """Per-parameter adaptive step sizes with bias correction."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: pol.PolicyParams, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for key, g in grads.items():
            if key not in self.m:
                self.m[key] = np.zeros_like(g)
                self.v[key] = np.zeros_like(g)
            self.m[key] = self.beta1 * self.m[key] + (1 - self.beta1) * g
            self.v[key] = self.beta2 * self.v[key] + (1 - self.beta2) * g * g
            mhat = self.m[key] / (1 - self.beta1**self.t)
            vhat = self.v[key] / (1 - self.beta2**self.t)
            arr = getattr(params, key)
            arr -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm and total > 0:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


# ---------------------------------------------------------------------------
# scripted expert

EXPERT_V_MAX = 1.5
EXPERT_LOOKAHEAD = 1.0
EXPERT_SLOW_DIST = 2.0
EXPERT_STOP_DIST = 0.8


class ScriptedExpert:
    """Pure-pursuit tracker of the zero-latency planned path with a
    pedestrian-distance speed governor.  Privileged full-state access."""

    def __init__(self, static_map: StaticMap, start: Sequence[float], goal: Sequence[float]):
        self.path = np.asarray(plan_astar(static_map, start, goal), dtype=np.float64)
        self._idx = 0

    def command(self, world: World) -> tuple[float, float]:
        if len(self.path) == 0:
            return (0.0, 0.0)
        pose = world.robot.pose
        window = self.path[self._idx : self._idx + 80]
        d = np.hypot(window[:, 0] - pose.x, window[:, 1] - pose.y)
        self._idx += int(np.argmin(d))
        # lookahead point 1 m of arc further along the path
        target = self.path[-1]
        acc = 0.0
        for j in range(self._idx, len(self.path) - 1):
            acc += float(np.hypot(*(self.path[j + 1] - self.path[j])))
            if acc >= EXPERT_LOOKAHEAD:
                target = self.path[j + 1]
                break
        local = transform_points(pose, [tuple(target)], to_local=True)[0]
        ang = math.atan2(local[1], local[0])
        v = EXPERT_V_MAX * max(0.0, math.cos(ang))
        d_ped = world.nearest_pedestrian_distance()
        if d_ped < EXPERT_STOP_DIST:
            v = 0.0
        elif d_ped < EXPERT_SLOW_DIST:
            v *= (d_ped - EXPERT_STOP_DIST) / (EXPERT_SLOW_DIST - EXPERT_STOP_DIST)
        v = min(v, max(0.3, 0.8 * world.goal_distance()))
        w = min(max(2.0 * ang, -W_MAX), W_MAX)
        return (v, w)


def expert_control(world: World, expert: ScriptedExpert) -> tuple[float, float]:
    return expert.command(world)


# ---------------------------------------------------------------------------
# demonstrations

@dataclass
class DemoEpisode:
    spec: EpisodeSpec
    poses: np.ndarray  # (N, 3) robot pose per control tick
    rays: np.ndarray  # (N, n_rays)
    robot_state: np.ndarray  # (N, 3)
    features: np.ndarray  # (N, FEATURE_DIM) zero-latency reasoning per tick
    future: np.ndarray  # (N, HORIZON_TICKS, 3) realized world-frame poses
    eligible: np.ndarray  # (N,) full-horizon ticks only

    @property
    def n_ticks(self) -> int:
        return self.poses.shape[0]


def collect_demonstrations(
    specs: Sequence[EpisodeSpec],
    seed: int,
    static_maps: Optional[dict] = None,
) -> tuple[list[DemoEpisode], int]:
    """Run the scripted expert with zero-latency reasoning over a suite.
    Deterministic per seed; failed episodes are excluded and counted."""
    demos: list[DemoEpisode] = []
    failed = 0
    maps = static_maps if static_maps is not None else {}
    for ep_i, spec in enumerate(specs):
        key = (spec.scene_archetype, spec.map_seed)
        if key not in maps:
            maps[key] = build_scene(*key)
        m = maps[key]
        world = World(m, spec)
        buffer = SnapshotBuffer()
        reasoner = Reasoner(m)
        expert = ScriptedExpert(m, spec.start[:2], spec.goal)
        cmd = (0.0, 0.0)
        ticks: list[dict] = []
        success = False
        max_frames = int(round(spec.timeout * SIM_HZ))
        for k in range(max_frames):
            buffer.push(world.snapshot())
            if k % CONTROL_PERIOD == 0:
                pose = world.robot.pose
                obs = world.sense()
                result = reasoner.run(buffer.history(k), world.goal, k, pose)
                desired = expert.command(world)
                cmd = pol.smooth(cmd, desired)
                ticks.append(
                    {
                        "pose": np.array([pose.x, pose.y, pose.theta]),
                        "rays": obs.rays,
                        "state": np.array(obs.robot_state),
                        "feature": result.feature,
                    }
                )
            world.step(cmd)
            if world.check_goal():
                success = True
                break
        if not success:
            failed += 1
            continue
        n = len(ticks)
        poses = np.array([t["pose"] for t in ticks])
        future = np.zeros((n, HORIZON_TICKS, 3))
        eligible = np.zeros(n, dtype=bool)
        for i in range(n):
            if i + HORIZON_TICKS < n:
                future[i] = poses[i + 1 : i + 1 + HORIZON_TICKS]
                eligible[i] = True
        demos.append(
            DemoEpisode(
                spec=spec,
                poses=poses,
                rays=np.array([t["rays"] for t in ticks]),
                robot_state=np.array([t["state"] for t in ticks]),
                features=np.array([t["feature"] for t in ticks]),
                future=future,
                eligible=eligible,
            )
        )
    return demos, failed


def write_demos(demos: Sequence[DemoEpisode], fh: TextIO) -> None:
    for demo in demos:
        fh.write(
            json.dumps(
                {"spec": json.loads(demo.spec.to_json()), "n_ticks": demo.n_ticks}
            )
            + "\n"
        )
        for i in range(demo.n_ticks):
            fh.write(
                json.dumps(
                    {
                        "pose": demo.poses[i].tolist(),
                        "rays": demo.rays[i].tolist(),
                        "state": demo.robot_state[i].tolist(),
                        "feature": demo.features[i].tolist(),
                        "future": demo.future[i].tolist(),
                        "eligible": bool(demo.eligible[i]),
                    }
                )
                + "\n"
            )


def read_demos(fh: TextIO) -> list[DemoEpisode]:
    demos = []
    header = None
    rows: list[dict] = []

    def flush():
        if header is None:
            return
        demos.append(
            DemoEpisode(
                spec=EpisodeSpec.from_json(json.dumps(header["spec"])),
                poses=np.array([r["pose"] for r in rows]),
                rays=np.array([r["rays"] for r in rows]),
                robot_state=np.array([r["state"] for r in rows]),
                features=np.array([r["feature"] for r in rows]),
                future=np.array([r["future"] for r in rows]),
                eligible=np.array([r["eligible"] for r in rows], dtype=bool),
            )
        )

    for line in fh:
        if not line.strip():
            continue
        d = json.loads(line)
        if "spec" in d:
            flush()
            header = d
            rows = []
        else:
            rows.append(d)
    flush()
    return demos


# ---------------------------------------------------------------------------
# imitation learning

@dataclass
class ILConfig:
    delay_range: tuple[float, float] = (0.0, 10.0)  # seconds
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 20
    beta: float = 1.0  # smooth-L1 transition point
    dropout_feature: float = 0.1
    dropout_state: float = 0.5
    heading_weight: float = 0.5
    latency_aware: bool = True


def smooth_l1(e: np.ndarray, beta: float = 1.0) -> np.ndarray:
    a = np.abs(e)
    return np.where(a < beta, 0.5 * e * e / beta, a - 0.5 * beta)


def il_loss(
    params: pol.PolicyParams,
    inputs: np.ndarray,
    target_poses: np.ndarray,
    beta: float = 1.0,
    heading_weight: float = 0.5,
) -> tuple[float, dict[str, np.ndarray]]:
    """Trajectory imitation loss: predicted chunks are integrated to body-frame
    poses and compared to expert poses with a smooth L1, heading wrapped."""
    chunks, cache = pol.forward(params, inputs, return_cache=True)
    chunks = np.atleast_3d(chunks).reshape(-1, pol.CHUNKS, 3)
    batch = chunks.shape[0]
    pred = np.cumsum(chunks, axis=1)
    err = pred - target_poses
    err[:, :, 2] = wrap_angle_array(err[:, :, 2])
    weights = np.array([1.0, 1.0, heading_weight])
    loss = float(np.sum(smooth_l1(err, beta) * weights) / (pol.CHUNKS * batch))
    derr = np.clip(err / beta, -1.0, 1.0) * weights / (pol.CHUNKS * batch)
    dchunks = np.flip(np.cumsum(np.flip(derr, axis=1), axis=1), axis=1)
    grads = pol.backward(params, cache, dchunks)
    return loss, grads


def _demo_sample_arrays(demos: Sequence[DemoEpisode]):
    index = [
        (ei, ti)
        for ei, demo in enumerate(demos)
        for ti in range(demo.n_ticks)
        if demo.eligible[ti]
    ]
    if not index:
        raise ValueError("no eligible demonstration ticks")
    return index


def assemble_il_sample(
    demo: DemoEpisode,
    tick: int,
    delay_ticks: int,
    latency_aware: bool = True,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Build one delayed training sample.  Returns (input, target poses,
    actual delay in ticks after clamping to available history)."""
    j = max(0, tick - delay_ticks) if latency_aware else tick
    pose_t = Pose2(*demo.poses[tick])
    pose_j = Pose2(*demo.poses[j])
    ego = displacement_in_frame(pose_j, pose_t) if latency_aware else MotionDelta(0, 0, 0)
    delta_t = (tick - j) / CONTROL_HZ if latency_aware else 0.0
    obs = Observation(
        rays=demo.rays[tick], robot_state=tuple(demo.robot_state[tick]), frame_index=tick
    )
    result = ReasoningResult(
        waypoints=np.zeros((0, 2)),
        feature=demo.features[j],
        anchor_frame=j,
        anchor_pose=pose_j,
    )
    x = pol.assemble_input(obs, SemanticPacket(result=result, ready=True), delta_t, ego)
    target = np.empty((HORIZON_TICKS, 3))
    for i in range(HORIZON_TICKS):
        d = displacement_in_frame(pose_t, Pose2(*demo.future[tick, i]))
        target[i] = (d.dx, d.dy, d.dtheta)
    return x, target, tick - j


def il_train(
    demos: Sequence[DemoEpisode],
    config: ILConfig,
    rng: np.random.Generator,
    params: Optional[pol.PolicyParams] = None,
) -> tuple[pol.PolicyParams, list[float]]:
    """Imitation learning with sampled guidance delays.  Returns trained
    parameters and the per-epoch mean loss curve."""
    if params is None:
        params = pol.init_params(rng)
    index = _demo_sample_arrays(demos)
    opt = Adam(config.lr)
    curve: list[float] = []
    lo, hi = config.delay_range
    for _epoch in range(config.epochs):
        order = rng.permutation(len(index))
        losses = []
        for start in range(0, len(order), config.batch_size):
            rows = order[start : start + config.batch_size]
            xs = np.empty((len(rows), pol.INPUT_DIM))
            tg = np.empty((len(rows), HORIZON_TICKS, 3))
            for bi, r in enumerate(rows):
                ei, ti = index[int(r)]
                delay_s = float(rng.uniform(lo, hi))
                delay_ticks = int(round(delay_s * CONTROL_HZ))
                x, target, _ = assemble_il_sample(
                    demos[ei], ti, delay_ticks, config.latency_aware
                )
                if rng.random() < config.dropout_feature:
                    x[pol.FEATURE_OFF : pol.DELTA_T_OFF] = 0.0
                if rng.random() < config.dropout_state:
                    x[pol.STATE_OFF : pol.STATE_OFF + 3] = 0.0
                xs[bi] = x
                tg[bi] = target
            loss, grads = il_loss(params, xs, tg, config.beta, config.heading_weight)
            losses.append(loss)
            opt.step(params, grads)
        curve.append(float(np.mean(losses)))
    return params, curve


# ---------------------------------------------------------------------------
# reward and PPO

@dataclass
class PPOConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_ratio: float = 0.2
    entropy_coef: float = 0.001
    value_coef: float = 0.5
    policy_lr: float = 1e-5
    value_lr: float = 1e-4
    epochs: int = 5
    minibatch: int = 64
    rollout_steps: int = 1024
    grad_clip: float = 0.5
    w_goal: float = 400.0
    w_progress: float = 5.0
    w_collision: float = -100.0
    w_speed: float = -0.1
    target_speed: float = 1.0
    freeze_policy: bool = True
    iterations: int = 200
    collision_window_ticks: int = 10  # w_c fires at most once per second


def reward_terms(
    goal_reached: bool,
    progress: float,
    collision_fired: bool,
    v: float,
    cfg: PPOConfig,
) -> dict[str, float]:
    terms = {
        "goal": cfg.w_goal * (1.0 if goal_reached else 0.0),
        "progress": cfg.w_progress * progress,
        "collision": cfg.w_collision * (1.0 if collision_fired else 0.0),
        "speed": cfg.w_speed * abs(v - cfg.target_speed),
    }
    terms["total"] = terms["goal"] + terms["progress"] + terms["collision"] + terms["speed"]
    return terms


def compute_reward(
    prev_goal_distance: float,
    world: World,
    v: float,
    goal_reached: bool,
    collision_fired: bool,
    cfg: PPOConfig,
) -> dict[str, float]:
    progress = prev_goal_distance - world.goal_distance()
    return reward_terms(goal_reached, progress, collision_fired, v, cfg)


def gae(
    rewards: np.ndarray,
    values: np.ndarray,
    dones: np.ndarray,
    gamma: float,
    lam: float,
    bootstrap: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    n = len(rewards)
    adv = np.zeros(n)
    last = 0.0
    for t in range(n - 1, -1, -1):
        v_next = bootstrap if t == n - 1 else values[t + 1]
        nonterm = 1.0 - dones[t]
        delta = rewards[t] + gamma * v_next * nonterm - values[t]
        last = delta + gamma * lam * nonterm * last
        adv[t] = last
    return adv, adv + values


def ppo_update(
    params: pol.PolicyParams,
    batch: dict[str, np.ndarray],
    cfg: PPOConfig,
    opt_policy: Adam,
    opt_value: Adam,
    rng: np.random.Generator,
) -> dict[str, float]:
    """Clipped-surrogate PPO epochs over shuffled minibatches.  With
    freeze_policy only the final hidden layer, output layer, and log_std
    move; the value network always trains."""
    n = len(batch["advantages"])
    adv = batch["advantages"]
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    skipped = 0
    stats = {"policy_loss": 0.0, "value_loss": 0.0, "updates": 0}
    for _epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch):
            rows = order[start : start + cfg.minibatch]
            m = len(rows)
            xs = batch["inputs"][rows]
            chunks, cache = pol.forward(params, xs, return_cache=True)
            chunks = chunks.reshape(m, pol.CHUNKS, 3)
            dchunks = np.zeros_like(chunks)
            dlog_std = np.zeros(2)
            surr_sum = 0.0
            for i, r in enumerate(rows):
                mean, gmask = pol.control_mean_and_grad(chunks[i])
                action = batch["actions"][r]
                logp = pol.log_prob(mean, params.log_std, action)
                ratio = math.exp(logp - batch["log_probs"][r])
                a = adv[r]
                unclipped = ratio * a
                clipped = min(max(ratio, 1 - cfg.clip_ratio), 1 + cfg.clip_ratio) * a
                surr_sum += min(unclipped, clipped)
                if unclipped <= clipped:
                    dmean, dls = pol.log_prob_grads(mean, params.log_std, action)
                    coef = ratio * a
                    dchunks[i] = coef * (dmean[0] * gmask[0] + dmean[1] * gmask[1])
                    dlog_std += coef * dls
            # maximize surrogate + entropy bonus
            scale = -1.0 / m
            grads = pol.backward(params, cache, dchunks * scale)
            grads["log_std"] = dlog_std * scale - cfg.entropy_coef * np.ones(2)
            if cfg.freeze_policy:
                for key in grads:
                    if key not in pol.PolicyParams.HEAD_KEYS:
                        grads[key][:] = 0.0
            vin = batch["value_inputs"][rows]
            vpred, vcache = pol.value_forward(params, vin, return_cache=True)
            verr = vpred - batch["returns"][rows]
            vloss = cfg.value_coef * float(np.mean(verr * verr))
            vgrads = pol.value_backward(params, vcache, cfg.value_coef * 2.0 * verr / m)
            ploss = -surr_sum / m
            if not (math.isfinite(ploss) and math.isfinite(vloss)):
                skipped += 1
                continue
            clip_grads(grads, cfg.grad_clip)
            clip_grads(vgrads, cfg.grad_clip)
            opt_policy.step(params, grads)
            opt_value.step(params, vgrads)
            params.clamp_log_std()
            stats["policy_loss"] += ploss
            stats["value_loss"] += vloss
            stats["updates"] += 1
    if stats["updates"]:
        stats["policy_loss"] /= stats["updates"]
        stats["value_loss"] /= stats["updates"]
    stats["skipped"] = skipped
    return stats


# ---------------------------------------------------------------------------
# asynchronous rollout environment and RL loop

RL_LATENCY = LatencyModel(kind="uniform", low=4.0, high=6.0)  # ~50 control steps


class RolloutEnv:
    """One owned world stepped per control tick with asynchronous delayed
    guidance, mirroring the evaluation executor's bookkeeping."""

    def __init__(
        self,
        spec: EpisodeSpec,
        static_map: StaticMap,
        latency_model: LatencyModel,
        seed: int,
    ):
        self.world = World(static_map, spec)
        self.buffer = SnapshotBuffer()
        self.ar = AsyncReasoner(Reasoner(static_map), latency_model)
        self.rng = np.random.default_rng(seed)
        self.refs: list[tuple[int, Pose2]] = []
        self.max_frames = int(round(spec.timeout * SIM_HZ))
        self.done = False
        self.goal_reached = False
        self.last_collision_tick = -(10**9)
        self.tick = 0
        self.episode_return = 0.0
        self.buffer.push(self.world.snapshot())

    def begin_tick(self) -> tuple[np.ndarray, np.ndarray]:
        k = self.world.frame_index
        pose = self.world.robot.pose
        dt_s = effective_latency(self.refs, k)
        ego = ego_offset(self.refs, pose)
        obs = self.world.sense()
        packet, new_ref = self.ar.predict_async(
            self.buffer.history(k), self.world.goal, k, pose, self.rng
        )
        if new_ref is not None:
            self.refs = (self.refs + [new_ref])[-2:]
        x = pol.assemble_input(obs, packet, dt_s, ego)
        vin = self._value_input(obs)
        return x, vin

    def _value_input(self, obs: Observation) -> np.ndarray:
        g_local = transform_points(
            self.world.robot.pose, [tuple(self.world.goal)], to_local=True
        )[0]
        return pol.assemble_value_input(obs, g_local)

    def peek_value_input(self) -> np.ndarray:
        return self._value_input(self.world.sense())

    def step_action(self, action: tuple[float, float], cfg: PPOConfig) -> tuple[float, bool]:
        prev_dist = self.world.goal_distance()
        collided = False
        for _ in range(CONTROL_PERIOD):
            self.world.step(action)
            self.buffer.push(self.world.snapshot())
            if self.world.check_collision():
                collided = True
        self.goal_reached = self.world.check_goal()
        fire = collided and (self.tick - self.last_collision_tick >= cfg.collision_window_ticks)
        if fire:
            self.last_collision_tick = self.tick
        v_exec = self.world.robot.v_x
        terms = compute_reward(prev_dist, self.world, v_exec, self.goal_reached, fire, cfg)
        self.tick += 1
        if self.goal_reached or self.world.frame_index >= self.max_frames:
            self.done = True
        self.episode_return += terms["total"]
        return terms["total"], self.done


RL_DISTANCE_BAND = (6.0, 12.0)


@dataclass
class RLTask:
    spec: EpisodeSpec
    static_map: StaticMap


def build_rl_tasks(
    seed: int, archetypes: Sequence[str] = ("corridor", "aisles", "open"),
    num_pedestrians: int = 4,
) -> list[RLTask]:
    rng = np.random.default_rng(seed)
    tasks = []
    for i, arch in enumerate(archetypes):
        spec = sample_episode(
            arch,
            map_seed=seed + i,
            rng=rng,
            num_pedestrians=num_pedestrians,
            distance_band=RL_DISTANCE_BAND,
            instruction_id=f"rl-{arch}",
        )
        if spec is None:
            raise RuntimeError(f"no RL task found for archetype {arch}")
        tasks.append(RLTask(spec=spec, static_map=build_scene(arch, spec.map_seed)))
    return tasks


class DivergenceError(RuntimeError):
    pass


def rl_train(
    params: pol.PolicyParams,
    cfg: PPOConfig,
    rng: np.random.Generator,
    tasks: Optional[Sequence[RLTask]] = None,
    latency_model: LatencyModel = RL_LATENCY,
    task_rotation: int = 100,
    seed: int = 0,
    progress=None,
) -> tuple[pol.PolicyParams, list[dict]]:
    """On-policy PPO under asynchronous delayed guidance.  Consumed packets are
    embedded in the stored inputs and reused verbatim during optimization.
    Returns (params, per-iteration history)."""
    if tasks is None:
        tasks = build_rl_tasks(seed)
    opt_policy = Adam(cfg.policy_lr)
    opt_value = Adam(cfg.value_lr)
    history: list[dict] = []
    env: Optional[RolloutEnv] = None
    episode_seed = seed
    completed_returns: list[float] = []
    current_task = -1
    for it in range(cfg.iterations):
        task_idx = (it // task_rotation) % len(tasks)
        if task_idx != current_task:
            current_task = task_idx
            env = None
        task = tasks[task_idx]
        buf: dict[str, list] = {k: [] for k in (
            "inputs", "value_inputs", "actions", "log_probs", "rewards", "values", "dones"
        )}
        iter_returns: list[float] = []
        for _step in range(cfg.rollout_steps):
            if env is None or env.done:
                if env is not None:
                    iter_returns.append(env.episode_return)
                episode_seed += 1
                # fresh start/goal every episode within the rotating archetype;
                # replaying one fixed route overfits the head and degrades
                # performance everywhere else
                spec = sample_episode(
                    task.spec.scene_archetype,
                    task.spec.map_seed,
                    np.random.default_rng(episode_seed),
                    num_pedestrians=task.spec.num_pedestrians,
                    distance_band=RL_DISTANCE_BAND,
                    instruction_id=task.spec.instruction_id,
                )
                if spec is None:
                    spec = EpisodeSpec(**{**task.spec.__dict__, "rng_seed": episode_seed})
                env = RolloutEnv(spec, task.static_map, latency_model, seed=episode_seed)
            x, vin = env.begin_tick()
            chunks = pol.forward(params, x)
            mean, _ = pol.control_mean_and_grad(chunks)
            action = pol.sample_action(mean, params.log_std, rng)
            logp = pol.log_prob(mean, params.log_std, action)
            value = pol.value_forward(params, vin)
            reward, done = env.step_action(action, cfg)
            buf["inputs"].append(x)
            buf["value_inputs"].append(vin)
            buf["actions"].append(action)
            buf["log_probs"].append(logp)
            buf["rewards"].append(reward)
            buf["values"].append(value)
            buf["dones"].append(1.0 if done else 0.0)
        if env.done:
            bootstrap = 0.0
        else:
            bootstrap = pol.value_forward(params, env.peek_value_input())
        batch = {k: np.asarray(v) for k, v in buf.items()}
        adv, rets = gae(
            batch["rewards"], batch["values"], batch["dones"],
            cfg.gamma, cfg.gae_lambda, bootstrap,
        )
        batch["advantages"] = adv
        batch["returns"] = rets
        stats = ppo_update(params, batch, cfg, opt_policy, opt_value, rng)
        completed_returns.extend(iter_returns)
        mean_ret = float(np.mean(iter_returns)) if iter_returns else float("nan")
        if iter_returns and not math.isfinite(mean_ret):
            raise DivergenceError(f"non-finite mean return at iteration {it}")
        history.append(
            {
                "iteration": it,
                "mean_return": mean_ret,
                "episodes": len(iter_returns),
                "policy_loss": stats["policy_loss"],
                "value_loss": stats["value_loss"],
                "log_std": params.log_std.copy(),
            }
        )
        if progress is not None:
            progress(history[-1])
    return params, history


def rollout_return(
    params: pol.PolicyParams,
    cfg: PPOConfig,
    tasks: Sequence[RLTask],
    episodes: int,
    rng: np.random.Generator,
    latency_model: LatencyModel = RL_LATENCY,
    seed: int = 10**6,
) -> float:
    """Mean stochastic-rollout episodic return of params on the given tasks;
    measured the same way training returns are."""
    returns = []
    episode_seed = seed
    for e in range(episodes):
        task = tasks[e % len(tasks)]
        episode_seed += 1
        spec = EpisodeSpec(**{**task.spec.__dict__, "rng_seed": episode_seed})
        env = RolloutEnv(spec, task.static_map, latency_model, seed=episode_seed)
        while not env.done:
            x, _vin = env.begin_tick()
            chunks = pol.forward(params, x)
            mean, _ = pol.control_mean_and_grad(chunks)
            action = pol.sample_action(mean, params.log_std, rng)
            env.step_action(action, cfg)
        returns.append(env.episode_return)
    return float(np.mean(returns))
