"""Planner, feature encoding, latency models, and stale-cache semantics."""

import heapq
import math

import numpy as np
import pytest

from latnav.reasoner import (
    AsyncReasoner,
    FEATURE_DIM,
    GOAL_DIST_NORM,
    HIST_BINS,
    LatencyModel,
    Reasoner,
    WAYPOINT_COUNT,
    default_latency_model,
    effective_latency,
    ego_offset,
    encode_features,
    extract_waypoints,
    path_length,
    pedestrian_histogram,
    plan_astar,
    resample_polyline,
)
from latnav.se2 import Pose2
from latnav.world import RAY_MAX, SIM_HZ, EpisodeSpec, SnapshotBuffer, World, build_scene


def dijkstra_oracle(m, start, goal):
    """Independent shortest-path length on the same inflated 8-connected grid."""
    from latnav.reasoner import _nearest_free_cell

    s = _nearest_free_cell(m, *start)
    g = _nearest_free_cell(m, *goal)
    free = ~m.inflated()
    res = m.resolution
    dist = {s: 0.0}
    pq = [(0.0, s)]
    while pq:
        d, c = heapq.heappop(pq)
        if c == g:
            return d
        if d > dist.get(c, math.inf):
            continue
        cx, cy = c
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                if dx == 0 and dy == 0:
                    continue
                nx, ny = cx + dx, cy + dy
                if not (0 <= nx < m.width and 0 <= ny < m.height) or not free[ny, nx]:
                    continue
                if dx != 0 and dy != 0 and not (free[cy, nx] and free[ny, cx]):
                    continue
                nd = d + (res * math.sqrt(2) if dx and dy else res)
                if nd < dist.get((nx, ny), math.inf):
                    dist[(nx, ny)] = nd
                    heapq.heappush(pq, (nd, (nx, ny)))
    return math.inf


# ---------------------------------------------------------------------------
# planning

def test_astar_matches_dijkstra_oracle():
    for arch, seed in [("rooms", 1), ("aisles", 2), ("corridor", 0), ("open", 3)]:
        m = build_scene(arch, seed)
        rng = np.random.default_rng(seed)
        ys, xs = np.nonzero(m.free_component())
        for _ in range(5):
            i, j = rng.integers(len(xs), size=2)
            start = m.center_of(int(xs[i]), int(ys[i]))
            goal = m.center_of(int(xs[j]), int(ys[j]))
            path = plan_astar(m, start, goal)
            oracle = dijkstra_oracle(m, start, goal)
            if not path:
                assert oracle == math.inf
            else:
                assert path_length(path) == pytest.approx(oracle, abs=1e-9)


def test_astar_open_map_close_to_euclidean():
    m = build_scene("open", 7)
    start, goal = (4.0, 4.0), (12.0, 4.0)
    path = plan_astar(m, start, goal)
    assert path
    d = path_length(path)
    euclid = 8.0
    # 8-connected overestimate bound is ~8.3% plus snap-to-cell slack
    assert euclid - 0.5 <= d <= euclid * 1.083 + 0.8


def test_astar_endpoints_near_request():
    m = build_scene("rooms", 5)
    start, goal = (3.1, 3.2), (20.0, 20.0)
    path = plan_astar(m, start, goal)
    assert path
    assert np.hypot(path[0][0] - start[0], path[0][1] - start[1]) < 2.0
    assert np.hypot(path[-1][0] - goal[0], path[-1][1] - goal[1]) < 2.0


def test_astar_unreachable_returns_empty():
    from latnav.world import StaticMap

    occ = np.zeros((60, 60), dtype=bool)
    occ[0, :] = occ[-1, :] = occ[:, 0] = occ[:, -1] = True
    occ[:, 28:32] = True  # full-height dividing wall
    m = StaticMap(resolution=0.25, occupancy=occ, scene_archetype="open", seed=0)
    assert plan_astar(m, (3.0, 7.0), (12.0, 7.0)) == []
    # same-side query still plans
    assert plan_astar(m, (3.0, 7.0), (5.0, 3.0)) != []


def test_path_length_simple():
    assert path_length([(0, 0), (3, 4)]) == pytest.approx(5.0)
    assert path_length([(1, 1)]) == 0.0
    assert path_length([]) == 0.0


# ---------------------------------------------------------------------------
# resampling and waypoints

def test_resample_polyline_linear():
    path = [(0.0, 0.0), (10.0, 0.0)]
    pts = resample_polyline(path, [1.0, 2.5, 50.0])
    assert np.allclose(pts, [[1.0, 0.0], [2.5, 0.0], [10.0, 0.0]])


def test_resample_polyline_corner():
    path = [(0.0, 0.0), (2.0, 0.0), (2.0, 2.0)]
    pts = resample_polyline(path, [3.0])
    assert np.allclose(pts, [[2.0, 1.0]])


def test_extract_waypoints_spacing_and_frame():
    path = [(0.0, 0.0), (20.0, 0.0)]
    anchor = Pose2(0.0, 0.0, math.pi / 2)  # facing +y: path lies to the right
    wps = extract_waypoints(path, anchor)
    assert wps.shape == (WAYPOINT_COUNT, 2)
    for i in range(WAYPOINT_COUNT):
        assert wps[i, 1] == pytest.approx(-(i + 1), abs=1e-9)
        assert wps[i, 0] == pytest.approx(0.0, abs=1e-9)


def test_extract_waypoints_pads_short_path():
    path = [(0.0, 0.0), (2.0, 0.0)]
    wps = extract_waypoints(path, Pose2(0, 0, 0))
    assert np.allclose(wps[2:], wps[2])  # clamped at the path end
    assert wps[-1, 0] == pytest.approx(2.0)


def test_extract_waypoints_empty_path():
    assert np.array_equal(extract_waypoints([], Pose2(0, 0, 0)), np.zeros((WAYPOINT_COUNT, 2)))


# ---------------------------------------------------------------------------
# features

class FakeSnap:
    def __init__(self, ped_positions):
        self.ped_positions = np.asarray(ped_positions, dtype=float).reshape(-1, 2)


def test_histogram_empty_is_ones():
    hist = pedestrian_histogram([FakeSnap(np.zeros((0, 2)))], Pose2(0, 0, 0))
    assert np.array_equal(hist, np.ones(HIST_BINS))


def test_histogram_bins_nearest_by_bearing():
    # pedestrian straight ahead at 2 m and another behind at 4 m
    snaps = [FakeSnap([[2.0, 0.0], [-4.0, 0.0]])]
    hist = pedestrian_histogram(snaps, Pose2(0, 0, 0))
    ahead_bin = int((0.0 + math.pi) / (2 * math.pi) * HIST_BINS) % HIST_BINS
    assert hist[ahead_bin] == pytest.approx(0.2)
    behind = hist[hist < 1.0]
    assert sorted(behind) == pytest.approx([0.2, 0.4])


def test_histogram_pools_min_over_snapshots():
    snaps = [FakeSnap([[5.0, 0.0]]), FakeSnap([[2.5, 0.0]])]
    hist = pedestrian_histogram(snaps, Pose2(0, 0, 0))
    ahead_bin = int((0.0 + math.pi) / (2 * math.pi) * HIST_BINS) % HIST_BINS
    assert hist[ahead_bin] == pytest.approx(0.25)


def test_feature_layout_and_goal_block():
    wps = np.arange(2.0 * WAYPOINT_COUNT).reshape(WAYPOINT_COUNT, 2)
    anchor = Pose2(0.0, 0.0, 0.0)
    vec = encode_features(wps, [], (3.0, 4.0), anchor, no_path=False)
    assert vec.shape == (FEATURE_DIM,)
    assert np.allclose(vec[: 2 * WAYPOINT_COUNT], wps.ravel() / RAY_MAX)
    off = 2 * WAYPOINT_COUNT + HIST_BINS
    assert vec[off] == pytest.approx(0.6)  # unit direction x
    assert vec[off + 1] == pytest.approx(0.8)
    assert vec[off + 2] == pytest.approx(5.0 / GOAL_DIST_NORM)
    assert vec[off + 3] == 0.0


def test_feature_no_path_flag_zeroes_waypoints():
    wps = np.ones((WAYPOINT_COUNT, 2))
    vec = encode_features(wps, [], (1.0, 0.0), Pose2(0, 0, 0), no_path=True)
    assert np.all(vec[: 2 * WAYPOINT_COUNT] == 0.0)
    assert vec[-1] == 1.0


def test_feature_goal_distance_saturates():
    vec = encode_features(np.zeros((WAYPOINT_COUNT, 2)), [], (100.0, 0.0), Pose2(0, 0, 0), False)
    off = 2 * WAYPOINT_COUNT + HIST_BINS
    assert vec[off + 2] == 1.0


# ---------------------------------------------------------------------------
# latency models

def test_fixed_latency():
    lm = LatencyModel(kind="fixed", seconds=2.0)
    rng = np.random.default_rng(0)
    assert lm.sample_frames(rng) == 60
    assert lm.sample_seconds(rng) == 2.0


def test_uniform_latency_bounds():
    lm = LatencyModel(kind="uniform", low=4.0, high=6.0)
    rng = np.random.default_rng(1)
    samples = [lm.sample_frames(rng) for _ in range(200)]
    assert all(120 <= s <= 180 for s in samples)
    assert len(set(samples)) > 10


def test_lognormal_latency_clamped_and_median():
    lm = default_latency_model()
    rng = np.random.default_rng(2)
    samples = np.array([lm.sample_seconds(rng) for _ in range(4000)])
    assert samples.min() >= 0.5 and samples.max() <= 10.0
    assert np.median(samples) == pytest.approx(2.0, rel=0.1)


def test_latency_rejects_unknown_kind():
    with pytest.raises(ValueError):
        LatencyModel(kind="gamma").sample_seconds(np.random.default_rng(0))


def test_latency_min_one_frame():
    lm = LatencyModel(kind="fixed", seconds=0.001)
    assert lm.sample_frames(np.random.default_rng(0)) == 1


# ---------------------------------------------------------------------------
# async cache semantics

def spec_for(arch="open", seed=4):
    return EpisodeSpec(
        scene_archetype=arch,
        map_seed=seed,
        start=(4.0, 4.0, 0.3),
        goal=(18.0, 16.0),
        num_pedestrians=3,
        timeout=30.0,
        instruction_id="r",
        rng_seed=5,
    )


def test_cache_not_ready_until_first_completion():
    spec = spec_for()
    m = build_scene(spec.scene_archetype, spec.map_seed)
    world = World(m, spec)
    buf = SnapshotBuffer()
    ar = AsyncReasoner(Reasoner(m), LatencyModel(kind="fixed", seconds=1.0))
    rng = np.random.default_rng(0)
    for k in range(0, 90, 3):
        while world.frame_index < k:
            buf.push(world.snapshot())
            world.step((0.5, 0.0))
        buf.push(world.snapshot())
        packet, _ = ar.predict_async(buf.history(k), world.goal, k, world.robot.pose, rng)
        if k < 30:
            assert not packet.ready
        else:
            assert packet.ready
            # the cache holds the most recently completed generation: the job
            # started at 30*(c-1) completes exactly at frame 30*c
            assert packet.result.anchor_frame == 30 * (k // 30 - 1)
        world.step((0.5, 0.0))


def test_no_reasoning_speedup_factor():
    m = build_scene("open", 4)
    lm = LatencyModel(kind="fixed", seconds=4.0)
    fast = AsyncReasoner(Reasoner(m, no_reasoning=True), lm)
    slow = AsyncReasoner(Reasoner(m), lm)
    assert fast._effective_frames(120) == 15
    assert slow._effective_frames(120) == 120


def test_reduced_protocol_caps_elapsed_frames():
    m = build_scene("open", 4)
    ar = AsyncReasoner(Reasoner(m), LatencyModel(kind="fixed", seconds=3.0), protocol="reduced")
    assert ar._effective_frames(90) == 30
    assert ar._effective_frames(20) == 20


def test_deferred_protocol_adds_frames():
    m = build_scene("open", 4)
    ar = AsyncReasoner(
        Reasoner(m), LatencyModel(kind="fixed", seconds=1.0), protocol="deferred", defer_frames=30
    )
    assert ar._effective_frames(30) == 60


def test_effective_latency_and_ego_refs():
    refs = [(60, Pose2(1.0, 2.0, 0.0)), (120, Pose2(3.0, 2.0, 0.0))]
    assert effective_latency(refs, 150) == pytest.approx(3.0)
    assert effective_latency([], 150) == 0.0
    off = ego_offset(refs, Pose2(4.0, 2.0, 0.0))
    assert off.dx == pytest.approx(3.0)
    assert ego_offset([], Pose2(9, 9, 1)).dx == 0.0


def test_no_reasoning_mode_zeroes_waypoints():
    m = build_scene("open", 4)
    r = Reasoner(m, no_reasoning=True)
    result = r.run([], (18.0, 16.0), 0, Pose2(4.0, 4.0, 0.0))
    assert np.all(result.waypoints == 0.0)
    assert np.all(result.feature[: 2 * WAYPOINT_COUNT] == 0.0)
    assert result.feature[-1] == 1.0  # guidance-absent flag
    # goal block still populated
    assert result.feature[2 * WAYPOINT_COUNT + HIST_BINS + 2] > 0.0
