"""Benchmark harness: per-episode navigation metrics (success, navigation
error, path length, SPL, collision rate), suite aggregation, latency sweeps,
and CSV / aligned-text reporting.
"""

from __future__ import annotations

import csv
import math
import traceback
from dataclasses import asdict, dataclass
from typing import Optional, Sequence, TextIO

import numpy as np

from . import policy as pol
from .executor import EpisodeRecord, ExecutorConfig, run_episode
from .reasoner import LatencyModel
from .suites import shortest_distance
from .world import EpisodeSpec, StaticMap, build_scene


@dataclass
class MetricsRecord:
    instruction_id: str
    scene_archetype: str
    num_pedestrians: int
    optimal_distance: float
    success: bool
    nav_error: float  # final Euclidean distance to goal, meters
    path_length: float  # executed path length, meters
    spl: float
    collision: bool  # episode had at least one collision event
    collision_events: int
    duration: float  # virtual seconds
    termination: str
    error: str = ""


@dataclass
class SuiteResult:
    episodes: list[MetricsRecord]
    config_fingerprint: str

    @property
    def success_rate(self) -> float:
        ok = [e for e in self.episodes if not e.error]
        if not ok:
            return 0.0
        return sum(e.success for e in ok) / len(ok)

    @property
    def mean_nav_error(self) -> float:
        ok = [e.nav_error for e in self.episodes if not e.error]
        return float(np.mean(ok)) if ok else math.nan

    @property
    def mean_spl(self) -> float:
        ok = [e.spl for e in self.episodes if not e.error]
        return float(np.mean(ok)) if ok else math.nan

    @property
    def collision_rate(self) -> float:
        """Fraction of episodes with at least one collision event."""
        ok = [e.collision for e in self.episodes if not e.error]
        return float(np.mean(ok)) if ok else math.nan

    @property
    def mean_duration(self) -> float:
        ok = [e.duration for e in self.episodes if not e.error]
        return float(np.mean(ok)) if ok else math.nan

    @property
    def success_mean_duration(self) -> float:
        ok = [e.duration for e in self.episodes if not e.error and e.success]
        return float(np.mean(ok)) if ok else math.nan


def executed_path_length(poses: np.ndarray) -> float:
    if poses.shape[0] < 2:
        return 0.0
    return float(np.sum(np.hypot(*np.diff(poses[:, :2], axis=0).T)))


def spl_term(success: bool, optimal: float, executed: float) -> float:
    """Path-efficiency-weighted success for one episode."""
    if not success:
        return 0.0
    return optimal / max(optimal, executed)


def score_episode(
    spec: EpisodeSpec, record: EpisodeRecord, static_map: StaticMap
) -> MetricsRecord:
    d_opt = shortest_distance(static_map, spec.start[:2], spec.goal)
    success = record.termination == "goal"
    fx, fy = record.final_position
    nav_error = math.hypot(fx - spec.goal[0], fy - spec.goal[1])
    pl = executed_path_length(record.poses)
    return MetricsRecord(
        instruction_id=spec.instruction_id,
        scene_archetype=spec.scene_archetype,
        num_pedestrians=spec.num_pedestrians,
        optimal_distance=d_opt,
        success=success,
        nav_error=nav_error,
        path_length=pl,
        spl=spl_term(success, d_opt, pl),
        collision=bool(record.collision_frames),
        collision_events=len(record.collision_frames),
        duration=record.duration,
        termination=record.termination,
    )


def _fingerprint(config: ExecutorConfig) -> str:
    lm = config.latency_model
    return (
        f"mode={config.mode} protocol={config.latency_protocol} "
        f"latency={lm.kind} seed={config.seed} aware={config.latency_aware}"
    )


def run_suite(
    specs: Sequence[EpisodeSpec],
    params: pol.PolicyParams,
    config: ExecutorConfig,
    static_maps: Optional[dict] = None,
    records_out: Optional[list] = None,
) -> SuiteResult:
    """Evaluate every episode; per-episode failures are captured as error rows
    rather than aborting the suite."""
    maps = static_maps if static_maps is not None else {}
    episodes: list[MetricsRecord] = []
    for spec in specs:
        try:
            key = (spec.scene_archetype, spec.map_seed)
            if key not in maps:
                maps[key] = build_scene(*key)
            record = run_episode(spec, params, config, maps[key])
            episodes.append(score_episode(spec, record, maps[key]))
            if records_out is not None:
                records_out.append(record)
        except Exception:
            episodes.append(
                MetricsRecord(
                    instruction_id=spec.instruction_id,
                    scene_archetype=spec.scene_archetype,
                    num_pedestrians=spec.num_pedestrians,
                    optimal_distance=math.nan,
                    success=False,
                    nav_error=math.nan,
                    path_length=math.nan,
                    spl=0.0,
                    collision=False,
                    collision_events=0,
                    duration=math.nan,
                    termination="error",
                    error=traceback.format_exc(limit=3),
                )
            )
    return SuiteResult(episodes=episodes, config_fingerprint=_fingerprint(config))


def latency_sweep(
    specs: Sequence[EpisodeSpec],
    params: pol.PolicyParams,
    base_config: ExecutorConfig,
    latencies_s: Sequence[float] = (1.0, 2.0, 3.0, 4.0, 5.0),
    static_maps: Optional[dict] = None,
) -> dict[float, SuiteResult]:
    """Re-run the suite at fixed reasoner latencies."""
    maps = static_maps if static_maps is not None else {}
    out = {}
    for lat in latencies_s:
        cfg = ExecutorConfig(
            mode=base_config.mode,
            latency_protocol=base_config.latency_protocol,
            latency_model=LatencyModel(kind="fixed", seconds=lat),
            seed=base_config.seed,
            goal_threshold=base_config.goal_threshold,
            integration_mode=base_config.integration_mode,
            latency_aware=base_config.latency_aware,
        )
        out[lat] = run_suite(specs, params, cfg, static_maps=maps)
    return out


# ---------------------------------------------------------------------------
# reporting

CSV_FIELDS = [
    "instruction_id",
    "scene_archetype",
    "num_pedestrians",
    "optimal_distance",
    "success",
    "nav_error",
    "path_length",
    "spl",
    "collision",
    "collision_events",
    "duration",
    "termination",
    "error",
]


def write_csv(result: SuiteResult, fh: TextIO) -> None:
    writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
    writer.writeheader()
    for ep in result.episodes:
        row = asdict(ep)
        row["error"] = row["error"].replace("\n", " | ")
        writer.writerow(row)


def read_csv(fh: TextIO) -> list[dict]:
    return list(csv.DictReader(fh))


def summary_table(result: SuiteResult, title: str = "evaluation") -> str:
    """Aligned text table of suite aggregates, grouped by pedestrian density."""
    rows = [("group", "n", "SR", "NE", "SPL", "CR")]
    by_density: dict[int, list[MetricsRecord]] = {}
    for ep in result.episodes:
        if ep.error:
            continue
        by_density.setdefault(ep.num_pedestrians, []).append(ep)

    def agg(label: str, eps: list[MetricsRecord]):
        sr = sum(e.success for e in eps) / len(eps)
        ne = float(np.mean([e.nav_error for e in eps]))
        spl = float(np.mean([e.spl for e in eps]))
        cr = float(np.mean([e.collision for e in eps]))
        rows.append((label, str(len(eps)), f"{sr:.3f}", f"{ne:.2f}", f"{spl:.3f}", f"{cr:.2f}"))

    for density in sorted(by_density):
        agg(f"peds={density}", by_density[density])
    ok = [e for e in result.episodes if not e.error]
    if ok:
        agg("all", ok)
    errors = len(result.episodes) - len(ok)
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = [f"{title}  [{result.config_fingerprint}]"]
    for i, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        if i == 0:
            lines.append("-" * (sum(widths) + 2 * (len(widths) - 1)))
    if errors:
        lines.append(f"errors: {errors}")
    return "\n".join(lines)


def sweep_table(sweep: dict[float, SuiteResult]) -> str:
    rows = [("latency_s", "SR", "NE", "SPL", "CR")]
    for lat in sorted(sweep):
        r = sweep[lat]
        rows.append(
            (
                f"{lat:.1f}",
                f"{r.success_rate:.3f}",
                f"{r.mean_nav_error:.2f}",
                f"{r.mean_spl:.3f}",
                f"{r.collision_rate:.2f}",
            )
        )
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = []
    for i, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        if i == 0:
            lines.append("-" * (sum(widths) + 2 * (len(widths) - 1)))
    return "\n".join(lines)


def sweep_csv(sweep: dict[float, SuiteResult], fh: TextIO) -> None:
    writer = csv.writer(fh)
    writer.writerow(["latency_s", "success_rate", "mean_nav_error", "mean_spl", "collision_rate"])
    for lat in sorted(sweep):
        r = sweep[lat]
        writer.writerow([lat, r.success_rate, r.mean_nav_error, r.mean_spl, r.collision_rate])
