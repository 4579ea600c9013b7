"""Command-line entry points: suite generation, demonstration collection,
imitation and RL training, evaluation, latency sweeps, and episode replay.

Set LATNAV_WORKERS to parallelize evaluation over episodes.
"""

from __future__ import annotations

import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import click
import numpy as np
import yaml

from . import bench, executor, policy as pol, suites, training
from .reasoner import LatencyModel, default_latency_model
from .world import ARCHETYPES


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    with open(path) as fh:
        return yaml.safe_load(fh) or {}


def _latency_model(cfg: dict) -> LatencyModel:
    section = cfg.get("latency_model")
    if section:
        return LatencyModel.from_config(section)
    return default_latency_model()


def _executor_config(cfg: dict, mode: str, protocol: str, seed: int) -> executor.ExecutorConfig:
    section = dict(cfg.get("executor", {}))
    section.setdefault("mode", mode)
    section.setdefault("latency_protocol", protocol)
    section.setdefault("seed", seed)
    section["latency_model"] = _latency_model(cfg)
    return executor.ExecutorConfig(**section)


def _workers() -> int:
    return max(1, int(os.environ.get("LATNAV_WORKERS", "1")))


def _eval_shard(args):
    specs, params_path, config = args
    params = pol.load_params(params_path)
    return bench.run_suite(specs, params, config)


def _run_suite_parallel(specs, params_path, config) -> bench.SuiteResult:
    workers = _workers()
    params = pol.load_params(params_path)
    if workers <= 1 or len(specs) < 2:
        return bench.run_suite(specs, params, config)
    shards = [list(specs[i::workers]) for i in range(workers)]
    shards = [s for s in shards if s]
    with ProcessPoolExecutor(max_workers=len(shards)) as pool:
        results = list(pool.map(_eval_shard, [(s, params_path, config) for s in shards]))
    # restore suite order
    by_id = {}
    for res in results:
        for ep in res.episodes:
            by_id[ep.instruction_id] = ep
    episodes = [by_id[s.instruction_id] for s in specs]
    return bench.SuiteResult(episodes=episodes, config_fingerprint=results[0].config_fingerprint)


mode_option = click.option(
    "--mode",
    type=click.Choice(["async", "sync", "no-reasoning"]),
    default="async",
    show_default=True,
)
protocol_option = click.option(
    "--latency-protocol",
    type=click.Choice(list(executor.PROTOCOLS)),
    default="default",
    show_default=True,
)


@click.group()
def main():
    """Latency-tolerant navigation: training and evaluation tools."""


@main.command("gen-suite")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--probe", is_flag=True, help="Emit the small 24-episode probe suite.")
@click.option("--out", type=click.Path(), required=True)
def gen_suite(config_path, seed, probe, out):
    """Generate a deterministic evaluation suite."""
    cfg = _load_config(config_path)
    if probe:
        specs = suites.probe_suite(seed)
        dropped = []
    else:
        section = cfg.get("suite", {})
        specs, dropped = suites.generate_suite(
            seed,
            archetypes=tuple(section.get("archetypes", ARCHETYPES)),
            densities=tuple(section.get("densities", suites.DEFAULT_DENSITIES)),
            bands=tuple(section.get("bands", tuple(suites.DISTANCE_BANDS))),
        )
    with open(out, "w") as fh:
        suites.write_suite(specs, fh, dropped)
    click.echo(f"wrote {len(specs)} episodes to {out} ({len(dropped)} combos dropped)")


@main.command("collect-demos")
@click.option("--suite", "suite_path", type=click.Path(exists=True), required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), required=True)
def collect_demos(suite_path, seed, out):
    """Run the scripted expert over a suite and store demonstrations."""
    with open(suite_path) as fh:
        specs = suites.read_suite(fh)
    demos, failed = training.collect_demonstrations(specs, seed)
    with open(out, "w") as fh:
        training.write_demos(demos, fh)
    click.echo(f"collected {len(demos)} demo episodes ({failed} expert failures) -> {out}")


@main.command("train-il")
@click.option("--demos", "demo_path", type=click.Path(exists=True), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), required=True)
def train_il(demo_path, config_path, seed, out):
    """Imitation learning with injected guidance delays."""
    cfg = _load_config(config_path)
    il_cfg = training.ILConfig(**cfg.get("il", {}))
    with open(demo_path) as fh:
        demos = training.read_demos(fh)
    rng = np.random.default_rng(seed)
    params, curve = training.il_train(demos, il_cfg, rng)
    pol.save_params(params, out)
    click.echo(f"epoch losses: {['%.4f' % v for v in curve]}")
    click.echo(f"saved parameters to {out}")


@main.command("train-rl")
@click.option("--params", "params_path", type=click.Path(exists=True), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), required=True)
@click.option("--curve-out", type=click.Path(), default=None, help="CSV of per-iteration returns.")
def train_rl(params_path, config_path, seed, out, curve_out):
    """PPO fine-tuning under asynchronous delayed guidance."""
    cfg = _load_config(config_path)
    ppo_cfg = training.PPOConfig(**cfg.get("ppo", {}))
    params = pol.load_params(params_path)
    rng = np.random.default_rng(seed)
    try:
        params, history = training.rl_train(params, ppo_cfg, rng, seed=seed)
    except training.DivergenceError as exc:
        click.echo(f"training halted: {exc}", err=True)
        sys.exit(1)
    pol.save_params(params, out)
    if curve_out:
        with open(curve_out, "w") as fh:
            fh.write("iteration,mean_return,episodes,policy_loss,value_loss\n")
            for h in history:
                fh.write(
                    f"{h['iteration']},{h['mean_return']},{h['episodes']},"
                    f"{h['policy_loss']},{h['value_loss']}\n"
                )
    returns = [h["mean_return"] for h in history if h["episodes"]]
    if returns:
        click.echo(f"mean return: first {returns[0]:.1f} last {returns[-1]:.1f}")
    click.echo(f"saved parameters to {out}")


@main.command("eval")
@click.option("--suite", "suite_path", type=click.Path(exists=True), required=True)
@click.option("--params", "params_path", type=click.Path(exists=True), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=0, show_default=True)
@mode_option
@protocol_option
@click.option("--out", type=click.Path(), default=None, help="Per-episode metrics CSV.")
def eval_cmd(suite_path, params_path, config_path, seed, mode, latency_protocol, out):
    """Run a suite and report SR / NE / SPL / CR."""
    cfg = _load_config(config_path)
    config = _executor_config(cfg, mode.replace("-", "_"), latency_protocol, seed)
    with open(suite_path) as fh:
        specs = suites.read_suite(fh)
    result = _run_suite_parallel(specs, params_path, config)
    if out:
        with open(out, "w") as fh:
            bench.write_csv(result, fh)
    click.echo(bench.summary_table(result, title=Path(suite_path).stem))


@main.command("sweep-latency")
@click.option("--suite", "suite_path", type=click.Path(exists=True), required=True)
@click.option("--params", "params_path", type=click.Path(exists=True), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=0, show_default=True)
@mode_option
@protocol_option
@click.option("--latencies", default="1,2,3,4,5", show_default=True)
@click.option("--out", type=click.Path(), default=None, help="Sweep summary CSV.")
def sweep_latency(suite_path, params_path, config_path, seed, mode, latency_protocol, latencies, out):
    """Evaluate across fixed reasoner latencies."""
    cfg = _load_config(config_path)
    config = _executor_config(cfg, mode.replace("-", "_"), latency_protocol, seed)
    params = pol.load_params(params_path)
    with open(suite_path) as fh:
        specs = suites.read_suite(fh)
    lats = [float(s) for s in latencies.split(",")]
    sweep = bench.latency_sweep(specs, params, config, latencies_s=lats)
    if out:
        with open(out, "w") as fh:
            bench.sweep_csv(sweep, fh)
    click.echo(bench.sweep_table(sweep))


@main.command("replay")
@click.option("--record", "record_path", type=click.Path(exists=True), required=True)
@click.option("--every", type=int, default=30, show_default=True, help="Print every Nth frame.")
def replay(record_path, every):
    """Print the pose trace and tick metadata of a stored episode record."""
    with open(record_path) as fh:
        record = executor.EpisodeRecord.read(fh)
    spec = record.spec
    click.echo(
        f"{spec.instruction_id}: {spec.scene_archetype} seed={spec.map_seed} "
        f"peds={spec.num_pedestrians} -> {record.termination} in {record.duration:.1f}s"
    )
    ticks_by_frame = {t.frame: t for t in record.ticks}
    for i in range(0, record.poses.shape[0], every):
        x, y, th = record.poses[i]
        line = f"  f={i:5d}  x={x:7.2f} y={y:7.2f} th={th:6.2f}"
        t = ticks_by_frame.get(i)
        if t is not None:
            line += f"  dt={t.delta_t:5.2f} ready={int(t.ready)} cmd=({t.command[0]:.2f},{t.command[1]:.2f})"
        click.echo(line)
    if record.collision_frames:
        click.echo(f"  collisions at frames: {record.collision_frames}")


if __name__ == "__main__":
    main()
