"""Metrics and experiment grids: load sweeps, per-duration slowdown
quartiles, and training-curve summaries.

All aggregates are recomputable from the EpisodeRecords they were built
from. Slowdown statistics cover finished, non-censored jobs only; censored
jobs are counted and reported separately. Sweeps draw jobsets from the
held-out evaluation seed namespace, never from training streams.
"""

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .baselines import resolve_agent
from .environment import EnvConfig, EpisodeRecord, run_episode
from .workload import EVAL_NAMESPACE, ONLINE, TRAIN_NAMESPACE, WorkloadConfig, \
    generate_jobset, jobset_stream, rate_for_load, rng_stream


def average_slowdown(records) -> float:
    """Mean S_j over finished, non-censored jobs across all episodes."""
    values = [r.slowdown for rec in records for r in rec.finished_results()]
    if not values:
        raise ValueError("no finished jobs to average over")
    return float(np.mean(values))


def completion_time(record: EpisodeRecord) -> int:
    """Makespan of one episode: last completion minus earliest arrival."""
    if record.censored_count:
        raise ValueError("completion time undefined for a censored episode")
    if not record.results:
        return 0
    last = max(r.finish_time for r in record.results)
    first = min(r.arrival_time for r in record.results)
    return last - first


def quartiles(values) -> tuple[float, float, float, float, float]:
    """(min, Q1, median, Q3, max) with linear interpolation."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("quartiles of empty data")
    q = np.percentile(v, [0, 25, 50, 75, 100], method="linear")
    return tuple(float(x) for x in q)


@dataclass
class DurationBucket:
    duration: int
    count: int
    minimum: float
    q1: float
    median: float
    q3: float
    maximum: float
    sparse: bool  # fewer than 5 finished jobs; reported, not dropped


def slowdown_by_duration(records, min_count: int = 5) -> list[DurationBucket]:
    """Slowdown quartiles per distinct job duration (box-plot statistics)."""
    by_duration: dict[int, list[float]] = {}
    for rec in records:
        for r in rec.finished_results():
            by_duration.setdefault(r.duration, []).append(r.slowdown)
    buckets = []
    for duration in sorted(by_duration):
        vals = by_duration[duration]
        mn, q1, med, q3, mx = quartiles(vals)
        buckets.append(DurationBucket(
            duration=duration, count=len(vals), minimum=mn, q1=q1,
            median=med, q3=q3, maximum=mx, sparse=len(vals) < min_count))
    return buckets


def write_duration_csv(buckets: list[DurationBucket], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["duration", "count", "min", "q1", "median", "q3", "max",
                    "sparse"])
        for b in buckets:
            w.writerow([b.duration, b.count, b.minimum, b.q1, b.median, b.q3,
                        b.maximum, int(b.sparse)])


# -- sweeps ------------------------------------------------------------------

@dataclass(frozen=True)
class SweepSpec:
    """Grid of (load, agent) cells with fresh held-out jobsets per cell."""

    loads: tuple[float, ...]
    agents: tuple[str, ...]
    seeds_per_cell: int = 100
    seed: int = 0
    gamma: float = 0.99
    env_mode: str = ONLINE

    def __post_init__(self):
        if any(l <= 0 for l in self.loads):
            raise ValueError("loads must be positive")
        if self.seeds_per_cell < 1:
            raise ValueError("seeds_per_cell must be >= 1")


@dataclass
class CellReport:
    load: float
    agent: str
    episodes: int
    mean_slowdown: float
    std_slowdown: float
    mean_makespan: float
    std_makespan: float
    mean_discounted_reward: float
    max_discounted_reward: float
    dropped: int
    censored: int


@dataclass
class MetricsReport:
    cells: list[CellReport]
    rows: list[dict]


def held_out_jobsets(base_seed: int, workload: WorkloadConfig, mode: str,
                     count: int, *tags) -> list:
    """Evaluation jobsets; asserts the held-out seed namespace is used."""
    namespace = EVAL_NAMESPACE
    assert namespace != TRAIN_NAMESPACE
    return [
        generate_jobset(jobset_stream(base_seed, namespace, *tags, i),
                        workload, mode, seed=i)
        for i in range(count)
    ]


def evaluate_agent(agent, jobsets, env_cfg: EnvConfig,
                   gamma: float = 0.99) -> list[EpisodeRecord]:
    return [run_episode(js, env_cfg, agent, record=False) for js in jobsets]


def _cell_workload(spec: SweepSpec, workload: WorkloadConfig,
                   load: float) -> WorkloadConfig:
    if spec.env_mode != ONLINE:
        return workload
    rate = rate_for_load(workload, load)
    return WorkloadConfig(**{**_workload_dict(workload), "arrival_rate": rate})


def _run_cell(spec: SweepSpec, workload: WorkloadConfig, env_cfg: EnvConfig,
              li: int, load: float, agent_name: str):
    """One (load, agent) cell; standalone so worker processes can run it."""
    wl = _cell_workload(spec, workload, load)
    records = []
    rows = []
    for i in range(spec.seeds_per_cell):
        agent = resolve_agent(
            agent_name, rng=rng_stream(spec.seed, "sweep-agent",
                                       li, agent_name, i))
        js = held_out_jobsets(spec.seed, wl, spec.env_mode, 1,
                              "sweep", li, i)[0]
        rec = run_episode(js, env_cfg, agent, record=False)
        records.append(rec)
        finished = rec.finished_results()
        slowdown = (float(np.mean([r.slowdown for r in finished]))
                    if finished else math.nan)
        makespan = (completion_time(rec)
                    if rec.censored_count == 0 else math.nan)
        rows.append({
            "load": load, "agent": agent_name, "seed": i,
            "slowdown": slowdown, "makespan": makespan,
            "reward": rec.total_reward(spec.gamma),
            "dropped": rec.dropped, "censored": rec.censored_count,
        })
    return rows, _aggregate_cell(load, agent_name, records, spec.gamma)


def run_sweep(spec: SweepSpec, workload: WorkloadConfig, env_cfg: EnvConfig,
              out_dir=None, jobs: int = 1) -> MetricsReport:
    """Run every (load, agent) cell and aggregate; optionally export CSVs.

    Per cell: seeds_per_cell fresh held-out jobsets at that load, one episode
    per jobset. Long-format rows carry (load, agent, seed, slowdown, makespan,
    reward); cell aggregates exclude censored episodes from makespan and
    censored jobs from slowdown. Cells are independent; jobs > 1 spreads them
    over worker processes (results are identical either way).
    """
    grid = [(li, load, agent_name)
            for li, load in enumerate(spec.loads)
            for agent_name in spec.agents]
    if jobs > 1 and len(grid) > 1:
        import concurrent.futures as cf
        with cf.ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(
                _run_cell, *zip(*[(spec, workload, env_cfg, li, load, name)
                                  for li, load, name in grid])))
    else:
        results = [_run_cell(spec, workload, env_cfg, li, load, name)
                   for li, load, name in grid]
    rows = [row for cell_rows, _ in results for row in cell_rows]
    cells = [cell for _, cell in results]
    report = MetricsReport(cells=cells, rows=rows)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_sweep_csv(report, out / "sweep.csv")
        sidecar = {
            "spec": {"loads": list(spec.loads), "agents": list(spec.agents),
                     "seeds_per_cell": spec.seeds_per_cell, "seed": spec.seed,
                     "gamma": spec.gamma, "env_mode": spec.env_mode},
            "workload": _workload_dict(workload),
            "env": _env_dict(env_cfg),
        }
        (out / "sweep.config.json").write_text(
            json.dumps(sidecar, indent=2, sort_keys=True, default=list))
    return report


def _workload_dict(w: WorkloadConfig) -> dict:
    import dataclasses
    return dataclasses.asdict(w)


def _env_dict(e: EnvConfig) -> dict:
    import dataclasses
    return dataclasses.asdict(e)


def _aggregate_cell(load, agent_name, records, gamma) -> CellReport:
    slowdowns = [r.slowdown for rec in records for r in rec.finished_results()]
    makespans = [completion_time(rec) for rec in records
                 if rec.censored_count == 0]
    rewards = [rec.total_reward(gamma) for rec in records]
    # stds are only reported with >= 10 episodes behind them
    enough = len(records) >= 10
    return CellReport(
        load=load, agent=agent_name, episodes=len(records),
        mean_slowdown=float(np.mean(slowdowns)) if slowdowns else math.nan,
        std_slowdown=(float(np.std(slowdowns))
                      if slowdowns and enough else math.nan),
        mean_makespan=float(np.mean(makespans)) if makespans else math.nan,
        std_makespan=(float(np.std(makespans))
                      if makespans and enough else math.nan),
        mean_discounted_reward=float(np.mean(rewards)),
        max_discounted_reward=float(np.max(rewards)),
        dropped=sum(rec.dropped for rec in records),
        censored=sum(rec.censored_count for rec in records),
    )


def write_sweep_csv(report: MetricsReport, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["load", "agent", "seed", "slowdown",
                                          "makespan", "reward", "dropped",
                                          "censored"])
        w.writeheader()
        w.writerows(report.rows)


# -- training curves ------------------------------------------------------------

def training_curves(metrics_csv, out_csv=None) -> dict:
    """Summarize a training metrics log for trend assertions.

    Returns first/last quartile-of-epochs means of the reward and slowdown
    columns plus the full column arrays; optionally re-exports a tidy CSV.
    """
    with open(metrics_csv) as f:
        reader = csv.DictReader(f)
        rows = list(reader)
    if not rows:
        raise ValueError(f"empty metrics log {metrics_csv}")
    epochs = np.array([int(r["epoch"]) for r in rows])
    reward = np.array([float(r["mean_discounted_reward"]) for r in rows])
    slowdown = np.array([float(r["mean_slowdown"]) for r in rows])
    k = max(1, math.ceil(len(rows) / 4))

    def _mean(a):
        vals = a[np.isfinite(a)]
        return float(np.mean(vals)) if vals.size else math.nan

    summary = {
        "epochs": len(rows),
        "first_quartile_mean_reward": _mean(reward[:k]),
        "last_quartile_mean_reward": _mean(reward[-k:]),
        "first_quartile_mean_slowdown": _mean(slowdown[:k]),
        "last_quartile_mean_slowdown": _mean(slowdown[-k:]),
        "reward_trend": _mean(reward[-k:]) - _mean(reward[:k]),
        "slowdown_trend": _mean(slowdown[-k:]) - _mean(slowdown[:k]),
    }
    if out_csv is not None:
        with open(out_csv, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "mean_discounted_reward",
                        "max_discounted_reward", "mean_slowdown", "entropy"])
            for r in rows:
                w.writerow([r["epoch"], r["mean_discounted_reward"],
                            r["max_discounted_reward"], r["mean_slowdown"],
                            r["entropy"]])
    return summary
