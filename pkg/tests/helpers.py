"""Shared test utilities: invariant checking and small config builders."""

import numpy as np

from schedlab.environment import EnvConfig, SchedulingEnv
from schedlab.workload import WorkloadConfig, rate_for_load


def desk_workload(load: float | None = None, **overrides) -> WorkloadConfig:
    kw = dict(r=10, long_duration_range=(5, 8), arrival_window=25)
    kw.update(overrides)
    cfg = WorkloadConfig(**kw)
    if load is not None:
        cfg = WorkloadConfig(**{**kw, "arrival_rate": rate_for_load(cfg, load)})
    return cfg


def desk_env(**overrides) -> EnvConfig:
    kw = dict(r=10, time_horizon=10, num_slots=5, backlog_capacity=30,
              arrival_window=25)
    kw.update(overrides)
    return EnvConfig(**kw)


def check_invariants(env: SchedulingEnv, total_jobs: int) -> None:
    """Assert capacity safety, non-preemption, conservation, and S_j >= 1."""
    cfg = env.config
    occ = env.occupancy
    counts = np.count_nonzero(occ != -1, axis=2)
    assert counts.max(initial=0) <= cfg.r, "row capacity exceeded"

    # each running job occupies exactly demand[k] cells in every visible
    # remaining row; anything else means a preemption or corrupted placement
    for job_id, (job, start) in env.running.items():
        first = max(start - env.clock, 0)
        last = start + job.duration - env.clock  # exclusive
        for k in range(cfg.num_resources):
            for t in range(first, min(last, cfg.time_horizon)):
                cells = int(np.count_nonzero(occ[k, t] == job_id))
                assert cells == job.demand[k], (
                    f"job {job_id} row {t} res {k}: {cells} != {job.demand[k]}")
        for t in range(min(last, cfg.time_horizon), cfg.time_horizon):
            assert not np.any(occ[:, t] == job_id), "cells beyond job end"

    in_slots = sum(1 for j in env.slots if j is not None)
    conserved = (len(env.pending) + len(env.backlog) + in_slots
                 + len(env.running) + len(env.finished) + env.dropped)
    assert conserved == total_jobs, f"conservation: {conserved} != {total_jobs}"

    for res in env.finished:
        if not res.censored:
            assert res.slowdown >= 1.0, f"slowdown {res.slowdown} < 1"
            assert res.start_time >= res.arrival_time
            assert res.turnaround >= res.duration
