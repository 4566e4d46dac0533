"""Synthetic jobset generation.

Jobs have two resource demands (one dominant, one secondary), a duration
drawn from a short/long mixture, and either Poisson-style online arrivals
or a single offline batch at t=0. All sampling goes through explicit
numpy Generators so jobsets are reproducible from (seed, config, mode).
"""

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

ONLINE = "online"
OFFLINE = "offline"

# Seed namespaces. Training and held-out evaluation draw jobsets from
# disjoint RNG streams; evaluation code asserts it never uses TRAIN_NAMESPACE.
TRAIN_NAMESPACE = "train"
EVAL_NAMESPACE = "eval"


def rng_stream(*keys) -> np.random.Generator:
    """Derive an independent, platform-stable RNG from a tuple of keys.

    Keys may be ints or strings; the stream is a pure function of them, so
    parallel workers can derive non-overlapping generators without sharing
    state.
    """
    h = hashlib.sha256()
    for k in keys:
        if isinstance(k, str):
            h.update(b"s" + k.encode("utf-8"))
        elif isinstance(k, (int, np.integer)):
            h.update(b"i" + int(k).to_bytes(8, "little", signed=True))
        else:
            raise TypeError(f"rng_stream keys must be int or str, got {type(k)!r}")
        h.update(b"\x1f")
    words = np.frombuffer(h.digest(), dtype=np.uint32)
    return np.random.default_rng(np.random.SeedSequence(words.tolist()))


def jobset_stream(base_seed: int, namespace: str, *indices) -> np.random.Generator:
    """RNG for one jobset inside a named seed namespace."""
    if namespace not in (TRAIN_NAMESPACE, EVAL_NAMESPACE):
        raise ValueError(f"unknown seed namespace {namespace!r}")
    return rng_stream(base_seed, namespace, *indices)


@dataclass(frozen=True)
class Job:
    """One unit of work: per-resource demand, ideal duration, arrival time."""

    id: int
    demand: tuple[int, ...]
    duration: int
    arrival_time: int

    def __post_init__(self):
        if self.duration < 1:
            raise ValueError(f"job {self.id}: duration must be >= 1")
        if self.arrival_time < 0:
            raise ValueError(f"job {self.id}: arrival_time must be >= 0")
        if any(d < 1 for d in self.demand):
            raise ValueError(f"job {self.id}: demands must be >= 1")
        object.__setattr__(self, "demand", tuple(int(d) for d in self.demand))


@dataclass(frozen=True)
class Jobset:
    """A sampled arrival sequence; the unit over which episodes run."""

    jobs: tuple[Job, ...]
    mode: str
    seed: int
    nominal_load: float | None = None

    def __post_init__(self):
        if self.mode not in (ONLINE, OFFLINE):
            raise ValueError(f"mode must be {ONLINE!r} or {OFFLINE!r}")
        ids = [j.id for j in self.jobs]
        if len(set(ids)) != len(ids):
            raise ValueError("job ids must be unique")
        arrivals = [j.arrival_time for j in self.jobs]
        if any(a > b for a, b in zip(arrivals, arrivals[1:])):
            raise ValueError("jobs must be ordered by arrival_time")
        if self.mode == OFFLINE and any(a != 0 for a in arrivals):
            raise ValueError("offline jobsets must have all arrivals at t=0")
        object.__setattr__(self, "jobs", tuple(self.jobs))

    def __len__(self):
        return len(self.jobs)


@dataclass(frozen=True)
class WorkloadConfig:
    """Distribution parameters for synthetic jobs.

    Demands are integer resource units: the dominant resource draws uniformly
    from [ceil(0.5*r), r], the other from [ceil(0.1*r), ceil(0.2*r)] (cell-based
    occupancy forces integral demands). Durations are a 80/20 short/long
    mixture of uniform integer ranges.
    """

    r: int = 20
    num_resources: int = 2
    short_duration_range: tuple[int, int] = (1, 3)
    long_duration_range: tuple[int, int] = (10, 15)
    short_prob: float = 0.8
    primary_demand_frac: tuple[float, float] = (0.5, 1.0)
    secondary_demand_frac: tuple[float, float] = (0.1, 0.2)
    arrival_window: int = 50
    arrival_rate: float | None = None
    num_jobs: int | None = None

    def __post_init__(self):
        if self.r < 1:
            raise ValueError("r must be >= 1")
        if self.num_resources < 2:
            raise ValueError("need at least 2 resource types")
        if not 0.0 < self.short_prob < 1.0:
            raise ValueError("short_prob must be in (0, 1)")
        for name in ("short_duration_range", "long_duration_range"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ValueError(f"{name} must satisfy 1 <= lo <= hi")
        for lo, hi in (self.primary_demand_bounds(), self.secondary_demand_bounds()):
            if not 1 <= lo <= hi <= self.r:
                raise ValueError("demand ranges are empty after discretization")
        if self.arrival_window < 1:
            raise ValueError("arrival_window must be >= 1")

    def primary_demand_bounds(self) -> tuple[int, int]:
        lo, hi = self.primary_demand_frac
        return max(1, math.ceil(lo * self.r)), max(1, math.ceil(hi * self.r))

    def secondary_demand_bounds(self) -> tuple[int, int]:
        lo, hi = self.secondary_demand_frac
        return max(1, math.ceil(lo * self.r)), max(1, math.ceil(hi * self.r))


def _uniform_int(rng: np.random.Generator, bounds: tuple[int, int]) -> int:
    lo, hi = bounds
    return int(rng.integers(lo, hi + 1))


def sample_job(rng: np.random.Generator, config: WorkloadConfig,
               job_id: int, arrival_time: int) -> Job:
    """Draw one job: duration mixture, then dominant resource and demands."""
    if rng.random() < config.short_prob:
        duration = _uniform_int(rng, config.short_duration_range)
    else:
        duration = _uniform_int(rng, config.long_duration_range)
    dominant = int(rng.integers(config.num_resources))
    primary = _uniform_int(rng, config.primary_demand_bounds())
    secondary = _uniform_int(rng, config.secondary_demand_bounds())
    demand = tuple(primary if k == dominant else secondary
                   for k in range(config.num_resources))
    return Job(id=job_id, demand=demand, duration=duration,
               arrival_time=arrival_time)


def generate_jobset(rng: np.random.Generator, config: WorkloadConfig,
                    mode: str, seed: int = 0) -> Jobset:
    """Sample a full jobset.

    Online: each timestep in [0, arrival_window) receives a job with
    probability min(arrival_rate, 1) — a Bernoulli-thinned Poisson process at
    unit time resolution, so at most one job arrives per step. Offline:
    exactly num_jobs jobs, all arriving at t=0.
    """
    jobs: list[Job] = []
    if mode == ONLINE:
        rate = config.arrival_rate
        if rate is None:
            raise ValueError("online mode requires arrival_rate")
        if rate < 0:
            raise ValueError("arrival_rate must be >= 0")
        p = min(rate, 1.0)
        for t in range(config.arrival_window):
            if rng.random() < p:
                jobs.append(sample_job(rng, config, job_id=len(jobs),
                                       arrival_time=t))
        load = compute_load(config)
    elif mode == OFFLINE:
        if config.num_jobs is None or config.num_jobs <= 0:
            raise ValueError("offline mode requires num_jobs > 0")
        for i in range(config.num_jobs):
            jobs.append(sample_job(rng, config, job_id=i, arrival_time=0))
        load = None
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return Jobset(jobs=tuple(jobs), mode=mode, seed=seed, nominal_load=load)


def expected_duration(config: WorkloadConfig) -> float:
    s_lo, s_hi = config.short_duration_range
    l_lo, l_hi = config.long_duration_range
    return (config.short_prob * (s_lo + s_hi) / 2.0
            + (1.0 - config.short_prob) * (l_lo + l_hi) / 2.0)


def expected_demand_sum(config: WorkloadConfig) -> float:
    p_lo, p_hi = config.primary_demand_bounds()
    s_lo, s_hi = config.secondary_demand_bounds()
    return (p_lo + p_hi) / 2.0 + (s_lo + s_hi) / 2.0


def compute_load(config: WorkloadConfig, rate: float | None = None) -> float:
    """Nominal cluster load: expected arriving resource-time per unit capacity.

    load = rate * E[sum_k demand_k * duration] / (num_resources * r); 1.0
    saturates the cluster. Uses the configured arrival_rate when rate is None.
    """
    if rate is None:
        rate = config.arrival_rate
    if rate is None:
        raise ValueError("no arrival rate given")
    per_job = expected_duration(config) * expected_demand_sum(config)
    return rate * per_job / (config.num_resources * config.r)


def rate_for_load(config: WorkloadConfig, target_load: float) -> float:
    """Inverse of compute_load: the arrival rate achieving a target load.

    May exceed 1.0 at extreme targets; generation then clamps the per-step
    arrival probability to 1, capping the effective load.
    """
    per_job = expected_duration(config) * expected_demand_sum(config)
    return target_load * config.num_resources * config.r / per_job


def empirical_load(jobset: Jobset, config: WorkloadConfig) -> float:
    """Realized load of one jobset: resource-time of arrivals over window capacity."""
    total = sum(sum(j.demand) * j.duration for j in jobset.jobs)
    return total / (config.num_resources * config.r * config.arrival_window)


def jobset_to_json(jobset: Jobset, r: int) -> str:
    """Serialize to the interchange schema; byte-stable for a fixed jobset."""
    doc = {
        "seed": int(jobset.seed),
        "mode": jobset.mode,
        "r": int(r),
        "jobs": [
            {
                "id": int(j.id),
                "arrival": int(j.arrival_time),
                "duration": int(j.duration),
                "demand": [int(d) for d in j.demand],
            }
            for j in jobset.jobs
        ],
    }
    return json.dumps(doc, separators=(",", ":"))


def jobset_from_json(text: str) -> tuple[Jobset, int]:
    """Parse the interchange schema; returns (jobset, r)."""
    doc = json.loads(text)
    jobs = tuple(
        Job(id=rec["id"], demand=tuple(rec["demand"]),
            duration=rec["duration"], arrival_time=rec["arrival"])
        for rec in doc["jobs"]
    )
    return Jobset(jobs=jobs, mode=doc["mode"], seed=doc["seed"]), int(doc["r"])
