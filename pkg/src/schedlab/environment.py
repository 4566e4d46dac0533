"""The scheduling MDP.

State is a cluster occupancy grid over a visible future horizon, a fixed set
of job slots, a FIFO backlog, and a clock. Selecting a slot whose job fits
allocates it at the earliest feasible offset without advancing time; any
other action (the explicit void action, an empty slot, or a job that fits
nowhere in the horizon) is a "Move on": the clock advances one step, the
grid shifts up a row, finished jobs are retired, new arrivals surface, and
the per-timestep reward is emitted. Rewards are zero on allocations, so the
per-timestep reward semantics stay exact under multiple selections per step.
"""

import copy
import json
from collections import deque
from dataclasses import dataclass

import numpy as np

from .workload import Job, Jobset, OFFLINE

SLOWDOWN = "slowdown"
COMPLETION_TIME = "completion_time"


@dataclass(frozen=True)
class EnvConfig:
    r: int = 20
    num_resources: int = 2
    time_horizon: int = 20
    num_slots: int = 10
    backlog_capacity: int = 60
    arrival_window: int = 50
    objective: str = SLOWDOWN
    hard_step_cap: int = 1000

    def __post_init__(self):
        for name in ("r", "num_resources", "time_horizon", "num_slots",
                     "arrival_window", "hard_step_cap"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.backlog_capacity < 0:
            raise ValueError("backlog_capacity must be >= 0")
        if self.objective not in (SLOWDOWN, COMPLETION_TIME):
            raise ValueError(f"unknown objective {self.objective!r}")

    @property
    def num_actions(self) -> int:
        return self.num_slots + 1

    @property
    def void_action(self) -> int:
        return self.num_slots

    @property
    def backlog_columns(self) -> int:
        return -(-self.backlog_capacity // self.time_horizon)

    @property
    def image_width(self) -> int:
        return (self.num_resources * self.r * (1 + self.num_slots)
                + self.backlog_columns)

    @property
    def image_shape(self) -> tuple[int, int]:
        return (self.time_horizon, self.image_width)


@dataclass(frozen=True)
class JobResult:
    """Scheduling outcome of one job.

    finish_time is the absolute timestep at which the job was observed
    complete; turnaround (C_j) and slowdown (S_j = C_j / T_j) derive from it.
    Jobs unfinished at the hard step cap are flagged censored and excluded
    from slowdown statistics.
    """

    job_id: int
    arrival_time: int
    start_time: int | None
    finish_time: int
    duration: int
    censored: bool = False

    @property
    def turnaround(self) -> int:
        return self.finish_time - self.arrival_time

    @property
    def slowdown(self) -> float:
        return self.turnaround / self.duration

    def to_dict(self) -> dict:
        return {
            "job_id": self.job_id,
            "arrival_time": self.arrival_time,
            "start_time": self.start_time,
            "finish_time": self.finish_time,
            "duration": self.duration,
            "turnaround": self.turnaround,
            "slowdown": self.slowdown,
            "censored": self.censored,
        }


@dataclass
class StepOutcome:
    image: np.ndarray | None
    reward: float
    time_advanced: bool
    done: bool
    info: dict


class SchedulingEnv:
    """One episode of the scheduling MDP over a fixed jobset."""

    def __init__(self, config: EnvConfig, render: bool = True):
        self.config = config
        self.render_enabled = render
        self.jobset: Jobset | None = None
        self.done = True

    # -- lifecycle -----------------------------------------------------

    def reset(self, jobset: Jobset) -> StepOutcome:
        cfg = self.config
        if jobset.mode == OFFLINE:
            if cfg.backlog_capacity != 0:
                raise ValueError("offline mode requires backlog_capacity = 0")
            if len(jobset) > cfg.num_slots:
                raise ValueError(
                    f"offline jobset has {len(jobset)} jobs but only "
                    f"{cfg.num_slots} slots")
        self.jobset = jobset
        self.clock = 0
        self.occupancy = np.full(
            (cfg.num_resources, cfg.time_horizon, cfg.r), -1, dtype=np.int32)
        self.slots: list[Job | None] = [None] * cfg.num_slots
        self.backlog: deque[Job] = deque()
        self.pending: deque[Job] = deque(jobset.jobs)
        self.running: dict[int, tuple[Job, int]] = {}  # id -> (job, start_time)
        self.finished: list[JobResult] = []
        self.dropped = 0
        self.steps = 0
        dropped_now = self._surface_arrivals()
        self.done = len(jobset) == 0
        return StepOutcome(
            image=self.render_image() if self.render_enabled else None,
            reward=0.0,
            time_advanced=False,
            done=self.done,
            info={"valid_action": None, "finished": [], "dropped_now": dropped_now},
        )

    def clone(self) -> "SchedulingEnv":
        return copy.deepcopy(self)

    # -- queries used by agents and rendering ----------------------------

    def free_units(self) -> np.ndarray:
        """Free capacity per (resource, horizon row)."""
        return self.config.r - np.count_nonzero(self.occupancy != -1, axis=2)

    def fits_at(self, job: Job, offset: int, free: np.ndarray | None = None) -> bool:
        if free is None:
            free = self.free_units()
        end = offset + job.duration
        if end > self.config.time_horizon:
            return False
        for k in range(self.config.num_resources):
            if np.any(free[k, offset:end] < job.demand[k]):
                return False
        return True

    def earliest_offset(self, job: Job) -> int | None:
        free = self.free_units()
        for d in range(self.config.time_horizon - job.duration + 1):
            if self.fits_at(job, d, free):
                return d
        return None

    # -- transition ------------------------------------------------------

    def step(self, action: int) -> StepOutcome:
        cfg = self.config
        if self.done:
            raise RuntimeError("step() called after episode end")
        if not 0 <= action <= cfg.num_slots:
            raise ValueError(
                f"action {action} out of range [0, {cfg.num_slots}]")
        self.steps += 1
        allocated = False
        if action < cfg.num_slots and self.slots[action] is not None:
            job = self.slots[action]
            offset = self.earliest_offset(job)
            if offset is not None:
                self._allocate(job, offset)
                self.slots[action] = None
                self._refill_slots()
                allocated = True
        if allocated:
            reward = 0.0
            finished_now: list[int] = []
            dropped_now = 0
        else:
            reward, finished_now, dropped_now = self._move_on()
        return StepOutcome(
            image=self.render_image() if self.render_enabled else None,
            reward=reward,
            time_advanced=not allocated,
            done=self.done,
            info={"valid_action": allocated, "finished": finished_now,
                  "dropped_now": dropped_now},
        )

    def _allocate(self, job: Job, offset: int) -> None:
        occ = self.occupancy
        for k in range(self.config.num_resources):
            need = job.demand[k]
            for t in range(offset, offset + job.duration):
                row = occ[k, t]
                empty = np.flatnonzero(row == -1)[:need]
                row[empty] = job.id
        self.running[job.id] = (job, self.clock + offset)

    def _refill_slots(self) -> None:
        for i in range(self.config.num_slots):
            if not self.backlog:
                break
            if self.slots[i] is None:
                self.slots[i] = self.backlog.popleft()

    def _surface_arrivals(self) -> int:
        """Move pending jobs whose arrival time has come into slots/backlog."""
        dropped_now = 0
        while self.pending and self.pending[0].arrival_time <= self.clock:
            job = self.pending.popleft()
            placed = False
            for i in range(self.config.num_slots):
                if self.slots[i] is None:
                    self.slots[i] = job
                    placed = True
                    break
            if not placed:
                if len(self.backlog) < self.config.backlog_capacity:
                    self.backlog.append(job)
                else:
                    self.dropped += 1
                    dropped_now += 1
        return dropped_now

    def _in_system(self) -> list[Job]:
        jobs = [job for job, _ in self.running.values()]
        jobs.extend(j for j in self.slots if j is not None)
        jobs.extend(self.backlog)
        return jobs

    def _reward(self) -> float:
        jobs = self._in_system()
        if self.config.objective == SLOWDOWN:
            return -sum(1.0 / j.duration for j in jobs)
        return -float(len(jobs))

    def _move_on(self) -> tuple[float, list[int], int]:
        cfg = self.config
        reward = self._reward()
        self.clock += 1
        occ = self.occupancy
        occ[:, :-1] = occ[:, 1:]
        occ[:, -1] = -1
        finished_now: list[int] = []
        for job_id in list(self.running):
            job, start = self.running[job_id]
            if start + job.duration <= self.clock:
                del self.running[job_id]
                self.finished.append(JobResult(
                    job_id=job.id, arrival_time=job.arrival_time,
                    start_time=start, finish_time=self.clock,
                    duration=job.duration))
                finished_now.append(job.id)
        self._refill_slots()
        dropped_now = self._surface_arrivals()
        total = len(self.jobset)
        if len(self.finished) == total - self.dropped:
            self.done = True
        elif self.clock >= cfg.hard_step_cap:
            self._censor_remaining()
            self.done = True
        return reward, finished_now, dropped_now

    def _censor_remaining(self) -> None:
        """At the hard step cap, close out unfinished jobs as censored."""
        for job_id in list(self.running):
            job, start = self.running[job_id]
            self.finished.append(JobResult(
                job_id=job.id, arrival_time=job.arrival_time, start_time=start,
                finish_time=self.clock, duration=job.duration, censored=True))
        self.running.clear()
        waiting = [j for j in self.slots if j is not None]
        waiting.extend(self.backlog)
        waiting.extend(self.pending)
        for job in waiting:
            self.finished.append(JobResult(
                job_id=job.id, arrival_time=job.arrival_time, start_time=None,
                finish_time=max(self.clock, job.arrival_time),
                duration=job.duration, censored=True))
        self.slots = [None] * self.config.num_slots
        self.backlog.clear()
        self.pending.clear()

    # -- rendering -------------------------------------------------------

    def render_image(self) -> np.ndarray:
        """Binary state image: per resource a cluster block then one block per
        slot, then the backlog block (online only). Cluster rows show occupied
        unit counts left-packed; slot blocks show demand x duration rectangles;
        the backlog shows only its count, filled column-major."""
        cfg = self.config
        h, w = cfg.image_shape
        image = np.zeros((h, w), dtype=np.float64)
        col = 0
        counts = cfg.r - self.free_units()  # (num_resources, horizon)
        for k in range(cfg.num_resources):
            image[:, col:col + cfg.r] = np.arange(cfg.r) < counts[k][:, None]
            col += cfg.r
            for job in self.slots:
                if job is not None:
                    rows = min(job.duration, h)
                    image[:rows, col:col + job.demand[k]] = 1.0
                col += cfg.r
        n = len(self.backlog)
        for i in range(n):
            image[i % h, col + i // h] = 1.0
        return image


@dataclass
class EpisodeRecord:
    """Everything produced by one episode, sufficient to recompute metrics."""

    agent_name: str
    jobset_seed: int
    mode: str
    objective: str
    results: tuple[JobResult, ...]
    rewards: np.ndarray
    num_steps: int
    final_clock: int
    dropped: int
    images: np.ndarray | None = None
    actions: np.ndarray | None = None

    @property
    def censored_count(self) -> int:
        return sum(1 for r in self.results if r.censored)

    def finished_results(self) -> list[JobResult]:
        return [r for r in self.results if not r.censored]

    def total_reward(self, gamma: float = 1.0) -> float:
        if gamma == 1.0:
            return float(np.sum(self.rewards))
        acc = 0.0
        for r in self.rewards[::-1]:
            acc = r + gamma * acc
        return float(acc)

    def to_json(self, config: EnvConfig) -> str:
        doc = {
            "agent": self.agent_name,
            "jobset_seed": self.jobset_seed,
            "mode": self.mode,
            "objective": self.objective,
            "num_steps": self.num_steps,
            "final_clock": self.final_clock,
            "dropped": self.dropped,
            "censored": self.censored_count,
            "rewards": [float(r) for r in self.rewards],
            "results": [r.to_dict() for r in self.results],
            "config": {
                "r": config.r, "num_resources": config.num_resources,
                "time_horizon": config.time_horizon,
                "num_slots": config.num_slots,
                "backlog_capacity": config.backlog_capacity,
                "objective": config.objective,
                "hard_step_cap": config.hard_step_cap,
            },
        }
        return json.dumps(doc, separators=(",", ":"))


def run_episode(jobset: Jobset, config: EnvConfig, agent,
                record: bool = False) -> EpisodeRecord:
    """Drive one episode with any agent (heuristic or policy).

    With record=True the per-step (state image, action) pairs are kept, e.g.
    for behavior-cloning datasets; images are stored as uint8 to keep
    demonstration corpora small.
    """
    need_image = record or getattr(agent, "needs_image", False)
    env = SchedulingEnv(config, render=need_image)
    out = env.reset(jobset)
    rewards: list[float] = []
    images: list[np.ndarray] = []
    actions: list[int] = []
    while not out.done:
        action = agent.select_action(env, out.image)
        if record:
            images.append(out.image.astype(np.uint8))
            actions.append(action)
        out = env.step(action)
        rewards.append(out.reward)
    return EpisodeRecord(
        agent_name=getattr(agent, "name", type(agent).__name__),
        jobset_seed=jobset.seed,
        mode=jobset.mode,
        objective=config.objective,
        results=tuple(env.finished),
        rewards=np.asarray(rewards, dtype=np.float64),
        num_steps=env.steps,
        final_clock=env.clock,
        dropped=env.dropped,
        images=np.stack(images).astype(np.uint8) if images else None,
        actions=np.asarray(actions, dtype=np.int64) if actions else None,
    )


def write_image_pgm(image: np.ndarray, path) -> None:
    """Debug dump of a state image as a binary PGM file."""
    h, w = image.shape
    data = (255 * (1.0 - image)).astype(np.uint8)  # occupied cells dark
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())
