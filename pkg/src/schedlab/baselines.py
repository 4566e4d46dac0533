"""Heuristic scheduling agents sharing the run_episode interface.

All heuristics are work-conserving per-timestep greedy rules: they only
consider placements at offset 0 (schedule-now) and return the void action
when nothing fits, so every non-void action they emit allocates a job.
"""

from dataclasses import dataclass

import numpy as np

from .environment import SchedulingEnv


@dataclass(frozen=True)
class AgentDecision:
    """An action plus whether it schedules a job right now (diagnostics)."""

    action: int
    fits_now: bool


class SjfAgent:
    """Shortest-job-first: schedule the fitting job with minimal duration."""

    name = "sjf"
    needs_image = False

    def decide(self, env: SchedulingEnv) -> AgentDecision:
        free = env.free_units()
        best = None
        best_duration = None
        for i, job in enumerate(env.slots):
            if job is None or not env.fits_at(job, 0, free):
                continue
            if best is None or job.duration < best_duration:
                best, best_duration = i, job.duration
        if best is None:
            return AgentDecision(env.config.void_action, fits_now=False)
        return AgentDecision(best, fits_now=True)

    def select_action(self, env: SchedulingEnv, image=None) -> int:
        return self.decide(env).action


class PackerAgent:
    """Packing heuristic: maximize demand . free-capacity alignment in row 0."""

    name = "packer"
    needs_image = False

    def decide(self, env: SchedulingEnv) -> AgentDecision:
        free = env.free_units()
        free_now = free[:, 0]
        best = None
        best_score = None
        for i, job in enumerate(env.slots):
            if job is None or not env.fits_at(job, 0, free):
                continue
            score = float(np.dot(job.demand, free_now))
            if best is None or score > best_score:
                best, best_score = i, score
        if best is None:
            return AgentDecision(env.config.void_action, fits_now=False)
        return AgentDecision(best, fits_now=True)

    def select_action(self, env: SchedulingEnv, image=None) -> int:
        return self.decide(env).action


class RandomAgent:
    """Uniform over all num_slots + 1 actions."""

    name = "random"
    needs_image = False

    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def select_action(self, env: SchedulingEnv, image=None) -> int:
        return int(self.rng.integers(env.config.num_actions))


class VoidAgent:
    """Always moves on; useful as a degenerate reference."""

    name = "void"
    needs_image = False

    def select_action(self, env: SchedulingEnv, image=None) -> int:
        return env.config.void_action


class PolicyAgent:
    """Wraps a policy network; argmax by default, categorical when sampling."""

    needs_image = True

    def __init__(self, net, rng: np.random.Generator | None = None,
                 sample: bool = False, name: str = "policy"):
        if sample and rng is None:
            raise ValueError("sampling PolicyAgent needs an rng")
        self.net = net
        self.rng = rng
        self.sample = sample
        self.name = name

    def select_action(self, env: SchedulingEnv, image) -> int:
        probs = self.net.forward(image[None, :, :])[0]
        if self.sample:
            return int(self.rng.choice(len(probs), p=probs / probs.sum()))
        return int(np.argmax(probs))


def resolve_agent(spec: str, rng: np.random.Generator | None = None):
    """Build an agent from a CLI name: sjf | packer | random | policy:<ckpt>."""
    if spec == "sjf":
        return SjfAgent()
    if spec == "packer":
        return PackerAgent()
    if spec == "random":
        if rng is None:
            raise ValueError("random agent needs an rng")
        return RandomAgent(rng)
    if spec.startswith("policy:"):
        from .neuralnet import load_checkpoint
        path = spec.split(":", 1)[1]
        net, _, _ = load_checkpoint(path)
        return PolicyAgent(net, name=f"policy:{path}")
    raise ValueError(f"unknown agent {spec!r}")
