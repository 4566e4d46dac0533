"""Exhaustive action-sequence search over tiny scheduling instances.

Independent oracle for optimal average slowdown: memoized depth-first search
over the environment's full action space. State equivalence uses exactly the
quantities the dynamics depend on (clock, per-row free counts, waiting job
ids, running set), so the search is exact.
"""

import math

from schedlab.environment import SchedulingEnv


def _state_key(env: SchedulingEnv):
    free = env.free_units()
    return (
        env.clock,
        free.tobytes(),
        tuple(j.id if j is not None else -1 for j in env.slots),
        tuple(j.id for j in env.backlog),
        tuple(sorted((jid, start) for jid, (_, start) in env.running.items())),
    )


def _candidate_actions(env: SchedulingEnv) -> list[int]:
    """Void plus every slot whose job can actually be placed; selecting an
    empty or non-fitting slot is equivalent to void, so those branches are
    skipped."""
    actions = []
    for i, job in enumerate(env.slots):
        if job is not None and env.earliest_offset(job) is not None:
            actions.append(i)
    actions.append(env.config.void_action)
    return actions


def optimal_schedule(jobset, config) -> tuple[float, list[int]]:
    """Minimum achievable sum of job slowdowns and one optimal action
    sequence, by exhaustive search."""
    memo: dict = {}

    def future_cost(env: SchedulingEnv) -> float:
        if env.done:
            return 0.0
        key = _state_key(env)
        if key in memo:
            return memo[key]
        best = math.inf
        for action in _candidate_actions(env):
            child = env.clone()
            before = len(child.finished)
            child.step(action)
            delta = sum(r.slowdown for r in child.finished[before:])
            best = min(best, delta + future_cost(child))
        memo[key] = best
        return best

    root = SchedulingEnv(config, render=False)
    root.reset(jobset)
    best_total = future_cost(root)

    # reconstruct an optimal sequence by following the memo greedily
    env = SchedulingEnv(config, render=False)
    env.reset(jobset)
    sequence: list[int] = []
    while not env.done:
        target = memo[_state_key(env)]
        chosen = None
        for action in _candidate_actions(env):
            child = env.clone()
            before = len(child.finished)
            child.step(action)
            delta = sum(r.slowdown for r in child.finished[before:])
            rest = 0.0 if child.done else memo[_state_key(child)]
            if math.isclose(delta + rest, target, rel_tol=0.0, abs_tol=1e-12):
                chosen = action
                break
        assert chosen is not None, "memo reconstruction failed"
        sequence.append(chosen)
        env.step(chosen)
    return best_total, sequence
