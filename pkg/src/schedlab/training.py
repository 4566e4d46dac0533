"""Behavior-cloning pretraining and REINFORCE policy-gradient training.

Both trainers share the rollout machinery. Policy-gradient epochs run N
Monte Carlo rollouts per jobset (actions sampled from the policy), compute
discounted returns v_t per rollout, subtract the per-jobset, per-timestep
mean return across the N rollouts as a baseline, and apply one ascent step
on the summed log-probability gradient. Behavior cloning minimizes
cross-entropy against a teacher's actions and early-stops when validation
accuracy plateaus.
"""

import csv
import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .baselines import SjfAgent
from .config import BC, BC_THEN_PG, PG, RunConfig, TrainConfig, resolve, \
    run_config_to_json
from .environment import EnvConfig, JobResult, SchedulingEnv, run_episode
from .neuralnet import Network, RmsProp, build_policy, build_policy_mlp, \
    dlogits_cross_entropy, dlogits_logprob_weighted, entropy, load_checkpoint, \
    save_checkpoint
from .workload import TRAIN_NAMESPACE, generate_jobset, jobset_stream, \
    rng_stream

log = logging.getLogger(__name__)

METRICS_COLUMNS = ["epoch", "mean_discounted_reward", "max_discounted_reward",
                   "mean_slowdown", "entropy", "wallclock_s"]

TRAIN_CHUNK = 512  # samples per batched forward/backward in training passes


def compute_returns(rewards, gamma: float) -> np.ndarray:
    """Discounted returns v_t = sum_{k>=t} gamma^(k-t) r_k, by backward recursion."""
    rewards = np.asarray(rewards, dtype=np.float64)
    out = np.empty_like(rewards)
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


@dataclass
class Trajectory:
    """One rollout: per-step (image, action, reward), derived returns, and
    the episode outcome used for metrics."""

    images: np.ndarray          # (L, H, W) uint8
    actions: np.ndarray         # (L,) int64
    rewards: np.ndarray         # (L,) float64
    returns: np.ndarray | None = None
    advantages: np.ndarray | None = None
    results: tuple[JobResult, ...] = ()
    dropped: int = 0

    def __len__(self):
        return len(self.actions)


def _sample_categorical(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    u = rng.random(len(probs))
    cum = np.cumsum(probs, axis=1)
    return np.minimum((cum < u[:, None]).sum(axis=1), probs.shape[1] - 1)


def rollout_lockstep(jobsets, net: Network, env_cfg: EnvConfig,
                     rng: np.random.Generator) -> tuple[list[Trajectory], float]:
    """Run one sampled rollout per jobset, stepping all environments in
    lockstep so the policy forward pass is batched. Returns the trajectories
    and the mean policy entropy over all sampled steps."""
    envs = [SchedulingEnv(env_cfg, render=True) for _ in jobsets]
    outs = [env.reset(js) for env, js in zip(envs, jobsets)]
    images = [[] for _ in envs]
    actions = [[] for _ in envs]
    rewards = [[] for _ in envs]
    alive = [i for i, o in enumerate(outs) if not o.done]
    ent_sum, ent_n = 0.0, 0
    while alive:
        batch = np.stack([outs[i].image for i in alive])
        probs = net.forward(batch)
        ent_sum += float(entropy(probs).sum())
        ent_n += len(alive)
        acts = _sample_categorical(rng, probs)
        for pos, i in enumerate(alive):
            a = int(acts[pos])
            images[i].append(outs[i].image.astype(np.uint8))
            actions[i].append(a)
            outs[i] = envs[i].step(a)
            rewards[i].append(outs[i].reward)
        alive = [i for i in alive if not outs[i].done]
    h, w = env_cfg.image_shape
    trajs = []
    for i, env in enumerate(envs):
        trajs.append(Trajectory(
            images=(np.stack(images[i]).astype(np.uint8) if images[i]
                    else np.zeros((0, h, w), dtype=np.uint8)),
            actions=np.asarray(actions[i], dtype=np.int64),
            rewards=np.asarray(rewards[i], dtype=np.float64),
            results=tuple(env.finished),
            dropped=env.dropped,
        ))
    mean_entropy = ent_sum / ent_n if ent_n else float("nan")
    return trajs, mean_entropy


def group_baselines(groups: list[list[Trajectory]]) -> None:
    """Attach advantages in place: per jobset group, the baseline at step t is
    the mean return over that group's rollouts still alive at t."""
    for group in groups:
        if not group:
            continue
        max_len = max(len(t) for t in group)
        for t in range(max_len):
            vals = [traj.returns[t] for traj in group if len(traj) > t]
            b = float(np.mean(vals))
            for traj in group:
                if len(traj) > t:
                    traj.advantages[t] = traj.returns[t] - b


@dataclass
class EpochStats:
    epoch: int
    mean_discounted_reward: float
    max_discounted_reward: float
    mean_slowdown: float
    entropy: float
    num_rollouts: int
    num_samples: int
    update_applied: bool
    wallclock_s: float


def _accumulate_pg_gradient(net: Network, images: np.ndarray,
                            actions: np.ndarray, weights: np.ndarray) -> None:
    """Add sum_i w_i * d log pi(a_i | s_i) / d theta to the net's gradients."""
    for lo in range(0, len(images), TRAIN_CHUNK):
        sl = slice(lo, lo + TRAIN_CHUNK)
        probs = net.forward(images[sl].astype(np.float64), train=True)
        net.backward(dlogits_logprob_weighted(probs, actions[sl], weights[sl]))


def pg_epoch(jobsets, net: Network, optimizer: RmsProp, train_cfg: TrainConfig,
             env_cfg: EnvConfig, epoch: int) -> EpochStats:
    """One policy-gradient epoch over the fixed jobset corpus."""
    t0 = time.perf_counter()
    n = train_cfg.rollouts_per_jobset
    rng = rng_stream(train_cfg.seed, "pg", epoch)
    expanded = [js for js in jobsets for _ in range(n)]
    trajs, mean_ent = rollout_lockstep(expanded, net, env_cfg, rng)
    for traj in trajs:
        traj.returns = compute_returns(traj.rewards, train_cfg.gamma)
        traj.advantages = np.zeros_like(traj.returns)
    groups = [trajs[j * n:(j + 1) * n] for j in range(len(jobsets))]
    group_baselines(groups)

    nonempty = [t for t in trajs if len(t) > 0]
    net.zero_grads()
    if nonempty:
        images = np.concatenate([t.images for t in nonempty])
        actions = np.concatenate([t.actions for t in nonempty])
        advantages = np.concatenate([t.advantages for t in nonempty])
        _accumulate_pg_gradient(net, images, actions, advantages)
        applied = optimizer.apply(net.parameters(), net.gradients(), "ascent")
        num_samples = len(images)
    else:
        applied = False
        num_samples = 0

    v0 = [float(t.returns[0]) for t in nonempty]
    slowdowns = [r.slowdown for t in trajs for r in t.results if not r.censored]
    return EpochStats(
        epoch=epoch,
        mean_discounted_reward=float(np.mean(v0)) if v0 else float("nan"),
        max_discounted_reward=float(np.max(v0)) if v0 else float("nan"),
        mean_slowdown=float(np.mean(slowdowns)) if slowdowns else float("nan"),
        entropy=mean_ent,
        num_rollouts=len(trajs),
        num_samples=num_samples,
        update_applied=applied,
        wallclock_s=time.perf_counter() - t0,
    )


# -- behavior cloning ---------------------------------------------------------

@dataclass
class BCDataset:
    """Teacher demonstrations, split by jobset so no state leaks across."""

    train_images: np.ndarray    # (N, H, W) uint8
    train_actions: np.ndarray
    val_images: np.ndarray
    val_actions: np.ndarray
    train_seeds: tuple[int, ...]
    val_seeds: tuple[int, ...]

    @property
    def size(self) -> int:
        return len(self.train_actions) + len(self.val_actions)


def collect_demonstrations(jobsets, teacher, env_cfg: EnvConfig,
                           val_fraction: float = 0.1) -> BCDataset:
    """Run the teacher on each jobset, recording every (state image, action)
    pair including void actions; the last ~val_fraction of jobsets form the
    validation split."""
    if not jobsets:
        raise ValueError("need at least one jobset")
    records = [run_episode(js, env_cfg, teacher, record=True) for js in jobsets]
    n_val = max(1, round(len(jobsets) * val_fraction))
    if n_val >= len(jobsets):
        raise ValueError("val_fraction leaves no training jobsets")
    h, w = env_cfg.image_shape

    def stack(recs):
        images = [r.images for r in recs if r.images is not None]
        acts = [r.actions for r in recs if r.actions is not None]
        if not images:
            return (np.zeros((0, h, w), dtype=np.uint8),
                    np.zeros(0, dtype=np.int64))
        return np.concatenate(images), np.concatenate(acts)

    train_recs, val_recs = records[:-n_val], records[-n_val:]
    ti, ta = stack(train_recs)
    vi, va = stack(val_recs)
    return BCDataset(
        train_images=ti, train_actions=ta, val_images=vi, val_actions=va,
        train_seeds=tuple(js.seed for js in jobsets[:-n_val]),
        val_seeds=tuple(js.seed for js in jobsets[-n_val:]),
    )


def _forward_in_chunks(net: Network, images: np.ndarray) -> np.ndarray:
    outs = []
    for lo in range(0, len(images), TRAIN_CHUNK):
        outs.append(net.forward(images[lo:lo + TRAIN_CHUNK].astype(np.float64)))
    return np.concatenate(outs) if outs else np.zeros((0, net.num_actions))


def _ce_loss_and_accuracy(net, images, actions) -> tuple[float, float]:
    probs = _forward_in_chunks(net, images)
    picked = np.clip(probs[np.arange(len(actions)), actions], 1e-12, None)
    loss = float(-np.log(picked).mean())
    acc = float((probs.argmax(axis=1) == actions).mean())
    return loss, acc


def train_bc(dataset: BCDataset, net: Network,
             train_cfg: TrainConfig) -> list[dict]:
    """Minibatch cross-entropy against the teacher's actions; early-stops on
    a validation-accuracy plateau and restores the best parameters. Returns
    the per-epoch history."""
    if len(dataset.train_actions) == 0:
        raise ValueError("empty behavior-cloning dataset")
    optimizer = RmsProp(net.parameters(), lr=train_cfg.lr,
                        plain_sgd=train_cfg.optimizer == "sgd")
    best_acc = -1.0
    best_params = net.copy_parameters()
    stale = 0
    history: list[dict] = []
    n = len(dataset.train_actions)
    for epoch in range(train_cfg.bc_max_epochs):
        t0 = time.perf_counter()
        rng = rng_stream(train_cfg.seed, "bc", epoch)
        perm = rng.permutation(n)
        loss_sum = 0.0
        for lo in range(0, n, train_cfg.bc_batch_size):
            idx = perm[lo:lo + train_cfg.bc_batch_size]
            x = dataset.train_images[idx].astype(np.float64)
            y = dataset.train_actions[idx]
            net.zero_grads()
            probs = net.forward(x, train=True)
            picked = np.clip(probs[np.arange(len(y)), y], 1e-12, None)
            batch_loss = float(-np.log(picked).mean())
            if not np.isfinite(batch_loss):
                raise RuntimeError(
                    f"non-finite BC loss at epoch {epoch}: {batch_loss}")
            loss_sum += batch_loss * len(y)
            net.backward(dlogits_cross_entropy(probs, y) / len(y))
            optimizer.apply(net.parameters(), net.gradients(), "descent")
        val_loss, val_acc = _ce_loss_and_accuracy(
            net, dataset.val_images, dataset.val_actions)
        history.append({
            "epoch": epoch,
            "train_loss": loss_sum / n,
            "val_loss": val_loss,
            "val_accuracy": val_acc,
            "wallclock_s": time.perf_counter() - t0,
        })
        if val_acc > best_acc:
            best_acc = val_acc
            best_params = net.copy_parameters()
            stale = 0
        else:
            stale += 1
            if stale >= train_cfg.bc_patience:
                break
    net.set_parameters(best_params)
    return history


# -- full pipeline --------------------------------------------------------------

def make_train_jobsets(cfg: RunConfig, purpose: str, count: int):
    """Jobsets drawn from the training seed namespace ("pg" or "bc" stream)."""
    workload, _ = resolve(cfg)
    return [
        generate_jobset(jobset_stream(cfg.seed, TRAIN_NAMESPACE, purpose, i),
                        workload, cfg.env_mode, seed=i)
        for i in range(count)
    ]


def build_run_policy(cfg: RunConfig, env_cfg: EnvConfig) -> Network:
    rng = rng_stream(cfg.seed, "init")
    return build_policy(cfg.policy, env_cfg.image_shape, env_cfg.num_actions,
                        rng, mlp_hidden=cfg.mlp_hidden)


def _append_metrics(path: Path, stats: EpochStats, write_header: bool) -> None:
    with open(path, "a", newline="") as f:
        writer = csv.writer(f)
        if write_header:
            writer.writerow(METRICS_COLUMNS)
        writer.writerow([
            stats.epoch,
            repr(stats.mean_discounted_reward),
            repr(stats.max_discounted_reward),
            repr(stats.mean_slowdown),
            repr(stats.entropy),
            f"{stats.wallclock_s:.3f}",
        ])


def _rewrite_metrics(path: Path, rows: list[list[str]]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(METRICS_COLUMNS)
        writer.writerows(rows)


def train(cfg: RunConfig, resume: bool = False,
          progress: bool = False) -> dict:
    """Execute the configured pipeline; returns paths of produced artifacts.

    Run directory layout: config.json (resolved), bc_history.csv and
    bc_final.npz (bc modes), pg_init.npz, metrics.csv, checkpoints/
    pg_epoch_NNNN.npz, pg_final.npz (pg modes). A run is resumable from its
    latest checkpoint and reproduces the same metrics as an uninterrupted run.
    """
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(run_config_to_json(cfg))
    workload_cfg, env_cfg = resolve(cfg)
    tcfg = replace(cfg.train, seed=cfg.seed)
    artifacts: dict = {"out_dir": str(out)}

    net = build_run_policy(cfg, env_cfg)

    bc_path = out / "bc_final.npz"
    skip_bc = (resume and cfg.mode == BC_THEN_PG and bc_path.exists()
               and any((out / "checkpoints").glob("pg_epoch_*.npz")))
    if cfg.mode in (BC, BC_THEN_PG) and skip_bc:
        net, _, _ = load_checkpoint(bc_path)
        artifacts["bc_final"] = str(bc_path)
    elif cfg.mode in (BC, BC_THEN_PG):
        bc_jobsets = make_train_jobsets(cfg, "bc", tcfg.bc_num_jobsets)
        dataset = collect_demonstrations(bc_jobsets, SjfAgent(), env_cfg,
                                         tcfg.bc_val_fraction)
        history = train_bc(dataset, net, tcfg)
        hist_path = out / "bc_history.csv"
        with open(hist_path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(history[0].keys()))
            writer.writeheader()
            writer.writerows(history)
        best_acc = max(h["val_accuracy"] for h in history)
        save_checkpoint(bc_path, net, meta={"stage": "bc",
                                            "val_accuracy": best_acc})
        artifacts["bc_final"] = str(bc_path)
        artifacts["bc_history"] = str(hist_path)
        artifacts["bc_examples"] = dataset.size
        if progress:
            log.info("bc done: %d examples, val acc %.3f",
                     dataset.size, max(h["val_accuracy"] for h in history))

    if cfg.mode in (PG, BC_THEN_PG):
        ckpt_dir = out / "checkpoints"
        ckpt_dir.mkdir(exist_ok=True)
        metrics_path = out / "metrics.csv"
        optimizer = RmsProp(net.parameters(), lr=tcfg.lr,
                            plain_sgd=tcfg.optimizer == "sgd")
        start_epoch = 0
        if resume:
            ckpts = sorted(ckpt_dir.glob("pg_epoch_*.npz"))
            if ckpts:
                net, optimizer, meta = load_checkpoint(ckpts[-1])
                if optimizer is None:
                    raise ValueError(f"{ckpts[-1]} has no optimizer state")
                start_epoch = meta["epoch"] + 1
                if metrics_path.exists():
                    with open(metrics_path) as f:
                        rows = [r for r in csv.reader(f)][1:]
                    _rewrite_metrics(metrics_path,
                                     [r for r in rows if int(r[0]) < start_epoch])
        if start_epoch == 0:
            save_checkpoint(out / "pg_init.npz", net, meta={"stage": "pg-init"})
            if metrics_path.exists():
                metrics_path.unlink()
        jobsets = make_train_jobsets(cfg, "pg", tcfg.jobsets_per_epoch)
        for epoch in range(start_epoch, tcfg.epochs):
            stats = pg_epoch(jobsets, net, optimizer, tcfg, env_cfg, epoch)
            _append_metrics(metrics_path, stats,
                            write_header=not metrics_path.exists())
            if progress:
                log.info("epoch %d: reward %.3f slowdown %.3f entropy %.3f "
                         "(%.1fs)", epoch, stats.mean_discounted_reward,
                         stats.mean_slowdown, stats.entropy, stats.wallclock_s)
            last = epoch == tcfg.epochs - 1
            if (epoch + 1) % tcfg.checkpoint_every == 0 or last:
                save_checkpoint(ckpt_dir / f"pg_epoch_{epoch:04d}.npz", net,
                                optimizer, meta={"stage": "pg", "epoch": epoch})
        pg_path = out / "pg_final.npz"
        save_checkpoint(pg_path, net, meta={"stage": "pg-final",
                                            "epochs": tcfg.epochs})
        artifacts["pg_final"] = str(pg_path)
        artifacts["metrics"] = str(metrics_path)
        artifacts["pg_init"] = str(out / "pg_init.npz")
    return artifacts


# -- sanity environment ------------------------------------------------------------

def bandit_probability(seed: int, epochs: int = 200, rollouts: int = 16,
                       lr: float = 0.05) -> float:
    """Single-step 2-action bandit (+1 / -1 rewards) trained with the same
    gradient machinery; returns the final probability of the +1 action."""
    net = build_policy_mlp((1, 1), 2, rng=rng_stream(seed, "bandit-init"),
                           hidden=0)
    optimizer = RmsProp(net.parameters(), lr=lr)
    image = np.ones((1, 1), dtype=np.float64)
    batch = np.repeat(image[None], rollouts, axis=0)
    rng = rng_stream(seed, "bandit")
    for _ in range(epochs):
        probs = net.forward(batch)
        actions = _sample_categorical(rng, probs)
        rewards = np.where(actions == 0, 1.0, -1.0)
        returns = rewards  # single-step episodes: v_0 = r_0
        advantages = returns - returns.mean()
        net.zero_grads()
        probs = net.forward(batch, train=True)
        net.backward(dlogits_logprob_weighted(probs, actions, advantages))
        optimizer.apply(net.parameters(), net.gradients(), "ascent")
    return float(net.forward(image[None])[0, 0])
