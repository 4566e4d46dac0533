"""Command-line entry point.

Subcommands: gen (write jobset JSON files), train (bc / pg / bc-then-pg),
eval (load sweeps over named agents), curves (summarize a metrics log),
selftest (gradient checks, environment fuzz, returns oracle, bandit sanity).
All outputs land under --out.
"""

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import evaluation, neuralnet, training
from .environment import SchedulingEnv
from .workload import ONLINE, generate_jobset, jobset_to_json, rng_stream

log = logging.getLogger("schedlab")


def _load_run_config(args, **overrides) -> cfgmod.RunConfig:
    if args.config:
        cfg = cfgmod.run_config_from_json(Path(args.config).read_text())
    else:
        cfg = cfgmod.preset_config(args.scale)
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if getattr(args, "out", None):
        updates["out_dir"] = args.out
    updates.update({k: v for k, v in overrides.items() if v is not None})
    train_updates = {}
    if getattr(args, "epochs", None) is not None:
        train_updates["epochs"] = args.epochs
    if train_updates:
        updates["train"] = dataclasses.replace(cfg.train, **train_updates)
    return dataclasses.replace(cfg, **updates) if updates else cfg


def cmd_gen(args) -> int:
    cfg = _load_run_config(args, env_mode=args.mode, load=args.load)
    workload, _ = cfgmod.resolve(cfg)
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        rng = rng_stream(cfg.seed, "gen", i)
        jobset = generate_jobset(rng, workload, cfg.env_mode, seed=i)
        (out / f"jobset_{i:04d}.json").write_text(
            jobset_to_json(jobset, workload.r))
    print(f"wrote {args.count} jobsets to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_run_config(args, mode=args.mode, env_mode=args.env_mode,
                           objective=args.objective, load=args.load,
                           policy=args.policy)
    artifacts = training.train(cfg, resume=args.resume, progress=True)
    print(json.dumps(artifacts, indent=2))
    return 0


def cmd_eval(args) -> int:
    cfg = _load_run_config(args)
    workload, env_cfg = cfgmod.resolve(cfg)
    loads = tuple(float(x) for x in args.loads.split(","))
    spec = evaluation.SweepSpec(
        loads=loads,
        agents=tuple(args.agents.split(",")),
        seeds_per_cell=args.seeds_per_cell,
        seed=cfg.seed,
        gamma=cfg.train.gamma,
        env_mode=cfg.env_mode,
    )
    report = evaluation.run_sweep(spec, workload, env_cfg,
                                  out_dir=args.out or cfg.out_dir,
                                  jobs=args.jobs)
    for cell in report.cells:
        print(f"load {cell.load:4.2f} agent {cell.agent:>8s}: "
              f"slowdown {cell.mean_slowdown:6.3f} +- {cell.std_slowdown:5.3f} "
              f"makespan {cell.mean_makespan:7.2f} "
              f"reward {cell.mean_discounted_reward:8.2f}")
    bad = [c for c in report.cells
           if np.isfinite(c.mean_slowdown) and c.mean_slowdown < 1.0]
    if bad:
        print("invariant violation: mean slowdown below 1", file=sys.stderr)
        return 1
    return 0


def cmd_curves(args) -> int:
    out_csv = Path(args.out) / "curves.csv" if args.out else None
    if out_csv:
        out_csv.parent.mkdir(parents=True, exist_ok=True)
    summary = evaluation.training_curves(args.metrics, out_csv)
    print(json.dumps(summary, indent=2))
    return 0


def cmd_selftest(args) -> int:
    failures = []

    def check(name, ok, detail=""):
        print(f"[{'PASS' if ok else 'FAIL'}] {name} {detail}")
        if not ok:
            failures.append(name)

    rng = np.random.default_rng(7)
    for head in ("ce", "pg"):
        rep = neuralnet.grad_check_fresh(seed=1, head=head)
        check(f"gradient check ({head} head)", rep.passed,
              f"max rel err {rep.max_rel_error:.2e}")

    # a corrupted backward must be caught by the same check
    saved = neuralnet.Tanh.backward
    try:
        neuralnet.Tanh.backward = lambda self, dy: -saved(self, dy)
        rep = neuralnet.grad_check_fresh(seed=1, head="ce")
        check("gradient check detects injected fault", not rep.passed)
    finally:
        neuralnet.Tanh.backward = saved

    gamma = 0.97
    rewards = rng.normal(size=50)
    brute = np.array([sum(gamma ** (k - t) * rewards[k]
                          for k in range(t, 50)) for t in range(50)])
    got = training.compute_returns(rewards, gamma)
    check("discounted returns vs brute force",
          bool(np.max(np.abs(got - brute)) < 1e-12))

    cfg = cfgmod.preset_config("desk")
    workload, env_cfg = cfgmod.resolve(
        dataclasses.replace(cfg, load=1.1, seed=11))
    violations = 0
    from .baselines import RandomAgent
    for i in range(200):
        js = generate_jobset(rng_stream(11, "selftest-fuzz", i), workload,
                             ONLINE, seed=i)
        env = SchedulingEnv(env_cfg, render=False)
        out = env.reset(js)
        agent = RandomAgent(rng_stream(11, "selftest-agent", i))
        while not out.done:
            out = env.step(agent.select_action(env))
            if np.any(env.free_units() < 0):
                violations += 1
        n_results = len(env.finished)
        if n_results + env.dropped != len(js):
            violations += 1
        if any(r.slowdown < 1.0 for r in env.finished if not r.censored):
            violations += 1
    check("environment fuzz (200 random episodes)", violations == 0,
          f"{violations} violations")

    p = training.bandit_probability(seed=3, epochs=200)
    check("bandit policy-gradient sanity", p > 0.9, f"p(+1)={p:.3f}")

    print("selftest:", "FAIL" if failures else "PASS")
    return 1 if failures else 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="schedlab",
        description="Cluster scheduling RL lab: workload generation, "
                    "behavior cloning + policy-gradient training, and "
                    "evaluation sweeps.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="run-config JSON file")
        p.add_argument("--scale", default="paper", choices=sorted(cfgmod.PRESETS),
                       help="built-in preset when no --config is given")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None,
                       help="output directory (defaults to the config's "
                            "out_dir)")

    p = sub.add_parser("gen", help="write jobset JSON files")
    common(p)
    p.add_argument("--mode", default=ONLINE, choices=["online", "offline"])
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--load", type=float, default=None)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="run a training pipeline")
    common(p)
    p.add_argument("--mode", default=None, choices=[cfgmod.BC, cfgmod.PG,
                                                    cfgmod.BC_THEN_PG])
    p.add_argument("--env-mode", dest="env_mode", default=None,
                   choices=["online", "offline"])
    p.add_argument("--objective", default=None,
                   choices=["slowdown", "completion_time"])
    p.add_argument("--load", type=float, default=None)
    p.add_argument("--policy", default=None, choices=["cnn", "mlp"])
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="run a load sweep over agents")
    common(p)
    p.add_argument("--agents", default="sjf,packer,random",
                   help="comma list: sjf|packer|random|policy:<ckpt>")
    p.add_argument("--loads",
                   default=",".join(f"{x / 10:.1f}" for x in range(1, 20)),
                   help="comma list of load fractions (default 0.1..1.9)")
    p.add_argument("--seeds-per-cell", type=int, default=100)
    p.add_argument("--jobs", type=int, default=os.cpu_count(),
                   help="worker processes for sweep cells")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("curves", help="summarize a training metrics log")
    p.add_argument("--metrics", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_curves)

    p = sub.add_parser("selftest", help="run built-in verification checks")
    p.set_defaults(func=cmd_selftest)

    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
