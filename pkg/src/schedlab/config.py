"""Unified run configuration: presets, strict JSON loading, resolution.

A RunConfig embeds the workload, environment, and training configs plus the
pipeline switches (bc | pg | bc-then-pg, online | offline, objective). Two
built-in presets exist: "paper" (full-scale defaults: r=20, horizon 20,
10 slots, 50-step window, backlog 60, 100 jobsets x 20 rollouts) and "desk"
(a small configuration sized so training runs complete in minutes).

Loading from a dict/JSON rejects unknown keys anywhere in the document.
"""

import dataclasses
import json
from dataclasses import dataclass, field, replace

from .environment import COMPLETION_TIME, EnvConfig, SLOWDOWN
from .workload import OFFLINE, ONLINE, WorkloadConfig, rate_for_load

BC = "bc"
PG = "pg"
BC_THEN_PG = "bc-then-pg"


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.99
    lr: float = 1e-3
    jobsets_per_epoch: int = 100
    rollouts_per_jobset: int = 20
    epochs: int = 500
    bc_patience: int = 5
    bc_max_epochs: int = 60
    bc_batch_size: int = 64
    bc_num_jobsets: int = 100
    bc_val_fraction: float = 0.1
    optimizer: str = "rmsprop"
    checkpoint_every: int = 25
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if self.rollouts_per_jobset < 2:
            raise ValueError("rollouts_per_jobset must be >= 2 (baseline "
                             "needs multiple rollouts)")
        for name in ("lr", "jobsets_per_epoch", "epochs", "bc_patience",
                     "bc_max_epochs", "bc_batch_size", "bc_num_jobsets"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.bc_val_fraction < 1.0:
            raise ValueError("bc_val_fraction must be in (0, 1)")
        if self.optimizer not in ("rmsprop", "sgd"):
            raise ValueError("optimizer must be 'rmsprop' or 'sgd'")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out_dir: str = "run"
    mode: str = BC_THEN_PG
    env_mode: str = ONLINE
    objective: str = SLOWDOWN
    load: float = 1.0
    policy: str = "cnn"
    mlp_hidden: int = 64
    workload: WorkloadConfig = field(default_factory=WorkloadConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.mode not in (BC, PG, BC_THEN_PG):
            raise ValueError(f"mode must be one of {BC!r}, {PG!r}, {BC_THEN_PG!r}")
        if self.env_mode not in (ONLINE, OFFLINE):
            raise ValueError("env_mode must be 'online' or 'offline'")
        if self.objective not in (SLOWDOWN, COMPLETION_TIME):
            raise ValueError("bad objective")
        if self.policy not in ("cnn", "mlp"):
            raise ValueError("policy must be 'cnn' or 'mlp'")
        if self.load <= 0:
            raise ValueError("load must be positive")


# Desk preset note: the visible horizon is 10 rows, so long-job durations are
# scaled to (5, 8); jobs longer than the horizon could never be placed.
PRESETS = {
    "paper": {
        "workload": {"r": 20, "arrival_window": 50, "num_jobs": 10},
        "env": {"r": 20, "time_horizon": 20, "num_slots": 10,
                "backlog_capacity": 60, "arrival_window": 50},
        "train": {"jobsets_per_epoch": 100, "rollouts_per_jobset": 20,
                  "epochs": 500},
    },
    "desk": {
        "workload": {"r": 10, "long_duration_range": (5, 8),
                     "arrival_window": 25, "num_jobs": 15},
        "env": {"r": 10, "time_horizon": 10, "num_slots": 5,
                "backlog_capacity": 30, "arrival_window": 25},
        "train": {"jobsets_per_epoch": 20, "rollouts_per_jobset": 10,
                  "epochs": 150, "bc_num_jobsets": 120},
    },
}


def _build_dataclass(dc_type, data: dict, path: str):
    fields = {f.name: f for f in dataclasses.fields(dc_type)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ValueError(f"unknown config keys at {path}: {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    return dc_type(**kwargs)


def preset_config(scale: str = "paper", **top_level) -> RunConfig:
    """Build a RunConfig from a named preset plus top-level overrides."""
    if scale not in PRESETS:
        raise ValueError(f"unknown preset {scale!r}; have {sorted(PRESETS)}")
    p = PRESETS[scale]
    cfg = RunConfig(
        workload=_build_dataclass(WorkloadConfig, p["workload"], "workload"),
        env=_build_dataclass(EnvConfig, p["env"], "env"),
        train=_build_dataclass(TrainConfig, p["train"], "train"),
        **top_level,
    )
    return cfg


def run_config_from_dict(doc: dict) -> RunConfig:
    """Strict parse: unknown keys anywhere in the document are rejected."""
    doc = dict(doc)
    scale = doc.pop("scale", None)
    sections = {}
    for name, dc_type in (("workload", WorkloadConfig), ("env", EnvConfig),
                          ("train", TrainConfig)):
        section = doc.pop(name, None)
        if section is not None:
            if scale is not None:
                merged = dict(PRESETS[scale][name])
                merged.update(section)
                section = merged
            sections[name] = _build_dataclass(dc_type, section, name)
        elif scale is not None:
            sections[name] = _build_dataclass(dc_type, PRESETS[scale][name], name)
    top_fields = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(doc) - top_fields
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return RunConfig(**doc, **sections)


def run_config_to_dict(cfg: RunConfig) -> dict:
    doc = dataclasses.asdict(cfg)
    for section in ("workload", "env", "train"):
        for k, v in doc[section].items():
            if isinstance(v, tuple):
                doc[section][k] = list(v)
    return doc


def run_config_to_json(cfg: RunConfig) -> str:
    return json.dumps(run_config_to_dict(cfg), indent=2, sort_keys=True)


def run_config_from_json(text: str) -> RunConfig:
    return run_config_from_dict(json.loads(text))


def resolve(cfg: RunConfig) -> tuple[WorkloadConfig, EnvConfig]:
    """Final workload/env configs with cross-field constraints applied.

    Online: the training load fixes the arrival rate. Offline: job slots
    equal the jobset size and the backlog is removed.
    """
    workload = cfg.workload
    env = replace(cfg.env, objective=cfg.objective)
    if cfg.env_mode == ONLINE:
        if workload.arrival_rate is None:
            workload = replace(workload,
                               arrival_rate=rate_for_load(workload, cfg.load))
    else:
        if workload.num_jobs is None or workload.num_jobs <= 0:
            raise ValueError("offline mode requires workload.num_jobs > 0")
        env = replace(env, num_slots=workload.num_jobs, backlog_capacity=0)
    return workload, env
