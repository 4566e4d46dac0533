"""schedlab: a cluster job-scheduling reinforcement-learning laboratory.

Synthetic multi-resource workloads, a scheduling MDP with an image state
representation, heuristic baselines (SJF, packer, random), a hand-written
convolutional policy network, behavior-cloning pretraining, REINFORCE
policy-gradient training, and evaluation sweeps.
"""

__version__ = "0.1.0"

from .baselines import PackerAgent, PolicyAgent, RandomAgent, SjfAgent, \
    VoidAgent, resolve_agent
from .config import PRESETS, RunConfig, TrainConfig, preset_config, resolve, \
    run_config_from_dict, run_config_from_json, run_config_to_json
from .environment import COMPLETION_TIME, EnvConfig, EpisodeRecord, JobResult, \
    SLOWDOWN, SchedulingEnv, StepOutcome, run_episode
from .evaluation import MetricsReport, SweepSpec, average_slowdown, \
    completion_time, run_sweep, slowdown_by_duration, training_curves
from .neuralnet import Network, RmsProp, build_policy_cnn, build_policy_mlp, \
    grad_check, grad_check_fresh, load_checkpoint, params_hash, save_checkpoint
from .training import BCDataset, Trajectory, bandit_probability, \
    collect_demonstrations, compute_returns, pg_epoch, train, train_bc
from .workload import Job, Jobset, WorkloadConfig, compute_load, \
    generate_jobset, jobset_from_json, jobset_to_json, rate_for_load, \
    rng_stream, sample_job
