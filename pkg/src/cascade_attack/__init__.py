"""Multi-stage model cascades with early exits, suffix attacks against them, and exact routing analysis."""
from .analysis import RoutingRecord, decomposition, gap_shift, routing_stats
from .attack import AttackConfig, Neighborhood, attack_sample, joint_attack, random_noise_attack, single_target_attack
from .cascade import CascadeSpec, ExecutionTrace, LinearCost, StageOutput, run_cascade, stopping_index, total_cost
from .config import ExperimentConfig, cascade_from_dict, load_cascade, load_experiment
from .defenses import FilterConfig, SmoothingConfig, defense_eval, smooth_predict
from .errors import AttackError, CascadeError, ConfigError, ConstructionError, IntegrityError, StageError
from .metrics import accuracy, metric_report, normalized_token_cost, pass_rate
from .runner import run_experiment, transfer_eval
from .vocab import Vocabulary
from .zoo import LinearTaskParams, PlantedProfile, make_linear_task, make_planted_cascade

__version__ = "0.1.0"

__all__ = [
    "RoutingRecord",
    "decomposition",
    "gap_shift",
    "routing_stats",
    "AttackConfig",
    "Neighborhood",
    "attack_sample",
    "joint_attack",
    "random_noise_attack",
    "single_target_attack",
    "CascadeSpec",
    "ExecutionTrace",
    "LinearCost",
    "StageOutput",
    "run_cascade",
    "stopping_index",
    "total_cost",
    "ExperimentConfig",
    "cascade_from_dict",
    "load_cascade",
    "load_experiment",
    "FilterConfig",
    "SmoothingConfig",
    "defense_eval",
    "smooth_predict",
    "AttackError",
    "CascadeError",
    "ConfigError",
    "ConstructionError",
    "IntegrityError",
    "StageError",
    "accuracy",
    "metric_report",
    "normalized_token_cost",
    "pass_rate",
    "run_experiment",
    "transfer_eval",
    "Vocabulary",
    "LinearTaskParams",
    "PlantedProfile",
    "make_linear_task",
    "make_planted_cascade",
]
