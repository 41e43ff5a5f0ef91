"""Periodic multi-agent path planning: plan construction, optimization and
online deployment of agent streams."""

from .geometry import Environment, SceneSpec, build_environment, builtin_environment, load_environment
from .planmodel import PeriodicPlan, collision_pairs, load_plan, save_plan, validate_plan
from .seedplan import initial_plan, schedule_dp
from .optimizer import AnnealSchedule, PenaltyWeights, lm_minimize
from .flowsim import ArrivalModel, QueueConfig, mdi_prediction, sample_arrivals, simulate

__all__ = [
    "AnnealSchedule",
    "ArrivalModel",
    "Environment",
    "PenaltyWeights",
    "PeriodicPlan",
    "QueueConfig",
    "SceneSpec",
    "build_environment",
    "builtin_environment",
    "collision_pairs",
    "initial_plan",
    "lm_minimize",
    "load_environment",
    "load_plan",
    "mdi_prediction",
    "sample_arrivals",
    "save_plan",
    "schedule_dp",
    "simulate",
    "validate_plan",
]
