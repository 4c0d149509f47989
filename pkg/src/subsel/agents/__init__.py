"""Policy-learning strategies over the cluster-subset environment."""

from .climb import ClimbConfig, ClimbResult, climb_disc
from .dqn import DqnConfig, DqnResult, bellman_targets, train_dqn
from .dyna import DynaConfig, RewardEnsemble, check_buffer_law, train_dyna_dqn
from .ppo import (PpoConfig, PpoResult, clipped_objective, gae_advantages,
                  train_ppo, warm_start_critic)
from .rollout import PpoPolicy, QPolicy, rollout_policy, trace_record

__all__ = [
    "ClimbConfig", "ClimbResult", "climb_disc",
    "DqnConfig", "DqnResult", "bellman_targets", "train_dqn",
    "DynaConfig", "RewardEnsemble", "check_buffer_law", "train_dyna_dqn",
    "PpoConfig", "PpoResult", "clipped_objective", "gae_advantages",
    "train_ppo", "warm_start_critic",
    "PpoPolicy", "QPolicy", "rollout_policy", "trace_record",
]
