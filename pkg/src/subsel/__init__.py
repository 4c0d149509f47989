"""Budget-constrained training-data subset selection.

Casts subset selection as a sequential decision process over semantic
clusters: an agent adds one cluster at a time up to a budget, rewarded by
proxy-model evaluation of the growing subset. Ships the environment,
reward oracles, from-scratch learning agents, exact baselines, and an
experiment harness with an HTTP/CLI surface.
"""

__version__ = "0.1.0"

from .clustering import (ClusterModel, EmbeddingMatrix, kmeans, read_embeddings,
                         stratified_kmeans, synthetic_cluster_model,
                         write_embeddings)
from .env import (Encoder, Mdp, StateEncoding, SubsetState,
                  budget_from_fraction)
from .errors import (CapabilityError, ConfigError, EpisodeFinishedError,
                     InvalidActionError, OracleError, SubselError,
                     UpdateRejectedError)
from .rewards import (BASELINE_LOSS, RewardCache, RewardFunction, RewardOracle,
                      RndBonus, SyntheticLandscape, SyntheticOracle,
                      loss_to_score)

__all__ = [
    "__version__",
    "ClusterModel", "EmbeddingMatrix", "kmeans", "read_embeddings",
    "stratified_kmeans", "synthetic_cluster_model", "write_embeddings",
    "Encoder", "Mdp", "StateEncoding", "SubsetState", "budget_from_fraction",
    "CapabilityError", "ConfigError", "EpisodeFinishedError",
    "InvalidActionError", "OracleError", "SubselError", "UpdateRejectedError",
    "BASELINE_LOSS", "RewardCache", "RewardFunction", "RewardOracle",
    "RndBonus", "SyntheticLandscape", "SyntheticOracle", "loss_to_score",
]
