"""The cluster-subset MDP and its state encoders.

States are immutable subsets of cluster indices; an action adds one
unselected cluster; transitions are deterministic and an episode ends when
the subset reaches the budget, which is a fixed fraction of the cluster
count. Encoders turn a state into a fixed-width vector (indicator mask,
centroid mean/variance, or concatenated cluster representatives) or into a
token sequence for attention-based value heads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Literal, Optional

import numpy as np

from .clustering import ClusterModel, SubsampleStrategy, subsample_cluster
from .errors import EpisodeFinishedError, InvalidActionError

EncodingKind = Literal["binary_mask", "mean_std", "concat"]


@dataclass(frozen=True)
class SubsetState:
    """An immutable set of selected cluster indices with budget metadata."""

    mask: int
    budget: int
    k: int

    def __post_init__(self):
        if not 1 <= self.budget <= self.k:
            raise ValueError(f"budget must be in [1, {self.k}], got {self.budget}")
        if self.mask < 0 or self.mask >> self.k:
            raise ValueError(f"mask {self.mask:#x} out of range for k={self.k}")
        if self.step > self.budget:
            raise ValueError(f"state holds {self.step} clusters, budget is {self.budget}")

    @property
    def step(self) -> int:
        return self.mask.bit_count()

    @property
    def is_terminal(self) -> bool:
        return self.step == self.budget

    @cached_property
    def selected(self) -> tuple:
        return tuple(i for i in range(self.k) if self.mask >> i & 1)

    def contains(self, cluster: int) -> bool:
        return bool(self.mask >> cluster & 1)

    __contains__ = contains

    @property
    def bitmask_hex(self) -> str:
        return f"{self.mask:x}"


@dataclass(frozen=True)
class StateEncoding:
    """Vector view of a state; token form carried alongside for attention heads."""

    kind: EncodingKind
    vector: np.ndarray
    tokens: Optional[np.ndarray] = None
    token_valid: Optional[np.ndarray] = None


def budget_from_fraction(k: int, delta: float) -> int:
    """Episode horizon: floor(delta * k), at least 1."""
    if not 0.0 < delta <= 1.0:
        raise ValueError(f"delta must be in (0, 1], got {delta}")
    # Guard against float noise in fractions like 1/3 before flooring.
    return max(1, math.floor(delta * k + 1e-9))


def reset(k: int, budget: int) -> SubsetState:
    """The empty state at step 0."""
    if not 1 <= budget <= k:
        raise ValueError(f"budget must be in [1, {k}], got {budget}")
    return SubsetState(mask=0, budget=budget, k=k)


def step(state: SubsetState, action: int):
    """Add one cluster; returns (next_state, terminal)."""
    if not 0 <= action < state.k:
        raise ValueError(f"action must be in [0, {state.k}), got {action}")
    if state.is_terminal:
        raise EpisodeFinishedError(f"state {state.bitmask_hex} is terminal")
    if state.contains(action):
        raise InvalidActionError(f"cluster {action} already selected")
    nxt = SubsetState(mask=state.mask | (1 << action), budget=state.budget, k=state.k)
    return nxt, nxt.is_terminal


def action_mask(state: SubsetState) -> np.ndarray:
    """Boolean vector; True exactly for clusters not yet selected."""
    return np.array([not state.contains(i) for i in range(state.k)], dtype=bool)


class Mdp:
    """Handle bundling the cluster count and budget; holds no episode state."""

    def __init__(self, k: int, budget: int):
        if not 1 <= budget <= k:
            raise ValueError(f"budget must be in [1, {k}], got {budget}")
        self.k = k
        self.budget = budget

    def reset(self) -> SubsetState:
        return reset(self.k, self.budget)

    def step(self, state: SubsetState, action: int):
        return step(state, action)

    def action_mask(self, state: SubsetState) -> np.ndarray:
        return action_mask(state)


class Encoder:
    """Encodes states against one cluster model with fixed settings.

    Representative samples for the concat encoding are resolved once at
    construction, so encoding is a pure function of the state.
    """

    def __init__(
        self,
        model: ClusterModel,
        kind: EncodingKind,
        m_reps: int = 1,
        rep_strategy: SubsampleStrategy = "furthest",
        rep_seed: int = 0,
    ):
        if kind not in ("binary_mask", "mean_std", "concat"):
            raise ValueError(f"unknown encoding kind {kind!r}")
        if kind == "concat" and m_reps < 1:
            raise ValueError(f"m_reps must be >= 1 for concat, got {m_reps}")
        self.model = model
        self.kind = kind
        self.m_reps = m_reps
        self.rep_strategy = rep_strategy
        self.rep_seed = rep_seed
        if kind == "concat":
            slot = m_reps * model.dim
            reps = np.zeros((model.k, slot))
            for i in range(model.k):
                ids = subsample_cluster(model, i, m_reps, rep_strategy, rep_seed)
                flat = model.embeddings.rows[ids].ravel()
                reps[i, : flat.size] = flat  # zero-padded if the cluster is small
            self._rep_rows = reps
        else:
            self._rep_rows = None

    @property
    def width(self) -> int:
        if self.kind == "binary_mask":
            return self.model.k
        if self.kind == "mean_std":
            return 2 * self.model.dim
        return self.model.k * self.m_reps * self.model.dim

    @property
    def token_width(self) -> Optional[int]:
        return self.m_reps * self.model.dim if self.kind == "concat" else None

    def __call__(self, state: SubsetState) -> StateEncoding:
        k = self.model.k
        if state.k != k:
            raise ValueError(f"state is over {state.k} clusters, model has {k}")
        if self.kind == "binary_mask":
            vec = np.zeros(k)
            for i in state.selected:
                vec[i] = 1.0
            return StateEncoding(kind=self.kind, vector=vec)
        if self.kind == "mean_std":
            dim = self.model.dim
            if state.step == 0:
                return StateEncoding(kind=self.kind, vector=np.zeros(2 * dim))
            chosen = self.model.centroids[list(state.selected)]
            mean = chosen.mean(axis=0)
            var = chosen.var(axis=0)  # population variance; zero for singletons
            return StateEncoding(kind=self.kind, vector=np.concatenate([mean, var]))
        valid = np.array([state.contains(i) for i in range(k)], dtype=bool)
        flat = np.where(valid[:, None], self._rep_rows, 0.0).ravel()
        return StateEncoding(
            kind=self.kind,
            vector=flat,
            tokens=self._rep_rows.copy(),
            token_valid=valid,
        )


def encode(
    state: SubsetState,
    model: ClusterModel,
    kind: EncodingKind,
    m_reps: int = 1,
    rep_strategy: SubsampleStrategy = "furthest",
    rep_seed: int = 0,
) -> StateEncoding:
    """One-shot encoding; see Encoder for the reusable form."""
    return Encoder(model, kind, m_reps, rep_strategy, rep_seed)(state)
