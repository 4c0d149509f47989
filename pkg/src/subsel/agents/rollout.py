"""Policies over learned nets and deterministic episode rollout."""

from __future__ import annotations

from typing import List, Optional, Tuple

import numpy as np

from ..env import Encoder, Mdp, StateEncoding, SubsetState
from ..nets import DenseNet, TinyTransformer, masked_softmax


def _net_output(net, encoding: StateEncoding) -> np.ndarray:
    if isinstance(net, TinyTransformer):
        return net.forward(encoding.tokens, encoding.token_valid)[0]
    return net.forward(encoding.vector)[0]


class QPolicy:
    """Action-value policy: per-cluster Q estimates with invalid actions
    forced to -inf before any argmax."""

    def __init__(self, net, encoder: Encoder):
        if isinstance(net, TinyTransformer) and encoder.kind != "concat":
            raise ValueError("transformer head needs the concat (token) encoding")
        self.net = net
        self.encoder = encoder

    def q_values(self, state: SubsetState) -> np.ndarray:
        return _net_output(self.net, self.encoder(state))

    def greedy_action(self, state: SubsetState) -> int:
        valid = np.zeros(state.k, dtype=bool)
        valid[[c for c in range(state.k) if c not in state]] = True
        masked = np.where(valid, self.q_values(state), -np.inf)
        # np.argmax takes the first maximum: lowest-index tie rule
        return int(np.argmax(masked))

    def act(self, state: SubsetState, mode: str = "greedy",
            rng: Optional[np.random.Generator] = None,
            epsilon: float = 0.0) -> int:
        if mode == "greedy":
            return self.greedy_action(state)
        if mode != "stochastic":
            raise ValueError(f"unknown rollout mode {mode!r}")
        if rng is None:
            raise ValueError("stochastic mode needs an rng")
        valid = np.array([c not in state for c in range(state.k)])
        if epsilon > 0.0 and rng.random() < epsilon:
            return int(rng.choice(np.flatnonzero(valid)))
        return self.greedy_action(state)


class PpoPolicy:
    """Stochastic policy from masked actor logits, with a value head."""

    def __init__(self, actor: DenseNet, critic: DenseNet, encoder: Encoder):
        self.actor = actor
        self.critic = critic
        self.encoder = encoder

    def probs(self, state: SubsetState) -> np.ndarray:
        logits = self.actor.forward(self.encoder(state).vector)[0]
        valid = np.array([c not in state for c in range(state.k)])
        return masked_softmax(logits, valid)

    def value(self, state: SubsetState) -> float:
        return float(self.critic.forward(self.encoder(state).vector)[0, 0])

    def greedy_action(self, state: SubsetState) -> int:
        return int(np.argmax(self.probs(state)))

    def act(self, state: SubsetState, mode: str = "greedy",
            rng: Optional[np.random.Generator] = None,
            epsilon: float = 0.0) -> int:
        if mode == "greedy":
            return self.greedy_action(state)
        if mode != "stochastic":
            raise ValueError(f"unknown rollout mode {mode!r}")
        if rng is None:
            raise ValueError("stochastic mode needs an rng")
        return int(rng.choice(state.k, p=self.probs(state)))


def rollout_policy(policy, k: int, budget: int, mode: str = "greedy",
                   rng: Optional[np.random.Generator] = None,
                   ) -> Tuple[SubsetState, List[int]]:
    """Apply the policy from the empty state to the horizon. Greedy mode
    is deterministic with ties broken toward the lowest cluster index."""
    mdp = Mdp(k, budget)
    state = mdp.reset()
    actions: List[int] = []
    while not state.is_terminal:
        action = policy.act(state, mode=mode, rng=rng)
        if action in state:
            raise AssertionError(f"policy chose already-selected cluster {action}")
        actions.append(action)
        state, _ = mdp.step(state, action)
    return state, actions


def trace_record(state: SubsetState, action: int, reward: float,
                 terminal: bool) -> dict:
    """One episode-trace entry in the exportable JSONL schema."""
    return {
        "state_bitmask_hex": state.bitmask_hex,
        "action": int(action),
        "reward": float(reward),
        "terminal": bool(terminal),
    }
