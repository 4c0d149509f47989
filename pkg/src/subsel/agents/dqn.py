"""Masked deep Q-learning over the cluster-subset environment."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from ..env import Encoder, Mdp
from ..nets import Adam, DenseNet, TinyTransformer, clip_global_norm
from ..replay import ReplayBuffer, Transition
from ..rewards import RewardFunction, RndBonus
from ..rngutil import derive_rng, derive_seed
from .rollout import QPolicy


@dataclass
class DqnConfig:
    episodes: int = 500
    gamma: float = 0.99
    epsilon_start: float = 1.0
    epsilon_decay: float = 0.99
    epsilon_floor: float = 0.01
    batch_size: int = 32
    lr: float = 1e-4
    target_sync_every: int = 10  # counted in gradient steps
    grad_steps_per_env_step: int = 1
    buffer_capacity: int = 10_000
    hidden: int = 256
    hidden_layers: int = 4  # plus the output layer: a 5-layer MLP
    head: str = "mlp"  # "mlp" | "transformer"
    d_model: int = 32
    n_heads: int = 2
    transformer_layers: int = 2
    ff_width: int = 64
    grad_clip: float = 10.0

    def validate(self) -> None:
        if self.head not in ("mlp", "transformer"):
            raise ValueError(f"unknown head {self.head!r}")
        if not (0.0 < self.epsilon_decay <= 1.0):
            raise ValueError("epsilon_decay must be in (0, 1]")
        if not (0.0 <= self.epsilon_floor <= self.epsilon_start <= 1.0):
            raise ValueError("need 0 <= epsilon_floor <= epsilon_start <= 1")
        for name in ("episodes", "batch_size", "target_sync_every",
                     "grad_steps_per_env_step", "buffer_capacity", "hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not (0.0 < self.gamma <= 1.0) or self.lr <= 0.0:
            raise ValueError("need gamma in (0, 1] and lr > 0")


@dataclass
class DqnResult:
    policy: QPolicy
    returns: List[float]
    log: List[dict]
    grad_steps: int
    target_net: object = None
    buffer: Optional[ReplayBuffer] = None


def build_q_net(encoder: Encoder, k: int, config: DqnConfig, seed: int):
    if config.head == "transformer":
        return TinyTransformer(
            token_width=encoder.token_width,
            out_width=k,
            d_model=config.d_model,
            n_heads=config.n_heads,
            n_layers=config.transformer_layers,
            ff_width=config.ff_width,
            seed=seed,
        )
    widths = [encoder.width] + [config.hidden] * config.hidden_layers + [k]
    return DenseNet(widths, seed=seed)


def forward_batch(net, encodings) -> np.ndarray:
    if isinstance(net, TinyTransformer):
        tokens = np.stack([e.tokens for e in encodings])
        valid = np.stack([e.token_valid for e in encodings])
        return net.forward(tokens, valid)
    return net.forward(np.stack([e.vector for e in encodings]))


def bellman_targets(q_next: np.ndarray, next_valid: np.ndarray,
                    rewards: np.ndarray, terminals: np.ndarray,
                    gamma: float) -> np.ndarray:
    """y = r for terminal transitions, else r + gamma * max over valid
    next actions of the target net's Q."""
    masked = np.where(next_valid, q_next, -np.inf)
    max_next = masked.max(axis=1)
    max_next = np.where(np.isfinite(max_next), max_next, 0.0)
    return rewards + gamma * np.where(terminals, 0.0, max_next)


def q_gradient_step(online, target, batch: List[Transition],
                    gamma: float, opt: Adam, grad_clip: float) -> float:
    """One weighted-MSE regression step of the online net onto Bellman
    targets. Returns the batch loss."""
    n = len(batch)
    rewards = np.array([t.reward for t in batch])
    terminals = np.array([t.terminal for t in batch])
    weights = np.array([t.weight for t in batch])
    actions = np.array([t.action for t in batch])
    next_valid = np.stack([t.next_valid for t in batch])
    q_next = forward_batch(target, [t.next_state for t in batch])
    y = bellman_targets(q_next, next_valid, rewards, terminals, gamma)
    q_all = forward_batch(online, [t.state for t in batch])
    rows = np.arange(n)
    diff = q_all[rows, actions] - y
    loss = float(np.mean(weights * diff * diff))
    d_out = np.zeros_like(q_all)
    d_out[rows, actions] = 2.0 * weights * diff / n
    grads = online.backward(d_out)
    clip_global_norm(grads, grad_clip)
    opt.step(online.parameters(), grads)
    return loss


def train_dqn(reward_fn: RewardFunction, encoder: Encoder, budget: int,
              config: DqnConfig = None, seed: int = 0,
              rnd: Optional[RndBonus] = None) -> DqnResult:
    """epsilon-greedy episodes with replay; invalid actions are never
    selectable and Bellman backups max only over valid next actions."""
    config = config or DqnConfig()
    config.validate()
    k = encoder.model.k
    mdp = Mdp(k, budget)
    rng = derive_rng(seed, "dqn")
    online = build_q_net(encoder, k, config, seed=derive_seed(seed, "dqn", "net"))
    target = online.copy()
    opt = Adam(online.parameters(), lr=config.lr)
    buffer = ReplayBuffer(config.buffer_capacity)
    policy = QPolicy(online, encoder)
    epsilon = config.epsilon_start
    returns: List[float] = []
    log: List[dict] = []
    grad_steps = 0

    for episode in range(config.episodes):
        t0 = time.perf_counter()
        state = mdp.reset()
        ep_return = 0.0
        while not state.is_terminal:
            valid = mdp.action_mask(state)
            if rng.random() < epsilon:
                action = int(rng.choice(np.flatnonzero(valid)))
            else:
                action = policy.greedy_action(state)
            if not valid[action]:
                raise AssertionError(f"invalid action {action} in state {state}")
            reward = reward_fn.reward(state, action)
            next_state, terminal = mdp.step(state, action)
            if rnd is not None and rnd.beta > 0.0:
                reward += rnd.beta * rnd.intrinsic(encoder(next_state))
            buffer.push(Transition(
                state=encoder(state), action=action, reward=reward,
                next_state=encoder(next_state),
                next_valid=mdp.action_mask(next_state),
                terminal=terminal, born_episode=episode,
            ))
            ep_return += reward
            if len(buffer) >= config.batch_size:
                for _ in range(config.grad_steps_per_env_step):
                    q_gradient_step(online, target, buffer.sample(config.batch_size, rng),
                                    config.gamma, opt, config.grad_clip)
                    grad_steps += 1
                    if grad_steps % config.target_sync_every == 0:
                        target.load_params_from(online)
            state = next_state
        returns.append(ep_return)
        log.append({
            "episode": episode,
            "return": ep_return,
            "epsilon_or_entropy": epsilon,
            "oracle_calls": reward_fn.oracle.call_count,
            "wall_ms": (time.perf_counter() - t0) * 1e3,
        })
        epsilon = max(config.epsilon_floor, epsilon * config.epsilon_decay)

    return DqnResult(policy=policy, returns=returns, log=log,
                     grad_steps=grad_steps, target_net=target, buffer=buffer)
