"""Clipped-surrogate policy optimization with action masking."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from ..env import Encoder, Mdp, SubsetState
from ..nets import (Adam, DenseNet, clip_global_norm, masked_log_softmax,
                    masked_softmax)
from ..rewards import RewardFunction, RndBonus
from ..rngutil import derive_rng, derive_seed
from .rollout import PpoPolicy


@dataclass
class PpoConfig:
    episodes: int = 500
    episodes_per_batch: int = 4
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.2
    lr: float = 3e-4
    epochs_per_batch: int = 4
    entropy_coef: float = 0.01
    hidden: int = 128
    hidden_layers: int = 2  # plus the output layer: 3-layer MLPs
    warm_start: bool = False
    warm_start_repeats: int = 1
    warm_start_epochs: int = 500
    grad_clip: float = 10.0

    def validate(self) -> None:
        if not (0.0 < self.clip < 1.0):
            raise ValueError("clip must be in (0, 1)")
        if not (0.0 <= self.gae_lambda <= 1.0) or not (0.0 < self.gamma <= 1.0):
            raise ValueError("need gamma in (0, 1] and gae_lambda in [0, 1]")
        for name in ("episodes", "episodes_per_batch", "epochs_per_batch", "hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0.0 or self.entropy_coef < 0.0:
            raise ValueError("need lr > 0 and entropy_coef >= 0")


@dataclass
class PpoResult:
    policy: PpoPolicy
    returns: List[float]
    log: List[dict]
    warm_start_targets: Optional[np.ndarray] = None


def gae_advantages(rewards: np.ndarray, values: np.ndarray,
                   gamma: float, lam: float) -> np.ndarray:
    """Generalized advantage estimates for one full episode. `values` has
    one more entry than `rewards`; the terminal bootstrap value is its
    last element (0 for a true terminal state)."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if values.size != rewards.size + 1:
        raise ValueError("values must have len(rewards) + 1 entries")
    adv = np.zeros_like(rewards)
    carry = 0.0
    for t in range(rewards.size - 1, -1, -1):
        delta = rewards[t] + gamma * values[t + 1] - values[t]
        carry = delta + gamma * lam * carry
        adv[t] = carry
    return adv


def clipped_objective(ratio: np.ndarray, advantage: np.ndarray,
                      clip: float) -> np.ndarray:
    """Per-sample surrogate min(r*A, clip(r, 1-c, 1+c)*A)."""
    unclipped = ratio * advantage
    clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip) * advantage
    return np.minimum(unclipped, clipped)


def _entropy_terms(probs: np.ndarray, logp: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-row entropy and its gradient wrt logits, zero at invalid
    entries (where probs is exactly 0)."""
    safe_logp = np.where(probs > 0.0, logp, 0.0)
    entropy = -(probs * safe_logp).sum(axis=1)
    grad = np.where(probs > 0.0, probs * (safe_logp + entropy[:, None]), 0.0)
    return entropy, grad


def warm_start_critic(reward_fn: RewardFunction, encoder: Encoder,
                      critic: DenseNet, budget: int, repeats: int = 1,
                      epochs: int = 500, lr: float = 3e-4,
                      grad_clip: float = 10.0) -> np.ndarray:
    """Pretrain the value head by regressing single-cluster state values
    onto their measured first-step rewards. Returns the target vector."""
    k = encoder.model.k
    empty = SubsetState(mask=0, budget=budget, k=k)
    targets = np.zeros(k)
    for c in range(k):
        total = 0.0
        for _ in range(max(1, repeats)):
            total += reward_fn.reward(empty, c)
        targets[c] = total / max(1, repeats)
    x = np.stack([
        encoder(SubsetState(mask=1 << c, budget=budget, k=k)).vector
        for c in range(k)
    ])
    opt = Adam(critic.parameters(), lr=lr)
    y = targets[:, None]
    for _ in range(epochs):
        pred = critic.forward(x)
        d_out = 2.0 * (pred - y) / pred.size
        grads = critic.backward(d_out)
        clip_global_norm(grads, grad_clip)
        opt.step(critic.parameters(), grads)
    return targets


def _collect_episode(mdp: Mdp, policy: PpoPolicy, reward_fn: RewardFunction,
                     rng: np.random.Generator, rnd: Optional[RndBonus]):
    encoder = policy.encoder
    state = mdp.reset()
    steps = []
    ep_return = 0.0
    entropies = []
    while not state.is_terminal:
        valid = mdp.action_mask(state)
        enc = encoder(state)
        logits = policy.actor.forward(enc.vector)[0]
        probs = masked_softmax(logits, valid)
        logp = masked_log_softmax(logits, valid)
        action = int(rng.choice(state.k, p=probs))
        if not valid[action]:
            raise AssertionError(f"invalid action {action} in state {state}")
        entropy, _ = _entropy_terms(probs[None, :], logp[None, :])
        entropies.append(float(entropy[0]))
        value = float(policy.critic.forward(enc.vector)[0, 0])
        reward = reward_fn.reward(state, action)
        next_state, terminal = mdp.step(state, action)
        if rnd is not None and rnd.beta > 0.0:
            reward += rnd.beta * rnd.intrinsic(encoder(next_state))
        steps.append({
            "vector": enc.vector, "valid": valid, "action": action,
            "logp_old": float(logp[action]), "reward": reward, "value": value,
        })
        ep_return += reward
        state = next_state
    return steps, ep_return, float(np.mean(entropies))


def _update(policy: PpoPolicy, batch_steps: List[dict], advantages: np.ndarray,
            value_targets: np.ndarray, config: PpoConfig,
            actor_opt: Adam, critic_opt: Adam) -> None:
    x = np.stack([s["vector"] for s in batch_steps])
    valid = np.stack([s["valid"] for s in batch_steps])
    actions = np.array([s["action"] for s in batch_steps])
    logp_old = np.array([s["logp_old"] for s in batch_steps])
    n = len(batch_steps)
    rows = np.arange(n)
    for _ in range(config.epochs_per_batch):
        logits = policy.actor.forward(x)
        probs = masked_softmax(logits, valid)
        logp = masked_log_softmax(logits, valid)
        ratio = np.exp(logp[rows, actions] - logp_old)
        unclipped = ratio * advantages
        clipped = np.clip(ratio, 1.0 - config.clip, 1.0 + config.clip) * advantages
        # gradient flows only through the unclipped branch when active
        use_unclipped = unclipped <= clipped
        d_logp_a = np.where(use_unclipped, -advantages * ratio, 0.0) / n
        onehot = np.zeros_like(probs)
        onehot[rows, actions] = 1.0
        d_logits = d_logp_a[:, None] * (onehot - probs)
        _, ent_grad = _entropy_terms(probs, logp)
        d_logits += config.entropy_coef * ent_grad / n
        d_logits = np.where(valid, d_logits, 0.0)
        actor_grads = policy.actor.backward(d_logits)
        clip_global_norm(actor_grads, config.grad_clip)
        actor_opt.step(policy.actor.parameters(), actor_grads)

        pred = policy.critic.forward(x)
        d_v = 2.0 * (pred - value_targets[:, None]) / pred.size
        critic_grads = policy.critic.backward(d_v)
        clip_global_norm(critic_grads, config.grad_clip)
        critic_opt.step(policy.critic.parameters(), critic_grads)


def train_ppo(reward_fn: RewardFunction, encoder: Encoder, budget: int,
              config: PpoConfig = None, seed: int = 0,
              rnd: Optional[RndBonus] = None) -> PpoResult:
    """Full-episode batches, generalized advantages, clipped surrogate
    with invalid-action logits at -inf, entropy bonus, MSE value loss."""
    config = config or PpoConfig()
    config.validate()
    k = encoder.model.k
    mdp = Mdp(k, budget)
    rng = derive_rng(seed, "ppo")
    dims = [encoder.width] + [config.hidden] * config.hidden_layers
    actor = DenseNet(dims + [k], seed=derive_seed(seed, "ppo", "actor"))
    critic = DenseNet(dims + [1], seed=derive_seed(seed, "ppo", "critic"))
    policy = PpoPolicy(actor, critic, encoder)
    actor_opt = Adam(actor.parameters(), lr=config.lr)
    critic_opt = Adam(critic.parameters(), lr=config.lr)

    warm_targets = None
    if config.warm_start:
        warm_targets = warm_start_critic(
            reward_fn, encoder, critic, budget,
            repeats=config.warm_start_repeats,
            epochs=config.warm_start_epochs, lr=config.lr,
            grad_clip=config.grad_clip,
        )

    returns: List[float] = []
    log: List[dict] = []
    batch_steps: List[dict] = []
    batch_adv: List[np.ndarray] = []
    batch_vt: List[np.ndarray] = []

    for episode in range(config.episodes):
        t0 = time.perf_counter()
        steps, ep_return, mean_entropy = _collect_episode(
            mdp, policy, reward_fn, rng, rnd)
        rewards = np.array([s["reward"] for s in steps])
        values = np.array([s["value"] for s in steps] + [0.0])
        adv = gae_advantages(rewards, values, config.gamma, config.gae_lambda)
        batch_steps.extend(steps)
        batch_adv.append(adv)
        batch_vt.append(adv + values[:-1])
        returns.append(ep_return)
        log.append({
            "episode": episode,
            "return": ep_return,
            "epsilon_or_entropy": mean_entropy,
            "oracle_calls": reward_fn.oracle.call_count,
            "wall_ms": (time.perf_counter() - t0) * 1e3,
        })
        if (episode + 1) % config.episodes_per_batch == 0:
            advantages = np.concatenate(batch_adv)
            centred = advantages - advantages.mean()
            advantages = centred / (advantages.std() + 1e-8)
            _update(policy, batch_steps, advantages, np.concatenate(batch_vt),
                    config, actor_opt, critic_opt)
            batch_steps, batch_adv, batch_vt = [], [], []

    return PpoResult(policy=policy, returns=returns, log=log,
                     warm_start_targets=warm_targets)
