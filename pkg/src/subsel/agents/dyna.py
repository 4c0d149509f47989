"""Model-based DQN: an ensemble reward surrogate labels synthetic
transitions, admitted to replay only when the ensemble agrees."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from ..env import Encoder, Mdp, SubsetState
from ..nets import Adam, DenseNet, clip_global_norm
from ..replay import ReplayBuffer, Transition
from ..rewards import RewardFunction, RndBonus, RunningMoments
from ..rngutil import derive_rng, derive_seed
from .dqn import DqnConfig, DqnResult, build_q_net, q_gradient_step
from .rollout import QPolicy

ENSEMBLE_SIZE = 4


@dataclass
class DynaConfig:
    hidden: int = 256
    hidden_layers: int = 4  # 5-layer reward MLPs
    lr: float = 5e-4
    weight_decay: float = 1e-4
    batch_size: int = 32
    samples_per_step: int = 32
    sigma_max: Optional[float] = None  # None: sigma_scale * running std of real rewards
    sigma_scale: float = 0.5
    synthetic_weight: float = 0.5
    synthetic_lifetime: int = 4
    warmup_episodes: int = 5  # no policy training before this

    def validate(self) -> None:
        if self.sigma_max is not None and not self.sigma_max > 0.0:
            raise ValueError("sigma_max must be positive when fixed")
        if self.sigma_scale <= 0.0 or self.lr <= 0.0 or self.weight_decay < 0.0:
            raise ValueError("need sigma_scale > 0, lr > 0, weight_decay >= 0")
        for name in ("hidden", "batch_size", "samples_per_step"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


class RewardEnsemble:
    """Independently initialized reward regressors over (state encoding,
    one-hot action) inputs. Disagreement (population std) gates whether a
    prediction is trusted."""

    def __init__(self, in_width: int, config: DynaConfig, seed: int):
        widths = [in_width] + [config.hidden] * config.hidden_layers + [1]
        self.nets = [
            DenseNet(widths, seed=derive_seed(seed, "dyna", "ensemble", i))
            for i in range(ENSEMBLE_SIZE)
        ]
        self.opts = [Adam(net.parameters(), lr=config.lr) for net in self.nets]
        self.rngs = [derive_rng(seed, "dyna", "sampler", i) for i in range(ENSEMBLE_SIZE)]
        self.weight_decay = config.weight_decay
        self.batch_size = config.batch_size
        self.grad_clip = 10.0

    def predict(self, x: np.ndarray) -> np.ndarray:
        """(ensemble, batch) reward predictions."""
        return np.stack([net.forward(x)[:, 0] for net in self.nets])

    def train_step(self, inputs: List[np.ndarray], targets: List[float]) -> None:
        """One regression step per member on its own random minibatch of
        real transitions; squared loss plus L2 penalty on the weights."""
        n = len(inputs)
        if n == 0:
            return
        x_all = np.stack(inputs)
        y_all = np.asarray(targets)
        for net, opt, rng in zip(self.nets, self.opts, self.rngs):
            idx = rng.choice(n, size=min(self.batch_size, n), replace=False)
            x, y = x_all[idx], y_all[idx]
            pred = net.forward(x)
            d_out = 2.0 * (pred - y[:, None]) / pred.size
            grads = net.backward(d_out)
            for g, p in zip(grads, net.parameters()):
                g += self.weight_decay * p
            clip_global_norm(grads, self.grad_clip)
            opt.step(net.parameters(), grads)


def check_buffer_law(buffer: ReplayBuffer, episode: int, config: DynaConfig) -> None:
    """Hard invariant on every synthetic entry: admitted below its
    recorded disagreement cap, standard weight, within lifetime."""
    for t in buffer.snapshot():
        if not t.is_synthetic:
            continue
        if t.weight != config.synthetic_weight:
            raise AssertionError(f"synthetic weight {t.weight} != {config.synthetic_weight}")
        if t.sigma_cap is None or t.ensemble_std is None or not t.ensemble_std < t.sigma_cap:
            raise AssertionError(
                f"synthetic std {t.ensemble_std} not below cap {t.sigma_cap}")
        if episode - t.born_episode > config.synthetic_lifetime:
            raise AssertionError("synthetic transition outlived its lifetime")


def _random_state_action(rng: np.random.Generator, k: int, budget: int):
    step = int(rng.integers(0, budget))
    clusters = rng.choice(k, size=step, replace=False) if step else np.empty(0, dtype=int)
    mask = 0
    for c in clusters:
        mask |= 1 << int(c)
    state = SubsetState(mask=mask, budget=budget, k=k)
    candidates = np.array([c for c in range(k) if c not in state])
    action = int(rng.choice(candidates))
    return state, action


def train_dyna_dqn(reward_fn: RewardFunction, encoder: Encoder, budget: int,
                   config: DynaConfig = None, dqn_config: DqnConfig = None,
                   seed: int = 0, rnd: Optional[RndBonus] = None) -> DqnResult:
    config = config or DynaConfig()
    config.validate()
    dqn_config = dqn_config or DqnConfig()
    dqn_config.validate()
    k = encoder.model.k
    mdp = Mdp(k, budget)
    rng = derive_rng(seed, "dynadqn")
    online = build_q_net(encoder, k, dqn_config, seed=derive_seed(seed, "dynadqn", "net"))
    target = online.copy()
    opt = Adam(online.parameters(), lr=dqn_config.lr)
    buffer = ReplayBuffer(dqn_config.buffer_capacity)
    policy = QPolicy(online, encoder)
    ensemble = RewardEnsemble(encoder.width + k, config, seed)
    real_inputs: List[np.ndarray] = []
    real_targets: List[float] = []
    real_moments = RunningMoments()
    epsilon = dqn_config.epsilon_start
    returns: List[float] = []
    log: List[dict] = []
    grad_steps = 0

    def pair_input(enc_vector: np.ndarray, action: int) -> np.ndarray:
        onehot = np.zeros(k)
        onehot[action] = 1.0
        return np.concatenate([enc_vector, onehot])

    for episode in range(dqn_config.episodes):
        t0 = time.perf_counter()
        buffer.evict_expired(episode, config.synthetic_lifetime)
        check_buffer_law(buffer, episode, config)
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
            enc_state = encoder(state)
            buffer.push(Transition(
                state=enc_state, action=action, reward=reward,
                next_state=encoder(next_state),
                next_valid=mdp.action_mask(next_state),
                terminal=terminal, born_episode=episode,
            ))
            ep_return += reward
            real_inputs.append(pair_input(enc_state.vector, action))
            real_targets.append(reward)
            real_moments.update(reward)
            ensemble.train_step(real_inputs, real_targets)

            sigma_cap = config.sigma_max
            if sigma_cap is None:
                sigma_cap = (config.sigma_scale * float(real_moments.std)
                             if real_moments.count >= 2 else None)
            if sigma_cap is not None and sigma_cap > 0.0:
                cand = [_random_state_action(rng, k, budget)
                        for _ in range(config.samples_per_step)]
                x = np.stack([pair_input(encoder(s).vector, a) for s, a in cand])
                preds = ensemble.predict(x)
                means = preds.mean(axis=0)
                stds = preds.std(axis=0)
                for (s, a), mu, sd in zip(cand, means, stds):
                    if sd < sigma_cap:
                        nxt, term = mdp.step(s, a)
                        buffer.push(Transition(
                            state=encoder(s), action=a, reward=float(mu),
                            next_state=encoder(nxt),
                            next_valid=mdp.action_mask(nxt),
                            terminal=term, is_synthetic=True,
                            weight=config.synthetic_weight,
                            born_episode=episode, ensemble_std=float(sd),
                            sigma_cap=float(sigma_cap),
                        ))

            if episode >= config.warmup_episodes and len(buffer) >= dqn_config.batch_size:
                for _ in range(dqn_config.grad_steps_per_env_step):
                    q_gradient_step(online, target, buffer.sample(dqn_config.batch_size, rng),
                                    dqn_config.gamma, opt, dqn_config.grad_clip)
                    grad_steps += 1
                    if grad_steps % dqn_config.target_sync_every == 0:
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
        epsilon = max(dqn_config.epsilon_floor, epsilon * dqn_config.epsilon_decay)

    check_buffer_law(buffer, dqn_config.episodes - 1, config)
    return DqnResult(policy=policy, returns=returns, log=log,
                     grad_steps=grad_steps, target_net=target, buffer=buffer)
