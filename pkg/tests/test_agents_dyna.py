import numpy as np
import pytest

from helpers import make_world
from subsel.agents.dqn import DqnConfig
from subsel.agents.dyna import (
    ENSEMBLE_SIZE,
    DynaConfig,
    RewardEnsemble,
    _random_state_action,
    check_buffer_law,
    train_dyna_dqn,
)
from subsel.env import Encoder, StateEncoding
from subsel.nets import param_vector
from subsel.replay import ReplayBuffer, Transition


def tiny_dyna(**kw):
    base = dict(hidden=16, hidden_layers=1, batch_size=8, samples_per_step=8)
    base.update(kw)
    return DynaConfig(**base)


def tiny_dqn(**kw):
    base = dict(episodes=8, hidden=16, hidden_layers=1, batch_size=8, lr=1e-3)
    base.update(kw)
    return DqnConfig(**base)


# ----------------------------------------------------------------- ensemble

def test_ensemble_members_are_distinct():
    ens = RewardEnsemble(in_width=6, config=tiny_dyna(), seed=0)
    assert len(ens.nets) == ENSEMBLE_SIZE
    vecs = [param_vector(net) for net in ens.nets]
    for i in range(ENSEMBLE_SIZE):
        for j in range(i + 1, ENSEMBLE_SIZE):
            assert not np.array_equal(vecs[i], vecs[j])


def test_ensemble_predict_shape():
    ens = RewardEnsemble(in_width=4, config=tiny_dyna(), seed=1)
    preds = ens.predict(np.zeros((7, 4)))
    assert preds.shape == (ENSEMBLE_SIZE, 7)


def test_ensemble_fits_consistent_targets():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(30, 4))
    y = x @ np.array([1.0, -2.0, 0.5, 0.0]) * 0.1
    ens = RewardEnsemble(in_width=4, config=tiny_dyna(lr=1e-2), seed=2)
    inputs = list(x)
    targets = list(y)

    def err():
        return float(np.mean((ens.predict(x).mean(axis=0) - y) ** 2))

    before = err()
    for _ in range(300):
        ens.train_step(inputs, targets)
    assert err() < before * 0.1


def test_weight_decay_shrinks_idle_weights():
    # Zero inputs and zero targets produce zero data gradient, so only the
    # decay term moves the weights: their norm must fall.
    ens = RewardEnsemble(in_width=3, config=tiny_dyna(weight_decay=1e-2, lr=1e-2), seed=3)
    inputs = [np.zeros(3)] * 8
    targets = [0.0] * 8
    norms_before = [float(np.linalg.norm(param_vector(net))) for net in ens.nets]
    for _ in range(50):
        ens.train_step(inputs, targets)
    norms_after = [float(np.linalg.norm(param_vector(net))) for net in ens.nets]
    assert all(a < b for a, b in zip(norms_after, norms_before))


def test_disagreement_is_population_std():
    # The admission gate uses numpy's default (population) std over the
    # four member predictions.
    assert np.std([0.0, 0.0, 0.0, 10.0]) == pytest.approx(4.330127018922194)
    assert np.std([1.0, 1.0, 1.0, 1.0]) == 0.0


# --------------------------------------------------------------- buffer law

def synthetic_transition(weight=0.5, std=0.1, cap=0.5, born=0):
    enc = StateEncoding(kind="binary_mask", vector=np.zeros(3))
    return Transition(
        state=enc, action=0, reward=1.0, next_state=enc,
        next_valid=np.array([True] * 3), terminal=False,
        is_synthetic=True, weight=weight, born_episode=born,
        ensemble_std=std, sigma_cap=cap)


def test_buffer_law_accepts_compliant_entries():
    buf = ReplayBuffer()
    buf.push(synthetic_transition())
    check_buffer_law(buf, episode=4, config=DynaConfig())


def test_buffer_law_rejects_wrong_weight():
    buf = ReplayBuffer()
    buf.push(synthetic_transition(weight=1.0))
    with pytest.raises(AssertionError, match="weight"):
        check_buffer_law(buf, episode=0, config=DynaConfig())


def test_buffer_law_rejects_untrusted_prediction():
    buf = ReplayBuffer()
    buf.push(synthetic_transition(std=0.6, cap=0.5))
    with pytest.raises(AssertionError, match="cap"):
        check_buffer_law(buf, episode=0, config=DynaConfig())


def test_buffer_law_rejects_expired_entry():
    buf = ReplayBuffer()
    buf.push(synthetic_transition(born=0))
    with pytest.raises(AssertionError, match="lifetime"):
        check_buffer_law(buf, episode=5, config=DynaConfig())


def test_buffer_law_ignores_real_transitions():
    enc = StateEncoding(kind="binary_mask", vector=np.zeros(3))
    buf = ReplayBuffer()
    buf.push(Transition(state=enc, action=0, reward=0.0, next_state=enc,
                        next_valid=np.array([True]), terminal=False,
                        born_episode=0, weight=1.0))
    check_buffer_law(buf, episode=99, config=DynaConfig())


# ------------------------------------------------------------ state sampler

def test_random_state_action_is_always_legal():
    rng = np.random.default_rng(0)
    for _ in range(200):
        state, action = _random_state_action(rng, k=6, budget=3)
        assert state.step < 3
        assert action not in state
        assert 0 <= action < 6


# ----------------------------------------------------------------- training

def test_no_policy_training_during_warmup():
    model, _, _, reward_fn = make_world(k=5, seed=0)
    enc = Encoder(model, "binary_mask")
    res = train_dyna_dqn(reward_fn, enc, budget=2,
                         config=tiny_dyna(warmup_episodes=5),
                         dqn_config=tiny_dqn(episodes=5), seed=0)
    assert res.grad_steps == 0
    res = train_dyna_dqn(reward_fn, enc, budget=2,
                         config=tiny_dyna(warmup_episodes=5),
                         dqn_config=tiny_dqn(episodes=8), seed=0)
    assert res.grad_steps > 0


def test_generous_cap_admits_synthetic_transitions():
    model, _, _, reward_fn = make_world(k=5, seed=1)
    enc = Encoder(model, "binary_mask")
    res = train_dyna_dqn(reward_fn, enc, budget=2,
                         config=tiny_dyna(sigma_max=1e9),
                         dqn_config=tiny_dqn(episodes=6), seed=0)
    synth = [t for t in res.buffer.snapshot() if t.is_synthetic]
    assert synth
    for t in synth:
        assert t.weight == 0.5
        assert t.ensemble_std < t.sigma_cap
        assert t.sigma_cap == 1e9


def test_tiny_cap_blocks_synthetic_transitions():
    model, _, _, reward_fn = make_world(k=5, seed=2)
    enc = Encoder(model, "binary_mask")
    res = train_dyna_dqn(reward_fn, enc, budget=2,
                         config=tiny_dyna(sigma_max=1e-12),
                         dqn_config=tiny_dqn(episodes=6), seed=0)
    assert not any(t.is_synthetic for t in res.buffer.snapshot())


def test_dynamic_cap_recorded_on_entries():
    model, _, _, reward_fn = make_world(k=5, seed=3)
    enc = Encoder(model, "binary_mask")
    res = train_dyna_dqn(reward_fn, enc, budget=2,
                         config=tiny_dyna(),  # sigma_max None: scaled running std
                         dqn_config=tiny_dqn(episodes=8), seed=0)
    for t in res.buffer.snapshot():
        if t.is_synthetic:
            assert t.sigma_cap is not None and t.sigma_cap > 0.0
            assert t.ensemble_std < t.sigma_cap


def test_train_seed_determinism():
    def run():
        model, _, _, reward_fn = make_world(k=5, seed=4)
        enc = Encoder(model, "binary_mask")
        return train_dyna_dqn(reward_fn, enc, budget=2, config=tiny_dyna(),
                              dqn_config=tiny_dqn(episodes=7), seed=9).returns

    assert run() == run()


def test_config_validation():
    with pytest.raises(ValueError):
        DynaConfig(sigma_max=0.0).validate()
    with pytest.raises(ValueError):
        DynaConfig(sigma_scale=0.0).validate()
    with pytest.raises(ValueError):
        DynaConfig(weight_decay=-1.0).validate()
