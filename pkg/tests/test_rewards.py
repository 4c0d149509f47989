import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import make_world
from subsel.env import reset, step
from subsel.errors import CapabilityError, OracleError
from subsel.rewards import (
    BASELINE_LOSS,
    RewardCache,
    RewardFunction,
    RndBonus,
    RunningMoments,
    SyntheticLandscape,
    SyntheticOracle,
    loss_to_score,
)


# ------------------------------------------------------------ score transform

def test_score_of_half_is_exactly_five():
    assert loss_to_score(0.5) == 5.0


def test_score_zero_crossing_at_baseline_loss():
    assert BASELINE_LOSS == math.exp(2.5) / 2.0
    assert abs(loss_to_score(BASELINE_LOSS)) <= 1e-12


def test_score_strictly_decreasing():
    xs = np.exp(np.linspace(-6, 6, 200))
    scores = [loss_to_score(float(x)) for x in xs]
    assert all(a > b for a, b in zip(scores, scores[1:]))


def test_score_rejects_nonpositive_loss():
    for bad in (0.0, -1.0):
        with pytest.raises(ValueError):
            loss_to_score(bad)


# ---------------------------------------------------------------- landscape

def explicit_landscape(lam=0.5, curvature=0.5):
    w = np.zeros((3, 3))
    w[0, 1] = w[1, 0] = 1.0
    return SyntheticLandscape(
        quality=np.array([1.0, 2.0, 0.5]), redundancy=w,
        lam=lam, curvature=curvature)


def test_value_hand_computed():
    land = explicit_landscape()
    assert land.value([]) == 0.0
    assert land.value([1]) == 2.0
    assert land.value([0, 1]) == pytest.approx(2.5)   # 3 - 0.5 * 1
    assert land.value([0, 1, 2]) == pytest.approx(3.0)
    assert land.value([1, 0]) == land.value([0, 1])   # set semantics
    assert land.value([1, 1]) == land.value([1])


def test_loss_closed_form():
    land = explicit_landscape()
    # V = 3 on the full set with c = 0.5: loss = 0.5 * e^(2.5 - 1.5).
    assert land.loss([0, 1, 2]) == pytest.approx(0.5 * math.e, rel=1e-15)
    assert land.loss([]) == pytest.approx(BASELINE_LOSS, rel=1e-15)


def test_score_is_linear_in_value():
    land = explicit_landscape()
    for subset in ([], [0], [1, 2], [0, 1, 2]):
        expected = 2.0 * land.curvature * land.value(subset)
        assert land.score(subset) == pytest.approx(expected, abs=1e-12)


def test_accuracy_is_clipped_affine_value():
    land = explicit_landscape()
    assert land.accuracy([0, 1, 2]) == pytest.approx(0.8)
    big = SyntheticLandscape(
        quality=np.array([10.0]), redundancy=np.zeros((1, 1)))
    assert big.accuracy([0]) == 1.0
    neg = SyntheticLandscape(
        quality=np.array([0.0, 0.0]),
        redundancy=np.array([[0.0, 99.0], [99.0, 0.0]]))
    assert neg.accuracy([0, 1]) == 0.0


def test_landscape_validation():
    with pytest.raises(ValueError):
        SyntheticLandscape(quality=np.array([1.0]), redundancy=np.zeros((2, 2)))
    bad_diag = np.eye(2)
    with pytest.raises(ValueError):
        SyntheticLandscape(quality=np.ones(2), redundancy=bad_diag)
    asym = np.array([[0.0, 1.0], [0.5, 0.0]])
    with pytest.raises(ValueError):
        SyntheticLandscape(quality=np.ones(2), redundancy=asym)
    with pytest.raises(ValueError):
        SyntheticLandscape(quality=np.ones(2), redundancy=np.zeros((2, 2)), lam=-1.0)


def test_landscape_value_rejects_foreign_clusters():
    with pytest.raises(ValueError):
        explicit_landscape().value([3])


def test_random_landscape_structure():
    land = SyntheticLandscape.random(8, seed=1, density=0.5)
    w = land.redundancy
    assert np.array_equal(w, w.T)
    assert np.all(np.diag(w) == 0.0)
    assert np.all(w >= 0.0)
    assert land.quality.shape == (8,)
    assert np.all((land.quality >= 0.0) & (land.quality <= 1.0))
    empty = SyntheticLandscape.random(8, seed=1, density=0.0)
    assert np.all(empty.redundancy == 0.0)


def test_random_landscape_deterministic():
    a = SyntheticLandscape.random(6, seed=9)
    b = SyntheticLandscape.random(6, seed=9)
    assert np.array_equal(a.quality, b.quality)
    assert np.array_equal(a.redundancy, b.redundancy)


def test_landscape_dict_roundtrip():
    land = SyntheticLandscape.random(5, seed=2, density=0.6, lam=0.3, curvature=0.7)
    back = SyntheticLandscape.from_dict(json.loads(json.dumps(land.to_dict())))
    assert np.array_equal(back.quality, land.quality)
    assert np.array_equal(back.redundancy, land.redundancy)
    assert back.lam == land.lam and back.curvature == land.curvature


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 500), size=st.integers(1, 6))
def test_value_monotone_without_redundancy(seed, size):
    land = SyntheticLandscape.random(8, seed=seed, density=0.0)
    rng = np.random.default_rng(seed)
    subset = rng.choice(8, size=size, replace=False).tolist()
    grow = land.value(subset[: size - 1]) if size > 1 else 0.0
    assert land.value(subset) >= grow


# ----------------------------------------------------------- synthetic oracle

def test_oracle_maps_points_to_clusters():
    model, land, oracle, _ = make_world(k=4, seed=1)
    ids = model.member_union([0, 2]).tolist()
    assert oracle.eval_loss(ids) == pytest.approx(land.loss([0, 2]), rel=1e-15)
    assert oracle.eval_acc(ids) == pytest.approx(land.accuracy([0, 2]), rel=1e-15)


def test_oracle_empty_subset_gives_baseline_loss():
    _, _, oracle, _ = make_world(k=4, seed=2)
    assert oracle.eval_loss([]) == pytest.approx(BASELINE_LOSS, rel=1e-15)


def test_oracle_counts_calls():
    _, _, oracle, _ = make_world(k=4, seed=3)
    oracle.eval_loss([0])
    oracle.eval_loss([0])
    oracle.eval_acc([0])
    oracle.point_losses()
    assert oracle.call_counts == {"eval_loss": 2, "eval_acc": 1, "point_losses": 1}
    assert oracle.eval_calls == 3
    assert oracle.call_count == 4


def test_oracle_rejects_bad_input():
    _, _, oracle, _ = make_world(k=4, seed=4)
    with pytest.raises(OracleError):
        oracle.eval_loss([9999])
    with pytest.raises(OracleError):
        oracle.eval_loss([0], split="test")


def test_point_losses_deterministic_and_near_singleton_loss():
    model, land, oracle, _ = make_world(k=4, seed=5)
    a = oracle.point_losses()
    b = oracle.point_losses()
    assert a == b
    assert len(a) == model.n_points
    for pid, pl in enumerate(a):
        base = land.loss([int(model.assignment[pid])])
        assert abs(pl - base) <= 1e-3 + 1e-12
        assert pl > 0.0


# -------------------------------------------------------------------- cache

def test_cache_get_put():
    cache = RewardCache()
    assert cache.get(5, "val") is None
    cache.put(5, "val", 1.25)
    cache.put(5, "train", 2.5)
    assert cache.get(5, "val") == 1.25
    assert cache.get(5, "train") == 2.5
    assert len(cache) == 2


def test_cache_first_write_wins():
    cache = RewardCache()
    cache.put(1, "val", 1.0)
    cache.put(1, "val", 99.0)
    assert cache.get(1, "val") == 1.0


def test_cache_persistence_roundtrip(tmp_path):
    path = tmp_path / "cache.jsonl"
    cache = RewardCache(path=str(path))
    cache.put(0x1F, "val", 0.75)
    cache.put(2, "train", -1.5)
    lines = [json.loads(l) for l in path.read_text().splitlines()]
    assert lines[0] == {"bitset_hex": "1f", "split": "val", "value": 0.75}
    reloaded = RewardCache(path=str(path))
    assert reloaded.get(0x1F, "val") == 0.75
    assert reloaded.get(2, "train") == -1.5


def test_cache_persistence_appends_once_per_key(tmp_path):
    path = tmp_path / "cache.jsonl"
    cache = RewardCache(path=str(path))
    cache.put(3, "val", 1.0)
    cache.put(3, "val", 2.0)
    assert len(path.read_text().splitlines()) == 1


# --------------------------------------------------------------- normalizers

def test_running_moments_match_numpy():
    rng = np.random.default_rng(0)
    xs = rng.normal(size=(50, 3))
    rm = RunningMoments()
    for x in xs:
        rm.update(x)
    assert np.allclose(rm.mean, xs.mean(axis=0))
    assert np.allclose(rm.std, xs.std(axis=0))  # population std
    assert rm.count == 50


def test_running_moments_std_zero_until_two_samples():
    rm = RunningMoments()
    assert float(rm.std) == 0.0
    rm.update(3.0)
    assert float(rm.std) == 0.0
    rm.update(5.0)
    assert float(rm.std) == pytest.approx(1.0)


def test_normalize_unit_scale_then_standardize():
    rm = RunningMoments()
    assert float(rm.normalize(2.0)) == 2.0
    rm.update(0.0)
    assert float(rm.normalize(2.0)) == 2.0  # centered only, scale still unit
    rm.update(10.0)
    z = float(rm.normalize(10.0))
    assert z == pytest.approx(1.0)  # (10 - 5) / 5


def test_normalize_clips_at_five():
    rm = RunningMoments()
    rm.update(0.0)
    rm.update(1.0)
    assert float(rm.normalize(1000.0)) == 5.0
    assert float(rm.normalize(-1000.0)) == -5.0


# ---------------------------------------------------------------- RND bonus

def test_rnd_perfect_predictor_earns_nothing():
    bonus = RndBonus(in_width=4, seed=0)
    bonus.predictor.load_params_from(bonus.target)
    rng = np.random.default_rng(1)
    for _ in range(5):
        assert bonus.intrinsic(rng.normal(size=4)) == 0.0


def test_rnd_novelty_decays_on_repeats():
    bonus = RndBonus(in_width=6, lr=1e-2, seed=1)
    x = np.random.default_rng(2).normal(size=6)
    values = [bonus.intrinsic(x) for _ in range(60)]
    assert values[0] > 0.0
    assert np.mean(values[-5:]) < np.mean(values[:5])


def test_rnd_target_is_frozen():
    bonus = RndBonus(in_width=4, seed=3)
    before = bonus.target_param_hash()
    rng = np.random.default_rng(4)
    for _ in range(20):
        bonus.intrinsic(rng.normal(size=4))
    assert bonus.target_param_hash() == before


def test_rnd_rejects_width_mismatch():
    bonus = RndBonus(in_width=4, seed=0)
    with pytest.raises(ValueError):
        bonus.intrinsic(np.zeros(5))
    with pytest.raises(ValueError):
        RndBonus(in_width=4, beta=-0.1)


def test_rnd_seeds_give_distinct_targets():
    a = RndBonus(in_width=4, seed=0)
    b = RndBonus(in_width=4, seed=1)
    assert a.target_param_hash() != b.target_param_hash()


# ------------------------------------------------------------ reward function

def test_rewards_telescope_to_final_score():
    _, _, _, reward_fn = make_world(k=6, seed=6)
    rng = np.random.default_rng(0)
    state = reset(6, 3)
    total = 0.0
    while not state.is_terminal:
        choices = [a for a in range(6) if a not in state]
        action = int(rng.choice(choices))
        total += reward_fn.reward(state, action)
        state, _ = step(state, action)
    assert total == pytest.approx(reward_fn.subset_score(state.mask), abs=1e-9)


def test_reward_matches_analytic_marginal_value():
    _, land, _, reward_fn = make_world(k=6, seed=7, density=0.8)
    state, _ = step(reset(6, 3), 1)
    state, _ = step(state, 4)
    for action in (0, 2, 3, 5):
        marginal = land.quality[action] - land.lam * (
            land.redundancy[action, 1] + land.redundancy[action, 4])
        expected = 2.0 * land.curvature * marginal
        assert reward_fn.reward(state, action) == pytest.approx(expected, abs=1e-9)


def test_accuracy_rewards_are_raw_deltas():
    model, _, oracle, _ = make_world(k=3, seed=0)
    land = explicit_landscape()
    oracle = SyntheticOracle(land, model.assignment % 3)
    reward_fn = RewardFunction(oracle=oracle, model=model, kind="acc")
    # Adding cluster 1 (quality 2) from scratch moves accuracy 0.5 -> 0.7.
    assert reward_fn.reward(reset(3, 2), 1) == pytest.approx(0.2)


def test_reward_function_caches_oracle_calls():
    _, _, oracle, reward_fn = make_world(k=5, seed=8)
    state = reset(5, 2)
    reward_fn.reward(state, 0)
    calls = oracle.eval_calls
    reward_fn.reward(state, 0)
    reward_fn.subset_score(1 << 0)
    assert oracle.eval_calls == calls


def test_reward_function_split_routing():
    model, land, oracle, _ = make_world(k=4, seed=9)
    fn_train = RewardFunction(oracle=oracle, model=model, kind="loss_train")
    fn_val = RewardFunction(oracle=oracle, model=model, kind="loss_val")
    assert fn_train.split == "train"
    assert fn_val.split == "val"
    fn_train.subset_metric(1)
    assert fn_train.cache.get(1, "train") is not None
    assert fn_train.cache.get(1, "val") is None


def test_reward_function_checks_capabilities():
    model, land, oracle, _ = make_world(k=4, seed=10)

    class LossOnly(SyntheticOracle):
        @property
        def capabilities(self):
            return frozenset({"eval_val_loss", "eval_train_loss"})

    limited = LossOnly(land, model.assignment)
    with pytest.raises(CapabilityError):
        RewardFunction(oracle=limited, model=model, kind="acc")


def test_reward_rejects_already_selected_action():
    _, _, _, reward_fn = make_world(k=4, seed=11)
    state, _ = step(reset(4, 2), 2)
    with pytest.raises(ValueError):
        reward_fn.reward(state, 2)


def test_subset_ids_are_sorted_subsample_union():
    model, _, _, reward_fn = make_world(k=4, seed=12)
    mask = 0b1010
    ids = reward_fn.subset_ids(mask)
    assert ids == model.subsample_union([1, 3]).tolist()
    assert ids == sorted(set(ids))
    assert reward_fn.subset_ids(0) == []
