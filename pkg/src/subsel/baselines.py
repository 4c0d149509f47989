"""Non-learning comparators and the exact enumeration oracle."""

from __future__ import annotations

import csv
import itertools
import math
import time
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from .env import Mdp
from .errors import CapabilityError
from .rewards import RewardFunction, RewardOracle, loss_to_score
from .rngutil import derive_rng

BRUTE_FORCE_LIMIT = 10_000_000


@dataclass
class SelectionResult:
    method: str
    score: float  # absolute subset score, recomputed through the oracle
    selected_clusters: Optional[Tuple[int, ...]] = None
    selected_points: Optional[Tuple[int, ...]] = None
    oracle_calls: int = 0
    seed: Optional[int] = None
    wall_ms: float = 0.0
    extra: Dict = field(default_factory=dict)

    @property
    def selected_repr(self) -> str:
        if self.selected_clusters is not None:
            mask = 0
            for c in self.selected_clusters:
                mask |= 1 << c
            return format(mask, "x")
        return ";".join(str(p) for p in self.selected_points or ())


def _mask_of(clusters) -> int:
    mask = 0
    for c in clusters:
        mask |= 1 << int(c)
    return mask


def random_baseline(reward_fn: RewardFunction, budget: int,
                    seed: int = 0) -> SelectionResult:
    """Uniform random budget-size cluster subset."""
    t0 = time.perf_counter()
    k = reward_fn.model.k
    if budget > k:
        raise ValueError(f"budget {budget} exceeds cluster count {k}")
    rng = derive_rng(seed, "random-baseline")
    before = reward_fn.oracle.call_count
    clusters = tuple(sorted(int(c) for c in rng.choice(k, size=budget, replace=False)))
    score = reward_fn.subset_score(_mask_of(clusters))
    return SelectionResult(
        method="random", score=score, selected_clusters=clusters,
        oracle_calls=reward_fn.oracle.call_count - before, seed=seed,
        wall_ms=(time.perf_counter() - t0) * 1e3,
    )


def random_search(reward_fn: RewardFunction, budget: int, n_rollouts: int,
                  seed: int = 0) -> SelectionResult:
    """Uniformly random valid episodes; keeps the subset of the rollout
    with the highest total episode reward (ties: first encountered).

    A rollout that lands on an already-scored subset is redrawn, so the
    budget buys n_rollouts distinct subsets (capped at the space size);
    with C(k, budget) or more rollouts the search is exhaustive.
    """
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be >= 1")
    t0 = time.perf_counter()
    k = reward_fn.model.k
    mdp = Mdp(k, budget)
    rng = derive_rng(seed, "random-search")
    before = reward_fn.oracle.call_count
    best_total = -math.inf
    best_mask = None
    n_unique = min(n_rollouts, math.comb(k, budget))
    seen = set()
    while len(seen) < n_unique:
        # A uniform random permutation prefix is exactly a uniform valid
        # episode, and exposes the terminal subset before any oracle spend.
        actions = [int(c) for c in rng.permutation(k)[:budget]]
        mask = 0
        for action in actions:
            mask |= 1 << action
        if mask in seen:
            continue
        seen.add(mask)
        state = mdp.reset()
        total = 0.0
        for action in actions:
            total += reward_fn.reward(state, action)
            state, _ = mdp.step(state, action)
        if total > best_total:
            best_total = total
            best_mask = state.mask
    clusters = tuple(c for c in range(k) if best_mask >> c & 1)
    return SelectionResult(
        method="random_search", score=reward_fn.subset_score(best_mask),
        selected_clusters=clusters,
        oracle_calls=reward_fn.oracle.call_count - before, seed=seed,
        wall_ms=(time.perf_counter() - t0) * 1e3,
        extra={"total_reward": best_total, "n_rollouts": n_unique},
    )


def loss_ranked_baseline(oracle: RewardOracle, fraction: float,
                         direction: str = "top") -> SelectionResult:
    """Point-level selection: the fraction of points with the highest
    (top) or lowest (bottom) per-point loss; ties go to the lower id."""
    if direction not in ("top", "bottom"):
        raise ValueError(f"direction must be 'top' or 'bottom', got {direction!r}")
    if not (0.0 < fraction <= 1.0):
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if "point_losses" not in oracle.capabilities:
        raise CapabilityError("oracle does not provide per-point losses")
    t0 = time.perf_counter()
    before = oracle.call_count
    losses = np.asarray(oracle.point_losses())
    n = losses.size
    take = int(math.floor(fraction * n))
    key = -losses if direction == "top" else losses
    # secondary key: point id ascending, so ties pick the lower id
    order = np.lexsort((np.arange(n), key))
    points = tuple(sorted(int(p) for p in order[:take]))
    score = loss_to_score(oracle.eval_loss(list(points), split="val"))
    return SelectionResult(
        method=f"{direction}_loss", score=score, selected_points=points,
        oracle_calls=oracle.call_count - before,
        wall_ms=(time.perf_counter() - t0) * 1e3,
        extra={"fraction": fraction},
    )


def brute_force_optimum(reward_fn: RewardFunction, budget: int) -> SelectionResult:
    """Exhaustive maximum of the subset score over all budget-size
    subsets; ties resolve to the lexicographically smallest cluster
    tuple (the enumeration order)."""
    t0 = time.perf_counter()
    k = reward_fn.model.k
    n_subsets = math.comb(k, budget)
    if n_subsets > BRUTE_FORCE_LIMIT:
        raise ValueError(
            f"C({k},{budget}) = {n_subsets} exceeds the enumeration guard "
            f"{BRUTE_FORCE_LIMIT}")
    before = reward_fn.oracle.call_count
    best_score = -math.inf
    best: Tuple[int, ...] = ()
    for combo in itertools.combinations(range(k), budget):
        score = reward_fn.subset_score(_mask_of(combo))
        if score > best_score:
            best_score = score
            best = combo
    return SelectionResult(
        method="brute_force", score=best_score, selected_clusters=best,
        oracle_calls=reward_fn.oracle.call_count - before,
        wall_ms=(time.perf_counter() - t0) * 1e3,
        extra={"n_subsets": n_subsets},
    )


def write_results_csv(results, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "seed", "budget", "score", "oracle_calls",
                         "wall_ms", "selected"])
        for r in results:
            budget = r.extra.get("budget")
            if budget is None and r.selected_clusters is not None:
                budget = len(r.selected_clusters)
            writer.writerow([
                r.method, "" if r.seed is None else r.seed, budget,
                repr(r.score), r.oracle_calls, f"{r.wall_ms:.3f}",
                r.selected_repr,
            ])
