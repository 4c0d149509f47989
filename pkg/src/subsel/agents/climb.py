"""Surrogate-guided search over terminal subsets.

Works on absolute subset scores rather than step rewards: repeatedly
sample unseen budget-size subsets, rank them with a learned surrogate,
query the true score of the top few, retrain, and finally return the
best truly-queried subset.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Set, Tuple

import numpy as np

from ..env import Encoder
from ..nets import Adam, DenseNet, clip_global_norm
from ..rewards import RewardFunction
from ..rngutil import derive_rng, derive_seed

# Below this subset-space size the unseen pool is materialized exactly;
# above it, rejection sampling is used.
_ENUMERATION_LIMIT = 200_000


@dataclass
class ClimbConfig:
    iterations: int = 50
    sample_size: int = 128
    top_k: int = 32
    hidden: int = 128
    hidden_layers: int = 2  # 3-layer surrogate MLP
    lr: float = 1e-4
    epochs: int = 2
    batch_size: int = 32
    encoder_kind: str = "binary_mask"  # or "mean_std"
    grad_clip: float = 10.0

    def validate(self) -> None:
        if self.top_k > self.sample_size:
            raise ValueError("top_k must not exceed sample_size")
        for name in ("iterations", "sample_size", "top_k", "hidden", "epochs",
                     "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.encoder_kind not in ("binary_mask", "mean_std"):
            raise ValueError(f"unsupported surrogate encoding {self.encoder_kind!r}")


@dataclass
class ClimbResult:
    best_mask: int
    best_clusters: Tuple[int, ...]
    best_score: float
    surrogate: DenseNet
    n_queries: int
    queried: Dict[int, float]
    log: List[dict] = field(default_factory=list)
    fallback: bool = False


def _mask_to_clusters(mask: int, k: int) -> Tuple[int, ...]:
    return tuple(c for c in range(k) if mask >> c & 1)


def _clusters_to_mask(clusters) -> int:
    mask = 0
    for c in clusters:
        mask |= 1 << int(c)
    return mask


def _all_masks(k: int, budget: int) -> List[int]:
    return [_clusters_to_mask(combo) for combo in itertools.combinations(range(k), budget)]


def _sample_unseen(rng: np.random.Generator, k: int, budget: int,
                   seen: Set[int], count: int, total: int) -> List[int]:
    if total <= _ENUMERATION_LIMIT:
        pool = [m for m in _all_masks(k, budget) if m not in seen]
        idx = rng.choice(len(pool), size=min(count, len(pool)), replace=False)
        return [pool[i] for i in sorted(idx.tolist())]
    out: List[int] = []
    picked: Set[int] = set()
    while len(out) < count:
        mask = _clusters_to_mask(rng.choice(k, size=budget, replace=False))
        if mask in seen or mask in picked:
            continue
        picked.add(mask)
        out.append(mask)
    return out


def _train_surrogate(surrogate: DenseNet, opt: Adam, x: np.ndarray,
                     y: np.ndarray, config: ClimbConfig,
                     rng: np.random.Generator) -> None:
    n = x.shape[0]
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start: start + config.batch_size]
            pred = surrogate.forward(x[idx])
            d_out = 2.0 * (pred - y[idx, None]) / pred.size
            grads = surrogate.backward(d_out)
            clip_global_norm(grads, config.grad_clip)
            opt.step(surrogate.parameters(), grads)


def climb_disc(reward_fn: RewardFunction, budget: int,
               config: ClimbConfig = None, seed: int = 0) -> ClimbResult:
    config = config or ClimbConfig()
    config.validate()
    k = reward_fn.model.k
    encoder = Encoder(reward_fn.model, kind=config.encoder_kind)
    rng = derive_rng(seed, "climb")
    total = math.comb(k, budget)
    surrogate = DenseNet(
        [encoder.width] + [config.hidden] * config.hidden_layers + [1],
        seed=derive_seed(seed, "climb", "surrogate"),
    )
    opt = Adam(surrogate.parameters(), lr=config.lr)

    def encode(mask: int) -> np.ndarray:
        from ..env import SubsetState
        return encoder(SubsetState(mask=mask, budget=budget, k=k)).vector

    if total <= config.sample_size:
        # space smaller than one sample: exhaustive evaluation
        queried = {m: reward_fn.subset_score(m) for m in _all_masks(k, budget)}
        best_mask = _best_by_tiebreak(queried, surrogate, encode, k)
        return ClimbResult(
            best_mask=best_mask,
            best_clusters=_mask_to_clusters(best_mask, k),
            best_score=queried[best_mask],
            surrogate=surrogate, n_queries=len(queried), queried=queried,
            fallback=True,
        )

    seen: Set[int] = set()
    queried: Dict[int, float] = {}
    log: List[dict] = []
    query_budget = config.iterations * config.top_k

    for iteration in range(config.iterations):
        t0 = time.perf_counter()
        want = min(config.sample_size, total - len(seen))
        if want <= 0:
            break
        candidates = _sample_unseen(rng, k, budget, seen, want, total)
        if any(m in seen for m in candidates):
            raise AssertionError("sampled a previously queried subset")
        x = np.stack([encode(m) for m in candidates])
        scores = surrogate.forward(x)[:, 0]
        order = np.lexsort((np.array(candidates), -scores))
        top = [candidates[i] for i in order[: min(config.top_k, len(candidates))]]
        for mask in top:
            queried[mask] = reward_fn.subset_score(mask)
            seen.add(mask)
        if len(queried) > query_budget:
            raise AssertionError(
                f"{len(queried)} oracle queries exceed budget {query_budget}")
        labels = list(queried.items())
        lx = np.stack([encode(m) for m, _ in labels])
        ly = np.array([v for _, v in labels])
        _train_surrogate(surrogate, opt, lx, ly, config, rng)
        log.append({
            "iteration": iteration,
            "queries": len(queried),
            "best_true": max(queried.values()),
            "oracle_calls": reward_fn.oracle.call_count,
            "wall_ms": (time.perf_counter() - t0) * 1e3,
        })

    best_mask = _best_by_tiebreak(queried, surrogate, encode, k)
    best_score = queried[best_mask]
    if any(v > best_score for v in queried.values()):
        raise AssertionError("returned subset is not the best queried one")
    return ClimbResult(
        best_mask=best_mask,
        best_clusters=_mask_to_clusters(best_mask, k),
        best_score=best_score,
        surrogate=surrogate, n_queries=len(queried), queried=queried, log=log,
    )


def _best_by_tiebreak(queried: Dict[int, float], surrogate: DenseNet,
                      encode, k: int) -> int:
    """Highest true score; ties resolved by surrogate score, then by the
    lexicographically smallest cluster tuple."""
    masks = list(queried)
    surr = surrogate.forward(np.stack([encode(m) for m in masks]))[:, 0]
    ranked = sorted(
        zip(masks, surr),
        key=lambda ms: (-queried[ms[0]], -ms[1], _mask_to_clusters(ms[0], k)),
    )
    return ranked[0][0]
