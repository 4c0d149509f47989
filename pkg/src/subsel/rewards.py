"""Reward transforms, oracles, caching, and the exploration bonus.

The engine never reads raw losses directly: every reward variant goes
through an oracle (synthetic or external process), a per-metric cache so
each distinct subset is evaluated at most once, and the logarithmic score
transform that turns loss deltas into telescoping rewards.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .clustering import ClusterModel
from .env import SubsetState, StateEncoding
from .errors import CapabilityError, OracleError
from .nets import Adam, DenseNet, clip_global_norm, mse_loss
from .rngutil import derive_rng, derive_seed

# Loss at which the score transform crosses zero: f(e^2.5 / 2) = 0.
BASELINE_LOSS = math.exp(2.5) / 2.0

REWARD_KINDS = ("loss_val", "loss_train", "acc")


def loss_to_score(loss: float) -> float:
    """Score transform f(x) = 5 - 2 ln(2x), strictly decreasing on x > 0."""
    if not loss > 0.0:
        raise ValueError(f"loss must be positive, got {loss}")
    return 5.0 - 2.0 * math.log(2.0 * loss)


@dataclass(frozen=True)
class SyntheticLandscape:
    """Analytic subset-value landscape used as a deterministic test double.

    V(S) = sum of per-cluster quality minus lam * summed pairwise
    redundancy inside S; loss(S) = 0.5 * exp(2.5 - c * V(S)). By
    construction f(loss(S)) = 2c * V(S), so rewards have a closed form
    and small instances can be brute-forced exactly.
    """

    quality: np.ndarray
    redundancy: np.ndarray
    lam: float = 0.5
    curvature: float = 0.5

    def __post_init__(self):
        q = np.asarray(self.quality, dtype=np.float64)
        w = np.asarray(self.redundancy, dtype=np.float64)
        object.__setattr__(self, "quality", q)
        object.__setattr__(self, "redundancy", w)
        k = q.shape[0]
        if q.ndim != 1 or k < 1:
            raise ValueError("quality must be a non-empty vector")
        if w.shape != (k, k):
            raise ValueError(f"redundancy must be {k}x{k}, got {w.shape}")
        if not np.allclose(w, w.T) or np.any(np.diag(w) != 0.0) or np.any(w < 0.0):
            raise ValueError("redundancy must be symmetric, non-negative, zero-diagonal")
        if self.lam < 0.0 or not self.curvature > 0.0:
            raise ValueError("need lam >= 0 and curvature > 0")

    @property
    def k(self) -> int:
        return int(self.quality.shape[0])

    def value(self, subset: Iterable[int]) -> float:
        idx = sorted(set(int(c) for c in subset))
        for c in idx:
            if not 0 <= c < self.k:
                raise ValueError(f"cluster {c} out of range for k={self.k}")
        total = float(self.quality[idx].sum())
        for pos, a in enumerate(idx):
            for b in idx[pos + 1:]:
                total -= self.lam * float(self.redundancy[a, b])
        return total

    def loss(self, subset: Iterable[int]) -> float:
        return 0.5 * math.exp(2.5 - self.curvature * self.value(subset))

    def accuracy(self, subset: Iterable[int]) -> float:
        return float(np.clip(0.5 + 0.1 * self.value(subset), 0.0, 1.0))

    def score(self, subset: Iterable[int]) -> float:
        return loss_to_score(self.loss(subset))

    @classmethod
    def random(cls, k: int, seed: int = 0, density: float = 0.3,
               lam: float = 0.5, curvature: float = 0.5) -> "SyntheticLandscape":
        rng = derive_rng(seed, "landscape")
        quality = rng.uniform(0.0, 1.0, size=k)
        upper = rng.uniform(0.0, 1.0, size=(k, k)) * (rng.uniform(size=(k, k)) < density)
        w = np.triu(upper, 1)
        w = w + w.T
        return cls(quality=quality, redundancy=w, lam=lam, curvature=curvature)

    def to_dict(self) -> dict:
        return {
            "quality": self.quality.tolist(),
            "redundancy": self.redundancy.tolist(),
            "lam": self.lam,
            "curvature": self.curvature,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SyntheticLandscape":
        return cls(
            quality=np.asarray(doc["quality"], dtype=np.float64),
            redundancy=np.asarray(doc["redundancy"], dtype=np.float64),
            lam=float(doc["lam"]),
            curvature=float(doc["curvature"]),
        )


class RewardOracle(ABC):
    """Evaluates training-subset quality. Queries are sorted point-id lists;
    evaluation must be deterministic for a fixed oracle configuration."""

    @property
    @abstractmethod
    def capabilities(self) -> frozenset:
        """Subset of {eval_val_loss, eval_train_loss, eval_val_acc, point_losses}."""

    @abstractmethod
    def eval_loss(self, train_ids: Sequence[int], split: str = "val") -> float:
        ...

    @abstractmethod
    def eval_acc(self, train_ids: Sequence[int], split: str = "val") -> float:
        ...

    @abstractmethod
    def point_losses(self) -> List[float]:
        ...

    @property
    def call_count(self) -> int:
        """Total queries answered; overridden by concrete oracles."""
        return 0

    def close(self) -> None:
        pass


class SyntheticOracle(RewardOracle):
    """Landscape-backed oracle. Point ids map through a cluster assignment;
    the evaluated subset is the set of clusters the ids touch."""

    def __init__(self, landscape: SyntheticLandscape,
                 assignment: Optional[Sequence[int]] = None,
                 jitter: float = 1e-3, seed: int = 0):
        self.landscape = landscape
        if assignment is None:
            assignment = np.arange(landscape.k)
        self.assignment = np.asarray(assignment, dtype=np.int64)
        if self.assignment.ndim != 1 or self.assignment.size == 0:
            raise ValueError("assignment must be a non-empty id->cluster vector")
        if self.assignment.min() < 0 or self.assignment.max() >= landscape.k:
            raise ValueError("assignment references clusters outside the landscape")
        self._jitter = jitter
        self._seed = seed
        self.call_counts: Dict[str, int] = {"eval_loss": 0, "eval_acc": 0, "point_losses": 0}

    @property
    def capabilities(self) -> frozenset:
        return frozenset({"eval_val_loss", "eval_train_loss", "eval_val_acc", "point_losses"})

    @property
    def n_points(self) -> int:
        return int(self.assignment.size)

    @property
    def eval_calls(self) -> int:
        return self.call_counts["eval_loss"] + self.call_counts["eval_acc"]

    @property
    def call_count(self) -> int:
        return self.eval_calls + self.call_counts["point_losses"]

    def _clusters_of(self, train_ids: Sequence[int]) -> List[int]:
        ids = np.asarray(list(train_ids), dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.n_points):
            raise OracleError(f"point id out of range 0..{self.n_points - 1}")
        return sorted(set(self.assignment[ids].tolist())) if ids.size else []

    def eval_loss(self, train_ids: Sequence[int], split: str = "val") -> float:
        if split not in ("train", "val"):
            raise OracleError(f"unknown split {split!r}")
        self.call_counts["eval_loss"] += 1
        return self.landscape.loss(self._clusters_of(train_ids))

    def eval_acc(self, train_ids: Sequence[int], split: str = "val") -> float:
        if split != "val":
            raise OracleError(f"unknown split {split!r} for accuracy")
        self.call_counts["eval_acc"] += 1
        return self.landscape.accuracy(self._clusters_of(train_ids))

    def point_losses(self) -> List[float]:
        """Per-point loss: the point's own-cluster singleton loss plus a
        small deterministic jitter so rankings inside a cluster are stable
        but not all tied."""
        self.call_counts["point_losses"] += 1
        rng = derive_rng(self._seed, "point-jitter")
        noise = rng.uniform(-self._jitter, self._jitter, size=self.n_points)
        out = []
        for pid in range(self.n_points):
            base = self.landscape.loss([int(self.assignment[pid])])
            out.append(max(base + float(noise[pid]), 1e-12))
        return out


class RewardCache:
    """Subset-level cache for one metric: concurrent reads, exclusive
    insertion, optional append-only JSONL persistence."""

    def __init__(self, path: Optional[str] = None):
        self._data: Dict[Tuple[int, str], float] = {}
        self._lock = threading.Lock()
        self._path = path
        if path is not None and os.path.exists(path):
            with open(path, "r", encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    rec = json.loads(line)
                    self._data[(int(rec["bitset_hex"], 16), rec["split"])] = float(rec["value"])

    def __len__(self) -> int:
        return len(self._data)

    def get(self, mask: int, split: str) -> Optional[float]:
        with self._lock:
            return self._data.get((mask, split))

    def items(self) -> List[Tuple[Tuple[int, str], float]]:
        with self._lock:
            return list(self._data.items())

    def put(self, mask: int, split: str, value: float) -> None:
        with self._lock:
            if (mask, split) in self._data:
                return
            self._data[(mask, split)] = value
            if self._path is not None:
                rec = {"bitset_hex": format(mask, "x"), "split": split, "value": value}
                with open(self._path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(rec) + "\n")


class RunningMoments:
    """Streaming mean/variance (Welford). Population variance; std reports
    0 until two samples have arrived."""

    def __init__(self):
        self.count = 0
        self._mean = None
        self._m2 = None

    def update(self, x) -> None:
        x = np.asarray(x, dtype=np.float64)
        if self._mean is None:
            self._mean = np.zeros_like(x)
            self._m2 = np.zeros_like(x)
        self.count += 1
        delta = x - self._mean
        self._mean = self._mean + delta / self.count
        self._m2 = self._m2 + delta * (x - self._mean)

    @property
    def mean(self):
        return np.zeros(()) if self._mean is None else self._mean

    @property
    def std(self):
        if self._m2 is None or self.count < 2:
            return np.zeros_like(self.mean)
        return np.sqrt(self._m2 / self.count)

    def normalize(self, x, clip: float = 5.0):
        """Standardize with current statistics; unit scale until two
        samples have been seen."""
        x = np.asarray(x, dtype=np.float64)
        if self._mean is None or self.count < 2:
            mean = self.mean if self._mean is not None else 0.0
            return np.clip(x - mean, -clip, clip)
        denom = np.where(self.std > 1e-8, self.std, 1.0)
        return np.clip((x - self._mean) / denom, -clip, clip)


class RndBonus:
    """Novelty bonus from a frozen random target net and a predictor
    trained online to imitate it; poorly predicted (novel) states earn a
    larger bonus. One predictor gradient step per presented state."""

    def __init__(self, in_width: int, beta: float = 0.1, hidden: int = 128,
                 out_width: int = 64, lr: float = 1e-4, seed: int = 0):
        if beta < 0.0:
            raise ValueError("beta must be >= 0")
        widths = [in_width, hidden, hidden, hidden, out_width]
        self.beta = beta
        self.target = DenseNet(widths, seed=derive_seed(seed, "rnd", "target"))
        self.predictor = DenseNet(widths, seed=derive_seed(seed, "rnd", "predictor"))
        self.opt = Adam(self.predictor.parameters(), lr=lr)
        self.state_moments = RunningMoments()
        self.reward_moments = RunningMoments()

    @property
    def in_width(self) -> int:
        return self.target.in_width

    def target_param_hash(self) -> str:
        digest = hashlib.sha256()
        for p in self.target.parameters():
            digest.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
        return digest.hexdigest()

    def intrinsic(self, encoding) -> float:
        """Bonus for one state visit: normalized prediction error on the
        encoding. Updates normalizers and takes one predictor step."""
        vec = encoding.vector if isinstance(encoding, StateEncoding) else encoding
        x = np.asarray(vec, dtype=np.float64).ravel()
        if x.size != self.in_width:
            raise ValueError(f"encoding width {x.size} != bonus width {self.in_width}")
        xn = self.state_moments.normalize(x)
        self.state_moments.update(x)
        t_out = self.target.forward(xn)
        p_out = self.predictor.forward(xn)
        raw = float(np.mean((t_out - p_out) ** 2))
        self.reward_moments.update(raw)
        denom = float(self.reward_moments.std)
        scaled = raw / (denom if denom > 1e-8 else 1.0)
        _, d_pred = mse_loss(p_out, t_out)
        grads = self.predictor.backward(d_pred)
        clip_global_norm(grads, 10.0)
        self.opt.step(self.predictor.parameters(), grads)
        return scaled


@dataclass
class RewardFunction:
    """Transition rewards over cluster subsets for one metric kind.

    loss kinds score a subset as f(oracle loss of its subsampled point
    union) and reward the score delta; the acc kind rewards the raw
    accuracy delta. Subset metrics are cached so each distinct subset
    hits the oracle at most once.
    """

    oracle: RewardOracle
    model: ClusterModel
    kind: str = "loss_val"
    cache: RewardCache = field(default_factory=RewardCache)

    def __post_init__(self):
        if self.kind not in REWARD_KINDS:
            raise ValueError(f"kind must be one of {REWARD_KINDS}, got {self.kind!r}")
        needed = {"loss_val": "eval_val_loss", "loss_train": "eval_train_loss",
                  "acc": "eval_val_acc"}[self.kind]
        if needed not in self.oracle.capabilities:
            raise CapabilityError(f"oracle lacks capability {needed!r} for kind {self.kind!r}")

    @property
    def split(self) -> str:
        return "train" if self.kind == "loss_train" else "val"

    def subset_ids(self, mask: int) -> List[int]:
        """Sorted deduplicated union of subsample point ids over the
        clusters in the mask."""
        parts = [self.model.subsamples[c] for c in range(self.model.k) if mask >> c & 1]
        if not parts:
            return []
        return np.unique(np.concatenate(parts)).tolist()

    def subset_metric(self, mask: int) -> float:
        cached = self.cache.get(mask, self.split)
        if cached is not None:
            return cached
        ids = self.subset_ids(mask)
        if self.kind == "acc":
            value = self.oracle.eval_acc(ids, split="val")
        else:
            value = self.oracle.eval_loss(ids, split=self.split)
        self.cache.put(mask, self.split, value)
        return value

    def subset_score(self, mask: int) -> float:
        """Absolute score of a subset: f(loss) for loss kinds, accuracy
        for the acc kind. Rewards telescope to differences of this."""
        metric = self.subset_metric(mask)
        return metric if self.kind == "acc" else loss_to_score(metric)

    def reward(self, state: SubsetState, action: int) -> float:
        if action in state:
            raise ValueError(f"cluster {action} already selected")
        next_mask = state.mask | (1 << action)
        return self.subset_score(next_mask) - self.subset_score(state.mask)
