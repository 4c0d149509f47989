"""Experience replay with support for model-generated transitions."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .env import StateEncoding

DEFAULT_CAPACITY = 10_000
SYNTHETIC_LIFETIME = 4


@dataclass
class Transition:
    state: StateEncoding
    action: int
    reward: float
    next_state: StateEncoding
    next_valid: np.ndarray
    terminal: bool
    is_synthetic: bool = False
    weight: float = 1.0
    born_episode: int = 0
    ensemble_std: Optional[float] = None
    sigma_cap: Optional[float] = None


class ReplayBuffer:
    """FIFO ring of transitions. Synthetic entries additionally expire
    once they have aged past their lifetime in episodes."""

    def __init__(self, capacity: int = DEFAULT_CAPACITY):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items: List[Transition] = []

    def __len__(self) -> int:
        return len(self._items)

    def push(self, transition: Transition) -> None:
        self._items.append(transition)
        if len(self._items) > self.capacity:
            del self._items[0]

    def sample(self, n: int, rng: np.random.Generator) -> List[Transition]:
        if not self._items:
            raise ValueError("cannot sample from an empty buffer")
        replace = n > len(self._items)
        idx = rng.choice(len(self._items), size=n, replace=replace)
        return [self._items[i] for i in idx]

    def evict_expired(self, current_episode: int,
                      lifetime: int = SYNTHETIC_LIFETIME) -> int:
        """Drop synthetic transitions older than `lifetime` episodes.
        Returns the number evicted."""
        before = len(self._items)
        self._items = [
            t for t in self._items
            if not (t.is_synthetic and current_episode - t.born_episode > lifetime)
        ]
        return before - len(self._items)

    def snapshot(self) -> List[Transition]:
        """Current contents, oldest first (for invariant checks)."""
        return list(self._items)
