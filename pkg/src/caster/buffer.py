"""Per-task FIFO replay storage."""

from __future__ import annotations

import numpy as np

from caster.agents import Batch


class ReplayBuffer:
    """Bounded ring buffer of transitions from a single task.

    ``role`` is ``"actor"`` or ``"explorer"``; it only labels the buffer.
    """

    def __init__(self, capacity: int, obs_dim: int, act_dim: int, task: int = 0, role: str = "actor"):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.task = task
        self.role = role
        self.obs = np.zeros((capacity, obs_dim))
        self.act = np.zeros((capacity, act_dim))
        self.rew = np.zeros(capacity)
        self.next_obs = np.zeros((capacity, obs_dim))
        self.done = np.zeros(capacity, dtype=bool)
        self._head = 0  # next write slot
        self.size = 0
        self.total_added = 0

    def __len__(self) -> int:
        return self.size

    def add(self, obs, act, rew, next_obs, done) -> None:
        """Append rows; the oldest rows are overwritten once full."""
        obs = np.atleast_2d(obs)
        n = obs.shape[0]
        if n > self.capacity:
            sl = slice(n - self.capacity, n)
            obs, act, rew, next_obs, done = (np.asarray(x)[sl] for x in (obs, act, rew, next_obs, done))
            n = self.capacity
        idx = (self._head + np.arange(n)) % self.capacity
        self.obs[idx] = obs
        self.act[idx] = np.atleast_2d(act)
        self.rew[idx] = rew
        self.next_obs[idx] = np.atleast_2d(next_obs)
        self.done[idx] = done
        self._head = (self._head + n) % self.capacity
        self.size = min(self.capacity, self.size + n)
        self.total_added += n

    def _ordered_index(self, recent: int | None = None) -> np.ndarray:
        """Valid slots from oldest to newest, optionally only the newest ``recent``."""
        start = (self._head - self.size) % self.capacity
        idx = (start + np.arange(self.size)) % self.capacity
        return idx if recent is None else idx[-recent:]

    def sample_index(self, n: int, rng: np.random.Generator, recent: int | None = None) -> np.ndarray:
        if self.size == 0:
            raise ValueError(f"cannot sample from empty {self.role} buffer of task {self.task}")
        pool = self._ordered_index(recent)
        return pool[rng.integers(0, len(pool), size=n)]

    def rows(self, idx: np.ndarray) -> Batch:
        return Batch(self.obs[idx], self.act[idx], self.rew[idx], self.next_obs[idx], self.done[idx],
                     np.full(len(idx), self.task))

    def sample(self, n: int, rng: np.random.Generator, recent: int | None = None) -> Batch:
        """Uniform draw with replacement."""
        return self.rows(self.sample_index(n, rng, recent))

    def all(self) -> Batch:
        return self.rows(self._ordered_index())


def stack_batches(batches: list[Batch]) -> Batch:
    """Stack equally sized flat batches along a new leading task axis."""
    return Batch(*(np.stack([getattr(b, name) for b in batches])
                   for name in ("obs", "act", "rew", "next_obs", "done", "task")))


def flatten_batch(batch: Batch) -> Batch:
    lead = int(np.prod(batch.rew.shape))
    return Batch(batch.obs.reshape(lead, -1), batch.act.reshape(lead, -1), batch.rew.reshape(lead),
                 batch.next_obs.reshape(lead, -1), batch.done.reshape(lead),
                 None if batch.task is None else batch.task.reshape(lead))
