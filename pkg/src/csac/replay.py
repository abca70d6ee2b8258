"""FIFO replay storage of multi-reward transitions with uniform sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class TransitionRecord:
    state: np.ndarray
    action: np.ndarray
    rewards: np.ndarray
    next_state: np.ndarray
    done: bool
    exits: np.ndarray | None = None  # per-subtask completion flags; defaults to all False


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray  # (M, N)
    next_states: np.ndarray
    dones: np.ndarray  # (M,)
    exits: np.ndarray  # (M, N)
    indices: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)


class ReplayBuffer:
    """Ring buffer over preallocated-on-demand column arrays.

    Storage grows geometrically up to ``capacity`` so a 1e6-capacity buffer
    costs memory only for what is actually stored.
    """

    _FIELDS = ("states", "actions", "rewards", "next_states", "dones", "exits")

    def __init__(self, capacity: int, state_dim: int, action_dim: int, reward_dim: int):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.reward_dim = reward_dim
        self.size = 0
        self.ptr = 0
        self._alloc(min(self.capacity, 1024))

    def _alloc(self, rows: int) -> None:
        shapes = {"states": (self.state_dim,), "actions": (self.action_dim,),
                  "rewards": (self.reward_dim,), "next_states": (self.state_dim,),
                  "dones": (), "exits": (self.reward_dim,)}
        dtypes = {"dones": bool, "exits": bool}
        for name in self._FIELDS:
            new = np.zeros((rows,) + shapes[name], dtype=dtypes.get(name, np.float64))
            old = getattr(self, name, None)
            if old is not None:
                new[: self.size] = old[: self.size]
            setattr(self, name, new)

    def __len__(self) -> int:
        return self.size

    def push(self, record: TransitionRecord) -> None:
        rewards = np.asarray(record.rewards, dtype=np.float64).reshape(-1)
        if rewards.shape[0] != self.reward_dim:
            raise ValueError(f"reward vector has {rewards.shape[0]} entries, "
                             f"buffer expects {self.reward_dim}")
        if self.size < self.capacity and self.ptr >= len(self.states):
            self._alloc(min(self.capacity, 2 * len(self.states)))
        i = self.ptr
        self.states[i] = record.state
        self.actions[i] = record.action
        self.rewards[i] = rewards
        self.next_states[i] = record.next_state
        self.dones[i] = bool(record.done)
        self.exits[i] = False if record.exits is None else record.exits
        self.ptr = (self.ptr + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def record(self, i: int) -> TransitionRecord:
        """The i-th oldest stored record (copies)."""
        if not 0 <= i < self.size:
            raise IndexError(i)
        j = (self.ptr - self.size + i) % self.capacity if self.size == self.capacity else i
        return TransitionRecord(self.states[j].copy(), self.actions[j].copy(),
                                self.rewards[j].copy(), self.next_states[j].copy(),
                                bool(self.dones[j]), self.exits[j].copy())

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch | None:
        """Uniform draw with replacement; ``None`` while fewer than ``batch_size`` are stored."""
        if self.size < batch_size:
            return None
        idx = rng.integers(0, self.size, size=batch_size)
        return Batch(self.states[idx], self.actions[idx], self.rewards[idx],
                     self.next_states[idx], self.dones[idx], self.exits[idx], idx)

    # -- snapshots -------------------------------------------------------
    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {f"{prefix}{name}": getattr(self, name)[: self.size].copy()
               for name in self._FIELDS}
        out[f"{prefix}meta"] = np.array([self.capacity, self.size, self.ptr, self.state_dim,
                                         self.action_dim, self.reward_dim], dtype=np.int64)
        return out

    @classmethod
    def from_state_dict(cls, data, prefix: str = "") -> "ReplayBuffer":
        capacity, size, ptr, sdim, adim, rdim = (int(v) for v in data[f"{prefix}meta"])
        buf = cls(capacity, sdim, adim, rdim)
        buf._alloc(max(size, min(capacity, 1024)))
        for name in cls._FIELDS:
            getattr(buf, name)[:size] = data[f"{prefix}{name}"]
        buf.size, buf.ptr = size, ptr
        return buf

    def save(self, path) -> None:
        np.savez(path, **self.state_dict())

    @classmethod
    def load(cls, path) -> "ReplayBuffer":
        with np.load(path) as data:
            return cls.from_state_dict(data)
