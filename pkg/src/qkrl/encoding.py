"""Unsigned fixed-point encodings of vector states, actions and rewards.

A dimension with range ``[lo, hi]`` and ``k`` bits holds the ``2**k`` evenly
spaced grid values ``lo + j * (hi - lo) / (2**k - 1)``. Vectors with several
dimensions concatenate the per-dimension indices little-endian: dimension ``j``
occupies bits ``[j*k, (j+1)*k)`` of the register index, and bit ``q`` of that
slice is qubit ``q`` of the dimension.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, RangeError

_RANGE_TOL = 1e-9


def _as_bounds(bounds, dims: int) -> tuple[tuple[float, float], ...]:
    arr = np.asarray(bounds, dtype=float)
    if arr.ndim == 1:
        if arr.shape != (2,):
            raise ConfigError(f"a range must be [lo, hi], got {bounds!r}")
        arr = np.tile(arr, (dims, 1))
    if arr.shape != (dims, 2):
        raise ConfigError(f"expected {dims} ranges, got shape {arr.shape}")
    if np.any(arr[:, 1] <= arr[:, 0]) or not np.all(np.isfinite(arr)):
        raise ConfigError(f"every range needs finite lo < hi, got {arr.tolist()}")
    return tuple((float(lo), float(hi)) for lo, hi in arr)


@dataclass(frozen=True)
class FixedPointGrid:
    """Grid of ``2**(dims*bits)`` vectors addressed by a single register index."""

    bounds: tuple[tuple[float, float], ...]
    bits: int

    def __post_init__(self):
        if self.bits < 1:
            raise ConfigError("bits per dimension must be at least 1")
        object.__setattr__(self, "bounds", _as_bounds(self.bounds, len(self.bounds)) if self.bounds else ())

    @classmethod
    def build(cls, dims: int, bits: int, bounds) -> "FixedPointGrid":
        if dims < 0:
            raise ConfigError("dimension count must be non-negative")
        return cls(_as_bounds(bounds, dims) if dims else (), bits)

    @property
    def dims(self) -> int:
        return len(self.bounds)

    @property
    def n_qubits(self) -> int:
        return self.dims * self.bits

    @property
    def size(self) -> int:
        return 1 << self.n_qubits

    @property
    def lo(self) -> np.ndarray:
        return np.array([b[0] for b in self.bounds])

    @property
    def hi(self) -> np.ndarray:
        return np.array([b[1] for b in self.bounds])

    @property
    def spacing(self) -> np.ndarray:
        """Distance between neighbouring grid values in each dimension."""
        return (self.hi - self.lo) / ((1 << self.bits) - 1)

    @property
    def precision(self) -> np.ndarray:
        """Per-dimension precision ``2**-k * (hi - lo)``."""
        return (self.hi - self.lo) / float(1 << self.bits)

    def dim_indices(self, vector) -> np.ndarray:
        v = np.asarray(vector, dtype=float).reshape(-1)
        if v.shape[0] != self.dims:
            raise RangeError(f"expected a vector of length {self.dims}, got {v.shape[0]}")
        if self.dims == 0:
            return np.zeros(0, dtype=np.int64)
        lo, hi = self.lo, self.hi
        tol = _RANGE_TOL * (hi - lo)
        if np.any(v < lo - tol) or np.any(v > hi + tol) or not np.all(np.isfinite(v)):
            raise RangeError(f"component out of range: {v.tolist()} not within {list(self.bounds)}")
        # round half up
        idx = np.floor((v - lo) / self.spacing + 0.5).astype(np.int64)
        return np.clip(idx, 0, (1 << self.bits) - 1)

    def encode(self, vector) -> int:
        idx = self.dim_indices(vector)
        out = 0
        for j, i in enumerate(idx):
            out |= int(i) << (j * self.bits)
        return out

    def decode(self, index: int) -> np.ndarray:
        index = int(index)
        if index < 0 or index >= self.size:
            raise RangeError(f"index {index} outside [0, {self.size})")
        mask = (1 << self.bits) - 1
        idx = np.array([(index >> (j * self.bits)) & mask for j in range(self.dims)], dtype=float)
        return self.lo + idx * self.spacing if self.dims else np.zeros(0)

    def points(self) -> np.ndarray:
        """All grid vectors, row ``i`` being ``decode(i)``; shape (size, dims)."""
        if self.dims == 0:
            return np.zeros((1, 0))
        ids = np.arange(self.size)
        mask = (1 << self.bits) - 1
        digits = np.stack([(ids >> (j * self.bits)) & mask for j in range(self.dims)], axis=1)
        return self.lo + digits * self.spacing

    def to_dict(self) -> dict:
        return {"bits": self.bits, "bounds": [list(b) for b in self.bounds]}


@dataclass(frozen=True)
class RegisterLayout:
    """Qubit layout for states, actions and rewards of a grid MDP."""

    state_dims: int
    action_dims: int
    bits_per_dim: int
    reward_bits: int = 4
    state_range: Sequence = (0.0, 1.0)
    action_range: Sequence = (0.0, 1.0)
    reward_max: float = 1.0
    states: FixedPointGrid = field(init=False, repr=False, compare=False)
    actions: FixedPointGrid = field(init=False, repr=False, compare=False)
    rewards: FixedPointGrid = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.reward_bits < 1:
            raise ConfigError("reward_bits must be at least 1")
        if not self.reward_max > 0:
            raise ConfigError("reward_max must be positive")
        states = FixedPointGrid.build(self.state_dims, self.bits_per_dim, self.state_range)
        actions = FixedPointGrid.build(self.action_dims, self.bits_per_dim, self.action_range)
        rewards = FixedPointGrid.build(1, self.reward_bits, (0.0, self.reward_max))
        object.__setattr__(self, "state_range", tuple(states.bounds))
        object.__setattr__(self, "action_range", tuple(actions.bounds))
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "actions", actions)
        object.__setattr__(self, "rewards", rewards)

    @property
    def n_state_qubits(self) -> int:
        return self.states.n_qubits

    @property
    def n_action_qubits(self) -> int:
        return self.actions.n_qubits

    @property
    def n_states(self) -> int:
        return self.states.size

    @property
    def n_actions(self) -> int:
        return self.actions.size

    @property
    def a_max(self) -> float:
        """Largest l1 norm of any action grid vector."""
        pts = self.actions.points()
        return float(np.abs(pts).sum(axis=1).max()) if pts.size else 0.0

    def to_dict(self) -> dict:
        return {
            "state_dims": self.state_dims,
            "action_dims": self.action_dims,
            "bits_per_dim": self.bits_per_dim,
            "reward_bits": self.reward_bits,
            "state_range": [list(b) for b in self.state_range],
            "action_range": [list(b) for b in self.action_range],
            "reward_max": self.reward_max,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegisterLayout":
        try:
            return cls(
                state_dims=int(d["state_dims"]),
                action_dims=int(d["action_dims"]),
                bits_per_dim=int(d["bits_per_dim"]),
                reward_bits=int(d.get("reward_bits", 4)),
                state_range=d.get("state_range", (0.0, 1.0)),
                action_range=d.get("action_range", (0.0, 1.0)),
                reward_max=float(d.get("reward_max", 1.0)),
            )
        except KeyError as exc:
            raise ConfigError(f"layout is missing field {exc.args[0]!r}") from None


def _grid(layout: RegisterLayout, part: str) -> FixedPointGrid:
    try:
        return {"state": layout.states, "action": layout.actions, "reward": layout.rewards}[part]
    except KeyError:
        raise ConfigError(f"unknown register part {part!r}") from None


def encode(vector, layout: RegisterLayout, part: str = "state") -> int:
    """Index of the grid point nearest to ``vector`` (ties round up)."""
    return _grid(layout, part).encode(vector)


def decode(index: int, layout: RegisterLayout, part: str = "state") -> np.ndarray:
    """Grid vector stored at ``index``."""
    return _grid(layout, part).decode(index)
