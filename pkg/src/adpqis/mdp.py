"""Finite-horizon MDP contract shared by the solvers.

States are flat float vectors laid out as ``[capacities..., gas, carbon]``;
actions are shares on the probability simplex. Problems implement
:class:`Problem` and must be read-only after construction so samples can be
evaluated from several workers at once.
"""
from __future__ import annotations

import abc
from dataclasses import dataclass

import numpy as np

SHARE_TOL = 1e-9


class ContractError(ValueError):
    """Raised when an input violates a documented pre-condition."""


@dataclass(frozen=True)
class ExogenousDraw:
    gas_price: float
    carbon_price: float

    def as_array(self) -> np.ndarray:
        return np.array([self.gas_price, self.carbon_price], dtype=float)


@dataclass(frozen=True)
class SampleRecord:
    stage: int
    state: np.ndarray
    action: np.ndarray
    reward: float
    iteration: int

    def __post_init__(self):
        if self.stage < 1:
            raise ContractError(f"stage must be >= 1, got {self.stage}")
        if self.iteration < 1:
            raise ContractError(f"iteration must be >= 1, got {self.iteration}")
        if not np.isfinite(self.reward):
            raise ContractError(f"non-finite reward at stage {self.stage}")


def make_state(capacity, draw: ExogenousDraw, n_capacity: int | None = None) -> np.ndarray:
    """Concatenate a capacity vector with the two price components."""
    cap = np.asarray(capacity, dtype=float)
    if cap.ndim != 1:
        raise ContractError(f"capacity must be 1-D, got shape {cap.shape}")
    if n_capacity is not None and cap.shape[0] != n_capacity:
        raise ContractError(f"expected {n_capacity} capacities, got {cap.shape[0]}")
    state = np.concatenate([cap, draw.as_array()])
    if not np.all(np.isfinite(state)):
        raise ContractError("state entries must be finite")
    return state


def split_state(state: np.ndarray) -> tuple[np.ndarray, ExogenousDraw]:
    state = np.asarray(state, dtype=float)
    return state[:-2], ExogenousDraw(float(state[-2]), float(state[-1]))


def check_shares(action, n: int | None = None) -> np.ndarray:
    a = np.asarray(action, dtype=float)
    if a.ndim != 1 or (n is not None and a.shape[0] != n):
        raise ContractError(f"action must be a length-{n} vector, got shape {a.shape}")
    if np.any(a < -SHARE_TOL) or np.any(a > 1 + SHARE_TOL) or abs(a.sum() - 1.0) > SHARE_TOL:
        raise ContractError(f"action {a} is not on the simplex")
    return a


class Problem(abc.ABC):
    """Finite-horizon problem with deterministic transitions and exogenous draws."""

    horizon: int
    n_actions: int
    state_dim: int

    @abc.abstractmethod
    def initial_state(self) -> np.ndarray:
        ...

    @abc.abstractmethod
    def sample_exogenous(self, t: int, rng: np.random.Generator) -> ExogenousDraw:
        """Draw the prices revealed at the start of stage ``t``."""

    @abc.abstractmethod
    def transition(self, t: int, state: np.ndarray, action: np.ndarray,
                   draw: ExogenousDraw) -> np.ndarray:
        """State at stage ``t + 1`` after acting at stage ``t`` and observing ``draw``."""

    @abc.abstractmethod
    def stage_cost(self, t: int, state: np.ndarray, action: np.ndarray) -> float:
        ...

    def stage_costs(self, t: int, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """Row-wise :meth:`stage_cost`; override when a vectorized form exists."""
        return np.array([self.stage_cost(t, s, a) for s, a in zip(states, actions)])

    @abc.abstractmethod
    def feature_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-input normalization bounds for ``[state..., action...]``."""
