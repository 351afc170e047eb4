"""Action sampling strategies: QIS accept-reject, epsilon-greedy, epsilon-decay.

QIS-RE is not a separate sampler here; it is QIS with :func:`reevaluate_bounds`
called only every ``reeval_every`` iterations by the driver.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .approx import (FeatureSpec, QApprox, action_quadratic, argmin_actions, feature_matrix,
                     normalize_actions, quadratic_values)
from .mdp import ContractError, SampleRecord

MAX_PROPOSALS = 10**6
_CHUNK = 16

SAMPLERS = ("qis", "qis-re", "eps-greedy", "eps-decay")


class ProposalBudgetExceeded(RuntimeError):
    pass


@dataclass(frozen=True)
class QisBounds:
    stage: int
    q_min: float
    q_max: float

    def __post_init__(self):
        if not self.q_min <= self.q_max:
            raise ContractError(f"q_min {self.q_min} > q_max {self.q_max} at stage {self.stage}")

    def extended(self, value: float) -> "QisBounds":
        if value > self.q_max:
            return replace(self, q_max=value)
        if value < self.q_min:
            return replace(self, q_min=value)
        return self


def qratio(q_value: float, bounds: QisBounds) -> float:
    """Acceptance probability ``(q_max - q) / (q_max - q_min)``; 1 when the bounds coincide."""
    span = bounds.q_max - bounds.q_min
    if span <= 0.0:
        return 1.0
    return (bounds.q_max - q_value) / span


def propose_uniform_shares(G: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw from the (G-1)-simplex via normalized unit exponentials."""
    if G < 2:
        raise ContractError("need G >= 2")
    e = rng.standard_exponential(G)
    return e / e.sum()


def _uniform_shares_batch(G: int, n: int, rng: np.random.Generator) -> np.ndarray:
    e = rng.standard_exponential((n, G))
    return e / e.sum(axis=1, keepdims=True)


def accept_reject(propose: Callable[[np.random.Generator, int], np.ndarray],
                  value: Callable[[np.ndarray], np.ndarray],
                  bounds: QisBounds, rng: np.random.Generator,
                  max_proposals: int = MAX_PROPOSALS):
    """Draw proposals until one passes ``qratio > U``.

    Bounds are widened by every proposal, accepted or not. Proposals and
    uniforms are drawn in small chunks; unused draws of the last chunk are
    discarded.

    Returns ``(proposal, value, bounds, n_proposals)``.
    """
    tried = 0
    q_min, q_max = bounds.q_min, bounds.q_max
    while tried < max_proposals:
        props = propose(rng, _CHUNK)
        vals = value(props)
        us = rng.random(_CHUNK)
        for x, v, u in zip(props, vals.tolist(), us.tolist()):
            tried += 1
            if v > q_max:
                q_max = v
            if v < q_min:
                q_min = v
            span = q_max - q_min
            ratio = 1.0 if span <= 0.0 else (q_max - v) / span
            if ratio > u:
                return x, v, replace(bounds, q_min=q_min, q_max=q_max), tried
            if tried >= max_proposals:
                break
    raise ProposalBudgetExceeded(
        f"stage {bounds.stage}: no proposal accepted after {max_proposals} tries "
        f"(bounds {q_min:.6g}..{q_max:.6g}); the approximation may have collapsed")


def qis_sample_action(q: QApprox, state, bounds: QisBounds, rng: np.random.Generator,
                      max_proposals: int = MAX_PROPOSALS):
    """QIS accept-reject draw of one action for ``state``.

    Returns ``(action, bounds, proposals_tried)``.
    """
    G = q.spec.n_actions
    c, g, H = action_quadratic(q, np.asarray(state, dtype=float)[None, :])

    def value(props):
        return quadratic_values(c, g, H, normalize_actions(q.spec, props))

    action, _, new_bounds, tried = accept_reject(
        lambda r, n: _uniform_shares_batch(G, n, r), value, bounds, rng, max_proposals)
    return action, new_bounds, tried


class SampleArchive:
    """Append-only per-stage store of every sampled state-action pair."""

    def __init__(self, horizon: int):
        self.horizon = horizon
        self._records: dict[int, list[SampleRecord]] = {t: [] for t in range(1, horizon + 1)}
        # growable buffers so reevaluation does not restack Python objects
        self._states: dict[int, np.ndarray] = {}
        self._actions: dict[int, np.ndarray] = {}
        self._phi: dict[int, tuple] = {}

    def append(self, record: SampleRecord) -> None:
        t = record.stage
        if not 1 <= t <= self.horizon:
            raise ContractError(f"stage {t} outside 1..{self.horizon}")
        recs = self._records[t]
        n = len(recs)
        if t not in self._states or n == len(self._states[t]):
            cap = max(64, 2 * n)
            s_buf = np.empty((cap, len(record.state)))
            a_buf = np.empty((cap, len(record.action)))
            if n:
                s_buf[:n], a_buf[:n] = self._states[t][:n], self._actions[t][:n]
            self._states[t], self._actions[t] = s_buf, a_buf
        self._states[t][n] = record.state
        self._actions[t][n] = record.action
        recs.append(record)

    def feature_rows(self, stage: int, spec: FeatureSpec) -> np.ndarray:
        """Feature matrix of the archived pairs, extended incrementally."""
        states, actions = self.arrays(stage)
        n = len(states)
        spec0, buf, done = self._phi.get(stage, (None, None, 0))
        if spec0 is not spec:
            buf, done = np.empty((max(64, n), spec.n_features)), 0
        if len(buf) < n:
            grown = np.empty((2 * n, spec.n_features))
            grown[:done] = buf[:done]
            buf = grown
        if done < n:
            buf[done:n] = feature_matrix(spec, states[done:], actions[done:])
        self._phi[stage] = (spec, buf, n)
        return buf[:n]

    def records(self, stage: int) -> tuple[SampleRecord, ...]:
        return tuple(self._records[stage])

    def __len__(self) -> int:
        return sum(len(v) for v in self._records.values())

    def count(self, stage: int) -> int:
        return len(self._records[stage])

    def arrays(self, stage: int) -> tuple[np.ndarray, np.ndarray]:
        """Read-only views of the archived states and actions of ``stage``."""
        n = self.count(stage)
        if n == 0:
            return np.empty((0, 0)), np.empty((0, 0))
        s, a = self._states[stage][:n], self._actions[stage][:n]
        s.flags.writeable = False
        a.flags.writeable = False
        return s, a


def reevaluate_bounds(q: QApprox, archive: SampleArchive, stage: int,
                      prior: QisBounds | None = None) -> QisBounds:
    """Min/max of the current approximation over every archived sample of ``stage``."""
    if archive.count(stage) == 0:
        if prior is None:
            raise ContractError(f"no samples archived for stage {stage} and no prior bounds")
        return prior
    vals = archive.feature_rows(stage, q.spec) @ q.theta
    return QisBounds(stage, float(vals.min()), float(vals.max()))


@dataclass(frozen=True)
class EpsilonSchedule:
    epsilon_initial: float
    epsilon_final: float
    total_iterations: int

    def __post_init__(self):
        if not 0.0 <= self.epsilon_initial <= 1.0:
            raise ContractError("epsilon_initial must lie in [0, 1]")
        if not 0.0 < self.epsilon_final <= self.epsilon_initial:
            raise ContractError("epsilon_final must lie in (0, epsilon_initial]")
        if self.total_iterations < 1:
            raise ContractError("total_iterations must be >= 1")

    @property
    def delta(self) -> float:
        return (self.epsilon_final / self.epsilon_initial) ** (1.0 / self.total_iterations)


def epsilon_at(schedule: EpsilonSchedule, k: int) -> float:
    """Closed-form decayed epsilon after ``k`` of ``K`` iterations."""
    K = schedule.total_iterations
    if not 0 <= k <= K:
        raise ContractError(f"k must lie in 0..{K}, got {k}")
    return schedule.epsilon_initial * schedule.delta ** k


def epsilon_greedy_actions(q: QApprox, states, epsilon: float, rng: np.random.Generator,
                           resolution: float = 0.05, refine_steps: int = 20):
    """Epsilon-greedy actions for a batch of states.

    Returns ``(actions, explored)`` where ``explored`` flags the uniform draws.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ContractError(f"epsilon must lie in [0, 1], got {epsilon}")
    s = np.atleast_2d(np.asarray(states, dtype=float))
    G = q.spec.n_actions
    explored = rng.random(len(s)) < epsilon
    actions = np.empty((len(s), G))
    for i in np.flatnonzero(explored):
        actions[i] = propose_uniform_shares(G, rng)
    exploit = ~explored
    if exploit.any():
        actions[exploit], _ = argmin_actions(q, s[exploit], resolution, refine_steps)
    return actions, explored


def epsilon_greedy_action(q: QApprox, state, epsilon: float, rng: np.random.Generator,
                          resolution: float = 0.05, refine_steps: int = 20) -> np.ndarray:
    actions, _ = epsilon_greedy_actions(q, np.asarray(state, dtype=float)[None, :],
                                        epsilon, rng, resolution, refine_steps)
    return actions[0]
