"""Q-learning driver: forward sampling pass, backward TD pass, bound upkeep."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .approx import (TD_COMBINE, FeatureSpec, QApprox, argmin_action, argmin_actions,
                     td_batch_update)
from .mdp import ContractError, Problem, SampleRecord
from .samplers import (SAMPLERS, EpsilonSchedule, ProposalBudgetExceeded, QisBounds,
                       SampleArchive, epsilon_at, epsilon_greedy_actions,
                       qis_sample_action, reevaluate_bounds)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RunConfig:
    sampler: str = "qis"
    iterations: int = 900
    samples: int = 10
    reeval_every: int = 20
    lam: float = 0.1
    gamma: float = 1.0
    seed: int = 0
    epsilon: float = 0.5
    epsilon_initial: float = 0.7
    epsilon_final: float = 0.2
    resolution: float = 0.05
    refine_steps: int = 20
    td_combine: str = "projection"
    average_from: float = 0.5
    debug_bounds: bool = False

    def __post_init__(self):
        if self.sampler not in SAMPLERS:
            raise ContractError(f"unknown sampler '{self.sampler}', expected one of {SAMPLERS}")
        if self.iterations < 1 or self.samples < 1 or self.reeval_every < 1:
            raise ContractError("iterations, samples and reeval_every must be >= 1")
        if not 0.0 < self.lam <= 1.0:
            raise ContractError("lambda must lie in (0, 1]")
        if not 0.0 <= self.gamma <= 1.0:
            raise ContractError("gamma must lie in [0, 1]")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ContractError("epsilon must lie in [0, 1]")
        if self.td_combine not in TD_COMBINE:
            raise ContractError(f"td_combine must be one of {TD_COMBINE}")
        if not 0.0 <= self.average_from < 1.0:
            raise ContractError("average_from must lie in [0, 1)")
        if self.sampler == "eps-decay":
            EpsilonSchedule(self.epsilon_initial, self.epsilon_final, self.iterations)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunReport:
    coefficients: dict[int, np.ndarray]
    stage1_value: np.ndarray  # min over actions of q_1(s_0, .) after each iteration
    q_min1: np.ndarray
    q_max1: np.ndarray
    proposals: np.ndarray  # cumulative QIS proposals after each iteration
    timing: dict[str, float] = field(default_factory=dict)

    @property
    def stage1_normalized(self) -> np.ndarray:
        v = self.stage1_value
        span = v.max() - v.min()
        if span <= 0:
            return np.zeros_like(v)
        return (v - v.min()) / span

    def deterministic_equal(self, other: "RunReport") -> bool:
        """Equality of everything except wall-clock timings."""
        same_coef = self.coefficients.keys() == other.coefficients.keys() and all(
            np.array_equal(self.coefficients[t], other.coefficients[t]) for t in self.coefficients)
        return same_coef and all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("stage1_value", "q_min1", "q_max1", "proposals"))


@dataclass
class RunResult:
    approximations: dict[int, QApprox]  # iterate averages; the learned policy uses these
    last_iterate: dict[int, QApprox]
    archive: SampleArchive
    report: RunReport
    config: RunConfig


class _Clock:
    def __init__(self):
        self.totals = {"sampling": 0.0, "evaluation": 0.0, "other": 0.0}
        self._start = time.perf_counter()

    def charge(self, phase: str, t0: float) -> None:
        self.totals[phase] += time.perf_counter() - t0

    def finish(self) -> dict[str, float]:
        total = time.perf_counter() - self._start
        self.totals["other"] = max(0.0, total - self.totals["sampling"] - self.totals["evaluation"])
        self.totals["total"] = total
        return dict(self.totals)


def run(problem: Problem, config: RunConfig,
        on_iteration: Callable[[int, dict[int, QApprox]], None] | None = None) -> RunResult:
    """Train per-stage approximations with the configured sampler.

    The returned approximations average the coefficient iterates of the last
    ``1 - average_from`` share of iterations; ``last_iterate`` keeps the raw ones.
    """
    T = problem.horizon
    if T < 1:
        raise ContractError("problem horizon must be >= 1")
    M, K = config.samples, config.iterations
    rng = np.random.default_rng(config.seed)
    spec = FeatureSpec(*problem.feature_bounds(), n_actions=problem.n_actions)
    q = {t: QApprox.zeros(t, spec) for t in range(1, T + 1)}
    bounds = {t: QisBounds(t, 0.0, 1.0) for t in range(1, T + 1)}
    archive = SampleArchive(T)
    schedule = (EpsilonSchedule(config.epsilon_initial, config.epsilon_final, K)
                if config.sampler == "eps-decay" else None)
    qis = config.sampler in ("qis", "qis-re")
    s0 = np.asarray(problem.initial_state(), dtype=float)
    argmin_kw = dict(resolution=config.resolution, refine_steps=config.refine_steps)

    stage1_value = np.empty(K)
    q_min1, q_max1, proposals = np.empty(K), np.empty(K), np.empty(K, dtype=np.int64)
    n_prop = 0
    avg_start = int(config.average_from * K)
    theta_sum = {t: np.zeros(spec.n_features) for t in q}
    clock = _Clock()

    for k in range(1, K + 1):
        states = np.empty((T + 1, M, problem.state_dim))
        actions = np.empty((T, M, problem.n_actions))
        rewards = np.empty((T, M))
        # forward pass
        for t in range(1, T + 1):
            if t == 1:
                states[0] = s0
            else:
                for m in range(M):
                    draw = problem.sample_exogenous(t, rng)
                    states[t - 1, m] = problem.transition(t - 1, states[t - 2, m],
                                                          actions[t - 2, m], draw)
            t0 = time.perf_counter()
            if qis:
                for m in range(M):
                    try:
                        a, bounds[t], tried = qis_sample_action(q[t], states[t - 1, m], bounds[t], rng)
                    except ProposalBudgetExceeded as exc:
                        raise ProposalBudgetExceeded(f"iteration {k}: {exc}") from exc
                    actions[t - 1, m] = a
                    n_prop += tried
            else:
                eps = config.epsilon if schedule is None else epsilon_at(schedule, k)
                actions[t - 1], _ = epsilon_greedy_actions(q[t], states[t - 1], eps, rng, **argmin_kw)
            clock.charge("sampling", t0)
            rewards[t - 1] = problem.stage_costs(t, states[t - 1], actions[t - 1])
            for m in range(M):
                archive.append(SampleRecord(t, states[t - 1, m].copy(), actions[t - 1, m].copy(),
                                            float(rewards[t - 1, m]), k))

        # backward pass
        for t in range(T, 0, -1):
            targets = rewards[t - 1].copy()
            if t < T:
                _, nxt = argmin_actions(q[t + 1], states[t], **argmin_kw)
                targets += config.gamma * nxt
            if not np.all(np.isfinite(targets)):
                raise ContractError(f"non-finite TD target at iteration {k}, stage {t}")
            q[t] = td_batch_update(q[t], zip(states[t - 1], actions[t - 1], targets), config.lam,
                                   config.td_combine)
            if qis and (config.sampler == "qis" or k % config.reeval_every == 0):
                t0 = time.perf_counter()
                bounds[t] = reevaluate_bounds(q[t], archive, t, bounds[t])
                clock.charge("evaluation", t0)
            if config.debug_bounds and config.sampler == "qis":
                _check_bracket(q[t], archive, t, bounds[t])

        if k > avg_start:
            for t in q:
                theta_sum[t] += q[t].theta
        _, stage1_value[k - 1] = argmin_action(q[1], s0, **argmin_kw)
        q_min1[k - 1], q_max1[k - 1] = bounds[1].q_min, bounds[1].q_max
        proposals[k - 1] = n_prop
        if on_iteration is not None:
            on_iteration(k, q)

    averaged = {t: q[t].with_theta(theta_sum[t] / (K - avg_start)) for t in q}
    report = RunReport({t: averaged[t].theta.copy() for t in q}, stage1_value, q_min1, q_max1,
                       proposals, clock.finish())
    log.debug("run finished: %s", report.timing)
    return RunResult(averaged, q, archive, report, config)


def _check_bracket(q: QApprox, archive: SampleArchive, t: int, bounds: QisBounds) -> None:
    from .approx import evaluate_many
    states, actions = archive.arrays(t)
    vals = evaluate_many(q, states, actions)
    tol = 1e-9 * max(1.0, float(np.abs(vals).max()))
    if vals.min() < bounds.q_min - tol or vals.max() > bounds.q_max + tol:
        raise AssertionError(f"stage {t}: bounds {bounds} do not bracket archived values")


def extract_policy(approximations: dict[int, QApprox], resolution: float = 0.05,
                   refine_steps: int = 20) -> Callable[[int, np.ndarray], np.ndarray]:
    """Greedy policy on the learned approximations."""
    def policy(t: int, state) -> np.ndarray:
        a, _ = argmin_action(approximations[t], state, resolution, refine_steps)
        return a
    return policy
