"""Exact benchmark over a discretized scenario tree.

Backward induction over a shares lattice: every stage picks a lattice point,
so capacities are a function of the lattice-index history. Stages are
stagewise independent (each node's children are all nodes of the next stage),
so the expected continuation value depends only on that history.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .approx import lattice_divisions, simplex_lattice
from .gep import GepInstance, marginal_costs, operating_costs, stage_cost, transition
from .mdp import ContractError, ExogenousDraw

MEMORY_BUDGET = 50_000_000  # cost evaluations held per stage


class MemoryBudgetExceeded(RuntimeError):
    pass


@dataclass(frozen=True)
class TreeNode:
    gas: float
    carbon: float
    probability: float

    @property
    def draw(self) -> ExogenousDraw:
        return ExogenousDraw(self.gas, self.carbon)


@dataclass(frozen=True)
class ScenarioTree:
    stages: tuple[tuple[TreeNode, ...], ...]
    grid_step: float

    @property
    def horizon(self) -> int:
        return len(self.stages)

    def n_paths(self) -> int:
        return math.prod(len(s) for s in self.stages)


def _grid(lo: float, hi: float, n: int) -> list[float]:
    if lo == hi:
        return [lo]
    return [lo + (hi - lo) * i / n for i in range(n + 1)]


def build_tree(instance: GepInstance, grid_step: float = 0.1) -> ScenarioTree:
    """Uniform grid on each price range, normalized to [0, 1] in steps of ``grid_step``."""
    n = round(1.0 / grid_step)
    if n < 1 or abs(n * grid_step - 1.0) > 1e-9:
        raise ContractError(f"1/grid_step must be an integer, got {grid_step}")
    stages = []
    for b in instance.stage_bounds:
        pts = [(gp, cp) for gp in _grid(*b.gas, n) for cp in _grid(*b.carbon, n)]
        p = 1.0 / len(pts)
        stages.append(tuple(TreeNode(gp, cp, p) for gp, cp in pts))
    return ScenarioTree(tuple(stages), grid_step)


def _key(x: np.ndarray) -> tuple:
    return tuple(np.round(np.asarray(x, dtype=float), 6).tolist())


@dataclass
class OracleSolution:
    cost: float
    stage1_shares: np.ndarray
    shares_step: float
    grid_step: float
    # (t, rounded capacities, rounded prices) -> shares
    table: dict = field(repr=False, default_factory=dict)

    def policy(self, t: int, state) -> np.ndarray:
        s = np.asarray(state, dtype=float)
        try:
            return self.table[(t, _key(s[:-2]), _key(s[-2:]))]
        except KeyError:
            raise ContractError(f"state not reachable under the oracle lattice at stage {t}") from None


def backward_induction(instance: GepInstance, tree: ScenarioTree, shares_step: float = 0.05,
                       budget: int = MEMORY_BUDGET) -> OracleSolution:
    """Exact optimum over policies restricted to the shares lattice."""
    if tree.horizon != instance.horizon:
        raise ContractError("tree and instance horizons differ")
    T, G = instance.horizon, instance.n_tech
    n = lattice_divisions(shares_step)
    lat_int = simplex_lattice(G, n)
    lat = lat_int / n
    A = len(lat)
    largest = A ** (T - 1) * max(len(s) for s in tree.stages) * A
    if largest > budget:
        raise MemoryBudgetExceeded(
            f"{largest:.3g} cost evaluations at the last stage exceed the budget of {budget:.3g}; "
            "use a coarser shares_step or grid_step")

    # capacities before acting at stage t, one row per lattice-index history
    z0 = np.asarray(instance.initial_capacity, dtype=float)
    caps = [z0[None, :]]
    for t in range(1, T):
        z = caps[-1]
        req = np.maximum(0.0, instance.peak_demand(t) - z.sum(axis=1))
        nxt = z[:, None, :] + lat[None, :, :] * req[:, None, None]
        caps.append(nxt.reshape(-1, G))

    cap_costs = instance.capital_costs
    hours = instance.hours
    cont = np.zeros(A ** (T - 1) * A)  # expected value-to-go after stage T: zero
    best_idx_by_stage = []
    for t in range(T, 0, -1):
        z = caps[t - 1]
        req = np.maximum(0.0, instance.peak_demand(t) - z.sum(axis=1))
        D = instance.stage_demands(t)
        nodes = tree.stages[t - 1]
        ev = cont.reshape(len(z), A)
        values = np.empty((len(z), len(nodes)))
        choice = np.empty((len(z), len(nodes)), dtype=np.int64)
        y = lat[None, :, :] * req[:, None, None]  # (h, A, G)
        invest = y @ cap_costs
        after = z[:, None, :] + y
        for j, node in enumerate(nodes):
            mc = marginal_costs(instance, node.draw)
            op = operating_costs(after, mc, D, hours)
            total = invest + instance.epoch_weight * op + ev
            k = np.argmin(total, axis=1)
            choice[:, j] = k
            values[:, j] = total[np.arange(len(z)), k]
        best_idx_by_stage.append((t, choice))
        p = np.array([nd.probability for nd in nodes])
        cont = values @ p

    cost = float(cont[0])
    table = {}
    for t, choice in best_idx_by_stage:
        z = caps[t - 1]
        for h in range(len(z)):
            zk = _key(z[h])
            for j, node in enumerate(tree.stages[t - 1]):
                table[(t, zk, _key([node.gas, node.carbon]))] = lat[choice[h, j]]
    stage1 = table[(1, _key(z0), _key([tree.stages[0][0].gas, tree.stages[0][0].carbon]))]
    return OracleSolution(cost, stage1, shares_step, tree.grid_step, table)


Policy = Callable[[int, np.ndarray], np.ndarray]


def simulate_policy(instance: GepInstance, tree: ScenarioTree, policy: Policy,
                    initial_state=None) -> float:
    """Exact expected total cost of ``policy`` over every root-to-leaf path."""
    T = instance.horizon
    if initial_state is None:
        root = tree.stages[0][0]
        initial_state = np.concatenate([np.asarray(instance.initial_capacity, float),
                                        [root.gas, root.carbon]])

    def value(t: int, state: np.ndarray) -> float:
        a = np.asarray(policy(t, state), dtype=float)
        cost = stage_cost(instance, t, state, a)
        if t == T:
            return cost
        terms = [nd.probability * value(t + 1, transition(instance, t, state, a, nd.draw))
                 for nd in tree.stages[t]]
        return cost + math.fsum(terms)

    return value(1, np.asarray(initial_state, dtype=float))


def percent_gap(policy_cost: float, oracle_cost: float) -> float:
    if oracle_cost <= 0:
        raise ContractError("oracle cost must be positive")
    return 100.0 * (policy_cost - oracle_cost) / oracle_cost
