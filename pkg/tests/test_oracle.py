import itertools
import math
import time

import numpy as np
import pytest

from _oracles import make_instance, truncated
from adpqis.approx import simplex_lattice
from adpqis.gep import load_instance, stage_cost, transition
from adpqis.mdp import ContractError
from adpqis.oracle import (MemoryBudgetExceeded, backward_induction, build_tree, percent_gap,
                           simulate_policy)


@pytest.fixture(scope="module")
def bundled():
    return load_instance()


def test_tree_node_counts(bundled):
    tree = build_tree(bundled, 0.1)
    assert [len(s) for s in tree.stages] == [1, 121, 121]
    tree = build_tree(bundled, 0.5)
    assert [len(s) for s in tree.stages] == [1, 9, 9]
    root = tree.stages[0][0]
    assert (root.gas, root.carbon, root.probability) == (3.2, 50.0, 1.0)


def test_tree_probabilities_and_grid(bundled):
    tree = build_tree(bundled, 0.1)
    for nodes, b in zip(tree.stages, bundled.stage_bounds):
        assert math.fsum(n.probability for n in nodes) == pytest.approx(1.0, abs=1e-12)
        for n in nodes:
            assert b.gas[0] <= n.gas <= b.gas[1] and b.carbon[0] <= n.carbon <= b.carbon[1]
    paths = math.fsum(a.probability * b.probability * c.probability
                      for a in tree.stages[0] for b in tree.stages[1] for c in tree.stages[2])
    assert paths == pytest.approx(1.0, abs=1e-12)


def test_refining_grid_keeps_stage_one_node(bundled):
    assert build_tree(bundled, 0.5).stages[0] == build_tree(bundled, 0.1).stages[0]


def test_bad_grid_step(bundled):
    with pytest.raises(ContractError):
        build_tree(bundled, 0.3)


def stage_costs_table(inst, tree, lat):
    """(shares1, node, shares2) -> costs, via the scalar stage cost path."""
    s0 = np.concatenate([inst.initial_capacity, [tree.stages[0][0].gas, tree.stages[0][0].carbon]])
    c1 = np.array([stage_cost(inst, 1, s0, a) for a in lat])
    c2 = np.empty((len(lat), len(tree.stages[1]), len(lat)))
    for i, a1 in enumerate(lat):
        for j, node in enumerate(tree.stages[1]):
            s1 = transition(inst, 1, s0, a1, node.draw)
            for k, a2 in enumerate(lat):
                c2[i, j, k] = stage_cost(inst, 2, s1, a2)
    return c1, c2


def test_two_stage_oracle_equals_enumeration(bundled):
    inst = truncated(bundled, 2)
    tree = build_tree(inst, 0.5)
    t0 = time.perf_counter()
    sol = backward_induction(inst, tree, shares_step=0.5)
    lat = simplex_lattice(4, 2) / 2
    assert len(lat) == 10 and len(tree.stages[1]) == 9
    c1, c2 = stage_costs_table(inst, tree, lat)
    p = np.array([n.probability for n in tree.stages[1]])
    # every (shares1, node, shares2) combination; the objective separates over nodes
    best = min(c1[i] + math.fsum(p[j] * c2[i, j].min() for j in range(9)) for i in range(10))
    assert sol.cost == pytest.approx(best, rel=1e-12)
    assert time.perf_counter() - t0 < 10


def test_two_tech_oracle_equals_full_policy_enumeration():
    techs = [("A", 1e6, 7.0, "gas", 0.0, 0.37, 3.0), ("B", 3e6, 10.0, "coal", 2.0, 0.95, 5.0)]
    inst = make_instance(techs, [(4000, 1000.0), (4760, 600.0)], [500, 300],
                         [((3.2, 3.2), (50, 50)), ((3, 7), (0, 100))])
    tree = build_tree(inst, 0.5)
    lat = simplex_lattice(2, 2) / 2
    c1, c2 = stage_costs_table(inst, tree, lat)
    p = np.array([n.probability for n in tree.stages[1]])
    best = math.inf
    # a policy is a stage-1 choice plus one stage-2 choice per node: 3 * 3**9 policies
    for i in range(3):
        for rule in itertools.product(range(3), repeat=9):
            v = c1[i] + math.fsum(p[j] * c2[i, j, rule[j]] for j in range(9))
            best = min(best, v)
    assert backward_induction(inst, tree, 0.5).cost == pytest.approx(best, rel=1e-12)


def test_single_stage_is_direct_minimization(bundled):
    inst = truncated(bundled, 1)
    tree = build_tree(inst, 0.5)
    lat = simplex_lattice(4, 4) / 4
    s0 = np.concatenate([inst.initial_capacity, [3.2, 50.0]])
    direct = min(stage_cost(inst, 1, s0, a) for a in lat)
    assert backward_induction(inst, tree, 0.25).cost == pytest.approx(direct, rel=1e-12)


def test_refining_shares_never_increases_cost(bundled):
    inst = truncated(bundled, 2)
    tree = build_tree(inst, 0.5)
    costs = [backward_induction(inst, tree, s).cost for s in (0.5, 0.25, 0.125)]
    assert costs[0] >= costs[1] >= costs[2]


def test_dp_policy_reproduces_dp_value(bundled):
    tree = build_tree(bundled, 0.5)
    sol = backward_induction(bundled, tree, 0.25)
    assert simulate_policy(bundled, tree, sol.policy) == pytest.approx(sol.cost, rel=1e-9)
    assert sol.cost > 0 and np.isclose(sol.stage1_shares.sum(), 1.0)
    assert np.allclose(sol.stage1_shares * 4, np.round(sol.stage1_shares * 4))


def test_any_lattice_policy_costs_at_least_the_optimum(bundled):
    tree = build_tree(bundled, 0.5)
    sol = backward_induction(bundled, tree, 0.25)
    rng = np.random.default_rng(0)
    lat = simplex_lattice(4, 4) / 4
    for _ in range(3):
        choice = {}

        def policy(t, state):
            key = (t, tuple(np.round(state, 6)))
            if key not in choice:
                choice[key] = lat[rng.integers(len(lat))]
            return choice[key]

        assert percent_gap(simulate_policy(bundled, tree, policy), sol.cost) >= -1e-9


def test_memory_budget(bundled):
    with pytest.raises(MemoryBudgetExceeded, match="coarser"):
        backward_induction(bundled, build_tree(bundled, 0.5), 0.25, budget=1000)


def test_percent_gap():
    assert percent_gap(5.0, 5.0) == 0.0
    assert percent_gap(2.565e11, 2.564e11) == pytest.approx(0.0390, abs=1e-4)
    with pytest.raises(ContractError):
        percent_gap(1.0, 0.0)
