import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from adpqis.approx import FeatureSpec, QApprox, argmin_action, evaluate, evaluate_many
from adpqis.mdp import ContractError, SampleRecord
from adpqis.samplers import (EpsilonSchedule, ProposalBudgetExceeded, QisBounds, SampleArchive,
                             accept_reject, epsilon_at, epsilon_greedy_action,
                             epsilon_greedy_actions, propose_uniform_shares, qis_sample_action,
                             qratio, reevaluate_bounds)


def spec(G=3, n_state=1):
    d = n_state + G
    return FeatureSpec(np.zeros(d), np.ones(d), n_actions=G)


def random_q(seed, G=3):
    sp = spec(G)
    return QApprox(1, sp, np.random.default_rng(seed).normal(size=sp.n_features))


# --- qratio ------------------------------------------------------------------

def test_qratio_example():
    assert qratio(37.0, QisBounds(1, 35.0, 40.0)) == pytest.approx(0.6, abs=1e-15)


def test_qratio_endpoints_and_degenerate():
    b = QisBounds(1, 35.0, 40.0)
    assert qratio(35.0, b) == 1.0
    assert qratio(40.0, b) == 0.0
    assert qratio(7.0, QisBounds(1, 7.0, 7.0)) == 1.0


def test_bounds_invariant():
    with pytest.raises(ContractError):
        QisBounds(1, 2.0, 1.0)


@settings(max_examples=100)
@given(lo=st.floats(-1e3, 1e3), span=st.floats(1e-3, 1e3), frac=st.floats(0, 1),
       alpha=st.floats(1e-3, 1e3), beta=st.floats(-1e3, 1e3))
def test_qratio_affine_invariant(lo, span, frac, alpha, beta):
    b = QisBounds(1, lo, lo + span)
    v = lo + frac * span
    b2 = QisBounds(1, alpha * b.q_min + beta, alpha * b.q_max + beta)
    assert qratio(alpha * v + beta, b2) == pytest.approx(qratio(v, b), abs=1e-6)


def test_bounds_extended():
    b = QisBounds(1, 0.0, 1.0)
    assert b.extended(2.0).q_max == 2.0
    assert b.extended(-1.0).q_min == -1.0
    assert b.extended(0.5) is b


# --- uniform proposals -------------------------------------------------------------

def test_uniform_shares_on_simplex_with_dirichlet_moments():
    G, n = 4, 100_000
    rng = np.random.default_rng(0)
    x = np.array([propose_uniform_shares(G, rng) for _ in range(n)])
    assert x.min() >= 0
    np.testing.assert_allclose(x.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(x.mean(axis=0), 1 / G, atol=0.01)
    var = (G - 1) / (G**2 * (G + 1))
    np.testing.assert_allclose(x.var(axis=0), var, rtol=0.1)


def test_uniform_shares_needs_two_parts():
    with pytest.raises(ContractError):
        propose_uniform_shares(1, np.random.default_rng(0))


# --- accept-reject -------------------------------------------------------------

def accepted_once(value, bounds, rng):
    """One accept-reject trial of a fixed proposal."""
    try:
        accept_reject(lambda r, k: np.zeros(k), lambda p: np.full(len(p), value), bounds, rng,
                      max_proposals=1)
        return True
    except ProposalBudgetExceeded:
        return False


def test_acceptance_frequency_matches_qratio():
    bounds = QisBounds(1, 0.0, 1.0)
    rng = np.random.default_rng(1)
    n = 10_000
    for v in (0.1, 0.5, 0.8):
        hits = sum(accepted_once(v, bounds, rng) for _ in range(n))
        p = qratio(v, bounds)
        assert abs(hits / n - p) <= 3 * math.sqrt(p * (1 - p) / n)


def test_first_proposal_count_is_geometric():
    # constant value inside fixed bounds: proposals until acceptance ~ Geometric(p)
    bounds = QisBounds(1, 0.0, 1.0)
    rng = np.random.default_rng(7)
    p = qratio(0.75, bounds)
    counts = [accept_reject(lambda r, k: r.random(k), lambda x: np.full(len(x), 0.75), bounds,
                            rng)[3] for _ in range(5000)]
    mean, sd = np.mean(counts), math.sqrt((1 - p) / p**2 / len(counts))
    assert abs(mean - 1 / p) <= 4 * sd


def test_zero_theta_accepts_first_proposal():
    q = QApprox.zeros(1, spec())
    rng = np.random.default_rng(0)
    a, b, tried = qis_sample_action(q, [0.5], QisBounds(1, 0.0, 0.0), rng)
    assert tried == 1
    assert a.sum() == pytest.approx(1.0) and a.min() >= 0
    assert (b.q_min, b.q_max) == (0.0, 0.0)


def test_budget_exceeded_names_stage():
    # every proposal equals q_max, so qratio is 0 and nothing is ever accepted
    with pytest.raises(ProposalBudgetExceeded, match="stage 2"):
        accept_reject(lambda r, k: r.random(k), lambda x: np.full(len(x), 1.0),
                      QisBounds(2, 0.0, 1.0), np.random.default_rng(0), max_proposals=100)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_returned_bounds_bracket_accepted_value(seed):
    q = random_q(seed)
    rng = np.random.default_rng(seed)
    s = rng.random(1)
    a, b, _ = qis_sample_action(q, s, QisBounds(1, 0.0, 1.0), rng)
    v = evaluate(q, s, a)
    assert b.q_min - 1e-12 <= v <= b.q_max + 1e-12
    assert a.min() >= 0 and a.sum() == pytest.approx(1.0, abs=1e-12)


def test_accepted_density_proportional_to_qratio():
    # 1-D projection: value(x) = x on [0, 1] with fixed bounds [0, 1], so density ~ (1 - x)
    rng = np.random.default_rng(3)
    bounds = QisBounds(1, 0.0, 1.0)
    n = 100_000
    xs = np.empty(n)
    for i in range(n):
        xs[i] = accept_reject(lambda r, k: r.random(k), lambda x: x, bounds, rng)[0]
    edges = np.linspace(0, 1, 21)
    observed, _ = np.histogram(xs, edges)
    cdf = 1 - (1 - edges) ** 2
    expected = n * np.diff(cdf)
    assert stats.chisquare(observed, expected).pvalue > 0.01


def test_qis_sample_action_density_on_simplex():
    # value depends on the first share only; projection onto it must follow qratio x Beta(1, G-1)
    G = 3
    sp = spec(G, n_state=0)
    theta = np.zeros(sp.n_features)
    theta[1] = 1.0  # q = share_1
    q = QApprox(1, sp, theta)
    rng = np.random.default_rng(5)
    n = 100_000
    bounds = QisBounds(1, 0.0, 1.0)
    x = np.array([qis_sample_action(q, np.empty(0), bounds, rng)[0][0] for _ in range(n)])
    edges = np.linspace(0, 1, 21)
    observed, _ = np.histogram(x, edges)
    # density proportional to (1 - x) * (G - 1)(1 - x)^(G - 2) -> (1 - x)^2, cdf 1 - (1 - x)^3
    expected = n * np.diff(1 - (1 - edges) ** 3)
    assert stats.chisquare(observed, expected).pvalue > 0.01


# --- archive and reevaluation -----------------------------------------------------

def fill_archive(rng, n, G=3, stage=1):
    arch = SampleArchive(2)
    for i in range(n):
        e = rng.standard_exponential(G)
        arch.append(SampleRecord(stage, rng.random(1), e / e.sum(), 1.0, i + 1))
    return arch


def test_reevaluate_singleton():
    rng = np.random.default_rng(0)
    q = random_q(1)
    arch = fill_archive(rng, 1)
    r = arch.records(1)[0]
    b = reevaluate_bounds(q, arch, 1)
    assert b.q_min == b.q_max == pytest.approx(evaluate(q, r.state, r.action), rel=1e-12)


def test_reevaluate_zero_theta():
    arch = fill_archive(np.random.default_rng(0), 20)
    b = reevaluate_bounds(QApprox.zeros(1, spec()), arch, 1)
    assert (b.q_min, b.q_max) == (0.0, 0.0)


def test_reevaluate_matches_brute_force_scan():
    rng = np.random.default_rng(2)
    arch = fill_archive(rng, 300)
    q = random_q(4)
    b = reevaluate_bounds(q, arch, 1)
    vals = [evaluate(q, r.state, r.action) for r in arch.records(1)]
    assert b.q_min == pytest.approx(min(vals), rel=1e-12)
    assert b.q_max == pytest.approx(max(vals), rel=1e-12)
    # feature cache stays consistent after further appends and a new theta
    e = rng.standard_exponential(3)
    arch.append(SampleRecord(1, rng.random(1), e / e.sum(), 1.0, 301))
    q2 = random_q(5)
    b2 = reevaluate_bounds(q2, arch, 1)
    vals2 = [evaluate(q2, r.state, r.action) for r in arch.records(1)]
    assert (b2.q_min, b2.q_max) == pytest.approx((min(vals2), max(vals2)), rel=1e-12)


def test_reevaluate_empty_stage():
    arch = SampleArchive(2)
    prior = QisBounds(2, 0.0, 1.0)
    assert reevaluate_bounds(random_q(0), arch, 2, prior) is prior
    with pytest.raises(ContractError):
        reevaluate_bounds(random_q(0), arch, 2)


def test_archive_is_append_only_and_ordered():
    arch = fill_archive(np.random.default_rng(0), 5)
    assert [r.iteration for r in arch.records(1)] == [1, 2, 3, 4, 5]
    assert len(arch) == 5 and arch.count(2) == 0
    s, a = arch.arrays(1)
    with pytest.raises(ValueError):
        s[0, 0] = 1.0
    with pytest.raises(ContractError):
        arch.append(SampleRecord(3, np.zeros(1), np.array([1.0, 0, 0]), 0.0, 1))


# --- epsilon strategies ----------------------------------------------------------

def test_epsilon_zero_always_exploits():
    q = random_q(3)
    rng = np.random.default_rng(0)
    s = np.array([0.4])
    greedy, _ = argmin_action(q, s, 0.1, 5)
    for _ in range(20):
        np.testing.assert_array_equal(epsilon_greedy_action(q, s, 0.0, rng, 0.1, 5), greedy)


def test_epsilon_one_matches_uniform_proposals():
    q = random_q(3)
    s = np.array([0.4])
    a = np.array([epsilon_greedy_action(q, s, 1.0, np.random.default_rng(i), 0.1, 5)
                  for i in range(200)])
    ref = []
    for i in range(200):
        rng = np.random.default_rng(i)
        rng.random(1)  # explore coin
        ref.append(propose_uniform_shares(3, rng))
    np.testing.assert_array_equal(a, np.array(ref))


def test_epsilon_half_explore_fraction():
    q = random_q(3)
    rng = np.random.default_rng(9)
    n = 10_000
    _, explored = epsilon_greedy_actions(q, np.full((n, 1), 0.4), 0.5, rng, 0.5, 0)
    frac = 1 - explored.mean()
    assert abs(frac - 0.5) <= 3 * math.sqrt(0.25 / n)


def test_epsilon_rejects_out_of_range():
    with pytest.raises(ContractError):
        epsilon_greedy_action(random_q(0), [0.1], 1.5, np.random.default_rng(0))


def test_epsilon_at_boundaries():
    sch = EpsilonSchedule(0.7, 0.2, 900)
    assert epsilon_at(sch, 0) == 0.7
    assert epsilon_at(sch, 900) == pytest.approx(0.2, abs=1e-12)
    assert epsilon_at(sch, 450) == pytest.approx(0.7 * math.sqrt(2 / 7), abs=1e-12)
    assert epsilon_at(sch, 450) == pytest.approx(0.37417, abs=1e-5)
    with pytest.raises(ContractError):
        epsilon_at(sch, 901)


@settings(max_examples=50)
@given(ei=st.floats(0.01, 1.0), ratio=st.floats(0.01, 1.0), K=st.integers(1, 2000))
def test_epsilon_at_monotone(ei, ratio, K):
    sch = EpsilonSchedule(ei, ei * ratio, K)
    eps = np.array([epsilon_at(sch, k) for k in range(K + 1)])
    assert np.all(np.diff(eps) <= 1e-15)
    assert eps[-1] == pytest.approx(ei * ratio, rel=1e-9)


def test_schedule_validation():
    for args in ((0.7, 0.0, 10), (0.2, 0.7, 10), (1.2, 0.2, 10), (0.7, 0.2, 0)):
        with pytest.raises(ContractError):
            EpsilonSchedule(*args)
