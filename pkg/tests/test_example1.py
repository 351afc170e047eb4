import numpy as np
import pytest
from scipy import stats

from adpqis.example1 import DOMAIN, INITIAL_BOUNDS, OPTIMUM, run_example1, true_q


def test_true_minimum():
    assert true_q(OPTIMUM) == 25.0
    xs = np.linspace(*DOMAIN, 1001)
    assert true_q(xs).min() == 25.0 and xs[np.argmin(true_q(xs))] == 5.0


def test_shapes_and_domain():
    res = run_example1(samples=200, iterations=3, seed=0)
    assert len(res.samples) == 3 and all(len(x) == 200 for x in res.samples)
    assert all(x.min() >= 0 and x.max() <= 10 for x in res.samples)
    counts, edges = res.histogram(3, bins=20)
    assert counts.sum() == 200 and edges[0] == 0 and edges[-1] == 10


def test_bounds_cover_every_accepted_sample():
    res = run_example1(samples=300, iterations=3, seed=1)
    seen = np.concatenate(res.samples)
    last = res.bounds[-1]
    assert last.q_min == pytest.approx(true_q(seen).min())
    assert last.q_max == pytest.approx(true_q(seen).max())


def test_flat_function_gives_indistinguishable_histograms():
    res = run_example1(samples=1000, iterations=5, seed=2, q_fn=lambda x: np.full(np.shape(x), 30.0))
    first, _ = res.histogram(1)
    last, _ = res.histogram(5)
    assert stats.chi2_contingency(np.vstack([first, last]))[1] > 0.01


def test_learned_mode_concentrates_for_every_seed():
    for seed in range(10):
        res = run_example1(samples=1000, iterations=5, seed=seed, learn=True)
        assert res.concentration(5) > res.concentration(1)


def test_learned_first_iteration_is_uniform():
    res = run_example1(samples=1000, iterations=1, seed=4, learn=True)
    counts, _ = res.histogram(1, bins=10)
    assert stats.chisquare(counts).pvalue > 0.01


def test_reproducible():
    a = run_example1(samples=100, iterations=2, seed=9)
    b = run_example1(samples=100, iterations=2, seed=9)
    for x, y in zip(a.samples, b.samples):
        np.testing.assert_array_equal(x, y)


def test_argument_checks():
    with pytest.raises(ValueError):
        run_example1(samples=0)
    assert INITIAL_BOUNDS == (35.0, 40.0)
