"""One-dimensional QIS demo on Q(x) = 25 + (x - 5)^2 over [0, 10].

Each iteration draws ``M`` accepted samples with the QIS accept-reject rule and
then reevaluates the running bounds over every sample accepted so far. In
learned mode the rule scores proposals with a quadratic approximation that is
trained toward Q after every iteration (starting from zero, so iteration 1 is
uniform); otherwise it scores them with Q itself.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .approx import FeatureSpec, QApprox, evaluate_many, td_batch_update
from .samplers import QisBounds, accept_reject

DOMAIN = (0.0, 10.0)
INITIAL_BOUNDS = (35.0, 40.0)
OPTIMUM = 5.0


def true_q(x):
    x = np.asarray(x, dtype=float)
    return 25.0 + (x - OPTIMUM) ** 2


@dataclass
class Example1Result:
    samples: list[np.ndarray]  # accepted x per iteration
    bounds: list[QisBounds]  # bounds after each iteration
    proposals: list[int]
    learn: bool

    def concentration(self, iteration: int, half_width: float = 1.0) -> float:
        """Share of an iteration's accepted samples within ``half_width`` of the optimum."""
        x = self.samples[iteration - 1]
        return float(np.mean(np.abs(x - OPTIMUM) <= half_width))

    def histogram(self, iteration: int, bins: int = 20) -> tuple[np.ndarray, np.ndarray]:
        return np.histogram(self.samples[iteration - 1], bins=bins, range=DOMAIN)


def run_example1(samples: int = 1000, iterations: int = 5, seed: int = 0, learn: bool = False,
                 lam: float = 0.1, bounds: tuple[float, float] = INITIAL_BOUNDS,
                 q_fn=true_q) -> Example1Result:
    if samples < 1 or iterations < 1:
        raise ValueError("samples and iterations must be >= 1")
    rng = np.random.default_rng(seed)
    lo, hi = DOMAIN
    spec = FeatureSpec(np.array([lo]), np.array([hi]), n_actions=1)
    q = QApprox.zeros(1, spec)
    no_state = np.empty((0,))

    def score(xs):
        if learn:
            return evaluate_many(q, np.empty((len(xs), 0)), xs[:, None])
        return q_fn(xs)

    b = QisBounds(1, *bounds)
    archive: list[np.ndarray] = []
    out_samples, out_bounds, out_props = [], [], []
    for _ in range(iterations):
        xs = np.empty(samples)
        tried = 0
        for m in range(samples):
            xs[m], _, b, n = accept_reject(lambda r, n: r.uniform(lo, hi, n), score, b, rng)
            tried += n
        archive.append(xs)
        if learn:
            batch = [(no_state, [x], float(v)) for x, v in zip(xs, q_fn(xs))]
            q = td_batch_update(q, batch, lam)
        seen = np.concatenate(archive)
        vals = score(seen)
        b = QisBounds(1, float(vals.min()), float(vals.max()))
        out_samples.append(xs)
        out_bounds.append(b)
        out_props.append(tried)
    return Example1Result(out_samples, out_bounds, out_props, learn)
