"""Quadratic-feature linear approximation of the per-stage Q-function.

Inputs ``x = [state, action]`` are min-max normalized and expanded to
``[1, x, x**2, x_i * x_j (i < j)]``. Because every feature is at most
quadratic in the action, fixing the state turns ``q(s, .)`` into an explicit
quadratic form in the normalized action; the lattice search relies on that.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .mdp import ContractError

CLIP = 2.0


@dataclass(frozen=True, eq=False)
class FeatureSpec:
    lower: np.ndarray
    upper: np.ndarray
    n_actions: int
    _scale: np.ndarray = field(init=False, repr=False)
    _pairs: tuple[np.ndarray, np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ContractError("lower/upper must be 1-D arrays of equal length")
        if np.any(hi < lo):
            raise ContractError("normalization bounds need lower <= upper")
        if not 1 <= self.n_actions <= lo.shape[0]:
            raise ContractError("n_actions out of range")
        width = hi - lo
        # degenerate inputs map to 0
        scale = np.divide(1.0, width, out=np.zeros_like(width), where=width > 0)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "_scale", scale)
        object.__setattr__(self, "_pairs", np.triu_indices(lo.shape[0], k=1))

    @property
    def input_dim(self) -> int:
        return self.lower.shape[0]

    @property
    def state_dim(self) -> int:
        return self.input_dim - self.n_actions

    @property
    def n_features(self) -> int:
        d = self.input_dim
        return 1 + 2 * d + d * (d - 1) // 2

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return np.clip((x - self.lower) * self._scale, -CLIP, CLIP)


def _expand(spec: FeatureSpec, xn: np.ndarray) -> np.ndarray:
    i, j = spec._pairs
    ones = np.ones(xn.shape[:-1] + (1,))
    return np.concatenate([ones, xn, xn * xn, xn[..., i] * xn[..., j]], axis=-1)


def _inputs(spec: FeatureSpec, states, actions) -> np.ndarray:
    s = np.atleast_2d(np.asarray(states, dtype=float))
    a = np.atleast_2d(np.asarray(actions, dtype=float))
    if s.shape[-1] != spec.state_dim or a.shape[-1] != spec.n_actions:
        raise ContractError(
            f"expected state dim {spec.state_dim} and action dim {spec.n_actions}, "
            f"got {s.shape[-1]} and {a.shape[-1]}")
    if s.shape[0] != a.shape[0]:
        s = np.broadcast_to(s, (a.shape[0], s.shape[1])) if s.shape[0] == 1 else s
        a = np.broadcast_to(a, (s.shape[0], a.shape[1])) if a.shape[0] == 1 else a
    return np.concatenate([s, a], axis=-1)


def features(spec: FeatureSpec, state, action) -> np.ndarray:
    """Feature vector of a single state-action pair."""
    x = _inputs(spec, state, action)
    if x.shape[0] != 1:
        raise ContractError("features() takes a single state-action pair")
    return _expand(spec, spec.normalize(x))[0]


def feature_matrix(spec: FeatureSpec, states, actions) -> np.ndarray:
    """Row-stacked features; a single state or action broadcasts against the other."""
    return _expand(spec, spec.normalize(_inputs(spec, states, actions)))


@dataclass(frozen=True, eq=False)
class QApprox:
    stage: int
    spec: FeatureSpec
    theta: np.ndarray

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float)
        if theta.shape != (self.spec.n_features,):
            raise ContractError(
                f"theta has shape {theta.shape}, expected ({self.spec.n_features},)")
        if not np.all(np.isfinite(theta)):
            raise ContractError(f"non-finite coefficients at stage {self.stage}")
        theta = theta.copy()
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @classmethod
    def zeros(cls, stage: int, spec: FeatureSpec) -> "QApprox":
        return cls(stage, spec, np.zeros(spec.n_features))

    def with_theta(self, theta) -> "QApprox":
        return QApprox(self.stage, self.spec, theta)


def evaluate(q: QApprox, state, action) -> float:
    return float(features(q.spec, state, action) @ q.theta)


def evaluate_many(q: QApprox, states, actions) -> np.ndarray:
    return feature_matrix(q.spec, states, actions) @ q.theta


TD_COMBINE = ("projection", "mean")


def td_batch_update(q: QApprox, batch, lam: float, combine: str = "projection") -> QApprox:
    """Move ``q`` a fraction ``lam`` of the way toward the batch targets.

    A single sample takes the normalized step ``(target - q) * phi / |phi|^2``,
    which lands exactly on ``(1 - lam) * q(s, a) + lam * target``. For larger
    batches ``combine`` picks how samples are pooled:

    ``"projection"``
        minimum-norm coefficient change that moves every batch point to its
        blended target at once, through a truncated pseudo-inverse of the
        batch Gram matrix. Duplicated samples count once, and directions the
        batch barely resolves are dropped instead of amplifying target noise.
    ``"mean"``
        average of the per-sample normalized steps.
    """
    if not 0.0 < lam <= 1.0:
        raise ContractError(f"lambda must lie in (0, 1], got {lam}")
    states, actions, targets = _unpack(batch)
    phi = feature_matrix(q.spec, states, actions)
    if combine == "mean":
        step = _mean_step(phi, q.theta, targets)
    elif combine == "projection":
        step = _projection_step(phi, q.theta, targets)
    else:
        raise ContractError(f"unknown combine mode '{combine}', expected one of {TD_COMBINE}")
    return q.with_theta(q.theta + lam * step)


def _unpack(batch):
    batch = list(batch)
    if not batch:
        raise ContractError("empty TD batch")
    states = np.array([b[0] for b in batch], dtype=float)
    actions = np.array([b[1] for b in batch], dtype=float)
    targets = np.array([b[2] for b in batch], dtype=float)
    if not np.all(np.isfinite(targets)):
        raise ContractError("non-finite TD target")
    return states, actions, targets


def _mean_step(phi: np.ndarray, theta: np.ndarray, targets: np.ndarray) -> np.ndarray:
    norms = np.einsum("ij,ij->i", phi, phi)
    if np.any(norms <= 0):
        raise ContractError("zero feature vector")
    err = targets - phi @ theta
    return (err / norms) @ phi / phi.shape[0]


# relative eigenvalue cutoff of the batch Gram matrix
PINV_RCOND = 1e-4


def _projection_step(phi: np.ndarray, theta: np.ndarray, targets: np.ndarray) -> np.ndarray:
    if phi.shape[0] == 1:
        return _mean_step(phi, theta, targets)
    if np.any(np.einsum("ij,ij->i", phi, phi) <= 0):
        raise ContractError("zero feature vector")
    err = targets - phi @ theta
    # phi^+ = phi' (phi phi')^+; singular values are square roots of Gram eigenvalues
    return np.linalg.pinv(phi, rcond=np.sqrt(PINV_RCOND)) @ err


def td_loss(q: QApprox, batch) -> float:
    """Batch objective whose negative gradient is the TD step direction."""
    states, actions, targets = _unpack(batch)
    phi = feature_matrix(q.spec, states, actions)
    norms = np.einsum("ij,ij->i", phi, phi)
    err = targets - phi @ q.theta
    return float(np.mean(0.5 * err * err / norms))


# --- restriction to the action for a fixed state -------------------------

def action_quadratic(q: QApprox, states) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Write ``q(s, a)`` as ``c + g . an + an' H an`` in the normalized action ``an``.

    Returns ``c`` of shape (n,), ``g`` of shape (n, G) and the shared ``H`` (G, G)
    for ``n`` states.
    """
    spec = q.spec
    s = np.atleast_2d(np.asarray(states, dtype=float))
    ds, G, d = spec.state_dim, spec.n_actions, spec.input_dim
    sn = np.clip((s - spec.lower[:ds]) * spec._scale[:ds], -CLIP, CLIP)
    th = q.theta
    lin, sq, pair = th[1:1 + d], th[1 + d:1 + 2 * d], th[1 + 2 * d:]
    P = np.zeros((d, d))
    i, j = spec._pairs
    P[i, j] = pair
    Pss = P[:ds, :ds]
    c = th[0] + sn @ lin[:ds] + (sn * sn) @ sq[:ds] + np.einsum("ni,ij,nj->n", sn, Pss, sn)
    g = lin[ds:] + sn @ P[:ds, ds:]
    Paa = P[ds:, ds:]
    H = np.diag(sq[ds:]) + 0.5 * (Paa + Paa.T)
    return c, g, H


def normalize_actions(spec: FeatureSpec, actions: np.ndarray) -> np.ndarray:
    ds = spec.state_dim
    return np.clip((actions - spec.lower[ds:]) * spec._scale[ds:], -CLIP, CLIP)


def quadratic_values(c, g, H, an: np.ndarray) -> np.ndarray:
    """Evaluate the restricted quadratic; ``an`` is (..., G) with leading dims matching ``c``."""
    return c + np.einsum("...k,...k->...", an, g) + np.einsum("...k,kl,...l->...", an, H, an)


@lru_cache(maxsize=32)
def _lattice(G: int, n: int) -> np.ndarray:
    out = []

    def rec(prefix, remaining, slots):
        if slots == 1:
            out.append(prefix + (remaining,))
            return
        for v in range(remaining, -1, -1):
            rec(prefix + (v,), remaining - v, slots - 1)

    rec((), n, G)
    arr = np.array(out, dtype=np.int64)
    arr.setflags(write=False)
    return arr


def simplex_lattice(G: int, n: int) -> np.ndarray:
    """Integer compositions of ``n`` into ``G`` parts, first part descending.

    The first point is ``(n, 0, ..., 0)``; this order is the tie-break order of
    :func:`argmin_action`.
    """
    if G < 1 or n < 1:
        raise ContractError("lattice needs G >= 1 and n >= 1")
    return _lattice(G, n)


def lattice_divisions(resolution: float) -> int:
    n = round(1.0 / resolution)
    if n < 2 or abs(n * resolution - 1.0) > 1e-9:
        raise ContractError(f"resolution must be 1/n for integer n >= 2, got {resolution}")
    return n


def argmin_actions(q: QApprox, states, resolution: float = 0.05,
                   refine_steps: int = 20) -> tuple[np.ndarray, np.ndarray]:
    """Lattice search plus pairwise-transfer refinement for a batch of states.

    Returns ``(actions, values)`` with shapes (n, G) and (n,).
    """
    spec = q.spec
    G = spec.n_actions
    n = lattice_divisions(resolution)
    s = np.atleast_2d(np.asarray(states, dtype=float))
    c, g, H = action_quadratic(q, s)
    lat = simplex_lattice(G, n) / n
    lat_n = normalize_actions(spec, lat)
    # (n_states, n_lattice)
    vals = c[:, None] + g @ lat_n.T + np.einsum("pk,kl,pl->p", lat_n, H, lat_n)[None, :]
    best_idx = np.argmin(vals, axis=1)
    best = lat[best_idx].copy()
    best_val = vals[np.arange(len(s)), best_idx]

    if refine_steps > 0 and G > 1:
        src, dst = np.nonzero(~np.eye(G, dtype=bool))
        delta = resolution
        for _ in range(refine_steps):
            # candidates: (n_states, n_moves, G)
            move = np.minimum(delta, best[:, src])
            cand = np.repeat(best[:, None, :], len(src), axis=1)
            rows = np.arange(len(src))
            cand[:, rows, src] -= move
            cand[:, rows, dst] += move
            cand[:, rows, src] = np.maximum(cand[:, rows, src], 0.0)
            cv = quadratic_values(c[:, None], g[:, None, :], H, normalize_actions(spec, cand))
            cv = np.where(move > 0, cv, np.inf)
            k = np.argmin(cv, axis=1)
            kv = cv[np.arange(len(s)), k]
            improve = kv < best_val
            best[improve] = cand[improve, k[improve]]
            best_val = np.where(improve, kv, best_val)
            delta *= 0.5
    return best, best_val


def argmin_action(q: QApprox, state, resolution: float = 0.05,
                  refine_steps: int = 20) -> tuple[np.ndarray, float]:
    actions, values = argmin_actions(q, np.asarray(state, dtype=float)[None, :],
                                     resolution, refine_steps)
    return actions[0], float(values[0])
