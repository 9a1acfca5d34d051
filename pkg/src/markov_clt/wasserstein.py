"""Wasserstein-1 distances between empirical measures.

Exact methods: the quantile coupling in 1-D, optimal assignment for equal-size
uniform clouds, and a transport LP for weighted measures on a finite state
space. The sliced estimator is a labelled, non-exact proxy for high dimension.
"""

from dataclasses import dataclass
from fractions import Fraction
import math

import numpy as np
from scipy.optimize import linear_sum_assignment, linprog

from .errors import InvalidInputError, NumericalError
from .measure_core import EmpiricalMeasure, MetricSpace, as_batch
from .rng import derive_rng

ASSIGNMENT_MAX_N = 2048
EXACT_REFINE_MAX_N = 64
FINITE_LP_MAX_STATES = 512


@dataclass(frozen=True)
class W1Result:
    value: float
    method: str
    is_exact: bool
    projections_used: int = None

    def to_dict(self):
        return {"value": self.value, "method": self.method, "is_exact": self.is_exact,
                "projections_used": self.projections_used}


def w1_sorted_1d(xs, ys):
    """Exact W1 between two equal-size uniform 1-D samples."""
    x = np.asarray(xs, float).ravel()
    y = np.asarray(ys, float).ravel()
    if x.size != y.size:
        raise InvalidInputError(f"unequal sample sizes {x.size} and {y.size}; resample upstream")
    if x.size == 0:
        raise InvalidInputError("empty samples")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise InvalidInputError("non-finite sample values")
    xs_sorted = np.sort(x, kind="stable")
    ys_sorted = np.sort(y, kind="stable")
    return W1Result(math.fsum(np.abs(xs_sorted - ys_sorted)) / x.size, "sorted-1d", True)


def w1_assignment(xs, ys, space):
    """Exact W1 for equal-size uniform clouds via optimal assignment."""
    x = as_batch(xs, space.dimension)
    y = as_batch(ys, space.dimension)
    n = x.shape[0]
    if y.shape[0] != n:
        raise InvalidInputError(f"unequal sample sizes {n} and {y.shape[0]}")
    if n > ASSIGNMENT_MAX_N:
        raise InvalidInputError(
            f"n={n} exceeds the assignment bound {ASSIGNMENT_MAX_N}; use w1_sliced or subsample")
    cost = space.cost_matrix(x, y)
    rows, cols = linear_sum_assignment(cost)
    if n <= EXACT_REFINE_MAX_N:
        cols = _exact_refine(cost, cols)
    # exactly rounded sum of the exactly minimal pairing: independent of the
    # pairing order, so w1(a, b) == w1(b, a) bit for bit
    return W1Result(math.fsum(cost[rows, cols]) / n, "assignment", True)


def _exact_refine(cost, cols):
    """Cancel negative cycles in exact arithmetic.

    The float solver can stop at a pairing whose total exceeds the true minimum
    by a few ulps when near-ties exist (common in 1-D). Costs are scaled to
    integers, so improving cycles are detected without rounding.
    """
    n = len(cols)
    fr = [[Fraction(float(v)) for v in row] for row in cost]
    scale = max(f.denominator for row in fr for f in row)
    c = [[int(f * scale) for f in row] for row in fr]
    cols = [int(j) for j in cols]
    while True:
        # edge i -> k: row i takes the column currently held by row k
        w = [[c[i][cols[k]] - c[i][cols[i]] for k in range(n)] for i in range(n)]
        dist = [0] * n
        pred = [-1] * n
        last = -1
        for _ in range(n):
            last = -1
            for i in range(n):
                for k in range(n):
                    if dist[i] + w[i][k] < dist[k]:
                        dist[k] = dist[i] + w[i][k]
                        pred[k] = i
                        last = k
            if last < 0:
                return np.asarray(cols)
        for _ in range(n):
            last = pred[last]
        cycle = [last]
        node = pred[last]
        while node != last:
            cycle.append(node)
            node = pred[node]
        # cycle lists nodes against edge direction: pred[k] -> k means pred[k] takes cols[k]
        taken = {pred[k]: cols[k] for k in cycle}
        for i, j in taken.items():
            cols[i] = j


def _aggregate(measure, n_states):
    idx = np.rint(measure.atoms[:, 0]).astype(np.int64)
    if np.any(idx < 0) or np.any(idx >= n_states):
        raise InvalidInputError("atoms must be state indices of the discrete space")
    return np.bincount(idx, weights=measure.weights, minlength=n_states)


def w1_finite_lp(mu, nu, space):
    """Exact transport cost between weighted measures on a discrete-table space."""
    if space.metric_kind != "discrete-table":
        raise InvalidInputError("w1_finite_lp needs a discrete-table space")
    n = space.n_states
    if n > FINITE_LP_MAX_STATES:
        raise InvalidInputError(f"{n} states exceeds the LP bound {FINITE_LP_MAX_STATES}")
    if abs(math.fsum(mu.weights) - math.fsum(nu.weights)) > 1e-9:
        raise InvalidInputError("measures have different total mass")
    a = _aggregate(mu, n)
    b = _aggregate(nu, n)
    # canonical argument order: the LP is solved identically for (mu, nu) and (nu, mu)
    if a.tobytes() > b.tobytes():
        a, b = b, a
    return W1Result(_transport_cost(a, b, space.table), "finite-lp", True)


def _transport_cost(a, b, table):
    # mass shared by both sides stays in place at zero cost; transport the rest
    common = np.minimum(a, b)
    src = a - common
    dst = b - common
    si = np.flatnonzero(src > 0)
    di = np.flatnonzero(dst > 0)
    if si.size == 0 or di.size == 0:
        return 0.0
    ns, nd = si.size, di.size
    cost = table[np.ix_(si, di)].ravel()
    a_eq = np.zeros((ns + nd, ns * nd))
    for k in range(ns):
        a_eq[k, k * nd:(k + 1) * nd] = 1.0
    for k in range(nd):
        a_eq[ns + k, k::nd] = 1.0
    # rebalance tiny mass mismatches so the equality system is consistent
    dst = dst * (src.sum() / dst.sum())
    b_eq = np.concatenate([src[si], dst[di]])
    res = linprog(cost, A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if res.status != 0:
        raise NumericalError(f"transport LP failed: {res.message}")
    return max(0.0, math.fsum(cost * res.x))


def w1_sliced(xs, ys, n_projections, seed):
    """Average 1-D W1 over random unit directions (not exact)."""
    x = np.asarray(xs, float)
    y = np.asarray(ys, float)
    if x.ndim == 1 or x.shape[1] == 1:
        exact = w1_sorted_1d(x.ravel(), y.ravel())
        return W1Result(exact.value, "sorted-1d", True, 1)
    if n_projections < 1:
        raise InvalidInputError("n_projections must be >= 1")
    if x.shape != y.shape:
        raise InvalidInputError("clouds must have equal shapes")
    rng = derive_rng(seed, "sliced-w1")
    dirs = rng.standard_normal((n_projections, x.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    px = np.sort(x @ dirs.T, axis=0, kind="stable")
    py = np.sort(y @ dirs.T, axis=0, kind="stable")
    per_dir = np.abs(px - py).mean(axis=0)
    return W1Result(math.fsum(per_dir) / n_projections, "sliced", False, n_projections)


def empirical_w1(xs, ys, space, seed=0, n_projections=64):
    """Dispatch to the best available method for the space.

    1-D: sorted (exact, equal to assignment); dimension <= 3 with n within the
    assignment bound: assignment; discrete spaces: transport LP on occupation
    measures; otherwise sliced.
    """
    if space.metric_kind == "discrete-table":
        return w1_finite_lp(EmpiricalMeasure(xs), EmpiricalMeasure(ys), space)
    x = as_batch(xs, space.dimension)
    y = as_batch(ys, space.dimension)
    if space.dimension == 1 and space.metric_kind == "euclidean-norm":
        return w1_sorted_1d(x[:, 0], y[:, 0])
    if space.dimension <= 3 and x.shape[0] <= ASSIGNMENT_MAX_N:
        return w1_assignment(x, y, space)
    if space.metric_kind == "weighted-norm":
        s = np.sqrt(space.weights)
        x, y = x * s, y * s
    return w1_sliced(x, y, n_projections, seed)


def w1_to_point_mass(xs, x, space):
    """W1 between an empirical cloud and a Dirac mass: the mean distance (exact)."""
    d = space.distance(as_batch(xs, space.dimension), np.asarray(x, float).reshape(1, -1))
    return W1Result(math.fsum(d) / d.size, "point-mass", True)


__all__ = [
    "W1Result", "w1_sorted_1d", "w1_assignment", "w1_finite_lp", "w1_sliced",
    "empirical_w1", "w1_to_point_mass", "MetricSpace",
]
