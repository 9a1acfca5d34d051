"""Metric-space scaffolding: points, observables, empirical measures.

Points are dense float vectors of shape ``(d,)``; batches are ``(n, d)``.
Discrete state spaces embed state ``i`` as the 1-vector ``[i]`` and carry a
distance table.
"""

from dataclasses import dataclass, field
import math
import warnings

import numpy as np

from .errors import InvalidInputError

METRIC_KINDS = ("euclidean-norm", "weighted-norm", "discrete-table")


def as_batch(points, dimension=None):
    """Coerce a point or list of points into a float array of shape (n, d)."""
    arr = np.asarray(points, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1) if dimension == 1 else arr.reshape(1, -1)
    if arr.ndim != 2:
        raise InvalidInputError(f"expected a batch of points, got shape {arr.shape}")
    if dimension is not None and arr.shape[1] != dimension:
        raise InvalidInputError(f"points have dimension {arr.shape[1]}, expected {dimension}")
    return arr


@dataclass(frozen=True, eq=False)
class MetricSpace:
    """A finite-dimensional metric space with a base point.

    ``weights`` scales squared coordinates for the weighted norm
    ``sqrt(sum_i w_i (x_i - y_i)^2)``; ``table`` holds pairwise distances for
    discrete state spaces.
    """

    dimension: int
    metric_kind: str = "euclidean-norm"
    reference_point: np.ndarray = None
    weights: np.ndarray = None
    table: np.ndarray = None

    def __post_init__(self):
        if self.dimension < 1:
            raise InvalidInputError("dimension must be positive")
        if self.metric_kind not in METRIC_KINDS:
            raise InvalidInputError(f"unknown metric kind {self.metric_kind!r}")
        ref = np.zeros(self.dimension) if self.reference_point is None else np.asarray(self.reference_point, float)
        object.__setattr__(self, "reference_point", ref.reshape(self.dimension))
        if self.metric_kind == "weighted-norm":
            if self.weights is None:
                raise InvalidInputError("weighted-norm metric needs weights")
            w = np.asarray(self.weights, float).reshape(self.dimension)
            if np.any(w <= 0):
                raise InvalidInputError("metric weights must be positive")
            object.__setattr__(self, "weights", w)
        if self.metric_kind == "discrete-table":
            if self.dimension != 1:
                raise InvalidInputError("discrete-table spaces are one-dimensional (state index)")
            t = np.asarray(self.table, float)
            if t.ndim != 2 or t.shape[0] != t.shape[1]:
                raise InvalidInputError("distance table must be square")
            if np.any(np.diag(t) != 0) or np.any(t < 0) or not np.array_equal(t, t.T):
                raise InvalidInputError("distance table must be symmetric, nonnegative, zero on the diagonal")
            off = t[~np.eye(t.shape[0], dtype=bool)]
            if np.any(off <= 0):
                raise InvalidInputError("distinct states must have positive distance")
            object.__setattr__(self, "table", t)

    @classmethod
    def euclidean(cls, dimension, reference_point=None):
        return cls(dimension, "euclidean-norm", reference_point)

    @classmethod
    def discrete(cls, table, reference_state=0):
        return cls(1, "discrete-table", [reference_state], table=table)

    @property
    def n_states(self):
        return None if self.table is None else self.table.shape[0]

    def _indices(self, x):
        idx = np.asarray(x, float)[..., 0]
        i = np.rint(idx).astype(np.int64)
        if np.any(np.abs(idx - i) > 0) or np.any(i < 0) or np.any(i >= self.table.shape[0]):
            raise InvalidInputError("discrete points must be valid integer state indices")
        return i

    def distance(self, x, y):
        """Distance between broadcastable point arrays ``(..., d)``."""
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        if self.metric_kind == "discrete-table":
            return self.table[self._indices(x), self._indices(y)]
        diff = x - y
        if self.metric_kind == "weighted-norm":
            return np.sqrt(np.sum(self.weights * diff * diff, axis=-1))
        if diff.shape[-1] == 1:  # avoids underflow of the square
            return np.abs(diff[..., 0])
        return np.sqrt(np.sum(diff * diff, axis=-1))

    def distance_to_reference(self, x):
        return self.distance(x, self.reference_point)

    def cost_matrix(self, xs, ys):
        xs = as_batch(xs, self.dimension)
        ys = as_batch(ys, self.dimension)
        return self.distance(xs[:, None, :], ys[None, :, :])

    def norm_scale(self, factor):
        """The same space with every distance multiplied by ``factor``."""
        if self.metric_kind == "euclidean-norm":
            return MetricSpace(self.dimension, "weighted-norm", self.reference_point,
                               weights=np.full(self.dimension, factor**2))
        if self.metric_kind == "weighted-norm":
            return MetricSpace(self.dimension, "weighted-norm", self.reference_point,
                               weights=self.weights * factor**2)
        return MetricSpace(1, "discrete-table", self.reference_point, table=self.table * factor)


@dataclass(frozen=True, eq=False)
class Observable:
    """A real function on points, vectorised over batches ``(n, d) -> (n,)``."""

    evaluator: object
    lipschitz_bound: float = None
    name: str = "psi"

    def __call__(self, points):
        return np.asarray(self.evaluator(np.asarray(points, float)), dtype=float)

    def shifted(self, offset, name=None):
        """``psi - offset`` with the same Lipschitz bound."""
        f = self.evaluator
        return Observable(lambda x: np.asarray(f(x), float) - offset, self.lipschitz_bound,
                          name or f"{self.name}-centered")

    def plus(self, other, scale=1.0, name=None):
        f, g = self.evaluator, other.evaluator
        bound = None
        if self.lipschitz_bound is not None and other.lipschitz_bound is not None:
            bound = self.lipschitz_bound + abs(scale) * other.lipschitz_bound
        return Observable(lambda x: np.asarray(f(x), float) + scale * np.asarray(g(x), float), bound,
                          name or f"{self.name}+{scale}*{other.name}")


def constant(c, name="constant"):
    return Observable(lambda x: np.full(np.asarray(x).shape[0], float(c)), 0.0, name)


def linear(coefficients, offset=0.0, space=None, name="linear"):
    """``x -> <a, x> + b``; Lipschitz bound is exact for the given space."""
    a = np.asarray(coefficients, float).ravel()
    if space is not None and space.metric_kind == "weighted-norm":
        bound = float(np.sqrt(np.sum(a * a / space.weights)))
    else:
        bound = float(np.linalg.norm(a))
    return Observable(lambda x: np.asarray(x, float) @ a + offset, bound, name)


def coordinate(i, name=None):
    return Observable(lambda x: np.asarray(x, float)[:, i], 1.0, name or f"x{i}")


def state_values(values, space, name="state-values"):
    """Observable on a discrete space given by its value at each state.

    The Lipschitz seminorm is computed exactly over all state pairs.
    """
    v = np.asarray(values, float).ravel()
    if space.metric_kind != "discrete-table" or v.size != space.n_states:
        raise InvalidInputError("state_values needs one value per state of a discrete space")
    diffs = np.abs(v[:, None] - v[None, :])
    off = ~np.eye(v.size, dtype=bool)
    bound = float(np.max(diffs[off] / space.table[off])) if v.size > 1 else 0.0
    table = v.copy()
    obs = Observable(lambda x: table[np.rint(np.asarray(x, float)[:, 0]).astype(np.int64)], bound, name)
    object.__setattr__(obs, "values", table)
    return obs


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """Weighted point cloud; uniform weights by default."""

    atoms: np.ndarray
    weights: np.ndarray = field(default=None)

    def __post_init__(self):
        atoms = as_batch(self.atoms)
        if atoms.shape[0] < 1:
            raise InvalidInputError("an empirical measure needs at least one atom")
        if self.weights is None:
            w = np.full(atoms.shape[0], 1.0 / atoms.shape[0])
        else:
            w = np.asarray(self.weights, float).ravel()
            if w.size != atoms.shape[0]:
                raise InvalidInputError("one weight per atom required")
            if np.any(w < 0) or abs(math.fsum(w) - 1.0) > 1e-12:
                raise InvalidInputError("weights must be nonnegative and sum to 1")
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", w)

    @classmethod
    def point_mass(cls, x):
        return cls(np.asarray(x, float).reshape(1, -1))

    @property
    def dimension(self):
        return self.atoms.shape[1]

    def __len__(self):
        return self.atoms.shape[0]

    def integrate(self, psi):
        return math.fsum(self.weights * psi(self.atoms))

    def sample(self, rng, n):
        idx = rng.choice(len(self), size=n, p=self.weights)
        return self.atoms[idx]


def moment(measure, space, p):
    """``sum_i w_i rho(atom_i, x0)^p``."""
    if not (np.isfinite(p) and p >= 1):
        raise InvalidInputError("moment order p must be finite and >= 1")
    if not np.all(np.isfinite(measure.atoms)):
        raise InvalidInputError("non-finite atom coordinates")
    r = space.distance_to_reference(measure.atoms)
    # fsum: exactly rounded, so the result does not depend on summation order
    return math.fsum(measure.weights * r**p)


def lipschitz_lower_bound(psi, samples, space):
    """Largest difference quotient of ``psi`` over the given point pairs.

    Coincident pairs are skipped with a warning; it is an error if no pair
    remains.
    """
    best = None
    skipped = 0
    for x, y in samples:
        x = np.asarray(x, float).reshape(1, -1)
        y = np.asarray(y, float).reshape(1, -1)
        d = float(space.distance(x, y)[0])
        if d == 0.0:
            skipped += 1
            continue
        q = abs(float(psi(x)[0]) - float(psi(y)[0])) / d
        best = q if best is None else max(best, q)
    if skipped:
        warnings.warn(f"skipped {skipped} coincident pair(s) in Lipschitz estimate", stacklevel=2)
    if best is None:
        raise InvalidInputError("all sample pairs are coincident")
    return best
