import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from markov_clt.errors import InvalidInputError
from markov_clt.measure_core import EmpiricalMeasure, MetricSpace, Observable
from markov_clt.wasserstein import (
    ASSIGNMENT_MAX_N, empirical_w1, w1_assignment, w1_finite_lp, w1_sliced, w1_sorted_1d, w1_to_point_mass,
)

E1 = MetricSpace.euclidean(1)
E2 = MetricSpace.euclidean(2)


def brute_force(xs, ys, space):
    cost = space.cost_matrix(xs, ys)
    n = len(xs)
    return min(math.fsum(cost[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n))) / n


# sorted 1-D ---------------------------------------------------------------------------

@pytest.mark.parametrize("xs, ys, expected", [([0], [0], 0.0), ([0], [1], 1.0), ([0, 2], [1, 3], 1.0)])
def test_sorted_examples(xs, ys, expected):
    r = w1_sorted_1d(xs, ys)
    assert r.value == expected and r.is_exact and r.method == "sorted-1d"


def test_sorted_rejects_unequal_lengths():
    with pytest.raises(InvalidInputError):
        w1_sorted_1d([0, 1], [0])


# assignment -------------------------------------------------------------------------

def test_assignment_examples():
    assert w1_assignment([[0.0, 1.0], [2.0, 3.0]], [[0.0, 1.0], [2.0, 3.0]], E2).value == 0.0
    assert w1_assignment([[0.0, 0.0]], [[3.0, 4.0]], E2).value == 5.0
    r = w1_assignment([[0, 0], [1, 0]], [[1, 0], [0, 1]], E2)
    assert r.value == pytest.approx(0.5, abs=1e-15) and r.is_exact


def test_assignment_size_bound():
    x = np.zeros((ASSIGNMENT_MAX_N + 1, 1))
    with pytest.raises(InvalidInputError, match="sliced"):
        w1_assignment(x, x, E1)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 3), st.integers(0, 10**6))
def test_assignment_equals_exhaustive(n, d, seed):
    rng = np.random.default_rng(seed)
    space = MetricSpace.euclidean(d)
    xs, ys = rng.standard_normal((n, d)), rng.standard_normal((n, d))
    assert w1_assignment(xs, ys, space).value == brute_force(xs, ys, space)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 40), st.integers(0, 10**6))
def test_assignment_equals_sorted_in_1d(n, seed):
    rng = np.random.default_rng(seed)
    xs, ys = rng.standard_normal(n), rng.standard_normal(n)
    a = w1_assignment(xs[:, None], ys[:, None], E1).value
    assert abs(a - w1_sorted_1d(xs, ys).value) <= 1e-12


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 12), st.integers(1, 3), st.integers(0, 10**6))
def test_symmetry_and_triangle(n, d, seed):
    rng = np.random.default_rng(seed)
    space = MetricSpace.euclidean(d)
    a, b, c = rng.standard_normal((3, n, d))
    ab, ba = w1_assignment(a, b, space).value, w1_assignment(b, a, space).value
    assert ab == ba
    assert w1_assignment(a, c, space).value <= ab + w1_assignment(b, c, space).value + 1e-9
    if d == 1:
        assert w1_sorted_1d(a, b).value == w1_sorted_1d(b, a).value


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 20), st.integers(0, 10**6))
def test_duality_sanity(n, seed):
    rng = np.random.default_rng(seed)
    space = MetricSpace.euclidean(2)
    xs, ys = rng.standard_normal((n, 2)), rng.standard_normal((n, 2)) + 0.5
    v = w1_assignment(xs, ys, space).value
    # 1-Lipschitz test functions
    for u in rng.standard_normal((5, 2)):
        psi = Observable(lambda x, u=u: np.linalg.norm(x - u, axis=1))
        assert abs(psi(xs).mean() - psi(ys).mean()) <= v + 1e-9


# finite LP ---------------------------------------------------------------------------

TWO = MetricSpace.discrete([[0, 1], [1, 0]])


def test_finite_lp_examples():
    states = np.array([[0.0], [1.0]])
    mu = EmpiricalMeasure(states, [0.75, 0.25])
    nu = EmpiricalMeasure(states, [0.25, 0.75])
    assert w1_finite_lp(mu, mu, TWO).value == 0.0
    assert w1_finite_lp(EmpiricalMeasure(states, [1, 0]), EmpiricalMeasure(states, [0, 1]), TWO).value == 1.0
    assert w1_finite_lp(mu, nu, TWO).value == pytest.approx(0.5, abs=1e-12)


def test_finite_lp_rejects_continuous_space():
    with pytest.raises(InvalidInputError):
        w1_finite_lp(EmpiricalMeasure([[0.0]]), EmpiricalMeasure([[0.0]]), E1)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(0, 10**6))
def test_finite_lp_matches_assignment_on_uniform_clouds(n, seed):
    rng = np.random.default_rng(seed)
    pts = rng.standard_normal((4, 2))
    table = MetricSpace.euclidean(2).cost_matrix(pts, pts)
    space = MetricSpace.discrete(table)
    xs = rng.integers(0, 4, n).astype(float)[:, None]
    ys = rng.integers(0, 4, n).astype(float)[:, None]
    lp = w1_finite_lp(EmpiricalMeasure(xs), EmpiricalMeasure(ys), space).value
    assert lp == pytest.approx(brute_force(xs, ys, space), abs=1e-9)
    assert lp == w1_finite_lp(EmpiricalMeasure(ys), EmpiricalMeasure(xs), space).value


# sliced -----------------------------------------------------------------------------

def test_sliced_identical_is_zero():
    x = np.random.default_rng(1).standard_normal((50, 3))
    for seed in range(3):
        assert w1_sliced(x, x, 16, seed).value == 0.0


def test_sliced_translation_lies_in_range():
    x = np.random.default_rng(2).standard_normal((200, 2))
    v = np.array([1.0, -2.0])
    r = w1_sliced(x, x + v, 256, 0)
    assert 0 < r.value <= np.linalg.norm(v) + 1e-12
    assert not r.is_exact and r.projections_used == 256
    assert r.value == w1_sliced(x, x + v, 256, 0).value


def test_sliced_in_1d_is_sorted():
    x, y = np.random.default_rng(3).standard_normal((2, 30))
    assert w1_sliced(x[:, None], y[:, None], 8, 0).value == w1_sorted_1d(x, y).value


def test_dispatch_and_point_mass():
    x = np.random.default_rng(4).standard_normal((20, 2))
    assert empirical_w1(x, x + 1, E2).method == "assignment"
    assert empirical_w1(x[:, :1], x[:, 1:], E1).method == "sorted-1d"
    assert w1_to_point_mass(np.array([[1.0], [-3.0]]), [0.0], E1).value == 2.0
