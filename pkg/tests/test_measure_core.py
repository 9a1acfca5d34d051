import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from markov_clt.errors import InvalidInputError
from markov_clt.measure_core import (
    EmpiricalMeasure, MetricSpace, Observable, constant, coordinate, linear, lipschitz_lower_bound, moment,
    state_values,
)

E1 = MetricSpace.euclidean(1)


# moment -------------------------------------------------------------------------

@pytest.mark.parametrize("p", [1.0, 2.0, 3.5])
def test_moment_of_point_mass_at_reference_is_zero(p):
    assert moment(EmpiricalMeasure.point_mass([0.0]), E1, p) == 0.0


def test_moment_symmetric_pair():
    assert moment(EmpiricalMeasure([[1.0], [-1.0]]), E1, 2.0) == pytest.approx(1.0, abs=1e-15)


def test_moment_hand_value():
    mu = EmpiricalMeasure([[0.0], [3.0]], [0.5, 0.5])
    assert moment(mu, E1, 2.5) == pytest.approx(0.5 * 3**2.5, rel=1e-14)
    assert moment(mu, E1, 2.5) == pytest.approx(7.7942286, abs=1e-6)


def test_moment_rejects_nonfinite_atoms():
    with pytest.raises(InvalidInputError):
        moment(EmpiricalMeasure([[np.inf]]), E1, 2.0)


def test_moment_rejects_bad_order():
    with pytest.raises(InvalidInputError):
        moment(EmpiricalMeasure([[1.0]]), E1, 0.5)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=8), st.floats(0.1, 5.0), st.floats(1.0, 4.0))
def test_moment_homogeneous_under_metric_scaling(xs, lam, p):
    mu = EmpiricalMeasure(np.array(xs)[:, None])
    scaled = E1.norm_scale(lam)
    assert scaled.metric_kind == "weighted-norm"
    assert moment(mu, scaled, p) == pytest.approx(lam**p * moment(mu, E1, p), rel=1e-9, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6), st.floats(1.0, 3.0))
def test_duplicated_atoms_match_merged_weights(xs, p):
    atoms = np.array(xs)[:, None]
    dup = EmpiricalMeasure(np.vstack([atoms, atoms]))
    merged = EmpiricalMeasure(atoms)
    assert moment(dup, E1, p) == pytest.approx(moment(merged, E1, p), rel=1e-12, abs=1e-12)


def test_empirical_measure_validates_weights():
    with pytest.raises(InvalidInputError):
        EmpiricalMeasure([[0.0], [1.0]], [0.7, 0.7])
    with pytest.raises(InvalidInputError):
        EmpiricalMeasure([[0.0]], [0.5, 0.5])
    mu = EmpiricalMeasure([[0.0], [2.0]])
    assert np.allclose(mu.weights, 0.5)
    assert mu.integrate(coordinate(0)) == 1.0


# metric spaces ---------------------------------------------------------------------

def test_discrete_space_rejects_bad_tables():
    with pytest.raises(InvalidInputError):
        MetricSpace.discrete([[0, 1], [2, 0]])
    with pytest.raises(InvalidInputError):
        MetricSpace.discrete([[0, 0], [0, 0]])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(0, 10**6))
def test_metric_axioms_on_sampled_triples(d, seed):
    rng = np.random.default_rng(seed)
    for space in (MetricSpace.euclidean(d), MetricSpace(d, "weighted-norm", weights=rng.uniform(0.5, 2, d))):
        x, y, z = rng.standard_normal((3, d))
        dxy, dyx = space.distance(x, y), space.distance(y, x)
        assert dxy == dyx and dxy >= 0
        assert space.distance(x, x) == 0
        assert space.distance(x, z) <= dxy + space.distance(y, z) + 1e-12


# Lipschitz bounds ---------------------------------------------------------------------

def test_lipschitz_identity():
    assert lipschitz_lower_bound(coordinate(0), [([0.0], [1.0])], E1) == 1.0


def test_lipschitz_constant_is_zero():
    assert lipschitz_lower_bound(constant(3.0), [([0.0], [1.0]), ([2.0], [-4.0])], E1) == 0.0


def test_lipschitz_hand_value():
    psi = Observable(lambda x: 2 * x[:, 0] + np.sin(x[:, 0]))
    assert lipschitz_lower_bound(psi, [([0.0], [math.pi])], E1) == pytest.approx(2.0, abs=1e-15)


def test_lipschitz_skips_coincident_pairs_with_warning():
    with pytest.warns(UserWarning):
        v = lipschitz_lower_bound(coordinate(0), [([1.0], [1.0]), ([0.0], [2.0])], E1)
    assert v == 1.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(InvalidInputError):
            lipschitz_lower_bound(coordinate(0), [([1.0], [1.0])], E1)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(-3, 3), st.floats(-3, 3)), min_size=2, max_size=10))
def test_lipschitz_monotone_in_sample_set(pairs):
    pairs = [((a,), (b,)) for a, b in pairs if a != b]
    if len(pairs) < 2:
        return
    psi = Observable(lambda x: np.sin(3 * x[:, 0]))
    sub = lipschitz_lower_bound(psi, pairs[:1], E1)
    full = lipschitz_lower_bound(psi, pairs, E1)
    assert full >= sub


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6))
def test_declared_bounds_hold_on_samples(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal(3)
    space = MetricSpace(3, "weighted-norm", weights=rng.uniform(0.5, 2.0, 3))
    psi = linear(a, 0.7, space)
    pairs = [(rng.standard_normal(3), rng.standard_normal(3)) for _ in range(20)]
    assert lipschitz_lower_bound(psi, pairs, space) <= psi.lipschitz_bound * (1 + 1e-9)


def test_state_values_lipschitz_is_exact():
    space = MetricSpace.discrete([[0, 1, 2], [1, 0, 1], [2, 1, 0]])
    psi = state_values([0.0, 3.0, 1.0], space)
    assert psi.lipschitz_bound == 3.0
    assert np.array_equal(psi(np.array([[2.0], [1.0]])), [1.0, 3.0])
