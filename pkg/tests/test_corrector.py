import math

import numpy as np
import pytest
from scipy.stats import norm

from markov_clt.corrector import (
    CorrectorEstimate, corrector_estimate, corrector_lipschitz_check, grid_points, semigroup_average,
    truncation_horizon,
)
from markov_clt.errors import HypothesisFailure, InvalidInputError
from markov_clt.hypotheses import ContractionFit, exact_chain_fit
from markov_clt.measure_core import Observable, constant, coordinate, state_values
from markov_clt.oracle import FiniteStateChain, GeneratorMatrix, semigroup_exact, solve_poisson
from markov_clt.processes import OUProcess

OU_FIT = ContractionFit(1.0, 1.0, np.array([1.0]), np.array([math.exp(-1)]), 0.0, "closed form")


def ou_d1_to_stationary(x, var=0.5):
    """``E|x - Z|`` for ``Z ~ N(0, var)``."""
    s = math.sqrt(var)
    return s * math.sqrt(2 / math.pi) * math.exp(-x * x / (2 * var)) + x * (2 * norm.cdf(x / s) - 1)


# semigroup averages -------------------------------------------------------------------------

def test_semigroup_at_zero_is_exact():
    psi = Observable(lambda x: np.sin(x[:, 0]), 1.0)
    est = semigroup_average(OUProcess(1.0, 1.0), psi, [0.7], 0.0, 10, seed=0)
    assert est.value == math.sin(0.7) and est.halfwidth == 0.0


def test_semigroup_ou_mean():
    m = OUProcess(1.0, 1.0)
    for t in (0.5, 1.0, 2.0):
        est = semigroup_average(m, coordinate(0), [2.0], t, 20_000, seed=1, dt=0.02)
        assert abs(est.value - 2.0 * math.exp(-t)) <= est.halfwidth


def test_semigroup_chain_matches_matrix_exponential():
    gen = GeneratorMatrix([[-2.0, 1.5, 0.5], [1.0, -1.0, 0.0], [0.3, 0.7, -1.0]])
    f = np.array([1.0, -1.0, 3.0])
    psi = state_values(f, gen.space)
    exact = semigroup_exact(gen, f, 0.8)
    for x in range(3):
        est = semigroup_average(FiniteStateChain(gen), psi, [x], 0.8, 20_000, seed=2)
        assert abs(est.value - exact[x]) <= est.halfwidth


def test_semigroup_rejects_negative_time():
    with pytest.raises(InvalidInputError):
        semigroup_average(OUProcess(1.0, 1.0), coordinate(0), [0.0], -1.0, 10, seed=0)


# corrector --------------------------------------------------------------------------------------

def test_truncation_horizon_formula():
    assert truncation_horizon(OU_FIT, 1.0, 2.0, 0.01) == pytest.approx(math.log(200.0))
    assert truncation_horizon(OU_FIT, 1.0, 0.001, 0.01) == 0.0


def test_ou_identity_corrector_is_identity():
    m = OUProcess(1.0, 1.0)
    pts = [[-2.0], [0.0], [2.0]]
    d1 = [ou_d1_to_stationary(p[0]) for p in pts]
    est = corrector_estimate(m, coordinate(0), 0.0, pts, OU_FIT, 0.01, 4000, seed=3, dt=0.02, d1_to_stationary=d1)
    assert est.chi_values[2] == pytest.approx(2.0, abs=0.05)
    assert np.all(np.abs(est.chi_values - np.ravel(pts)) <= est.total_uncertainty)
    assert est.chi_t_horizon == pytest.approx(truncation_horizon(OU_FIT, 1.0, max(d1), 0.01))


def test_constant_observable_has_zero_corrector():
    m = OUProcess(1.0, 1.0)
    est = corrector_estimate(m, constant(2.5), 2.5, [[0.0], [1.0]], OU_FIT, 0.01, 100, seed=0, dt=0.05,
                             d1_to_stationary=[1.0, 1.0])
    assert np.allclose(est.chi_values, 0.0, atol=1e-12)


def test_chain_corrector_matches_poisson_solution():
    gen = GeneratorMatrix([[-1.5, 1.0, 0.5], [0.6, -1.4, 0.8], [0.9, 0.4, -1.3]])
    f = np.array([1.0, -1.0, 0.5])
    sol = solve_poisson(gen, f)
    fit = exact_chain_fit(gen, [0.5, 1.0, 2.0, 3.0])
    d1 = [float(sol.pi @ gen.space.table[x]) for x in range(3)]
    est = corrector_estimate(FiniteStateChain(gen), state_values(f, gen.space), sol.v_star, [[0], [1], [2]], fit,
                             0.005, 20_000, seed=4, d1_to_stationary=d1)
    assert est.quadrature["rule"] == "exact" and np.all(est.quad_error == 0)
    assert np.all(np.abs(est.chi_values - sol.chi) <= est.total_uncertainty)
    assert np.array_equal(est.evaluate([2, 0]), est.chi_values[[2, 0]])


def test_stationary_samples_supply_d1():
    m = OUProcess(1.0, 1.0)
    stat = np.random.default_rng(0).normal(scale=math.sqrt(0.5), size=(4000, 1))
    est = corrector_estimate(m, coordinate(0), 0.0, [[1.0]], OU_FIT, 0.05, 500, seed=5, dt=0.05,
                             stationary_samples=stat)
    assert est.d1_to_stationary[0] >= ou_d1_to_stationary(1.0) - 0.05


def test_corrector_requires_positive_rate():
    bad = ContractionFit(1.0, 0.0, np.array([1.0]), np.array([1.0]), 0.0, "flat")
    with pytest.raises(HypothesisFailure):
        corrector_estimate(OUProcess(1.0, 1.0), coordinate(0), 0.0, [[0.0]], bad, 0.01, 100, seed=0,
                           d1_to_stationary=[1.0])
    with pytest.raises(HypothesisFailure):
        corrector_estimate(OUProcess(1.0, 1.0), coordinate(0), 0.0, [[0.0]], None, 0.01, 100, seed=0,
                           d1_to_stationary=[1.0])


def test_corrector_needs_stationary_information():
    with pytest.raises(InvalidInputError):
        corrector_estimate(OUProcess(1.0, 1.0), coordinate(0), 0.0, [[0.0]], OU_FIT, 0.01, 100, seed=0)


# grid, Lipschitz check, persistence ---------------------------------------------------------------

@pytest.fixture(scope="module")
def grid_estimate():
    m = OUProcess(1.0, 1.0)
    axes = [np.linspace(-2.0, 2.0, 5)]
    d1 = [ou_d1_to_stationary(x) for x in axes[0]]
    return corrector_estimate(m, coordinate(0), 0.0, None, OU_FIT, 0.02, 2000, seed=6, dt=0.05,
                              d1_to_stationary=d1, grid_axes=axes)


def test_grid_points_product():
    pts = grid_points([[0.0, 1.0], [5.0, 6.0, 7.0]])
    assert pts.shape == (6, 2) and pts[1].tolist() == [0.0, 6.0]


def test_interpolation_and_out_of_grid(grid_estimate):
    v = grid_estimate.evaluate([[0.5]])[0]
    assert v == pytest.approx(0.5 * (grid_estimate.chi_values[2] + grid_estimate.chi_values[3]))
    with pytest.raises(InvalidInputError, match="outside"):
        grid_estimate.evaluate([[2.5]])


def test_lipschitz_check_passes_for_ou(grid_estimate):
    chk = corrector_lipschitz_check(grid_estimate, OUProcess(1.0, 1.0).space, coordinate(0), OU_FIT)
    assert chk.passed and chk.bound == 1.0 and len(chk.pairs) == 10


def test_lipschitz_check_flags_steep_corrector(grid_estimate):
    steep = CorrectorEstimate.from_dict(grid_estimate.to_dict())
    steep.chi_values = 10.0 * steep.chi_values
    chk = corrector_lipschitz_check(steep, OUProcess(1.0, 1.0).space, coordinate(0), OU_FIT)
    assert not chk.passed


def test_json_roundtrip(grid_estimate, tmp_path):
    path = tmp_path / "chi.json"
    grid_estimate.save(path)
    back = CorrectorEstimate.load(path)
    assert np.array_equal(back.chi_values, grid_estimate.chi_values)
    assert np.array_equal(back.evaluate([[0.3], [-1.7]]), grid_estimate.evaluate([[0.3], [-1.7]]))
    assert back.to_dict() == grid_estimate.to_dict()
