import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from markov_clt.errors import InvalidInputError
from markov_clt.martingale import (
    BlockScheme, MartingaleDecomposition, block_overshoot_m3, block_variance_m2, char_fn_gap, chi_function,
    decompose, gaussian_m3_oracle, gaussian_truncated_second_moment, lindeberg_m1, martingale_diagnostics,
    martingale_test, orthogonality_check, perturbed_chi, quadratic_variation_endpoint, remainder_R,
    remainder_l1_check, remainder_parts,
)
from markov_clt.measure_core import coordinate, state_values
from markov_clt.oracle import FiniteStateChain, GeneratorMatrix, solve_poisson, stationary
from markov_clt.processes import OUProcess, simulate
from markov_clt.stats import mean_estimate

SYM = [[-1.0, 1.0], [1.0, -1.0]]


@pytest.fixture(scope="module")
def iid():
    return MartingaleDecomposition.from_increments(np.random.default_rng(0).standard_normal((20_000, 64)))


@pytest.fixture(scope="module")
def ou_decomp():
    # theta = sigma = 1, psi = x: chi(x) = x and M_t is a standard Brownian motion
    m = OUProcess(1.0, 1.0)
    stat = np.random.default_rng(1).normal(scale=math.sqrt(0.5), size=(4000, 1))
    ens = simulate(m, stat, np.arange(1.0, 33.0), 4000, seed=2, dt=0.02, observables=[coordinate(0, "psi")])
    return m, ens, decompose(ens, coordinate(0), coordinate(0, "psi"), 0.0)


@pytest.fixture(scope="module")
def chain_decomp():
    gen = GeneratorMatrix(SYM)
    f = np.array([1.0, -1.0])
    sol = solve_poisson(gen, f)
    chain = FiniteStateChain(gen)
    psi = state_values(f, gen.space, name="psi")
    ens = simulate(chain, stationary(gen), np.arange(1.0, 33.0), 4000, seed=3, observables=[psi])
    return chain, psi, sol, ens, decompose(ens, sol.chi, psi, sol.v_star)


# remainder function ---------------------------------------------------------------------

def test_remainder_at_zero_and_small_argument():
    assert remainder_R(0.0) == 0
    assert abs(remainder_R(0.01)) <= 0.0017
    assert remainder_parts(0.0) == (0.0, 0.0)


@settings(max_examples=200, deadline=None)
@given(st.floats(-50, 50))
def test_remainder_bound_and_identity(a):
    r = complex(remainder_R(a))
    assert abs(r) <= min(1.0, abs(a) / 6) + 1e-12
    assert abs(1 + 1j * a - a * a / 2 - r * a * a - np.exp(1j * a)) <= 1e-9 * max(1.0, a * a)


def test_remainder_taylor_branch_is_continuous():
    a = np.array([1e-3 * (1 - 1e-9), 1e-3 * (1 + 1e-9)])
    r = remainder_R(a)
    assert abs(r[0] - r[1]) < 1e-9


# M1 and M3 against Gaussian closed forms -------------------------------------------------

def test_m1_gaussian_oracle(iid):
    eps = 0.3
    N_list = [4, 16, 64]
    s = lindeberg_m1(iid, eps, N_list)
    for N, v, hw in zip(N_list, s.values, s.halfwidths):
        assert abs(v - gaussian_truncated_second_moment(eps * math.sqrt(N))) <= hw
    assert s.passed


def test_truncated_second_moment_limits():
    assert gaussian_truncated_second_moment(0.0) == pytest.approx(1.0)
    assert gaussian_truncated_second_moment(0.0, 2.0) == pytest.approx(4.0)
    assert gaussian_truncated_second_moment(10.0) < 1e-20


def test_m3_gaussian_oracle(iid):
    K, eps = 4, 0.5
    s = block_overshoot_m3(iid, K, [2, 4, 16], eps)
    for ell, v, hw in zip([2, 4, 16], s.values, s.halfwidths):
        assert abs(v - gaussian_m3_oracle(K, ell, eps)) <= hw
    assert s.statistic_pass


def test_premise_gates_pass(iid):
    s = lindeberg_m1(iid, 0.3, [4, 16, 64], premise=False)
    assert s.statistic_pass and not s.passed


def test_m1_rejects_too_long_horizon(iid):
    with pytest.raises(InvalidInputError):
        lindeberg_m1(iid, 0.3, [65])


# characteristic function --------------------------------------------------------------------

def test_char_fn_gap_zero_at_theta_zero(iid):
    cf = char_fn_gap(iid, [-1.0, 0.0, 1.0], 1.0)
    assert cf.gaps[1] == 0.0
    assert cf.passed and cf.sup_gap < 0.05


def test_char_fn_gap_detects_wrong_variance(iid):
    assert not char_fn_gap(iid, np.linspace(-3, 3, 13), 2.0).passed


# decomposition ------------------------------------------------------------------------------

def test_increments_telescope(ou_decomp):
    _, _, dec = ou_decomp
    assert np.array_equal(np.cumsum(dec.Z, axis=1), dec.M[:, 1:])
    T = np.arange(1, dec.N + 1)
    assert np.allclose(dec.S / np.sqrt(T), dec.M[:, 1:] / np.sqrt(T) + dec.R, atol=1e-12)
    assert np.array_equal(dec.realized_qv[:, 1:], np.cumsum(dec.Z**2, axis=1))


def test_ou_increments_are_standard_normal(ou_decomp):
    _, _, dec = ou_decomp
    z = dec.Z.ravel()
    est = mean_estimate(z * z)
    # exact in law up to the trapezoid error of the path integral
    assert abs(est.value - 1.0) <= est.halfwidth + 0.01
    assert orthogonality_check(dec)["pass"]


def test_ou_martingale_property(ou_decomp):
    m, _, dec = ou_decomp
    mt = martingale_test(dec, m, coordinate(0), coordinate(0, "psi"), 0.0, n_inner=256, seed=4, n_outer=8, dt=0.02)
    assert mt.passed and mt.n_states == 8 * dec.N
    ep = quadratic_variation_endpoint(dec, 1.0, 0.0)
    assert ep["pass"]


def test_ou_remainder_decays_like_root_t(ou_decomp):
    _, _, dec = ou_decomp
    rem = remainder_l1_check(dec, [2, 4, 8, 16, 32])
    assert rem.passed
    assert rem.extra["fitted_exponent"] == pytest.approx(0.5, abs=0.1)


def test_chain_increment_variance_matches_exact_sigma2(chain_decomp):
    chain, psi, sol, _, dec = chain_decomp
    est = mean_estimate(dec.M[:, -1] ** 2 / dec.N)
    assert est.covers(sol.sigma2_exact)
    mt = martingale_test(dec, chain, sol.chi, psi, sol.v_star, n_inner=256, seed=5, n_outer=8)
    assert mt.passed


def test_m2_converges_to_true_variance_and_flags_a_wrong_one(chain_decomp):
    chain, psi, sol, _, dec = chain_decomp
    scheme = BlockScheme([1, 2, 4, 8], 4, n_inner=128)
    good = block_variance_m2(dec, chain, scheme, sol.sigma2_exact, sol.chi, psi, sol.v_star, seed=6, n_outer=8)
    assert good.passed
    bad = block_variance_m2(dec, chain, scheme, 4 * sol.sigma2_exact, sol.chi, psi, sol.v_star, seed=6, n_outer=8)
    assert not bad.passed
    # the statistic settles near |sigma^2 - 4 sigma^2| rather than vanishing
    assert bad.values[-1] == pytest.approx(3 * sol.sigma2_exact, rel=0.2)


def test_full_battery_and_negative_control(chain_decomp):
    chain, psi, sol, ens, _ = chain_decomp
    scheme = BlockScheme([1, 2, 4], 4, n_inner=128)
    rep = martingale_diagnostics(chain, ens, sol.chi, psi, sol.v_star, sol.sigma2_exact, scheme, seed=7, n_outer=8)
    assert rep["pass"], {k: v.get("pass") for k, v in rep.items() if isinstance(v, dict)}
    neg = martingale_diagnostics(chain, ens, perturbed_chi(sol.chi, psi), psi, sol.v_star, sol.sigma2_exact, scheme,
                                 seed=7, n_outer=8)
    assert not neg["martingale_test"]["pass"]
    for key in ("m1", "m3", "char_fn", "remainder"):
        assert not neg[key]["pass"]


# inputs ----------------------------------------------------------------------------------------

def test_chi_table_rejects_unknown_state():
    f = chi_function([0.5, -0.5])
    assert f(np.array([[1.0], [0.0]])).tolist() == [-0.5, 0.5]
    with pytest.raises(InvalidInputError):
        f(np.array([[2.0]]))


def test_block_scheme_validation():
    with pytest.raises(InvalidInputError):
        BlockScheme([0], 2)
    with pytest.raises(InvalidInputError):
        BlockScheme([1], 2, theta_grid=(0.0, 1.0))
