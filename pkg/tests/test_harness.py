import csv
import io
import json
import math

import numpy as np
import pytest
from scipy.stats import kstwo

from markov_clt.config import load_preset
from markov_clt.errors import InvalidInputError
from markov_clt.harness import (
    Pipeline, estimates_agree, full_report, histogram_csv, ks_bootstrap_threshold, ks_threshold, merge_reports,
    report_json, run_clt, run_lln, run_variance, sanitize, sigma2_green_kubo, sigma2_martingale, strip_timing,
    variance_csv,
)
from markov_clt.measure_core import constant, coordinate, state_values
from markov_clt.oracle import FiniteStateChain, GeneratorMatrix
from markov_clt.processes import OUProcess
from markov_clt.stats import Estimate

ASYM = [[-2.0, 2.0], [1.0, -1.0]]

# shrink the chain preset so a whole pipeline runs in about a second
TINY = {"lln.n_paths": 1000, "lln.T_list": [20.0, 40.0], "clt.T": 40.0, "corrector.n_samples": 2000,
        "martingale.N": 16, "martingale.n_paths": 1000, "martingale.sigma2_paths": 1000, "martingale.K": [1, 2],
        "martingale.n_inner": 64, "martingale.n_outer": 8, "hypotheses.fit_samples": 500,
        "hypotheses.stationary_replicas": 200}


# LLN and variance curve ---------------------------------------------------------------------

def test_lln_of_constant_is_exact():
    res = run_lln(OUProcess(1.0, 1.0), constant(2.0), [0.0], [5.0, 10.0], 50, seed=0, dt=0.05)
    assert all(e.value == pytest.approx(2.0, abs=1e-12) and e.stderr < 1e-12 for e in res.estimates)
    assert res.v_star is res.estimates[-1]


def test_lln_two_state_occupation():
    gen = GeneratorMatrix(ASYM)
    psi = state_values([1.0, 0.0], gen.space, name="psi")
    res = run_lln(FiniteStateChain(gen), psi, 0, [50.0, 200.0], 4000, seed=1)
    assert res.v_star.covers(1 / 3)
    assert res.to_dict()["T"] == [50.0, 200.0]


def test_lln_rejects_unsorted_times():
    with pytest.raises(InvalidInputError):
        run_lln(OUProcess(1.0, 1.0), coordinate(0), [0.0], [10.0, 5.0], 10, seed=0)


def test_variance_curve_of_centered_constant_is_zero():
    curve = run_variance(OUProcess(1.0, 1.0), constant(3.0), 3.0, [0.0], [5.0, 10.0], 100, seed=0, dt=0.05)
    assert np.allclose(curve.values, 0.0, atol=1e-20) and np.allclose(curve.halfwidths, 0.0, atol=1e-20)


def test_variance_curve_two_state_approaches_exact():
    gen = GeneratorMatrix([[-1.0, 1.0], [1.0, -1.0]])
    psi = state_values([1.0, -1.0], gen.space, name="psi")
    curve = run_variance(FiniteStateChain(gen), psi, 0.0, 0, [100.0, 400.0], 4000, seed=2)
    # from a point start the finite-T variance is 1 - (1 - e^{-2T}) / (2T)
    for T, v, hw in zip(curve.T_list, curve.values, curve.halfwidths):
        assert abs(v - (1 - (1 - math.exp(-2 * T)) / (2 * T))) <= hw
    assert curve.limit == pytest.approx(1.0, abs=0.1)


# CLT check ---------------------------------------------------------------------------------------

def test_ks_threshold_inflation():
    assert ks_threshold(1000, 0.01, 0.0) == pytest.approx(kstwo.ppf(0.99, 1000))
    assert ks_threshold(1000, 0.01, 0.2) == pytest.approx(1.2 * kstwo.ppf(0.99, 1000))


def test_clt_accepts_normal_samples_and_rejects_uniform():
    rng = np.random.default_rng(3)
    good = run_clt(None, None, 0.0, 2.0, None, 1.0, 0, seed=0, samples=2.0 * rng.standard_normal(10_000))
    assert good.normality_pass
    assert sum(good.histogram["counts"]) == 10_000
    bad = run_clt(None, None, 0.0, 1.0, None, 1.0, 0, seed=0, samples=rng.uniform(-math.sqrt(3), math.sqrt(3), 10_000))
    assert not bad.normality_pass


def test_clt_degenerate_branch():
    zero = run_clt(None, None, 0.0, 0.0, None, 1.0, 0, seed=0, samples=np.zeros(100))
    assert zero.normality_pass and zero.degenerate
    spread = run_clt(None, None, 0.0, 0.0, None, 1.0, 0, seed=0, samples=np.random.default_rng(4).normal(size=100))
    assert not spread.normality_pass


def test_bootstrap_threshold_close_to_analytic_without_sigma_error():
    b = ks_bootstrap_threshold(2000, 1.0, 0.0, 0.01, 400, seed=5)
    assert b == pytest.approx(kstwo.ppf(0.99, 2000), rel=0.2)
    assert ks_bootstrap_threshold(2000, 1.0, 0.05, 0.01, 400, seed=5) > b


# variance estimators -------------------------------------------------------------------------------

def test_sigma2_estimators_on_ou():
    m = OUProcess(1.0, 1.0)
    stat = np.random.default_rng(6).normal(scale=math.sqrt(0.5), size=(20_000, 1))
    s2m = sigma2_martingale(m, coordinate(0, "psi"), coordinate(0), stat, 20_000, seed=7, v_star=0.0, dt=0.02)
    s2g = sigma2_green_kubo(coordinate(0, "psi"), 0.0, coordinate(0), stat)
    assert abs(s2m.value - 1.0) <= s2m.halfwidth + 0.01
    assert s2g.covers(1.0)
    assert estimates_agree(s2m, s2g)


def test_estimates_agree():
    assert estimates_agree(Estimate(1.0, 0.1, 10), Estimate(1.3, 0.1, 10))
    assert not estimates_agree(Estimate(1.0, 0.01, 10), Estimate(1.3, 0.01, 10))


# pipeline and artifacts ------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_report():
    return full_report(load_preset("ctmc-oracle", TINY))


def test_report_has_stable_keys(tiny_report):
    for key in ("lln", "variance_curve", "clt", "hypotheses", "corrector", "martingale", "checks", "pass", "meta"):
        assert key in tiny_report
    meta = tiny_report["meta"]
    assert meta["seed"] == 20240602 and len(meta["config_hash"]) == 64
    assert set(tiny_report["sigma2_consistency"]) == {"martingale_vs_green_kubo", "variance_vs_martingale",
                                                      "variance_vs_green_kubo"}


def test_report_json_is_deterministic(tiny_report):
    again = full_report(load_preset("ctmc-oracle", TINY))
    assert strip_timing(tiny_report) == strip_timing(again)
    assert json.loads(report_json(tiny_report)) == json.loads(report_json(tiny_report))


def test_stage_selection_leaves_null_entries():
    rep = full_report(load_preset("ctmc-oracle", TINY), stages=["clt"])
    assert rep["martingale"] is None and rep["corrector"] is None and rep["clt"] is not None


def test_seed_override_changes_results():
    cfg = load_preset("ctmc-oracle", TINY)
    a = Pipeline(cfg, seed=1).lln().v_star.value
    b = Pipeline(cfg, seed=2).lln().v_star.value
    assert a != b


def test_sanitize_maps_nan_to_null():
    out = sanitize({"a": float("nan"), "b": np.array([1.0, np.inf]), "c": np.bool_(True), "d": np.int64(3)})
    assert out == {"a": None, "b": [1.0, None], "c": True, "d": 3}
    assert "NaN" not in report_json({"x": float("nan")})


def test_csv_outputs_are_rfc4180(tiny_report):
    text = variance_csv(tiny_report["variance_curve"])
    assert text.endswith("\r\n") and "\n" not in text.replace("\r\n", "")
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == ["T", "value", "halfwidth"] and len(rows) == 3
    assert float(rows[1][1]) == tiny_report["variance_curve"]["values"][0]
    hist = list(csv.reader(io.StringIO(histogram_csv(tiny_report["clt"]["histogram"]))))
    assert len(hist) == len(tiny_report["clt"]["histogram"]["counts"]) + 1


def test_merge_reports(tiny_report):
    rep = json.loads(report_json(tiny_report))
    merged = merge_reports([rep, rep])
    assert merged["meta"]["seeds"] == [20240602, 20240602]
    other = json.loads(report_json(tiny_report))
    other["meta"]["config_hash"] = "0" * 64
    with pytest.raises(InvalidInputError):
        merge_reports([rep, other])
