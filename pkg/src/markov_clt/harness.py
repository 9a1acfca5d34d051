"""End-to-end experiments: law of large numbers, asymptotic variance, CLT.

:func:`full_report` runs hypotheses, corrector, martingale diagnostics and the
CLT stage in dependency order for a validated configuration and returns a
JSON-ready dict with stable top-level keys.
"""

from dataclasses import dataclass
import csv
import io
import json
import math
import os
import time

import numpy as np
from scipy.stats import kstest, kstwo, norm

from . import hypotheses as hyp
from .corrector import corrector_estimate, corrector_lipschitz_check
from .errors import ConfigError, HypothesisFailure, InvalidInputError
from .martingale import BlockScheme, chi_function, martingale_diagnostics, perturbed_chi
from .measure_core import EmpiricalMeasure, Observable, as_batch, coordinate, constant, linear, state_values
from .oracle import FiniteStateChain, GeneratorMatrix, load_generator_file, random_generator, solve_poisson
from .oracle import sigma2_carre_du_champ
from .processes import (
    DissipativeSDE, GalerkinVorticity, Nonlinearity, OUProcess, cumulative_integral, simulate,
    validate_forcing,
)
from .rng import GENERATOR_ALGORITHM, derive_rng, derive_seed
from .stats import Z_HALFWIDTH, Estimate, mean_estimate
from .wasserstein import w1_finite_lp

METRIC_NOTE = ("vorticity runs use the L2 norm metric of the truncated system in place of the "
               "weighted path metric of the infinite-dimensional theory")


# builders --------------------------------------------------------------------

def build_model(cfg):
    m = cfg.model
    try:
        if m.kind == "ou":
            return OUProcess(m.theta, m.noise_sigma, m.dimension, default_dt=cfg.simulation.dt or 1e-3)
        if m.kind == "dissipative":
            if m.A is not None:
                A = np.asarray(m.A, float)
            elif m.A_diag is not None:
                A = np.diag(m.A_diag)
            else:
                raise ConfigError("dissipative model needs A or A_diag", "model.A")
            return DissipativeSDE(A, Nonlinearity(m.nonlinearity, m.strength), m.noise_gammas,
                                  default_dt=cfg.simulation.dt or 1e-3)
        if m.kind == "vorticity":
            if m.forcing_modes is None:
                raise ConfigError("vorticity model needs forcing_modes", "model.forcing_modes")
            gammas = m.forcing_gammas if m.forcing_gammas is not None else [1.0] * len(m.forcing_modes)
            return GalerkinVorticity(m.cutoff, m.forcing_modes, gammas, m.eta, m.nonlinear,
                                     default_dt=cfg.simulation.dt or 2.5e-4)
        if m.kind == "ctmc":
            dist = m.distances
            if m.distances_file is not None:
                dist = np.loadtxt(cfg.resolve(m.distances_file), ndmin=2, comments="#")
            if m.generator_file is not None:
                gen = load_generator_file(cfg.resolve(m.generator_file))
                gen = GeneratorMatrix(gen.Q, dist)
            elif m.generator is not None:
                gen = GeneratorMatrix(m.generator, dist)
            elif m.random_states is not None:
                gen = GeneratorMatrix(random_generator(m.random_states, derive_rng(m.random_seed, "generator")), dist)
            else:
                raise ConfigError("ctmc model needs generator, generator_file or random_states", "model.generator")
            return FiniteStateChain(gen)
    except ConfigError:
        raise
    except (InvalidInputError, OSError) as exc:
        raise ConfigError(str(exc), "model") from None
    raise ConfigError(f"unknown model kind {m.kind}", "model.kind")


def build_observable(cfg, model):
    o = cfg.observable
    if o.kind == "coordinate":
        if not 0 <= o.index < model.dimension:
            raise ConfigError(f"index must lie in [0, {model.dimension})", "observable.index")
        if model.space.metric_kind == "weighted-norm":
            e = np.zeros(model.dimension)
            e[o.index] = 1.0
            return linear(e, 0.0, model.space, name="psi")
        return coordinate(o.index, name="psi")
    if o.kind == "linear":
        if o.coefficients is None or len(o.coefficients) != model.dimension:
            raise ConfigError(f"need {model.dimension} coefficients", "observable.coefficients")
        return linear(o.coefficients, o.offset, model.space, name="psi")
    if o.kind == "constant":
        return constant(o.value, name="psi")
    if o.kind == "sin-coordinate":
        i = o.index
        return Observable(lambda x: np.sin(np.asarray(x)[:, i]), 1.0, "psi")
    if o.kind == "state-values":
        if model.space.metric_kind != "discrete-table" or o.values is None or len(o.values) != model.space.n_states:
            raise ConfigError("state-values needs one value per state of a ctmc model", "observable.values")
        return state_values(o.values, model.space, name="psi")
    raise ConfigError(f"unknown observable kind {o.kind}", "observable.kind")


def initial_spec(cfg, model):
    init = cfg.simulation.initial
    if isinstance(model, FiniteStateChain):
        return model.normalize_initial(init)
    arr = np.atleast_1d(np.asarray(init, float))
    if arr.size == 1 and model.dimension > 1:
        arr = np.full(model.dimension, float(arr[0]))
    if arr.size != model.dimension:
        raise ConfigError(f"initial point must have {model.dimension} coordinates", "simulation.initial")
    return arr


# estimators ------------------------------------------------------------------

@dataclass
class LlnResult:
    T_list: list
    estimates: list

    @property
    def v_star(self):
        return self.estimates[-1]

    def to_dict(self):
        return {"T": list(map(float, self.T_list)), "estimates": [e.to_dict() for e in self.estimates],
                "v_star_hat": self.v_star.value, "v_star_halfwidth": self.v_star.halfwidth}


def _main_ensemble(model, psi, mu0, times, n_paths, seed, dt, integrator):
    return simulate(model, mu0, times, n_paths, seed, dt, integrator, observables=[psi])


def run_lln(model, psi, mu0, T_list, n_paths, seed, dt=None, integrator="exponential-euler", ensemble=None):
    """Ensemble means of ``(1/T) int_0^T psi(X_s) ds``; the last entry is the estimate of ``v*``."""
    T_list = [float(t) for t in T_list]
    if any(b <= a for a, b in zip(T_list, T_list[1:])):
        raise InvalidInputError("T_list must be increasing")
    ens = ensemble or _main_ensemble(model, psi, mu0, T_list, n_paths, seed, dt, integrator)
    I = cumulative_integral(ens, psi)
    return LlnResult(T_list, [mean_estimate(I[:, ens.time_index(T)] / T) for T in T_list])


@dataclass
class VarianceCurve:
    T_list: list
    values: np.ndarray
    halfwidths: np.ndarray
    limit: float
    slope: float

    def to_dict(self):
        return {"T": list(map(float, self.T_list)), "values": self.values.tolist(),
                "halfwidths": self.halfwidths.tolist(), "extrapolated_limit": self.limit,
                "one_over_T_slope": self.slope}


def run_variance(model, psi, v_star, mu0, T_list, n_paths, seed, dt=None, integrator="exponential-euler",
                 ensemble=None, n_boot=200):
    """``(1/T) E S_T^2`` with ``S_T = int_0^T (psi - v*)``; bootstrap halfwidths (four bootstrap SE).

    The curve is also fitted as ``a + b/T``; ``a`` is reported as the
    extrapolated limit and ``b`` as the convergence slope.
    """
    T_list = [float(t) for t in T_list]
    ens = ensemble or _main_ensemble(model, psi, mu0, T_list, n_paths, seed, dt, integrator)
    I = cumulative_integral(ens, psi)
    rng = derive_rng(seed, "bootstrap")
    n = I.shape[0]
    boot_idx = rng.integers(0, n, size=(n_boot, n))
    vals, hws = [], []
    for T in T_list:
        s2 = (I[:, ens.time_index(T)] - v_star * T) ** 2 / T
        vals.append(float(np.mean(s2)))
        hws.append(Z_HALFWIDTH * float(np.std(s2[boot_idx].mean(axis=1), ddof=1)))
    vals, hws = np.array(vals), np.array(hws)
    if len(T_list) >= 2:
        b, a = np.polyfit(1.0 / np.asarray(T_list), vals, 1)
    else:
        a, b = vals[-1], 0.0
    return VarianceCurve(T_list, vals, hws, float(a), float(b))


@dataclass
class CltResult:
    ks_distance: float
    threshold: float
    normality_pass: bool
    sigma: float
    n: int
    histogram: dict
    degenerate: bool = False
    second_moment: float = None

    def to_dict(self):
        return {"ks_distance": self.ks_distance, "threshold": self.threshold, "normality_pass": self.normality_pass,
                "sigma": self.sigma, "n": self.n, "histogram": self.histogram, "degenerate": self.degenerate,
                "second_moment": self.second_moment, "pass": self.normality_pass}


def ks_threshold(n, level=0.01, allowance=0.2):
    """Critical one-sample KS distance at ``level``, inflated by ``allowance`` for an estimated sigma."""
    return float(kstwo.ppf(1 - level, n)) * (1 + allowance)


def ks_bootstrap_threshold(n, sigma, sigma_stderr, level, n_boot, seed):
    """Parametric bootstrap critical value that propagates the uncertainty of ``sigma``.

    Each replicate draws ``n`` normals with scale ``sigma`` and compares them
    with a normal whose scale is ``sigma`` perturbed by its standard error.
    """
    rng = derive_rng(seed, "ks-bootstrap")
    stats = np.empty(n_boot)
    for b in range(n_boot):
        z = sigma * rng.standard_normal(n)
        s = max(sigma + sigma_stderr * rng.standard_normal(), 1e-12 * sigma)
        stats[b] = kstest(z / s, "norm").statistic
    return float(np.quantile(stats, 1 - level))


def run_clt(model, psi, v_star, sigma, mu0, T, n_paths, seed, dt=None, integrator="exponential-euler",
            ensemble=None, samples=None, level=0.01, allowance=0.2, bins=40, bootstrap=0, sigma_stderr=0.0):
    """KS distance between the law of ``S_T / sqrt(T)`` and ``N(0, sigma^2)``.

    ``samples`` bypasses the model (values are taken as draws of ``S_T /
    sqrt(T)``). For ``sigma <= 0`` the degenerate branch requires the second
    moment of ``S_T / sqrt(T)`` to vanish within four standard errors.
    ``bootstrap > 0`` replaces the inflated critical value by
    :func:`ks_bootstrap_threshold` with that many replicates.
    """
    if samples is None:
        ens = ensemble or _main_ensemble(model, psi, mu0, [T], n_paths, seed, dt, integrator)
        I = cumulative_integral(ens, psi)
        x = (I[:, ens.time_index(T)] - v_star * T) / math.sqrt(T)
    else:
        x = np.asarray(samples, float).ravel()
    n = x.size
    thr = ks_threshold(n, level, allowance)
    if bootstrap and sigma > 0:
        thr = ks_bootstrap_threshold(n, sigma, sigma_stderr, level, bootstrap, seed)
    if not sigma > 0:
        m2 = mean_estimate(x * x)
        ok = bool(m2.value <= m2.halfwidth + 1e-12)
        return CltResult(float("nan"), thr, ok, 0.0, n, {}, True, m2.value)
    ks = float(kstest(x / sigma, "norm").statistic)
    lim = max(4 * sigma, float(np.max(np.abs(x))))
    counts, edges = np.histogram(x, bins=bins, range=(-lim, lim))
    width = edges[1] - edges[0]
    hist = {"edges": edges.tolist(), "counts": counts.tolist(),
            "density": (counts / (n * width)).tolist(),
            "normal_density": norm.pdf(0.5 * (edges[1:] + edges[:-1]), scale=sigma).tolist()}
    return CltResult(ks, thr, bool(ks < thr), float(sigma), n, hist)


def _starts(samples, n):
    samples = np.asarray(samples, float)
    return samples[np.arange(n) % samples.shape[0]]


def sigma2_martingale(model, psi, chi, stationary_samples, n_paths, seed, v_star, dt=None,
                      integrator="exponential-euler"):
    """``E M_1^2`` over unit-time continuations from the stationary stand-in."""
    stat = as_batch(stationary_samples, model.dimension)
    x0 = _starts(stat, n_paths)
    ens = simulate(model, x0, [1.0], n_paths, seed, dt, integrator, observables=[psi])
    f = chi_function(chi)
    M1 = f(ens.at(1.0)) - f(ens.at(0.0)) + cumulative_integral(ens, psi)[:, ens.time_index(1.0)] - v_star
    return mean_estimate(M1 * M1)


def sigma2_green_kubo(psi, v_star, chi, stationary_samples):
    """``2 <mu*, (psi - v*) chi>`` over the stationary stand-in."""
    x = np.asarray(stationary_samples, float)
    if x.ndim == 1:
        x = x[:, None]
    vals = 2.0 * (psi(x) - v_star) * chi_function(chi)(x)
    return mean_estimate(vals)


def estimates_agree(a, b, factor=Z_HALFWIDTH):
    return abs(a.value - b.value) <= factor * math.hypot(a.stderr, b.stderr) + 1e-12


# pipeline ----------------------------------------------------------------------

class Pipeline:
    """Stages of one experiment; each stage is computed once and cached."""

    def __init__(self, cfg, seed=None):
        self.cfg = cfg
        self.seed = cfg.meta.seed if seed is None else int(seed)
        self.model = build_model(cfg)
        self.psi = build_observable(cfg, self.model)
        self.mu0 = initial_spec(cfg, self.model)
        self.dt = cfg.simulation.dt
        self.integrator = cfg.simulation.integrator
        self.timing = {}
        self._cache = {}

    def _seed(self, tag):
        return derive_seed(self.seed, tag)

    def _timed(self, name, fn):
        if name not in self._cache:
            t0 = time.perf_counter()
            self._cache[name] = fn()
            self.timing[name] = round(time.perf_counter() - t0, 3)
        return self._cache[name]

    @property
    def is_chain(self):
        return isinstance(self.model, FiniteStateChain)

    def _point(self, x):
        return np.asarray(x, float).reshape(self.model.dimension)

    def _start_point(self):
        if isinstance(self.mu0, EmpiricalMeasure):
            return self.mu0.atoms[int(np.argmax(self.mu0.weights))]
        return np.asarray(self.mu0, float).reshape(self.model.dimension)

    def _pair(self):
        h = self.cfg.hypotheses
        if h.pair is not None:
            return self._point(h.pair[0]), self._point(h.pair[1])
        x = self._start_point()
        if self.is_chain:
            j = int(np.argmax(self.model.space.table[int(x[0])]))
            return x, np.array([float(j)])
        return x, x + np.eye(self.model.dimension)[0]

    # -- hypotheses
    def hypotheses(self):
        return self._timed("hypotheses", self._hypotheses)

    def _hypotheses(self):
        h = self.cfg.hypotheses
        x, y = self._pair()
        fit = hyp.contraction_fit(self.model, x, y, h.fit_times, h.fit_samples, self._seed("fit"), h.coupling,
                                  self.dt, self.integrator)
        out = {"contraction": fit.to_dict()}
        checks = {}
        exact_fit = None
        if self.is_chain:
            exact_fit = hyp.exact_chain_fit(self.model.gen, h.exact_fit_times)
            gap = self.model.gen.spectral_gap()
            out["contraction_exact"] = exact_fit.to_dict()
            out["spectral_gap"] = gap
        lyap = hyp.lyapunov_report(self.model, self.mu0, h.delta, h.lyapunov_times, h.moment_samples,
                                   self._seed("lyapunov"), self.dt, self.integrator)
        out["lyapunov"] = lyap.to_dict()
        if lyap.h3_suspect:
            raise HypothesisFailure("H3", "moment estimates grow without bound (divergence heuristic)")
        local = hyp.local_moment_report(self.model, self.model.space.reference_point, h.ball_radius, h.delta,
                                        h.moment_T, h.ball_points, h.moment_samples, self._seed("local-moment"),
                                        self.dt, integrator=self.integrator)
        out["local_moment"] = local.to_dict()
        if local.h3_suspect:
            raise HypothesisFailure("H2", "local moment estimates grow without bound")
        cont = hyp.stochastic_continuity_check(self.model, self._start_point(), h.continuity_times,
                                               h.continuity_samples, self._seed("continuity"), self.dt,
                                               self.integrator)
        out["continuity"] = cont.to_dict()
        # d1(mu0, mu*) <= <mu0, rho_x0> + <mu*, rho_x0>, the latter bounded through the Lyapunov moment
        m0 = self._initial_moment()
        d1_bound = m0 + lyap.sup_estimate ** (1.0 / (2 + h.delta))
        lr = hyp.long_run_sample(self.model, self.mu0, fit, d1_bound, h.burn_tol, h.stationary_replicas,
                                 h.stationary_per_replica, self._seed("long-run"), self.dt, self.integrator)
        out["stationary_sample"] = lr.to_dict()
        ces = hyp.cesaro_contraction_check(self.model, self.mu0, h.cesaro_times, h.cesaro_samples,
                                           self._seed("cesaro"), exact_fit or fit, lr.samples, self.dt,
                                           self.integrator, moment_starts=np.stack([x, y]))
        out["cesaro"] = ces.to_dict()
        lip_pairs = [(x, y)]
        if self.is_chain:
            states = np.arange(self.model.n_states, dtype=float)[:, None]
            lip_pairs = [(states[i], states[j]) for i in range(len(states)) for j in range(i + 1, len(states))]
        lip_fit = hyp.exact_chain_fit(self.model.gen, h.lipschitz_times) if self.is_chain else fit
        lip = hyp.semigroup_lipschitz_decay(self.model, self.psi, lip_pairs, h.lipschitz_times, lip_fit,
                                            h.lipschitz_samples, self._seed("lip-decay"), self.dt, self.integrator)
        out["semigroup_lipschitz"] = lip.to_dict()
        checks.update({"H1_fit": True, "H2_local_moment": local.passed, "H3_lyapunov": lyap.passed,
                       "H0_continuity": cont.passed, "cesaro": ces.passed, "semigroup_lipschitz": lip.passed})
        if self.is_chain:
            dom = hyp.coupling_dominates_exact(self.model.gen, fit, x, y)
            out["coupling_vs_exact"] = dom
            checks["coupling_dominates_exact"] = dom["pass"]
        out["checks"] = checks
        out["pass"] = all(checks.values())
        return {"report": out, "fit": fit, "exact_fit": exact_fit, "stationary": lr.samples}

    def _initial_moment(self):
        sp = self.model.space
        if isinstance(self.mu0, EmpiricalMeasure):
            return math.fsum(self.mu0.weights * sp.distance_to_reference(self.mu0.atoms))
        return float(sp.distance_to_reference(self._start_point()[None, :])[0])

    # -- lln / variance / clt share one ensemble
    def ensemble(self):
        def run():
            times = sorted(set(self.cfg.lln.T_list) | {self.cfg.clt.T})
            return _main_ensemble(self.model, self.psi, self.mu0, times, self.cfg.lln.n_paths, self._seed("main"),
                                  self.dt, self.integrator)
        return self._timed("main_ensemble", run)

    def lln(self):
        return self._timed("lln", lambda: run_lln(self.model, self.psi, self.mu0, self.cfg.lln.T_list,
                                                  self.cfg.lln.n_paths, self._seed("main"), ensemble=self.ensemble()))

    def variance(self):
        v = self.lln().v_star.value
        return self._timed("variance", lambda: run_variance(
            self.model, self.psi, v, self.mu0, self.cfg.lln.T_list, self.cfg.lln.n_paths, self._seed("main"),
            ensemble=self.ensemble(), n_boot=self.cfg.lln.n_boot))

    # -- corrector
    def corrector(self):
        return self._timed("corrector", self._corrector)

    def _corrector(self):
        hy = self.hypotheses()
        c = self.cfg.corrector
        fit = hy["exact_fit"] or hy["fit"]
        v = self.lln().v_star
        axes = None
        pts = None
        if self.is_chain:
            pts = np.arange(self.model.n_states, dtype=float)[:, None]
        elif c.grid is not None:
            axes = [np.linspace(lo, hi, int(n)) for lo, hi, n in c.grid]
        elif c.eval_points is not None:
            pts = np.asarray(c.eval_points, float)
        else:
            raise ConfigError("corrector needs grid or eval_points", "corrector.grid")
        est = corrector_estimate(self.model, self.psi, v.value, pts, fit, c.tol, c.n_samples, self._seed("corrector"),
                                 self.dt, v.halfwidth, stationary_samples=hy["stationary"], grid_axes=axes,
                                 integrator=self.integrator)
        lip = corrector_lipschitz_check(est, self.model.space, self.psi, fit)
        return {"estimate": est, "lipschitz": lip}

    # -- martingale
    def martingale(self):
        return self._timed("martingale", self._martingale)

    def _martingale(self):
        m = self.cfg.martingale
        hy = self.hypotheses()
        est = self.corrector()["estimate"]
        v = self.lln().v_star.value
        stat = hy["stationary"]
        start = EmpiricalMeasure(stat)
        ens = simulate(self.model, start, np.arange(1.0, m.N + 1), m.n_paths, self._seed("martingale-paths"),
                       self.dt, self.integrator, observables=[self.psi])
        s2m = sigma2_martingale(self.model, self.psi, est, stat, m.sigma2_paths, self._seed("sigma2-m"), v,
                                self.dt, self.integrator)
        s2g = sigma2_green_kubo(self.psi, v, est, stat)
        var = self.variance()
        s2_ref = float(var.values[-1])
        theta = np.linspace(-m.theta_max, m.theta_max, m.n_theta)
        scheme = BlockScheme(m.K, m.ell, m.epsilon, tuple(theta), m.n_inner)
        diag = martingale_diagnostics(self.model, ens, est, self.psi, v, s2_ref, scheme, self._seed("diagnostics"),
                                      m.n_outer, self.dt, self.integrator, sigma2_char=s2m.value,
                                      sigma2_char_halfwidth=s2m.halfwidth)
        out = {"diagnostics": diag, "sigma2_martingale": s2m.to_dict(), "sigma2_green_kubo": s2g.to_dict(),
               "sigma2_reference": s2_ref}
        if m.negative_control:
            bad = perturbed_chi(est, self.psi)
            s2b = sigma2_martingale(self.model, self.psi, bad, stat, m.sigma2_paths, self._seed("sigma2-m"), v,
                                    self.dt, self.integrator)
            neg = martingale_diagnostics(self.model, ens, bad, self.psi, v, s2_ref, scheme, self._seed("diagnostics"),
                                         m.n_outer, self.dt, self.integrator, sigma2_char=s2b.value,
                                         sigma2_char_halfwidth=s2b.halfwidth)
            failed = {k: not d["pass"] for k, d in neg.items() if isinstance(d, dict) and "pass" in d}
            out["negative_control"] = {"perturbation": "chi + 0.5 psi", "sigma2_martingale": s2b.to_dict(),
                                       "failed": failed, "all_failed": all(failed.values()), "diagnostics": neg}
        return {"report": out, "s2m": s2m, "s2g": s2g}

    def clt(self):
        def run():
            se = 0.0
            if self.cfg.martingale.enabled and self.cfg.corrector.enabled:
                s2 = self.martingale()["s2m"]
                s2, se = s2.value, s2.stderr
            else:
                s2 = float(self.variance().values[-1])
                se = float(self.variance().halfwidths[-1]) / Z_HALFWIDTH
            sigma = math.sqrt(max(s2, 0.0))
            c = self.cfg.clt
            return run_clt(self.model, self.psi, self.lln().v_star.value, sigma, self.mu0, c.T,
                           self.cfg.lln.n_paths, self._seed("main"), ensemble=self.ensemble(), level=c.level,
                           allowance=c.allowance, bins=c.bins, bootstrap=c.bootstrap,
                           sigma_stderr=se / (2 * sigma) if sigma > 0 else 0.0)
        return self._timed("clt", run)

    def clt_report(self):
        """CLT section: KS result plus the quantities it rests on."""
        c = self.cfg.clt
        out = self.clt().to_dict()
        lln = self.lln().v_star
        out.update({"v_star_hat": lln.value, "v_star_halfwidth": lln.halfwidth, "T": c.T,
                    "sample_sizes": {"paths": self.cfg.lln.n_paths},
                    "seeds": {"main": self._seed("main")},
                    "tolerances": {"level": c.level, "allowance": c.allowance, "bootstrap": c.bootstrap}})
        if self.cfg.martingale.enabled and self.cfg.corrector.enabled:
            mg = self.martingale()
            out["sigma2_martingale"] = mg["s2m"].to_dict()
            out["sigma2_green_kubo"] = mg["s2g"].to_dict()
            out["sample_sizes"]["sigma2_paths"] = self.cfg.martingale.sigma2_paths
        return out

    def meta(self):
        return {"seed": self.seed, "config_hash": self.cfg.config_hash(), "generator": GENERATOR_ALGORITHM,
                "model_hash": self.model.model_hash(), "name": self.cfg.meta.name, "timing": self.timing}

    # -- exact chain oracle
    def oracle(self):
        return self._timed("oracle", self._oracle)

    def _oracle(self):
        if not self.is_chain:
            raise ConfigError("the oracle stage needs a ctmc model", "model.kind")
        gen = self.model.gen
        psi_vals = self.psi(np.arange(gen.n, dtype=float)[:, None])
        sol = solve_poisson(gen, psi_vals)
        return {"pi": sol.pi.tolist(), "chi": sol.chi.tolist(), "v_star": sol.v_star,
                "sigma2_exact": sol.sigma2_exact, "sigma2_carre_du_champ": sigma2_carre_du_champ(gen, sol),
                "poisson_residual": sol.residual, "spectral_gap": gen.spectral_gap(), "_sol": sol}

    def oracle_comparison(self):
        o = self.oracle()
        out, checks = {}, {}
        lln = self.lln().v_star
        # a point start biases the time average by at most (c/gamma) |psi|_L d1(mu0, pi) / T
        gen, sol = self.model.gen, o["_sol"]
        fit = self.hypotheses()["exact_fit"]
        mu0 = self.mu0 if isinstance(self.mu0, EmpiricalMeasure) else EmpiricalMeasure.point_mass(self._start_point())
        pi = np.clip(sol.pi, 0.0, None)
        d1_0 = w1_finite_lp(mu0, EmpiricalMeasure(np.arange(gen.n, dtype=float)[:, None], pi / math.fsum(pi)),
                            gen.space).value
        transient = fit.c_hat / fit.gamma_hat * self.psi.lipschitz_bound * d1_0 / self.lln().T_list[-1]
        out["v_star_transient_allowance"] = transient
        checks["v_star"] = lln.covers(o["v_star"], transient)
        var = self.variance()
        rel = abs(var.values[-1] - o["sigma2_exact"]) / max(o["sigma2_exact"], 1e-300)
        out["variance_relative_error"] = rel
        checks["variance_within_5pct"] = bool(rel <= 0.05)
        checks["poisson_residual"] = bool(o["poisson_residual"] < 1e-10)
        if self.cfg.corrector.enabled:
            est = self.corrector()["estimate"]
            # both correctors integrate psi - v*; compare after removing the pi-mean
            chi_hat = est.chi_values - math.fsum(o["_sol"].pi * est.chi_values)
            err = np.abs(chi_hat - o["_sol"].chi)
            allow = est.total_uncertainty + math.fsum(o["_sol"].pi * est.total_uncertainty)
            out["chi_abs_error"] = err.tolist()
            out["chi_allowance"] = allow.tolist()
            checks["corrector_matches_poisson"] = bool(np.all(err <= allow))
        if self.cfg.martingale.enabled and self.cfg.corrector.enabled:
            mg = self.martingale()
            checks["sigma2_martingale"] = mg["s2m"].covers(o["sigma2_exact"])
            checks["sigma2_green_kubo"] = mg["s2g"].covers(o["sigma2_exact"])
        out["checks"] = checks
        out["pass"] = all(checks.values())
        return out

    # -- vorticity property checks
    def vorticity(self):
        return self._timed("vorticity", self._vorticity)

    def _vorticity(self):
        model = self.model
        v = self.cfg.vorticity
        rng = derive_rng(self.seed, "vorticity-states")
        X = rng.standard_normal((v.n_random_states, model.dimension))
        pair = model.energy_pairing(X)
        scale = model.l2_norm_sq(X)
        energy_ok = bool(np.max(np.abs(pair)) <= 1e-10)
        nd = []
        for modes in v.accept_modes:
            nd.append(_nd_case(modes, model.cutoff, expect=True))
        for modes in v.reject_modes:
            nd.append(_nd_case(modes, model.cutoff, expect=False))
        x0 = self.mu0 if not np.all(self.mu0 == 0) else None
        times = np.arange(v.record_every, v.T + 1e-9, v.record_every)
        if x0 is None:
            init = derive_rng(self.seed, "vorticity-initial").standard_normal((v.n_paths, model.dimension))
            init *= v.initial_scale
        else:
            init = np.broadcast_to(np.asarray(x0, float), (v.n_paths, model.dimension)).copy()
        ens = simulate(model, init, times, v.n_paths, self._seed("vorticity-paths"), self.dt, self.integrator)
        n, nt, d = ens.states.shape
        e2 = model.l2_norm_sq(ens.states.reshape(-1, d)).reshape(n, nt)
        ests = [mean_estimate(e2[:, k]) for k in range(nt)]
        m0 = ests[0].value
        bound = model.forcing_balance_bound(m0)
        vals = np.array([e.value for e in ests])
        hws = np.array([e.halfwidth for e in ests])
        bound_ok = bool(np.all(vals <= bound + hws))
        expo = np.exp(model.eta * e2).mean(axis=0)
        return {
            "energy_pairing_max_abs": float(np.max(np.abs(pair))), "energy_pairing_relative_max":
                float(np.max(np.abs(pair) / scale)), "energy_conservation_pass": energy_ok,
            "nd_validation": nd, "nd_pass": all(c["pass"] for c in nd),
            "times": ens.times.tolist(), "mean_energy": vals.tolist(), "energy_halfwidths": hws.tolist(),
            "forcing_balance_bound": bound, "trace_Q": model.trace_Q, "energy_bound_pass": bound_ok,
            "exponential_moment": expo.tolist(), "eta": model.eta, "metric_note": METRIC_NOTE,
            "pass": bool(energy_ok and bound_ok and all(c["pass"] for c in nd)),
        }


def _nd_case(modes, cutoff, expect):
    from .errors import NDViolation

    try:
        validate_forcing(modes, [1.0] * len(modes), cutoff)
        accepted, clause = True, None
    except NDViolation as exc:
        accepted, clause = False, exc.clause
    return {"modes": modes, "expected_accept": expect, "accepted": accepted, "violated_clause": clause,
            "pass": accepted == expect}


def full_report(cfg, seed=None, stages=None):
    """Run the configured stages and assemble the report dict.

    ``stages`` restricts the run (``hypotheses``, ``corrector``,
    ``martingale``, ``clt``, ``oracle``); dependencies are computed as needed.
    A hard hypothesis failure aborts with :class:`HypothesisFailure`.
    """
    p = Pipeline(cfg, seed)
    stages = set(stages or ("hypotheses", "corrector", "martingale", "clt", "oracle"))
    rep = {k: None for k in ("lln", "variance_curve", "clt", "hypotheses", "corrector", "martingale")}
    checks = {}
    if cfg.model.kind == "vorticity":
        vort = p.vorticity()
        rep["vorticity"] = vort
        checks["vorticity"] = vort["pass"]
        rep["note"] = "property checks only for the truncated vorticity model"
    else:
        if cfg.hypotheses.enabled and "hypotheses" in stages | {"corrector", "martingale"}:
            hy = p.hypotheses()
            rep["hypotheses"] = hy["report"]
            checks["hypotheses"] = hy["report"]["pass"]
        rep["lln"] = p.lln().to_dict()
        rep["variance_curve"] = p.variance().to_dict()
        if cfg.corrector.enabled and stages & {"corrector", "martingale"}:
            c = p.corrector()
            rep["corrector"] = {**c["estimate"].to_dict(), "lipschitz_check": c["lipschitz"].to_dict()}
            checks["corrector_lipschitz"] = c["lipschitz"].passed
        if cfg.martingale.enabled and cfg.corrector.enabled and "martingale" in stages:
            mg = p.martingale()
            rep["martingale"] = mg["report"]
            checks["martingale"] = mg["report"]["diagnostics"]["pass"]
            if "negative_control" in mg["report"]:
                checks["negative_control_fails"] = mg["report"]["negative_control"]["all_failed"]
            s2m, s2g = mg["s2m"], mg["s2g"]
            var = p.variance()
            var_est = Estimate(float(var.values[-1]), float(var.halfwidths[-1]) / Z_HALFWIDTH)
            rep["sigma2_consistency"] = {
                "martingale_vs_green_kubo": estimates_agree(s2m, s2g),
                "variance_vs_martingale": estimates_agree(var_est, s2m),
                "variance_vs_green_kubo": estimates_agree(var_est, s2g),
            }
            checks["sigma2_consistency"] = all(rep["sigma2_consistency"].values())
        if cfg.clt.enabled and "clt" in stages:
            rep["clt"] = p.clt_report()
            checks["clt"] = rep["clt"]["pass"]
        if p.is_chain and "oracle" in stages:
            o = {k: v for k, v in p.oracle().items() if not k.startswith("_")}
            o["comparison"] = p.oracle_comparison()
            rep["oracle"] = o
            checks["oracle"] = o["comparison"]["pass"]
    rep["checks"] = checks
    rep["pass"] = all(checks.values())
    rep["meta"] = p.meta()
    return rep


# artifacts ---------------------------------------------------------------------

def sanitize(obj):
    """Plain JSON types; non-finite floats become null."""
    if isinstance(obj, dict):
        return {str(k): sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [sanitize(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return sanitize(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    return obj


def report_json(report):
    return json.dumps(sanitize(report), sort_keys=True, indent=1) + "\n"


def strip_timing(report):
    rep = json.loads(report) if isinstance(report, str) else json.loads(report_json(report))
    rep.get("meta", {}).pop("timing", None)
    return rep


def atomic_write(path, text):
    tmp = f"{path}.tmp-{os.getpid()}"
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def variance_csv(curve):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(["T", "value", "halfwidth"])
    for T, v, h in zip(curve["T"], curve["values"], curve["halfwidths"]):
        w.writerow([repr(float(T)), repr(float(v)), repr(float(h))])
    return buf.getvalue()


def histogram_csv(hist):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(["left", "right", "count", "density", "normal_density"])
    e = hist["edges"]
    for k in range(len(hist["counts"])):
        w.writerow([repr(e[k]), repr(e[k + 1]), hist["counts"][k], repr(hist["density"][k]),
                    repr(hist["normal_density"][k])])
    return buf.getvalue()


def gnuplot_script(sigma, csv_name="histogram.csv"):
    return (
        "set datafile separator ','\n"
        "set key top right\n"
        "set xlabel 'S_T / sqrt(T)'\n"
        "set ylabel 'density'\n"
        f"sigma = {sigma!r}\n"
        "phi(x) = exp(-x*x/(2*sigma*sigma))/(sigma*sqrt(2*pi))\n"
        f"plot '{csv_name}' every ::1 using (($1+$2)/2):4 with boxes title 'empirical', \\\n"
        "     phi(x) with lines lw 2 title 'N(0, sigma^2)'\n"
    )


def merge_reports(reports):
    """Combine reports of the same configuration (different seeds)."""
    hashes = {r["meta"]["config_hash"] for r in reports}
    if len(hashes) != 1:
        raise InvalidInputError(f"reports come from different configurations: {sorted(hashes)}")
    return {"meta": {"config_hash": hashes.pop(), "seeds": [r["meta"]["seed"] for r in reports]},
            "runs": reports, "pass": all(r.get("pass", False) for r in reports)}
