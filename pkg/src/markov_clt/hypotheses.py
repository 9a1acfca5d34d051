"""Empirical checks of the contraction, moment and continuity hypotheses.

Every check returns a report object with a ``passed`` flag and a
``to_dict`` for the JSON report. Tolerances are stated in the reports.
"""

from dataclasses import dataclass
import math
import warnings

import numpy as np
from scipy.stats import qmc

from .errors import FitRefused, HypothesisFailure, InvalidInputError
from .measure_core import EmpiricalMeasure, as_batch
from .oracle import GeneratorMatrix
from .processes import simulate, simulate_pair
from .rng import derive_rng, derive_seed
from .stats import loglog_slope, mean_estimate
from .wasserstein import ASSIGNMENT_MAX_N, empirical_w1, w1_finite_lp, w1_to_point_mass

DEFAULT_DELTA = 0.5
SYNC_FLOOR = 1e-12
CESARO_FLOOR_SPLITS = 9
CESARO_FLOOR_FACTOR = 4.0


def _tolist(a):
    return np.asarray(a, float).tolist()


@dataclass
class ContractionFit:
    """``d1(mu P^t, nu P^t) <= c_hat exp(-gamma_hat t) d1(mu, nu)`` on the fitted window."""

    c_hat: float
    gamma_hat: float
    times: np.ndarray
    measured_d1: np.ndarray
    residual_max: float
    pair_spec: str
    d1_initial: float = 1.0
    noise_floor: float = 0.0
    gamma_ls: float = float("nan")
    c_ls: float = float("nan")
    fit_times: np.ndarray = None
    coupling: str = "synchronous"
    method: str = ""
    sample_size: int = 0
    window_truncated: bool = False

    def bound(self, t, d0=None):
        d0 = self.d1_initial if d0 is None else d0
        return self.c_hat * np.exp(-self.gamma_hat * np.asarray(t, float)) * d0

    def to_dict(self):
        return {
            "c_hat": self.c_hat, "gamma_hat": self.gamma_hat, "gamma_ls": self.gamma_ls, "c_ls": self.c_ls,
            "times": _tolist(self.times), "measured_d1": _tolist(self.measured_d1),
            "residual_max": self.residual_max, "pair_spec": self.pair_spec, "d1_initial": self.d1_initial,
            "noise_floor": self.noise_floor, "coupling": self.coupling, "method": self.method,
            "sample_size": self.sample_size, "window_truncated": self.window_truncated,
            "fit_times": _tolist(self.fit_times if self.fit_times is not None else []),
        }


def fit_envelope(times, d1, d0):
    """Fit ``d1(t) <= c exp(-gamma t) d0``.

    ``gamma`` is the least-squares decay rate of ``log(d1/d0)`` (including the
    point ``t = 0``); ``log c`` is then raised to the smallest value that puts
    every observation under the curve. Returns ``(c_hat, gamma_hat, c_ls,
    gamma_ls, residual_max)`` where ``residual_max`` is the largest absolute
    least-squares residual in log space.
    """
    t = np.concatenate([[0.0], np.asarray(times, float)])
    y = np.concatenate([[0.0], np.log(np.asarray(d1, float) / d0)])
    slope, intercept = np.polyfit(t, y, 1)
    gamma = -float(slope)
    log_c = float(np.max(y + gamma * t))
    resid = float(np.max(np.abs(y - (intercept + slope * t))))
    return math.exp(log_c), gamma, math.exp(float(intercept)), gamma, resid


def _describe_initial(x):
    if isinstance(x, EmpiricalMeasure):
        return f"empirical({len(x)} atoms)"
    arr = np.asarray(x, float)
    return f"point{arr.ravel().tolist()}" if arr.size <= 8 else f"array{arr.shape}"


def _d1(model, xs, ys, seed):
    return empirical_w1(xs, ys, model.space, seed=seed)


def contraction_fit(model, mu, nu, times, n_samples, seed, coupling="synchronous", dt=None,
                    integrator="exponential-euler", floor_factor=2.0):
    """Measure ``d1(mu P^t, nu P^t)`` and fit the exponential envelope.

    ``coupling="synchronous"`` drives both ensembles with the same noise and
    measures the coupling cost ``mean_i rho(X_t^i, Y_t^i)`` (an upper bound for
    d1 with no estimator floor). ``coupling="independent"`` uses independent
    ensembles and the exact empirical d1; the noise floor is then the median d1
    between two independent ensembles from ``mu``, and the fit window ends at
    the first time d1 falls below ``floor_factor`` times the floor.
    """
    times = np.asarray(times, float)
    if times.size == 0 or np.any(np.diff(times) <= 0) or times[0] <= 0:
        raise InvalidInputError("times must be positive and strictly increasing")
    if n_samples < 100:
        raise InvalidInputError("n_samples must be at least 100")
    if coupling not in ("synchronous", "independent"):
        raise InvalidInputError(f"unknown coupling {coupling!r}")
    if coupling == "synchronous":
        ex, ey = simulate_pair(model, mu, nu, times, n_samples, seed, dt, integrator)
        dist = model.space.distance(ex.states, ey.states)
        d_all = np.array([math.fsum(dist[:, k]) / n_samples for k in range(ex.states.shape[1])])
        d0, d = d_all[0], d_all[1:]
        floor = SYNC_FLOOR * max(1.0, d0)
        # a coupling cost within its own Monte Carlo halfwidth of zero carries no rate information
        significant = d > np.array([mean_estimate(dist[:, k]).halfwidth for k in range(1, dist.shape[1])])
        method = "synchronous-coupling"
    else:
        n = min(n_samples, ASSIGNMENT_MAX_N) if model.space.metric_kind != "discrete-table" else n_samples
        ex = simulate(model, mu, times, n, derive_seed(seed, "fit-mu"), dt, integrator)
        ey = simulate(model, nu, times, n, derive_seed(seed, "fit-nu"), dt, integrator)
        ez = simulate(model, mu, times, n, derive_seed(seed, "fit-floor"), dt, integrator)
        res = [_d1(model, ex.states[:, k], ey.states[:, k], seed) for k in range(ex.states.shape[1])]
        d_all = np.array([r.value for r in res])
        fl = np.array([_d1(model, ex.states[:, k], ez.states[:, k], seed).value
                       for k in range(ex.states.shape[1])])
        d0, d = d_all[0], d_all[1:]
        floor = float(np.median(fl))
        significant = np.ones(d.size, bool)
        method = res[0].method
        n_samples = n
    if d0 <= floor_factor * floor:
        raise FitRefused(f"initial d1 {d0:.3g} is at the noise floor {floor:.3g}: the laws coincide")
    above = (d > floor_factor * floor) & significant
    k_end = int(np.argmin(above)) if not np.all(above) else d.size
    truncated = k_end < d.size
    if truncated:
        warnings.warn(f"d1 reached the noise floor at t={times[k_end]:.4g}; fit window truncated", stacklevel=2)
    if k_end < 1:
        raise FitRefused("d1 is at the noise floor at the first fit time; choose earlier times")
    c_hat, gamma, c_ls, gamma_ls, resid = fit_envelope(times[:k_end], d[:k_end], d0)
    if gamma <= 0:
        raise HypothesisFailure("H1", f"no contraction observed (fitted rate {gamma:.3g})")
    return ContractionFit(c_hat, gamma, times, d, resid, f"{_describe_initial(mu)} vs {_describe_initial(nu)}",
                          float(d0), floor, gamma_ls, c_ls, times[:k_end], coupling, method, n_samples, truncated)


def exact_chain_fit(gen, times):
    """Contraction fit for a finite chain from the exact transition matrices.

    The profile ``c(t) = max_{i != j} d1(e^{tQ}_i, e^{tQ}_j) / d(i, j)`` bounds
    ``d1(mu P^t, nu P^t) / d1(mu, nu)`` for all initial laws; the envelope fit
    is applied to it with ``d0 = 1``.
    """
    gen = gen if isinstance(gen, GeneratorMatrix) else GeneratorMatrix(gen)
    times = np.asarray(times, float)
    n = gen.n
    states = np.arange(n, dtype=float)[:, None]
    prof = []
    for t in times:
        P = gen.transition_matrix(t)
        worst = 0.0
        for i in range(n):
            for j in range(i + 1, n):
                mu = EmpiricalMeasure(states, _clean(P[i]))
                nu = EmpiricalMeasure(states, _clean(P[j]))
                worst = max(worst, w1_finite_lp(mu, nu, gen.space).value / gen.space.table[i, j])
        prof.append(worst)
    prof = np.asarray(prof)
    keep = prof > 1e-13
    c_hat, gamma, c_ls, gamma_ls, resid = fit_envelope(times[keep], prof[keep], 1.0)
    return ContractionFit(c_hat, gamma, times, prof, resid, "worst state pair (exact)", 1.0, 0.0,
                          gamma_ls, c_ls, times[keep], "exact", "finite-lp", 0, False)


def coupling_dominates_exact(gen, fit, x, y, n_sigma=4.0):
    """A coupling cost bounds the true d1 from above: check the measured values
    against ``d1(e^{tQ}_x, e^{tQ}_y)`` at every fit time.

    The allowance is ``n_sigma`` times the largest possible standard error of
    a mean of values in ``[0, max distance]``.
    """
    gen = gen if isinstance(gen, GeneratorMatrix) else GeneratorMatrix(gen)
    i, j = int(round(float(np.ravel(x)[0]))), int(round(float(np.ravel(y)[0])))
    states = np.arange(gen.n, dtype=float)[:, None]
    exact = []
    for t in fit.times:
        P = gen.transition_matrix(t)
        exact.append(w1_finite_lp(EmpiricalMeasure(states, _clean(P[i])), EmpiricalMeasure(states, _clean(P[j])),
                                  gen.space).value)
    exact = np.asarray(exact)
    allow = n_sigma * gen.space.table.max() / (2 * math.sqrt(max(fit.sample_size, 1)))
    ok = bool(np.all(exact <= fit.measured_d1 + allow))
    return {"times": _tolist(fit.times), "exact_d1": _tolist(exact), "measured_d1": _tolist(fit.measured_d1),
            "allowance": allow, "pass": ok}


def _clean(p):
    p = np.clip(p, 0.0, None)
    return p / math.fsum(p)


@dataclass
class MomentReport:
    delta: float
    sup_estimate: float
    per_time_values: np.ndarray
    times: np.ndarray
    confidence_halfwidths: np.ndarray
    ball_radius: float = None
    h3_suspect: bool = False
    worst_start: list = None
    n_starts: int = 1

    @property
    def passed(self):
        return bool(np.all(np.isfinite(self.per_time_values)) and not self.h3_suspect)

    def to_dict(self):
        return {"delta": self.delta, "sup_estimate": self.sup_estimate, "times": _tolist(self.times),
                "per_time_values": _tolist(self.per_time_values),
                "confidence_halfwidths": _tolist(self.confidence_halfwidths), "ball_radius": self.ball_radius,
                "h3_suspect": self.h3_suspect, "worst_start": self.worst_start, "n_starts": self.n_starts,
                "pass": self.passed}


def _moment_curve(model, ens, p):
    r = model.space.distance_to_reference(ens.states)
    vals = r**p
    ests = [mean_estimate(vals[:, k]) for k in range(vals.shape[1])]
    return np.array([e.value for e in ests]), np.array([e.halfwidth for e in ests])


def _divergence_suspect(values, halfwidths):
    """Last value above ten times the first and still rising over the final half."""
    tiny = 1e-12
    if values[-1] <= 10 * max(values[0], tiny):
        return False
    h = len(values) // 2
    return bool(values[-1] - values[h] > halfwidths[-1] + halfwidths[h])


def lyapunov_report(model, mu0, delta, times, n_samples, seed, dt=None, integrator="exponential-euler"):
    """Estimate ``E rho(X_t, x0)^(2+delta)`` along ``times`` from ``mu0``."""
    if not delta > 0:
        raise InvalidInputError("delta must be positive")
    times = np.asarray(times, float)
    ens = simulate(model, mu0, times, n_samples, seed, dt, integrator)
    idx = [ens.time_index(t) for t in times]
    v, hw = _moment_curve(model, ens, 2 + delta)
    v, hw = v[idx], hw[idx]
    return MomentReport(delta, float(np.max(v)), v, times, hw, None, _divergence_suspect(v, hw))


def ball_points(model, x0, R, n_points):
    """Deterministic starting points in the closed ball ``B_R(x0)``.

    The centre, the ``2d`` axis points at distance ``R``, then unscrambled
    Halton points of the cube kept when they fall in the unit ball and scaled
    by ``R``. On discrete spaces the ball is the set of states within ``R``.
    """
    x0 = np.asarray(x0, float).ravel()
    space = model.space
    if space.metric_kind == "discrete-table":
        i0 = int(round(x0[0]))
        inside = np.flatnonzero(space.table[i0] <= R)
        inside = inside[np.argsort(space.table[i0, inside], kind="stable")]
        return inside[:n_points].astype(float)[:, None]
    if R == 0 or n_points <= 1:
        return x0[None, :]
    d = x0.size
    scale = np.ones(d) if space.metric_kind == "euclidean-norm" else 1.0 / np.sqrt(space.weights)
    pts = [x0]
    for i in range(d):
        for s in (1.0, -1.0):
            e = np.zeros(d)
            e[i] = s * R * scale[i]
            pts.append(x0 + e)
    if len(pts) < n_points:
        sampler = qmc.Halton(d, scramble=False)
        while len(pts) < n_points:
            u = 2 * sampler.random(64) - 1
            for v in u[np.sum(u * u, axis=1) <= 1]:
                pts.append(x0 + R * v * scale)
                if len(pts) == n_points:
                    break
    return np.array(pts[:n_points])


def local_moment_report(model, x0, R, delta, T, grid_points_on_ball, n_samples, seed, dt=None,
                        n_times=20, integrator="exponential-euler"):
    """``sup_{t <= T} sup_{x in B_R(x0)} E rho(X_t(x), x0)^(2+delta)`` over a finite start grid."""
    if not delta > 0:
        raise InvalidInputError("delta must be positive")
    starts = ball_points(model, x0, R, grid_points_on_ball)
    times = np.linspace(0.0, T, n_times + 1)[1:]
    best_v = best_hw = None
    worst, worst_val = None, -np.inf
    for s, x in enumerate(starts):
        ens = simulate(model, x, times, n_samples, derive_seed(seed, "ball-start", s), dt, integrator)
        v, hw = _moment_curve(model, ens, 2 + delta)
        if best_v is None:
            best_v, best_hw = v.copy(), hw.copy()
        else:
            upd = v > best_v
            best_v[upd], best_hw[upd] = v[upd], hw[upd]
        if v.max() > worst_val:
            worst_val, worst = float(v.max()), x.tolist()
    all_times = np.concatenate([[0.0], times])
    return MomentReport(delta, float(best_v.max()), best_v, all_times, best_hw, float(R),
                        _divergence_suspect(best_v, best_hw), worst, len(starts))


@dataclass
class ContinuityReport:
    times: np.ndarray
    d1: np.ndarray
    halfwidths: np.ndarray
    exponent: float
    monotone: bool
    passed: bool

    def to_dict(self):
        return {"times": _tolist(self.times), "d1": _tolist(self.d1), "halfwidths": _tolist(self.halfwidths),
                "fitted_exponent": self.exponent, "monotone": self.monotone, "pass": self.passed,
                "note": "Feller property itself is not testable on finite samples; only continuity in t"}


def stochastic_continuity_check(model, x, small_times, n_samples, seed, dt=None, integrator="exponential-euler",
                                min_exponent=0.25):
    """``d1(delta_x P^t, delta_x)`` for small ``t``.

    The distance to a point mass is the mean distance, computed exactly from
    the samples. Passes when the sequence decreases with ``t`` within
    halfwidths and either vanishes like a power ``t^a`` with ``a >=
    min_exponent`` or reaches twice its own Monte Carlo halfwidth.
    """
    t = np.asarray(small_times, float)
    order = np.argsort(-t, kind="stable")
    t = t[order]
    x = np.asarray(x, float).ravel()
    pos = t[t > 0]
    out = np.zeros(t.size)
    hw = np.zeros(t.size)
    if pos.size:
        step = min(dt or model.default_dt, float(pos.min()) / 4)
        ens = simulate(model, x, pos, n_samples, seed, step, integrator)
        for k, tk in enumerate(t):
            if tk == 0:
                continue
            dist = model.space.distance(ens.at(tk), x[None, :])
            est = mean_estimate(dist)
            out[k] = w1_to_point_mass(ens.at(tk), x, model.space).value
            hw[k] = est.halfwidth
    monotone = bool(np.all(np.diff(out) <= hw[:-1] + hw[1:] + 1e-15))
    keep = (t > 0) & (out > 0)
    exponent = loglog_slope(t[keep], out[keep]) if keep.sum() >= 2 else float("nan")
    smallest = out[-1]
    vanishes = (np.isfinite(exponent) and exponent >= min_exponent) or smallest <= 2 * hw[-1] or smallest == 0
    return ContinuityReport(t, out, hw, exponent, monotone, bool(monotone and vanishes))


@dataclass
class CesaroReport:
    times: np.ndarray
    measured: np.ndarray
    bound: np.ndarray
    noise_floor: float
    d1_initial: float
    passed_per_time: np.ndarray
    discrete_N: np.ndarray
    discrete_measured: np.ndarray
    discrete_bound: np.ndarray
    discrete_passed: np.ndarray
    moment_sup: list
    moment_C: float

    @property
    def passed(self):
        return bool(np.all(self.passed_per_time) and np.all(self.discrete_passed))

    def to_dict(self):
        return {"times": _tolist(self.times), "measured": _tolist(self.measured), "bound": _tolist(self.bound),
                "noise_floor": self.noise_floor, "d1_initial": self.d1_initial,
                "pass_per_time": [bool(b) for b in self.passed_per_time],
                "discrete_N": [int(n) for n in self.discrete_N], "discrete_measured": _tolist(self.discrete_measured),
                "discrete_bound": _tolist(self.discrete_bound),
                "discrete_pass": [bool(b) for b in self.discrete_passed],
                "moment_sup": self.moment_sup, "moment_C": self.moment_C, "pass": self.passed}


def cesaro_contraction_check(model, mu, times, n_samples, seed, fit, stationary_samples, dt=None,
                             integrator="exponential-euler", moment_starts=None, n_quadrature=200):
    """Compare the time averages of ``mu P^s`` with the stationary stand-in.

    Continuous average ``mu Q_t``: each path is read at an independent uniform
    time in ``[0, t]`` (on a quadrature grid of ``n_quadrature`` points).
    Discrete average: each path is read at a uniform integer in ``0..N`` (the
    probability-normalised average over ``N+1`` terms, which is dominated by
    the bound with ``N`` in the denominator). The noise floor is the median d1
    between two disjoint random halves of the stationary samples over several
    splits; a time passes when the measured d1 is below the bound plus
    ``CESARO_FLOOR_FACTOR`` floors.

    Also reports ``sup_t E rho(X_t(x), x0)`` for each start ``x`` in
    ``moment_starts`` and the smallest ``C`` with
    ``sup_t <= C (rho(x, x0) + 1)``.
    """
    times = np.asarray(times, float)
    stat = as_batch(stationary_samples, model.dimension)
    exact_cap = ASSIGNMENT_MAX_N if model.space.metric_kind != "discrete-table" else stat.shape[0]
    m = min(n_samples, stat.shape[0] // 2, exact_cap)
    if m < 10:
        raise InvalidInputError("need at least 20 stationary samples")
    ref = stat[:m]
    split_rng = derive_rng(seed, "cesaro-floor")
    splits = []
    for _ in range(CESARO_FLOOR_SPLITS):
        perm = split_rng.permutation(stat.shape[0])
        splits.append(_d1(model, stat[perm[:m]], stat[perm[m:2 * m]], seed).value)
    floor = float(np.median(splits))
    T = float(times.max())
    n_int = np.arange(0, int(math.floor(T)) + 1, dtype=float)
    quad = np.linspace(0.0, T, n_quadrature + 1)
    record = np.union1d(np.union1d(quad, n_int), times)
    ens = simulate(model, mu, record[record > 0], m, derive_seed(seed, "cesaro"), dt, integrator)
    rng = derive_rng(seed, "cesaro-times")
    u = rng.random(m)
    d_init = _d1(model, ens.states[:, 0], ref, seed).value
    measured, bound = [], []
    rec_t = ens.times
    for t in times:
        grid_t = rec_t[rec_t <= t + 1e-12]
        k = np.minimum((u * grid_t.size).astype(int), grid_t.size - 1)
        samp = ens.states[np.arange(m), k]
        measured.append(_d1(model, samp, ref, seed).value)
        bound.append(fit.c_hat / (t * fit.gamma_hat) * -math.expm1(-fit.gamma_hat * t) * d_init)
    measured, bound = np.array(measured), np.array(bound)
    Ns = n_int[n_int >= 1].astype(int)
    dm, db = [], []
    for N in Ns:
        k = np.minimum((u * (N + 1)).astype(int), N)
        idx = np.array([ens.time_index(float(j)) for j in range(N + 1)])
        samp = ens.states[np.arange(m), idx[k]]
        dm.append(_d1(model, samp, ref, seed).value)
        g = fit.gamma_hat
        db.append(fit.c_hat * -math.expm1(-g * (N + 1)) / (N * -math.expm1(-g)) * d_init)
    dm, db = np.array(dm), np.array(db)
    sups, C = [], 0.0
    if moment_starts is not None:
        for s, x in enumerate(as_batch(moment_starts, model.dimension)):
            e = simulate(model, x, times, min(n_samples, 2000), derive_seed(seed, "moment-start", s), dt, integrator)
            r = model.space.distance_to_reference(e.states).mean(axis=0)
            sup = float(r.max())
            rx = float(model.space.distance_to_reference(x[None, :])[0])
            sups.append({"start": x.tolist(), "sup": sup})
            C = max(C, sup / (rx + 1.0))
    allow = CESARO_FLOOR_FACTOR * floor
    return CesaroReport(times, measured, bound, floor, d_init, measured <= bound + allow,
                        Ns, dm, db, dm <= db + allow, sups, C)


@dataclass
class LongRunSample:
    samples: np.ndarray
    t_burn: float
    spacing: float
    n_replicas: int
    per_replica: int

    def to_dict(self):
        return {"t_burn": self.t_burn, "spacing": self.spacing, "n_replicas": self.n_replicas,
                "per_replica": self.per_replica, "n_samples": int(self.samples.shape[0])}


def long_run_sample(model, mu0, fit, d1_initial, tol, n_replicas, per_replica, seed, dt=None,
                    integrator="exponential-euler"):
    """Samples standing in for the invariant law.

    Burn in for ``T_burn = log(c_hat d1_initial / tol) / gamma_hat``, then read
    each replica at spacing ``5 / gamma_hat``; all readings are pooled.
    """
    if tol <= 0:
        raise InvalidInputError("tol must be positive")
    t_burn = max(0.0, math.log(max(fit.c_hat * d1_initial / tol, 1.0)) / fit.gamma_hat)
    spacing = 5.0 / fit.gamma_hat
    times = t_burn + spacing * np.arange(per_replica)
    times = times[times > 0]
    ens = simulate(model, mu0, times, n_replicas, seed, dt, integrator)
    idx = [ens.time_index(t) for t in times]
    if per_replica > len(idx):  # t_burn == 0 adds the start as the first reading
        idx = [0] + idx
    samples = ens.states[:, idx, :].transpose(1, 0, 2).reshape(-1, model.dimension)
    return LongRunSample(samples, t_burn, spacing, n_replicas, per_replica)


@dataclass
class LipschitzDecayReport:
    times: np.ndarray
    quotients: np.ndarray
    fitted_rate: float
    required_rate: float
    passed: bool
    halfwidths: np.ndarray = None

    def to_dict(self):
        return {"times": _tolist(self.times), "quotients": _tolist(self.quotients),
                "halfwidths": None if self.halfwidths is None else _tolist(self.halfwidths),
                "fitted_rate": self.fitted_rate, "required_rate": self.required_rate, "pass": self.passed}


def semigroup_lipschitz_decay(model, psi, pairs, times, fit, n_samples, seed, dt=None,
                              integrator="exponential-euler", slack=0.15):
    """Decay of sampled difference quotients of ``P^t psi``.

    For each pair ``(x, y)`` the two estimates of ``P^t psi`` use common random
    numbers; the largest quotient at each time is fitted by an exponential and
    its rate must be at least ``gamma_hat (1 - slack)``. Quotients within their
    own Monte Carlo halfwidth of zero carry no rate information and are left
    out of the fit, which weights the rest by inverse relative error; with
    fewer than two significant times the check passes.
    """
    times = np.asarray(times, float)
    best = np.zeros(times.size)
    best_hw = np.zeros(times.size)
    for k, (x, y) in enumerate(pairs):
        ex, ey = simulate_pair(model, x, y, times, n_samples, derive_seed(seed, "lip-pair", k), dt, integrator)
        rho = float(model.space.distance(np.asarray(x, float).ravel(), np.asarray(y, float).ravel()))
        for j, t in enumerate(times):
            est = mean_estimate(psi(ex.at(t)) - psi(ey.at(t)))
            q = abs(est.value) / rho
            if q > best[j]:
                best[j], best_hw[j] = q, est.halfwidth / rho
    keep = best > best_hw
    rate = float("inf")
    if keep.sum() >= 2:
        # weight each log-quotient by its inverse relative error
        w = best[keep] / np.maximum(best_hw[keep], 1e-300)
        rate = -float(np.polyfit(times[keep], np.log(best[keep]), 1, w=w)[0])
    need = fit.gamma_hat * (1 - slack)
    return LipschitzDecayReport(times, best, rate, need, bool(rate >= need), best_hw)
