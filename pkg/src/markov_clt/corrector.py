"""Semigroup averages ``P^t psi`` and the corrector ``chi = int_0^inf P^s psi ds``.

The corrector at a point is estimated from one ensemble started there: the
centred observable is integrated along each path up to a horizon ``T_max``
and averaged. ``T_max`` is the shortest horizon for which the tail bound
``(c/gamma) |psi|_L exp(-gamma T) d1(delta_x, mu*)`` drops below ``tol``.
All evaluation points share random numbers.
"""

from dataclasses import dataclass, field
import json
import math

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .errors import HypothesisFailure, InvalidInputError
from .measure_core import as_batch
from .processes import cumulative_integral, simulate
from .stats import Estimate, mean_estimate
from .wasserstein import w1_to_point_mass

QUAD_RECORDS = 64


def semigroup_average(model, psi, x, t, n_samples, seed, dt=None, integrator="exponential-euler"):
    """Monte Carlo ``P^t psi(x)`` as an :class:`~markov_clt.stats.Estimate` (``.value``, ``.halfwidth``)."""
    if t < 0:
        raise InvalidInputError("t must be nonnegative")
    x = np.asarray(x, float).reshape(1, -1)
    if t == 0:
        return Estimate(float(psi(x)[0]), 0.0, n_samples)
    ens = simulate(model, x, [t], n_samples, seed, dt, integrator)
    return mean_estimate(psi(ens.at(t)))


@dataclass
class CorrectorEstimate:
    eval_points: np.ndarray
    chi_values: np.ndarray
    chi_t_horizon: float
    truncation_bound: np.ndarray
    mc_halfwidths: np.ndarray
    quadrature: dict
    quad_error: np.ndarray
    d1_to_stationary: np.ndarray
    grid_axes: list = None
    discrete_states: int = None
    _interp: object = field(default=None, repr=False)

    @property
    def total_uncertainty(self):
        return self.truncation_bound + self.mc_halfwidths + self.quad_error

    def evaluate(self, points):
        """``chi`` at arbitrary points: table lookup on discrete spaces, multilinear
        interpolation on a rectangular grid otherwise. Points outside the grid
        are an error."""
        if self.discrete_states is not None:
            idx = np.rint(np.asarray(points, float).reshape(-1)).astype(np.int64)
            lookup = np.full(self.discrete_states, np.nan)
            lookup[np.rint(self.eval_points[:, 0]).astype(np.int64)] = self.chi_values
            vals = lookup[idx]
            if np.any(np.isnan(vals)):
                bad = idx[np.isnan(vals)][0]
                raise InvalidInputError(f"corrector not estimated at state {bad}")
            return vals
        if self.grid_axes is None:
            raise InvalidInputError("corrector was not estimated on a rectangular grid")
        pts = as_batch(points, len(self.grid_axes))
        for k, ax in enumerate(self.grid_axes):
            out = (pts[:, k] < ax[0]) | (pts[:, k] > ax[-1])
            if np.any(out):
                bad = pts[np.flatnonzero(out)[0]]
                raise InvalidInputError(f"point {bad.tolist()} lies outside the corrector grid")
        if self._interp is None:
            shape = tuple(len(a) for a in self.grid_axes)
            self._interp = RegularGridInterpolator(self.grid_axes, self.chi_values.reshape(shape),
                                                   method="linear", bounds_error=True)
        return self._interp(pts)

    def __call__(self, points):
        return self.evaluate(points)

    def to_dict(self):
        return {
            "eval_points": self.eval_points.tolist(), "chi_values": self.chi_values.tolist(),
            "chi_t_horizon": self.chi_t_horizon, "truncation_bound": self.truncation_bound.tolist(),
            "mc_halfwidths": self.mc_halfwidths.tolist(), "quadrature": self.quadrature,
            "quad_error": self.quad_error.tolist(), "d1_to_stationary": self.d1_to_stationary.tolist(),
            "grid_axes": None if self.grid_axes is None else [list(map(float, a)) for a in self.grid_axes],
            "discrete_states": self.discrete_states,
        }

    @classmethod
    def from_dict(cls, d):
        axes = d.get("grid_axes")
        return cls(np.asarray(d["eval_points"], float), np.asarray(d["chi_values"], float), d["chi_t_horizon"],
                   np.asarray(d["truncation_bound"], float), np.asarray(d["mc_halfwidths"], float),
                   d["quadrature"], np.asarray(d["quad_error"], float), np.asarray(d["d1_to_stationary"], float),
                   None if axes is None else [np.asarray(a, float) for a in axes], d.get("discrete_states"))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def truncation_horizon(fit, lipschitz, d1, tol):
    """Smallest ``T >= 0`` with ``(c/gamma) L exp(-gamma T) d1 <= tol``."""
    scale = fit.c_hat / fit.gamma_hat * lipschitz * d1
    if scale <= tol:
        return 0.0
    return math.log(scale / tol) / fit.gamma_hat


def grid_points(axes):
    mesh = np.meshgrid(*[np.asarray(a, float) for a in axes], indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def corrector_estimate(model, psi, v_star, eval_points, fit, tol, n_samples, seed, dt=None,
                       v_star_halfwidth=0.0, stationary_samples=None, d1_to_stationary=None,
                       grid_axes=None, integrator="exponential-euler", lipschitz=None):
    """Estimate ``chi(x) = int_0^T_max (P^s psi(x) - v*) ds`` at each evaluation point.

    ``d1(delta_x, mu*)`` in the tail bound comes from ``d1_to_stationary`` (one
    value per point) or from ``stationary_samples``; in the latter case the
    Monte Carlo halfwidth of that mean distance is added to it. When
    ``grid_axes`` is given, the evaluation points are its Cartesian product and
    the estimate can be interpolated.

    Uncertainty per point: ``truncation_bound`` (tail), ``mc_halfwidths``
    (four standard errors plus ``T_max`` times the halfwidth of ``v*``) and a
    Richardson estimate of the trapezoid error (zero for jump chains, whose
    path integrals are exact).
    """
    if fit is None or not fit.gamma_hat > 0:
        raise HypothesisFailure("H1", "a contraction fit with positive rate is required for the corrector")
    L = psi.lipschitz_bound if lipschitz is None else lipschitz
    if L is None:
        raise InvalidInputError("the observable needs a declared Lipschitz bound")
    if tol <= 0:
        raise InvalidInputError("tol must be positive")
    if grid_axes is not None:
        grid_axes = [np.asarray(a, float) for a in grid_axes]
        pts = grid_points(grid_axes)
    else:
        pts = as_batch(eval_points, model.dimension)
    if d1_to_stationary is not None:
        d1 = np.asarray(d1_to_stationary, float).reshape(pts.shape[0])
    elif stationary_samples is not None:
        stat = as_batch(stationary_samples, model.dimension)
        d1 = np.empty(pts.shape[0])
        for k, x in enumerate(pts):
            dist = model.space.distance(stat, x[None, :])
            d1[k] = w1_to_point_mass(stat, x, model.space).value + mean_estimate(dist).halfwidth
    else:
        raise InvalidInputError("need stationary samples or exact d1(delta_x, mu*) values")
    T_max = max(truncation_horizon(fit, L, d, tol) for d in d1)
    trunc = fit.c_hat / fit.gamma_hat * L * np.exp(-fit.gamma_hat * T_max) * d1
    discrete = model.space.metric_kind == "discrete-table"
    chi = np.zeros(pts.shape[0])
    hw = np.zeros(pts.shape[0])
    quad = np.zeros(pts.shape[0])
    step = dt or model.default_dt
    if T_max > 0:
        n_rec = max(2, min(QUAD_RECORDS, int(round(T_max / step))))
        coarse = np.linspace(0.0, T_max, n_rec + 1)[1:]
        if not discrete:
            # place coarse records on the fine grid so both rules see the same paths
            n_fine = int(math.ceil(T_max / step - 1e-9))
            h = T_max / n_fine
            ratio = max(1, n_fine // n_rec)
            coarse = h * ratio * np.arange(1, n_fine // ratio + 1)
            coarse = np.union1d(coarse, [T_max])
            step = h
        for k, x in enumerate(pts):
            ens = simulate(model, x, coarse, n_samples, seed, step, integrator, observables=[psi])
            fine = ens.integrals[psi.name][:, -1]
            est = mean_estimate(fine - v_star * T_max)
            chi[k] = est.value
            hw[k] = est.halfwidth + T_max * v_star_halfwidth
            if not discrete:
                ens.integrals = {}
                rough = cumulative_integral(ens, psi)[:, -1]
                H = float(np.max(np.diff(ens.times)))
                quad[k] = abs(float(np.mean(fine - rough))) * step**2 / max(H**2 - step**2, step**2)
    quadrature = {"rule": "exact" if discrete else "trapezoid", "dt_q": 0.0 if discrete else step,
                  "n_samples": n_samples, "tol": tol}
    return CorrectorEstimate(pts, chi, float(T_max), trunc, hw, quadrature, quad, d1, grid_axes,
                             model.space.n_states if discrete else None)


@dataclass
class LipschitzCheck:
    pairs: list
    bound: float
    passed: bool

    def to_dict(self):
        return {"pairs": self.pairs, "bound": self.bound, "pass": self.passed}


def corrector_lipschitz_check(est, space, psi, fit, lipschitz=None):
    """Every pairwise quotient ``|chi(x) - chi(y)| / rho(x, y)`` must stay below
    ``(c/gamma) |psi|_L`` plus the combined uncertainty of the two values
    divided by ``rho``. Coincident points are skipped."""
    L = psi.lipschitz_bound if lipschitz is None else lipschitz
    bound = fit.c_hat / fit.gamma_hat * L
    pts = est.eval_points
    unc = est.total_uncertainty
    out = []
    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            rho = float(space.distance(pts[i], pts[j]))
            if rho == 0:
                continue
            q = abs(est.chi_values[i] - est.chi_values[j]) / rho
            slack = (unc[i] + unc[j]) / rho
            out.append({"i": i, "j": j, "quotient": q, "allowance": bound + slack, "pass": bool(q <= bound + slack)})
    return LipschitzCheck(out, bound, all(p["pass"] for p in out))


__all__ = [
    "CorrectorEstimate", "LipschitzCheck", "semigroup_average", "corrector_estimate",
    "corrector_lipschitz_check", "truncation_horizon", "grid_points",
]
