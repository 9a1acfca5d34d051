"""Exact finite-state continuous-time Markov chains.

Dense linear algebra gives the stationary law, the Poisson-equation corrector
and the exact asymptotic variance. Event-driven simulation integrates
additive functionals exactly, so comparisons against these oracles isolate
Monte Carlo error.
"""

from dataclasses import dataclass
import math

import numpy as np
from scipy.linalg import expm, lu_factor, lu_solve
from scipy.sparse.csgraph import connected_components

from .errors import InvalidInputError, NumericalError, ReducibleChainError
from .measure_core import EmpiricalMeasure, MetricSpace
from .processes import ProcessModel, PathEnsemble, simulate_ensemble
from .rng import BLOCK_SIZE

MAX_STATES = 512


class GeneratorMatrix:
    """Validated generator ``Q`` with a distance table on the states.

    The default table is the discrete metric (distance 1 between distinct
    states).
    """

    def __init__(self, Q, state_distances=None):
        Q = np.atleast_2d(np.asarray(Q, float))
        n = Q.shape[0]
        if Q.shape != (n, n):
            raise InvalidInputError("generator must be square")
        if n > MAX_STATES:
            raise InvalidInputError(f"at most {MAX_STATES} states supported")
        if not np.all(np.isfinite(Q)):
            raise InvalidInputError("generator has non-finite entries")
        off = Q[~np.eye(n, dtype=bool)]
        if np.any(off < 0):
            raise InvalidInputError("off-diagonal rates must be nonnegative")
        rows = np.abs(Q.sum(axis=1))
        if np.any(rows > 1e-12 * np.maximum(1.0, np.abs(np.diag(Q)))):
            raise InvalidInputError(f"rows must sum to 0 (max deviation {rows.max():.3g})")
        classes = communicating_classes(Q)
        if len(classes) > 1:
            raise ReducibleChainError(
                f"chain is reducible; communicating classes: {classes}", classes)
        self.Q = Q
        self.n = n
        table = 1.0 - np.eye(n) if state_distances is None else np.asarray(state_distances, float)
        self.space = MetricSpace.discrete(table)

    @property
    def exit_rates(self):
        return -np.diag(self.Q)

    def transition_matrix(self, t):
        return expm(self.Q * t)

    def spectral_gap(self):
        """Smallest nonzero |Re eigenvalue|: the asymptotic decay rate of P^t."""
        ev = np.linalg.eigvals(self.Q)
        re = np.sort(np.abs(ev.real))
        return float(re[1]) if re.size > 1 else float("inf")


def communicating_classes(Q):
    n = Q.shape[0]
    adj = (np.asarray(Q) > 0) & ~np.eye(n, dtype=bool)
    k, labels = connected_components(adj, directed=True, connection="strong")
    return [np.flatnonzero(labels == c).tolist() for c in range(k)]


def stationary(gen):
    """Unique probability vector with ``pi Q = 0``."""
    n = gen.n
    a = gen.Q.T.copy()
    a[-1, :] = 1.0
    b = np.zeros(n)
    b[-1] = 1.0
    pi = np.linalg.solve(a, b)
    pi = np.clip(pi, 0.0, None)
    return pi / math.fsum(pi)


@dataclass
class StationarySolution:
    pi: np.ndarray
    chi: np.ndarray
    v_star: float
    sigma2_exact: float
    residual: float


def solve_poisson(gen, psi):
    """Solve ``-Q chi = psi - v*`` with ``<pi, chi> = 0``.

    ``(-Q + 1 pi^T)`` is nonsingular for an irreducible chain and its solution
    is automatically centred, so one dense solve suffices; one step of
    iterative refinement is applied.
    """
    psi = np.asarray(psi, float).ravel()
    if psi.size != gen.n:
        raise InvalidInputError("psi needs one value per state")
    pi = stationary(gen)
    v_star = math.fsum(pi * psi)
    rhs = psi - v_star
    m = -gen.Q + np.outer(np.ones(gen.n), pi)
    lu = lu_factor(m)
    chi = lu_solve(lu, rhs)
    chi += lu_solve(lu, rhs - m @ chi)
    residual = float(np.max(np.abs(-gen.Q @ chi - rhs))) if gen.n else 0.0
    scale = max(1.0, float(np.max(np.abs(rhs))), float(np.max(np.abs(chi))))
    if not np.isfinite(residual) or residual > 1e-8 * scale:
        cond = np.linalg.cond(m)
        raise NumericalError(f"Poisson solve residual {residual:.3g} (condition estimate {cond:.3g})")
    sol = StationarySolution(pi, chi, v_star, 0.0, residual)
    sol.sigma2_exact = exact_sigma2(sol, psi)
    return sol


def exact_sigma2(sol, psi):
    """``2 <pi, (psi - v*) chi>``."""
    psi = np.asarray(psi, float).ravel()
    val = 2.0 * math.fsum(sol.pi * (psi - sol.v_star) * sol.chi)
    if val < -1e-10:
        raise NumericalError(f"negative asymptotic variance {val:.3g}: upstream solve failed")
    return max(val, 0.0)


def sigma2_carre_du_champ(gen, sol):
    """``E_pi M_1^2 = sum_i pi_i sum_j Q_ij (chi_j - chi_i)^2``, an independent exact route."""
    chi = sol.chi
    jumps = gen.Q * (chi[None, :] - chi[:, None]) ** 2
    np.fill_diagonal(jumps, 0.0)
    return math.fsum(sol.pi * jumps.sum(axis=1))


def semigroup_exact(gen, values, t):
    """``P^t f = e^{tQ} f`` for a state function ``f``."""
    return expm(gen.Q * t) @ np.asarray(values, float)


def load_generator_file(path, distances_path=None):
    """Read a whitespace-separated matrix file (one row per line, ``#`` comments)."""
    Q = np.loadtxt(path, ndmin=2, comments="#")
    table = np.loadtxt(distances_path, ndmin=2, comments="#") if distances_path else None
    return GeneratorMatrix(Q, table)


def random_generator(n, rng, density=0.6, mean_rate=1.0):
    """Random irreducible generator on ``n`` states with mean exit rate ``mean_rate``.

    A directed ring guarantees irreducibility; other edges appear with
    probability ``density``.
    """
    rates = rng.uniform(0.2, 1.0, size=(n, n)) * (rng.random((n, n)) < density)
    for i in range(n):
        rates[i, (i + 1) % n] = rng.uniform(0.2, 1.0)
    np.fill_diagonal(rates, 0.0)
    if n > 1:
        rates *= mean_rate / rates.sum(axis=1).mean()
    np.fill_diagonal(rates, -rates.sum(axis=1))
    return rates


class FiniteStateChain(ProcessModel):
    """Simulable chain; states are embedded as the 1-vectors ``[i]``.

    Simulation is event driven (exponential holding times, embedded jump
    chain). Grids only select the recording times; there is no time step.
    """

    kind = "ctmc"
    dimension = 1
    default_dt = 1.0

    def __init__(self, gen):
        self.gen = gen if isinstance(gen, GeneratorMatrix) else GeneratorMatrix(gen)
        self.space = self.gen.space
        self.n_states = self.gen.n
        rates = self.gen.exit_rates
        jump = np.where(rates[:, None] > 0, self.gen.Q / np.where(rates > 0, rates, 1.0)[:, None], 0.0)
        np.fill_diagonal(jump, 0.0)
        self._cum = np.cumsum(jump, axis=1)
        self._cum[:, -1] = np.where(rates > 0, 1.0, 0.0)
        self._rates = rates
        lam = 2.0 * float(rates.max()) if rates.max() > 0 else 1.0
        self._unif_rate = lam
        self._unif_cum = np.cumsum(np.eye(self.n_states) + self.gen.Q / lam, axis=1)
        self._unif_cum[:, -1] = 1.0

    def describe(self):
        return {"kind": self.kind, "Q": self.gen.Q.tolist(), "distances": self.space.table.tolist()}

    def check_dt(self, dt, integrator):
        pass

    def make_grid(self, T, dt, include=()):
        return np.union1d([0.0, float(T)], np.asarray(list(include), float))

    def normalize_initial(self, initial):
        return as_initial(initial, self.n_states)

    def _states(self, x0):
        s = np.rint(np.asarray(x0, float)[:, 0]).astype(np.int64)
        if np.any(s < 0) or np.any(s >= self.n_states):
            raise InvalidInputError("initial states must be valid state indices")
        return s

    def _psi_tables(self, observables):
        pts = np.arange(self.n_states, dtype=float)[:, None]
        return [np.asarray(psi(pts), float) for psi in observables]

    def _record(self, jt, js, rtimes, tables):
        """Sample piecewise-constant paths at ``rtimes`` and integrate exactly.

        ``jt[p, k]`` is the time of the k-th state ``js[p, k]`` (``jt[:, 0] = 0``),
        padded with +inf.
        """
        nb, K = jt.shape
        # batched searchsorted: offset each row so rows occupy disjoint ranges
        span = float(rtimes[-1]) + 1.0
        finite = np.minimum(jt, span)
        off = np.arange(nb)[:, None] * (2 * span)
        flat = (finite + off).ravel()
        q = (rtimes[None, :] + off).ravel()
        k = (np.searchsorted(flat, q, side="right") - 1).reshape(nb, -1) - np.arange(nb)[:, None] * K
        states = np.take_along_axis(js, k, axis=1)
        ints = []
        if tables:
            hold = np.diff(finite, axis=1)
            for tab in tables:
                vals = tab[js]
                cum = np.zeros((nb, K))
                cum[:, 1:] = np.cumsum(vals[:, :-1] * hold, axis=1)
                base = np.take_along_axis(cum, k, axis=1)
                t_k = np.take_along_axis(finite, k, axis=1)
                ints.append(base + np.take_along_axis(vals, k, axis=1) * (rtimes[None, :] - t_k))
        return states, (np.stack(ints) if ints else np.zeros((0, nb, len(rtimes))))

    def simulate_block(self, x0, grid, record_idx, rng, integrator, observables):
        s = self._states(x0)
        nb = s.size
        rtimes = grid[record_idx]
        T = float(grid[-1])
        t = np.zeros(nb)
        times, states = [t.copy()], [s.copy()]
        while np.any(t <= T):
            e = rng.standard_exponential(BLOCK_SIZE)[:nb]
            u = rng.random(BLOCK_SIZE)[:nb]
            r = self._rates[s]
            with np.errstate(divide="ignore"):
                t = t + np.where(r > 0, e / np.where(r > 0, r, 1.0), np.inf)
            nxt = (u[:, None] >= self._cum[s]).sum(axis=1)
            s = np.where(r > 0, np.minimum(nxt, self.n_states - 1), s)
            times.append(t.copy())
            states.append(s.copy())
        jt = np.stack(times, axis=1)
        js = np.stack(states, axis=1)
        st, ints = self._record(jt, js, rtimes, self._psi_tables(observables))
        return st[:, :, None].astype(float), ints

    def simulate_block_coupled(self, x0, y0, grid, record_idx, rng, integrator, observables):
        """Uniformised coupling: one Poisson clock, shared uniforms at each tick.

        Copies that meet move together afterwards.
        """
        sx = self._states(x0)
        sy = self._states(y0)
        nb = sx.size
        rtimes = grid[record_idx]
        T = float(grid[-1])
        t = np.zeros(nb)
        times, xs, ys = [t.copy()], [sx.copy()], [sy.copy()]
        while np.any(t <= T):
            e = rng.standard_exponential(BLOCK_SIZE)[:nb]
            u = rng.random(BLOCK_SIZE)[:nb]
            t = t + e / self._unif_rate
            sx = np.minimum((u[:, None] >= self._unif_cum[sx]).sum(axis=1), self.n_states - 1)
            sy = np.minimum((u[:, None] >= self._unif_cum[sy]).sum(axis=1), self.n_states - 1)
            times.append(t.copy())
            xs.append(sx.copy())
            ys.append(sy.copy())
        jt = np.stack(times, axis=1)
        tables = self._psi_tables(observables)
        a = self._record(jt, np.stack(xs, axis=1), rtimes, tables)
        b = self._record(jt, np.stack(ys, axis=1), rtimes, tables)
        return (a[0][:, :, None].astype(float), a[1]), (b[0][:, :, None].astype(float), b[1])


def as_initial(initial, n_states):
    """Normalise a CTMC initial spec: a state index, a distribution vector, or a measure."""
    if isinstance(initial, EmpiricalMeasure):
        return initial
    arr = np.asarray(initial, float)
    if arr.ndim == 0:
        return np.array([float(arr)])
    if arr.ndim == 1 and arr.size == n_states and n_states > 1:
        w = np.clip(arr, 0.0, None)
        return EmpiricalMeasure(np.arange(n_states, dtype=float)[:, None], w / math.fsum(w))
    return arr


def simulate_ctmc(chain, initial, T, n_paths, seed, observables=(), record=None):
    """Exact jump-path ensemble on ``[0, T]``.

    ``initial`` is a state index, a probability vector over states, or an
    :class:`EmpiricalMeasure`. ``record`` lists recording times (default
    ``0, 1, ..., floor(T)`` plus ``T``); time 0 is always recorded.
    """
    if T <= 0:
        raise InvalidInputError("T must be positive")
    model = chain if isinstance(chain, FiniteStateChain) else FiniteStateChain(chain)
    if record is None:
        record = np.union1d(np.arange(0.0, math.floor(T) + 1.0), [T])
    record = np.union1d([0.0], np.asarray(record, float))
    grid = record if record[-1] >= T else np.append(record, T)
    return simulate_ensemble(model, as_initial(initial, model.n_states), grid, n_paths, seed,
                             observables=observables, record=record)


__all__ = [
    "GeneratorMatrix", "StationarySolution", "FiniteStateChain", "PathEnsemble",
    "communicating_classes", "stationary", "solve_poisson", "exact_sigma2", "sigma2_carre_du_champ",
    "semigroup_exact", "load_generator_file", "random_generator", "simulate_ctmc", "as_initial",
]
