"""Simulable Markov models and path ensembles.

Diffusions here all have the form ``dX = [-A X + F(X)] dt + G dB`` with
symmetric ``A`` and diagonal ``G``. Two integrators are offered:

* ``exponential-euler``: the linear part and the stochastic convolution are
  integrated exactly over each step, ``X' = e^{-Ah} X + A^{-1}(1 - e^{-Ah}) F(X)
  + N(0, C(h))``, so the OU process is sampled without discretisation error.
* ``euler-maruyama``: ``X' = X + h(-AX + F(X)) + sqrt(h) G xi``; requires
  ``h * lambda_max(A) <= 1``.

Paths are simulated in fixed blocks of ``rng.BLOCK_SIZE``; block ``b`` draws
from the stream keyed ``(seed, "paths", b)`` and always draws noise for a full
block, so path ``i`` sees the same noise whatever ``n_paths`` or the thread
count.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import hashlib
import io
import json
import math
import os
import struct

import numpy as np
from scipy.linalg import eigh

from .errors import InvalidInputError, NDViolation, UnstableStepError
from .measure_core import EmpiricalMeasure, MetricSpace
from .rng import BLOCK_SIZE, derive_rng

INTEGRATORS = ("exponential-euler", "euler-maruyama")
NOISE_CHUNK = 128

_threads = {"n": 1}


def set_threads(n):
    """Cap worker parallelism for block simulation (results do not depend on it)."""
    _threads["n"] = max(1, int(n or os.cpu_count() or 1))


def _map_blocks(fn, n_blocks):
    if _threads["n"] <= 1 or n_blocks <= 1:
        return [fn(b) for b in range(n_blocks)]
    with ThreadPoolExecutor(max_workers=_threads["n"]) as pool:
        return list(pool.map(fn, range(n_blocks)))


def time_grid(T, dt, include=()):
    """Uniform grid ``0, dt, ..., T`` merged with the extra times ``include``."""
    if T <= 0 or dt <= 0:
        raise InvalidInputError("T and dt must be positive")
    n = int(math.ceil(T / dt - 1e-9))
    base = np.linspace(0.0, n * dt, n + 1)
    base[-1] = T if abs(base[-1] - T) < 1e-9 * max(1.0, T) else base[-1]
    extra = np.asarray(list(include), float)
    grid = np.union1d(base[base <= T + 1e-12], extra)
    # merge points closer than a tiny tolerance so rounding does not create zero steps
    keep = np.concatenate([[True], np.diff(grid) > 1e-9 * max(1.0, T)])
    grid = grid[keep]
    if grid[-1] < T - 1e-12:
        grid = np.append(grid, T)
    return grid


class ProcessModel:
    """Interface shared by every simulable model."""

    kind = "abstract"
    dimension = 1
    default_dt = 1e-3
    space: MetricSpace = None

    def describe(self):
        raise NotImplementedError

    def model_hash(self):
        blob = json.dumps(self.describe(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def check_dt(self, dt, integrator):
        pass

    def make_grid(self, T, dt, include=()):
        """Simulation grid on ``[0, T]`` containing the times ``include``."""
        return time_grid(T, dt, include)

    def normalize_initial(self, initial):
        return initial

    def simulate_block(self, x0, grid, record_idx, rng, integrator, observables):
        raise NotImplementedError

    def simulate_block_coupled(self, x0, y0, grid, record_idx, rng, integrator, observables):
        raise NotImplementedError


class _Propagator:
    """One-step maps for a fixed step size."""

    def __init__(self, model, h, integrator):
        self.h = h
        self.integrator = integrator
        lam, vec = model._eig
        g2 = model.noise_gammas**2
        if model._diagonal:
            if integrator == "exponential-euler":
                self.E = np.exp(-lam * h)
                self.Phi = np.where(lam > 0, -np.expm1(-lam * h) / np.where(lam > 0, lam, 1.0), h)
                var = np.where(lam > 0, g2 * -np.expm1(-2 * lam * h) / np.where(lam > 0, 2 * lam, 1.0), g2 * h)
            else:
                self.E = 1.0 - lam * h
                self.Phi = np.full_like(lam, h)
                var = g2 * h
            self.L = np.sqrt(var)[model._noise_dims]
        else:
            if integrator == "exponential-euler":
                self.E = (vec * np.exp(-lam * h)) @ vec.T
                phi = np.where(lam > 0, -np.expm1(-lam * h) / np.where(lam > 0, lam, 1.0), h)
                self.Phi = (vec * phi) @ vec.T
                s = vec.T @ np.diag(g2) @ vec
                tot = lam[:, None] + lam[None, :]
                kern = np.where(tot > 0, -np.expm1(-tot * h) / np.where(tot > 0, tot, 1.0), h)
                cov = vec @ (s * kern) @ vec.T
                w, u = eigh(cov)
                self.L = u * np.sqrt(np.clip(w, 0.0, None))
            else:
                self.E = np.eye(model.dimension) - h * model.A
                self.Phi = h
                self.L = np.diag(np.sqrt(g2 * h))
        self.diagonal = model._diagonal

    def step(self, X, noise, F):
        if self.diagonal:
            out = X * self.E
            if F is not None:
                out += self.Phi * F(X)
            out[:, self._dims] += noise * self.L
            return out
        out = X @ self.E.T
        if F is not None:
            fx = F(X)
            out += fx * self.Phi if np.isscalar(self.Phi) else fx @ self.Phi.T
        out += noise @ self.L.T
        return out


class LinearDriftSDE(ProcessModel):
    """``dX = [-A X + F(X)] dt + diag(gammas) dB`` on R^d."""

    kind = "linear-drift-sde"

    def __init__(self, A, noise_gammas, F=None, space=None, default_dt=1e-3):
        A = np.atleast_2d(np.asarray(A, float))
        if A.shape[0] != A.shape[1]:
            raise InvalidInputError("A must be square")
        if not np.allclose(A, A.T, atol=1e-12):
            raise InvalidInputError("A must be symmetric")
        self.A = A
        self.dimension = A.shape[0]
        self.noise_gammas = np.broadcast_to(np.asarray(noise_gammas, float), (self.dimension,)).copy()
        self.F = F
        self.default_dt = default_dt
        self.space = space or MetricSpace.euclidean(self.dimension)
        self._diagonal = bool(np.all(A == np.diag(np.diag(A))))
        if self._diagonal:
            self._eig = (np.diag(A).copy(), None)
        else:
            self._eig = eigh(A)
        self._noise_dims = np.flatnonzero(self.noise_gammas != 0) if self._diagonal else np.arange(self.dimension)
        self._props = {}

    @property
    def lambda_max(self):
        return float(np.max(self._eig[0]))

    @property
    def lambda_min(self):
        return float(np.min(self._eig[0]))

    @property
    def noise_channels(self):
        return self._noise_dims.size

    def check_dt(self, dt, integrator):
        if integrator not in INTEGRATORS:
            raise InvalidInputError(f"unknown integrator {integrator!r}")
        if integrator == "euler-maruyama" and dt * self.lambda_max > 1.0 + 1e-12:
            suggested = 1.0 / self.lambda_max
            raise UnstableStepError(
                f"dt={dt} violates dt*lambda_max(A) <= 1 (lambda_max={self.lambda_max:.6g}); "
                f"use dt <= {suggested:.6g} or the exponential-euler integrator", suggested)

    def propagator(self, h, integrator):
        key = (round(h, 15), integrator)
        prop = self._props.get(key)
        if prop is None:
            prop = _Propagator(self, h, integrator)
            prop._dims = self._noise_dims
            self._props[key] = prop
        return prop

    def drift(self, X):
        out = -X @ self.A.T
        if self.F is not None:
            out += self.F(X)
        return out

    def _run(self, starts, grid, record_idx, rng, integrator, observables):
        """Advance one or more synchronously coupled batches over ``grid``."""
        nb = starts[0].shape[0]
        n_rec = len(record_idx)
        record_at = np.full(len(grid), -1)
        record_at[record_idx] = np.arange(n_rec)
        xs = [s.copy() for s in starts]
        rec = [np.empty((nb, n_rec, self.dimension)) for _ in xs]
        ints = [np.zeros((len(observables), nb, n_rec)) for _ in xs]
        acc = [np.zeros((len(observables), nb)) for _ in xs]
        prev = [[psi(x) for psi in observables] for x in xs]
        m = self.noise_channels
        chunk = None
        for n in range(len(grid)):
            r = record_at[n]
            if r >= 0:
                for c in range(len(xs)):
                    rec[c][:, r, :] = xs[c]
                    ints[c][:, :, r] = acc[c]
            if n == len(grid) - 1:
                break
            k = n % NOISE_CHUNK
            if k == 0:
                size = min(NOISE_CHUNK, len(grid) - 1 - n)
                chunk = rng.standard_normal((size, BLOCK_SIZE, m))[:, :nb, :]
            h = grid[n + 1] - grid[n]
            prop = self.propagator(h, integrator)
            for c in range(len(xs)):
                xs[c] = prop.step(xs[c], chunk[k], self.F)
                if observables:
                    cur = [psi(xs[c]) for psi in observables]
                    for j in range(len(observables)):
                        acc[c][j] += 0.5 * h * (prev[c][j] + cur[j])
                    prev[c] = cur
        return rec, ints

    def simulate_block(self, x0, grid, record_idx, rng, integrator, observables):
        rec, ints = self._run([x0], grid, record_idx, rng, integrator, observables)
        return rec[0], ints[0]

    def simulate_block_coupled(self, x0, y0, grid, record_idx, rng, integrator, observables):
        rec, ints = self._run([x0, y0], grid, record_idx, rng, integrator, observables)
        return (rec[0], ints[0]), (rec[1], ints[1])

    def describe(self):
        return {"kind": self.kind, "A": self.A.tolist(), "noise_gammas": self.noise_gammas.tolist()}


class OUProcess(LinearDriftSDE):
    """Ornstein-Uhlenbeck process ``dX = -theta X dt + sigma dB`` in R^d."""

    kind = "ou"

    def __init__(self, theta, noise_sigma, dimension=1, default_dt=1e-3):
        if theta <= 0:
            raise InvalidInputError("theta must be positive")
        if noise_sigma < 0:
            raise InvalidInputError("noise_sigma must be nonnegative")
        self.theta = float(theta)
        self.noise_sigma = float(noise_sigma)
        super().__init__(np.eye(dimension) * theta, noise_sigma, None, default_dt=default_dt)

    def describe(self):
        return {"kind": self.kind, "theta": self.theta, "noise_sigma": self.noise_sigma,
                "dimension": self.dimension}

    # closed forms used by tests and reports
    def mean(self, x, t):
        return np.asarray(x, float) * math.exp(-self.theta * t)

    def variance(self, t):
        return self.noise_sigma**2 * -math.expm1(-2 * self.theta * t) / (2 * self.theta)


NONLINEARITIES = ("zero", "sin", "tanh")


@dataclass(frozen=True)
class Nonlinearity:
    """Coordinatewise drift perturbation with certified constants.

    ``lipschitz`` is L_F in ``|F(y+z) - F(z)| <= L_F |y|`` and ``omega2`` the
    one-sided constant in ``<F(y+z) - F(z), y> <= -omega2 |y|^2``.
    """

    name: str = "zero"
    strength: float = 0.0

    def __post_init__(self):
        if self.name not in NONLINEARITIES:
            raise InvalidInputError(f"unknown nonlinearity {self.name!r}; choose from {NONLINEARITIES}")
        if self.strength < 0:
            raise InvalidInputError("nonlinearity strength must be nonnegative")

    @property
    def lipschitz(self):
        return 0.0 if self.name == "zero" else self.strength

    @property
    def omega2(self):
        # sin: derivative in [-eps, eps] gives <.,y> <= eps|y|^2; -c*tanh is monotone decreasing
        return -self.strength if self.name == "sin" else 0.0

    def __call__(self, X):
        if self.name == "sin":
            return self.strength * np.sin(X)
        if self.name == "tanh":
            return -self.strength * np.tanh(X)
        return np.zeros_like(X)


class DissipativeSDE(LinearDriftSDE):
    """Finite-dimensional dissipative system ``dX = [-AX + F(X)]dt + dW``.

    ``omega = lambda_min(A) + omega2 > 0`` is required; synchronous coupling
    then contracts at rate ``omega``.
    """

    kind = "dissipative"

    def __init__(self, A, nonlinearity=None, noise_gammas=1.0, default_dt=1e-3):
        A = np.atleast_2d(np.asarray(A, float))
        self.nonlinearity = nonlinearity or Nonlinearity()
        super().__init__(A, noise_gammas, self.nonlinearity if self.nonlinearity.name != "zero" else None,
                         default_dt=default_dt)
        if self.lambda_min <= 0:
            raise InvalidInputError("A must be positive definite")
        if self.omega <= 0:
            raise InvalidInputError(
                f"omega = omega1 + omega2 = {self.omega1} + {self.omega2} must be positive")

    @property
    def omega1(self):
        return self.lambda_min

    @property
    def omega2(self):
        return self.nonlinearity.omega2

    @property
    def omega(self):
        return self.omega1 + self.omega2

    @property
    def lipschitz_F(self):
        return self.nonlinearity.lipschitz

    def sampled_constants(self, rng, n_pairs=2000, scale=5.0):
        """Largest sampled |F(y+z)-F(z)|/|y| and <F(y+z)-F(z),y>/|y|^2."""
        y = rng.normal(scale=scale, size=(n_pairs, self.dimension))
        y *= rng.uniform(1e-3, 1.0, size=(n_pairs, 1))
        z = rng.normal(scale=scale, size=(n_pairs, self.dimension))
        dF = self.nonlinearity(y + z) - self.nonlinearity(z)
        ny2 = np.sum(y * y, axis=1)
        lip = np.sqrt(np.sum(dF * dF, axis=1) / ny2)
        one_sided = np.sum(dF * y, axis=1) / ny2
        return float(lip.max()), float(one_sided.max())

    def describe(self):
        return {"kind": self.kind, "A": self.A.tolist(), "noise_gammas": self.noise_gammas.tolist(),
                "nonlinearity": [self.nonlinearity.name, self.nonlinearity.strength]}


def validate_forcing(modes, gammas, cutoff):
    """Check the non-degeneracy condition on a forcing set.

    Clauses: finite and nonempty, nonzero amplitudes, excludes the mean mode,
    within the truncation, symmetric about 0 (with equal amplitudes at +-p),
    generates Z^2, contains two wavevectors of different length.
    """
    modes = [tuple(int(c) for c in p) for p in modes]
    gammas = [float(g) for g in gammas]
    if not modes:
        raise NDViolation("finite", "forcing set is empty")
    if len(gammas) != len(modes):
        raise NDViolation("finite", "one amplitude per forcing mode required")
    if len(set(modes)) != len(modes):
        raise NDViolation("finite", "duplicate forcing modes")
    amp = dict(zip(modes, gammas))
    for p, g in amp.items():
        if p == (0, 0):
            raise NDViolation("mean-mode", "the mean mode (0,0) cannot be forced")
        if g == 0:
            raise NDViolation("finite", f"mode {p} has zero amplitude")
        if max(abs(p[0]), abs(p[1])) > cutoff:
            raise NDViolation("finite", f"mode {p} lies outside the truncation |p|_inf <= {cutoff}")
        q = (-p[0], -p[1])
        if q not in amp:
            raise NDViolation("symmetric", f"mode {p} present but {q} missing")
        if amp[q] != g:
            raise NDViolation("symmetric", f"amplitudes at {p} and {q} differ")
    # lattice spanned by the modes is Z^2 iff the gcd of all 2x2 minors is 1
    g = 0
    for i in range(len(modes)):
        for j in range(i + 1, len(modes)):
            a, b = modes[i], modes[j]
            g = math.gcd(g, abs(a[0] * b[1] - a[1] * b[0]))
    if g != 1:
        raise NDViolation("generates Z^2",
                          f"integer combinations span a sublattice of index {g if g else 'infinity'}")
    if len({p[0] ** 2 + p[1] ** 2 for p in modes}) < 2:
        raise NDViolation("two moduli", "all forcing wavevectors have the same length")
    return amp


class GalerkinVorticity(LinearDriftSDE):
    """Fourier-Galerkin truncation of the stochastically forced 2-D vorticity equation.

    Modes ``p`` with ``1 <= |p|_inf <= K`` on the unit torus. Reality
    (``w(-p) = conj w(p)``) is built in: the state stores ``(Re w(p), Im w(p))``
    for the half set ``p1 > 0 or (p1 == 0 and p2 > 0)``. The metric is the
    L^2 norm, ``|w|^2 = 2 sum_half (a^2 + b^2)``. Viscosity is 1, so mode
    ``p`` relaxes at rate ``4 pi^2 |p|^2``. Each forced half mode gets
    independent noise ``gamma_p dB`` on its real and imaginary parts.

    The velocity is ``u = K(w)`` with Fourier symbol ``i p_perp / (2 pi |p|^2)``,
    ``p_perp = (p2, -p1)``, which is real, divergence free and has rot u = w.
    ``B(w) = -u . grad w`` is evaluated pseudo-spectrally on an ``M x M`` grid
    with ``M >= 3K + 1`` so the Galerkin projection is alias free.
    """

    kind = "vorticity"

    def __init__(self, cutoff, forcing_modes, forcing_gammas, eta=0.1, nonlinear=True, default_dt=2.5e-4):
        if cutoff < 1:
            raise InvalidInputError("mode cutoff must be positive")
        self.cutoff = int(cutoff)
        amp = validate_forcing(forcing_modes, forcing_gammas, self.cutoff)
        self.forcing = amp
        self.eta = float(eta)
        if self.eta <= 0:
            raise InvalidInputError("eta must be positive")
        self.nonlinear = bool(nonlinear)
        K = self.cutoff
        half = [(p1, p2) for p1 in range(-K, K + 1) for p2 in range(-K, K + 1)
                if (p1 > 0 or (p1 == 0 and p2 > 0))]
        self.modes = np.array(half, dtype=np.int64)
        nh = len(half)
        k2 = np.sum(self.modes**2, axis=1).astype(float)
        self.rates = 4 * np.pi**2 * k2
        gam = np.array([amp.get(p, 0.0) for p in half])
        A = np.diag(np.concatenate([self.rates, self.rates]))
        self.n_half = nh
        M = 1
        while M < 3 * K + 1:
            M *= 2
        self.grid_size = M
        # real-FFT layout: store w(p) for p2 >= 0 and conj w(p) at -p for p2 <= 0
        pos = self.modes[:, 1] >= 0
        neg = self.modes[:, 1] <= 0
        self._pos, self._neg = np.flatnonzero(pos), np.flatnonzero(neg)
        self._pos_ix = (self.modes[pos, 0] % M, self.modes[pos, 1])
        self._neg_ix = ((-self.modes[neg, 0]) % M, -self.modes[neg, 1])
        self._read_conj = ~pos
        self._read_ix = (np.where(pos, self.modes[:, 0], -self.modes[:, 0]) % M, np.abs(self.modes[:, 1]))
        p1 = self.modes[:, 0].astype(float)
        p2 = self.modes[:, 1].astype(float)
        self._u1 = 1j * p2 / (2 * np.pi * k2)
        self._u2 = -1j * p1 / (2 * np.pi * k2)
        self._d1 = 2j * np.pi * p1
        self._d2 = 2j * np.pi * p2
        space = MetricSpace(2 * nh, "weighted-norm", np.zeros(2 * nh), weights=np.full(2 * nh, 2.0))
        super().__init__(A, np.concatenate([gam, gam]), self.nonlinearity_B if self.nonlinear else None,
                         space=space, default_dt=default_dt)

    @property
    def trace_Q(self):
        """Itô correction rate of |w|^2: sum over forced modes p of 2 gamma_p^2."""
        return float(sum(2 * g * g for g in self.forcing.values()))

    @property
    def lambda_min_rate(self):
        return float(self.rates.min())

    def _half_spectrum(self, coeff):
        M = self.grid_size
        spec = np.zeros(coeff.shape[:-1] + (M, M // 2 + 1), dtype=complex)
        spec[..., self._pos_ix[0], self._pos_ix[1]] = coeff[..., self._pos]
        spec[..., self._neg_ix[0], self._neg_ix[1]] = np.conj(coeff[..., self._neg])
        return spec

    def to_complex(self, X):
        X = np.atleast_2d(X)
        return X[:, :self.n_half] + 1j * X[:, self.n_half:]

    def from_complex(self, c):
        return np.concatenate([c.real, c.imag], axis=1)

    def nonlinearity_B(self, X):
        M = self.grid_size
        c = self.to_complex(X)
        coeffs = np.stack([c * self._u1, c * self._u2, c * self._d1, c * self._d2])
        u1, u2, w1, w2 = np.fft.irfft2(self._half_spectrum(coeffs), s=(M, M), axes=(-2, -1)) * (M * M)
        bh = np.fft.rfft2(-(u1 * w1 + u2 * w2), axes=(-2, -1)) / (M * M)
        out = bh[:, self._read_ix[0], self._read_ix[1]]
        out[:, self._read_conj] = np.conj(out[:, self._read_conj])
        return self.from_complex(out)

    def energy_pairing(self, X):
        """``<B(w), w>`` in L^2 for each state in the batch."""
        X = np.atleast_2d(X)
        return 2.0 * np.sum(self.nonlinearity_B(X) * X, axis=1)

    def l2_norm_sq(self, X):
        X = np.atleast_2d(X)
        return 2.0 * np.sum(X * X, axis=1)

    def forcing_balance_bound(self, initial_second_moment):
        """Upper bound for sup_t E|w_t|^2 from the energy balance.

        ``d/dt E|w|^2 <= -2 lambda_min E|w|^2 + tr Q`` gives
        ``E|w_t|^2 <= max(E|w_0|^2, trQ / (2 lambda_min))``; the sum of the two
        is returned as the (looser) desk-scale constant.
        """
        return initial_second_moment + self.trace_Q / (2 * self.lambda_min_rate)

    def describe(self):
        return {"kind": self.kind, "cutoff": self.cutoff, "eta": self.eta, "nonlinear": self.nonlinear,
                "forcing": sorted([list(p) + [g] for p, g in self.forcing.items()])}


@dataclass(eq=False)
class PathEnsemble:
    """States of ``n_paths`` independent paths at the recorded times.

    ``integrals[name]`` holds the cumulative time integral of the observable
    ``name`` at each recorded time (trapezoid on the step grid for diffusions,
    exact for jump chains).
    """

    times: np.ndarray
    states: np.ndarray
    seed: int
    integrator: str
    model_hash: str
    integrals: dict = field(default_factory=dict)
    model: object = None

    @property
    def n_paths(self):
        return self.states.shape[0]

    @property
    def dimension(self):
        return self.states.shape[2]

    def at(self, t):
        return self.states[:, self.time_index(t), :]

    def time_index(self, t):
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > 1e-9 * max(1.0, abs(t)):
            raise InvalidInputError(f"time {t} is not a recorded time")
        return i


def _initial_block(initial, seed, b, nb, dimension, start):
    if isinstance(initial, EmpiricalMeasure):
        rng = derive_rng(seed, "initial", b)
        idx = rng.choice(len(initial), size=BLOCK_SIZE, p=initial.weights)[:nb]
        return initial.atoms[idx].copy()
    arr = np.asarray(initial, float)
    if arr.ndim == 2 and arr.shape[0] > 1:
        return arr[start:start + nb].copy()
    return np.broadcast_to(arr.reshape(1, dimension), (nb, dimension)).copy()


def _check_initial(initial, n_paths, dimension):
    if isinstance(initial, EmpiricalMeasure):
        if initial.dimension != dimension:
            raise InvalidInputError("initial measure has the wrong dimension")
        return
    arr = np.asarray(initial, float)
    if arr.ndim == 2 and arr.shape[0] > 1:
        if arr.shape != (n_paths, dimension):
            raise InvalidInputError(f"explicit initial states must have shape {(n_paths, dimension)}")
    elif arr.size != dimension:
        raise InvalidInputError(f"initial point must have dimension {dimension}")
    if not np.all(np.isfinite(arr if not isinstance(initial, EmpiricalMeasure) else initial.atoms)):
        raise InvalidInputError("non-finite initial state")


def _record_indices(grid, record):
    if record is None:
        return np.arange(len(grid))
    record = np.atleast_1d(np.asarray(record, float))
    idx = np.searchsorted(grid, record - 1e-9)
    idx = np.clip(idx, 0, len(grid) - 1)
    if np.any(np.abs(grid[idx] - record) > 1e-9 * np.maximum(1.0, np.abs(record))):
        raise InvalidInputError("record times must be points of the simulation grid")
    if np.any(np.diff(idx) <= 0):
        raise InvalidInputError("record times must be strictly increasing")
    return idx


def _validate_grid(grid):
    grid = np.asarray(grid, float).ravel()
    if grid.size < 1 or grid[0] != 0.0:
        raise InvalidInputError("time grid must start at 0")
    if np.any(np.diff(grid) <= 0):
        raise InvalidInputError("time grid must be strictly increasing")
    if not np.all(np.isfinite(grid)):
        raise InvalidInputError("time grid must be finite")
    return grid


def simulate_ensemble(model, initial, grid, n_paths, seed, integrator="exponential-euler",
                      observables=(), record=None):
    """Simulate ``n_paths`` independent paths of ``model`` on ``grid``.

    ``initial`` is a point, an :class:`EmpiricalMeasure` (sampled per path), or
    an explicit ``(n_paths, d)`` array of start states. ``record`` selects the
    grid times to store (default: all). Cumulative integrals of ``observables``
    are accumulated on the full grid.
    """
    grid = _validate_grid(grid)
    if n_paths < 1:
        raise InvalidInputError("n_paths must be positive")
    model.check_dt(float(np.max(np.diff(grid))) if grid.size > 1 else 0.0, integrator)
    _check_initial(initial, n_paths, model.dimension)
    ridx = _record_indices(grid, record)
    n_blocks = -(-n_paths // BLOCK_SIZE)

    def run(b):
        start = b * BLOCK_SIZE
        nb = min(BLOCK_SIZE, n_paths - start)
        x0 = _initial_block(initial, seed, b, nb, model.dimension, start)
        rng = derive_rng(seed, "paths", b)
        return model.simulate_block(x0, grid, ridx, rng, integrator, list(observables))

    parts = _map_blocks(run, n_blocks)
    states = np.concatenate([p[0] for p in parts], axis=0)
    ints = np.concatenate([p[1] for p in parts], axis=1) if observables else None
    integrals = {psi.name: ints[j] for j, psi in enumerate(observables)} if observables else {}
    if not np.all(np.isfinite(states)):
        raise InvalidInputError("simulation produced non-finite states; reduce dt")
    return PathEnsemble(grid[ridx].copy(), states, seed, integrator, model.model_hash(), integrals, model)


def coupled_pair_simulate(model, x, y, grid, n_paths, seed, integrator="exponential-euler",
                          observables=(), record=None):
    """Simulate paths from ``x`` and ``y`` driven by identical noise.

    Returns two ensembles; path ``i`` of both uses the same random numbers.
    """
    grid = _validate_grid(grid)
    model.check_dt(float(np.max(np.diff(grid))) if grid.size > 1 else 0.0, integrator)
    _check_initial(x, n_paths, model.dimension)
    _check_initial(y, n_paths, model.dimension)
    ridx = _record_indices(grid, record)
    n_blocks = -(-n_paths // BLOCK_SIZE)

    def run(b):
        start = b * BLOCK_SIZE
        nb = min(BLOCK_SIZE, n_paths - start)
        # both initial laws are sampled with the same stream: a coupling of the initial data too
        x0 = _initial_block(x, seed, b, nb, model.dimension, start)
        y0 = _initial_block(y, seed, b, nb, model.dimension, start)
        rng = derive_rng(seed, "paths", b)
        return model.simulate_block_coupled(x0, y0, grid, ridx, rng, integrator, list(observables))

    parts = _map_blocks(run, n_blocks)
    out = []
    for c in range(2):
        states = np.concatenate([p[c][0] for p in parts], axis=0)
        integrals = {}
        if observables:
            ints = np.concatenate([p[c][1] for p in parts], axis=1)
            integrals = {psi.name: ints[j] for j, psi in enumerate(observables)}
        out.append(PathEnsemble(grid[ridx].copy(), states, seed, integrator, model.model_hash(), integrals, model))
    return out[0], out[1]


def simulate(model, initial, record_times, n_paths, seed, dt=None, integrator="exponential-euler",
             observables=()):
    """Simulate on the model's own grid and record at ``record_times`` (0 is always included)."""
    record = np.union1d([0.0], np.asarray(record_times, float))
    grid = model.make_grid(float(record[-1]) if record[-1] > 0 else 1.0, dt or model.default_dt, record)
    return simulate_ensemble(model, model.normalize_initial(initial), grid, n_paths, seed, integrator,
                             observables, record)


def simulate_pair(model, x, y, record_times, n_paths, seed, dt=None, integrator="exponential-euler",
                  observables=()):
    """Coupled counterpart of :func:`simulate`."""
    record = np.union1d([0.0], np.asarray(record_times, float))
    grid = model.make_grid(float(record[-1]) if record[-1] > 0 else 1.0, dt or model.default_dt, record)
    return coupled_pair_simulate(model, model.normalize_initial(x), model.normalize_initial(y), grid,
                                 n_paths, seed, integrator, observables, record)


def cumulative_integral(ensemble, psi):
    """Per-path cumulative integral of ``psi`` at each recorded time.

    Uses the integral accumulated during simulation when one is registered
    under ``psi.name``; otherwise the trapezoidal rule on the recorded times.
    """
    if psi.name in ensemble.integrals:
        return ensemble.integrals[psi.name]
    n, nt, d = ensemble.states.shape
    vals = psi(ensemble.states.reshape(n * nt, d)).reshape(n, nt)
    out = np.zeros((n, nt))
    if nt > 1:
        h = np.diff(ensemble.times)
        out[:, 1:] = np.cumsum(0.5 * h * (vals[:, 1:] + vals[:, :-1]), axis=1)
    return out


def time_integral_observable(ensemble, psi):
    """Per-path ``int_0^T psi(X_s) ds`` over the ensemble's time span."""
    return cumulative_integral(ensemble, psi)[:, -1].copy()


# ensemble cache ------------------------------------------------------------

_MAGIC = b"MCLTENS\x00"
_VERSION = 1


def save_ensemble(ensemble, path):
    """Write the documented binary layout (little endian).

    header: magic[8] version:u32 model_hash:ascii[64] n_paths:u64 n_times:u64
    dim:u64 seed:u64 integrator_len:u32 integrator:utf8; then times:f64[n_times];
    states:f64[n_paths*n_times*dim] path-major; n_integrals:u32; per integral
    name_len:u32 name:utf8 values:f64[n_paths*n_times].
    """
    n, nt, d = ensemble.states.shape
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<I", _VERSION))
    buf.write(ensemble.model_hash.encode("ascii").ljust(64, b"\x00"))
    buf.write(struct.pack("<QQQQ", n, nt, d, int(ensemble.seed)))
    integ = ensemble.integrator.encode("utf-8")
    buf.write(struct.pack("<I", len(integ)))
    buf.write(integ)
    buf.write(np.ascontiguousarray(ensemble.times, "<f8").tobytes())
    buf.write(np.ascontiguousarray(ensemble.states, "<f8").tobytes())
    buf.write(struct.pack("<I", len(ensemble.integrals)))
    for name in sorted(ensemble.integrals):
        enc = name.encode("utf-8")
        buf.write(struct.pack("<I", len(enc)))
        buf.write(enc)
        buf.write(np.ascontiguousarray(ensemble.integrals[name], "<f8").tobytes())
    _atomic_write_bytes(path, buf.getvalue())


def load_ensemble(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != _MAGIC:
        raise InvalidInputError(f"{path} is not an ensemble cache file")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != _VERSION:
        raise InvalidInputError(f"unsupported ensemble cache version {version}")
    pos = 12
    model_hash = data[pos:pos + 64].rstrip(b"\x00").decode("ascii")
    pos += 64
    n, nt, d, seed = struct.unpack_from("<QQQQ", data, pos)
    pos += 32
    (ilen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    integrator = data[pos:pos + ilen].decode("utf-8")
    pos += ilen
    times = np.frombuffer(data, "<f8", nt, pos).copy()
    pos += 8 * nt
    states = np.frombuffer(data, "<f8", n * nt * d, pos).reshape(n, nt, d).copy()
    pos += 8 * n * nt * d
    (k,) = struct.unpack_from("<I", data, pos)
    pos += 4
    integrals = {}
    for _ in range(k):
        (ln,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + ln].decode("utf-8")
        pos += ln
        integrals[name] = np.frombuffer(data, "<f8", n * nt, pos).reshape(n, nt).copy()
        pos += 8 * n * nt
    return PathEnsemble(times, states, seed, integrator, model_hash, integrals)


def _atomic_write_bytes(path, payload):
    path = os.fspath(path)
    tmp = f"{path}.tmp-{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)
