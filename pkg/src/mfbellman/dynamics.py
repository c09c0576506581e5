"""Euler-Maruyama particle engine for the coupled mean-field / individual system.

The mean-field population X_bar (coefficients b1, sigma1) is simulated with M
particles; at every step its joint empirical law with the realised controls
u2 is the law argument of both populations. The individual population X
(coefficients b2, sigma2, control u1) reads that law flow and never feeds
back into it.

Times live on a fixed lattice ``origin + k*h``. Brownian increments come
from per-role banks that cover the whole lattice, so a run restarted at an
intermediate lattice time consumes exactly the columns the long run used.
"""

import csv
import hashlib
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .coefficients import CoefficientSet, assumption_probe  # noqa: F401  (re-exported)
from .controls import ControlError
from .measures import EmpiricalMeasure, JointEmpiricalMeasure, exp_weight, in_O_N

_ALIGN_TOL = 1e-9


class SimulationError(RuntimeError):
    pass


class GridError(ValueError):
    pass


def derive_seed(master, label):
    """Sub-seed for a named role: blake2b of "master:label", first 8 bytes."""
    digest = hashlib.blake2b(f"{int(master)}:{label}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass(frozen=True)
class SimulationGrid:
    """Steps ``start_index .. start_index + steps`` of the lattice ``origin + k*h``."""

    h: float
    start_index: int
    steps: int
    origin: float = 0.0

    def __post_init__(self):
        if self.steps < 0 or self.start_index < 0:
            raise GridError("steps and start index must be non-negative")
        if not self.h > 0:
            raise GridError("step size must be positive")

    @classmethod
    def span(cls, t_start, t_end, steps):
        if t_end < t_start:
            raise GridError(f"t_end {t_end} < t_start {t_start}")
        if t_end == t_start:
            return cls(1.0, 0, 0, float(t_start))
        if steps < 1:
            raise GridError("a non-degenerate grid needs at least one step")
        return cls((t_end - t_start) / steps, 0, int(steps), float(t_start))

    def time(self, k):
        """Lattice time of step ``k`` of this grid (k = 0 is t_start)."""
        return self.origin + (self.start_index + k) * self.h

    @property
    def t_start(self):
        return self.time(0)

    @property
    def t_end(self):
        return self.time(self.steps)

    @property
    def times(self):
        return self.origin + (self.start_index + np.arange(self.steps + 1)) * self.h

    def index_of(self, t):
        """Step of this grid that sits at time ``t``; raises if t is off-lattice."""
        k = (t - self.origin) / self.h - self.start_index
        kr = int(round(k))
        if abs(k - kr) > _ALIGN_TOL or not 0 <= kr <= self.steps:
            raise GridError(f"time {t!r} is not a grid point of [{self.t_start}, {self.t_end}] with h = {self.h}")
        return kr

    def sub(self, k0, k1=None):
        k1 = self.steps if k1 is None else k1
        if not 0 <= k0 <= k1 <= self.steps:
            raise GridError(f"sub-grid [{k0}, {k1}] outside [0, {self.steps}]")
        return SimulationGrid(self.h, self.start_index + k0, k1 - k0, self.origin)

    def from_time(self, t, t_end=None):
        k0 = self.index_of(t)
        k1 = None if t_end is None else self.index_of(t_end)
        return self.sub(k0, k1)

    def refined(self):
        return SimulationGrid(self.h / 2, 2 * self.start_index, 2 * self.steps, self.origin)


@dataclass(frozen=True)
class BrownianPaths:
    seed: int
    increments: np.ndarray
    h: float

    @classmethod
    def generate(cls, seed, particles, steps, h):
        rng = np.random.default_rng(seed)
        dB = rng.standard_normal((particles, steps)) * math.sqrt(h)
        dB.setflags(write=False)
        return cls(int(seed), dB, float(h))

    @property
    def shape(self):
        return self.increments.shape

    def columns(self, k0, k1):
        return self.increments[:, k0:k1]

    def rows(self, n):
        if n > self.increments.shape[0]:
            raise SimulationError(f"bank holds {self.increments.shape[0]} paths, {n} requested")
        return BrownianPaths(self.seed, self.increments[:n], self.h)

    def coarsen(self):
        """Same paths on a grid with twice the step: sums of consecutive pairs."""
        P, S = self.increments.shape
        if S % 2:
            raise SimulationError("coarsening needs an even number of steps")
        dB = self.increments.reshape(P, S // 2, 2).sum(axis=2)
        dB.setflags(write=False)
        return BrownianPaths(self.seed, dB, 2 * self.h)


@dataclass
class SimConfig:
    """Lattice [0, T] with ``steps`` steps, particle counts and the master seed.

    ``M`` mean-field particles, ``K`` individual particles per initial state.
    """

    T: float = 1.0
    steps: int = 32
    M: int = 2000
    K: int = 500
    seed: int = 0
    backend: str = None
    _banks: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if not (self.T > 0 and self.steps >= 1 and self.M >= 1 and self.K >= 1):
            raise GridError("T, steps, M and K must be positive")

    @property
    def h(self):
        return self.T / self.steps

    @property
    def full_grid(self):
        return SimulationGrid(self.h, 0, self.steps, 0.0)

    def grid(self, t, t_end=None):
        return self.full_grid.from_time(t, self.T if t_end is None else t_end)

    def bank(self, label, particles):
        """Brownian bank of a role; rows are prefix-stable in ``particles``."""
        key = label
        cached = self._banks.get(key)
        if cached is None or cached.shape[0] < particles:
            cached = BrownianPaths.generate(derive_seed(self.seed, label), max(particles, 1), self.steps, self.h)
            self._banks[key] = cached
        return cached.rows(particles)

    def increments(self, label, particles, grid):
        return self.bank(label, particles).columns(grid.start_index, grid.start_index + grid.steps)

    def with_seed(self, seed):
        return SimConfig(self.T, self.steps, self.M, self.K, seed, self.backend)

    def refined(self):
        return SimConfig(self.T, self.steps * 2, self.M, self.K, self.seed, self.backend)

    def fingerprint(self):
        return f"T={self.T!r};steps={self.steps};M={self.M};K={self.K};seed={self.seed}"


@dataclass
class ControlHistory:
    """What a restarted control needs: its anchor time, anchor states and past increments."""

    anchor_time: float
    x_anchor: np.ndarray
    dB: np.ndarray


@dataclass
class EnsembleTrajectory:
    grid: SimulationGrid
    meanfield_states: np.ndarray
    meanfield_controls: np.ndarray
    individual_states: np.ndarray
    individual_controls: np.ndarray
    u_bounds: tuple = (-math.inf, math.inf)

    def law(self, k):
        """Joint empirical law of (X_bar, u2) at step k (k < steps)."""
        return JointEmpiricalMeasure(self.meanfield_states[:, k], self.meanfield_controls[:, k],
                                     u_bounds=self.u_bounds)

    def meanfield_law(self, k):
        return EmpiricalMeasure(self.meanfield_states[:, k])

    def individual_law(self, k):
        return EmpiricalMeasure(self.individual_states[:, k])

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "time", "population", "particle", "state", "control"])
        times = self.grid.times
        for pop, X, U in (("mf", self.meanfield_states, self.meanfield_controls),
                          ("ind", self.individual_states, self.individual_controls)):
            for i in range(X.shape[0]):
                for k in range(X.shape[1]):
                    ctrl = repr(float(U[i, k])) if k < U.shape[1] else ""
                    w.writerow([k, repr(float(times[k])), pop, i, repr(float(X[i, k])), ctrl])
        return buf.getvalue()


def realize_controls(law, grid, x_anchor, dB, history=None, role="u"):
    """Control values on ``grid`` for every path, validated against U."""
    P = dB.shape[0]
    if history is None:
        vals = law.realize(grid.t_start, grid.h, 0, x_anchor, dB)
    else:
        full = np.concatenate([history.dB, dB], axis=1)
        vals = law.realize(history.anchor_time, grid.h, history.dB.shape[1], history.x_anchor, full)
    vals = np.asarray(vals, dtype=float).reshape(P, grid.steps)
    lo, hi = law.u_bounds
    bad = np.argwhere((vals < lo) | (vals > hi) | ~np.isfinite(vals))
    if bad.size:
        i, k = bad[0]
        raise ControlError(f"{role} value {vals[i, k]!r} outside U = [{lo}, {hi}] at step {k}, particle {i}")
    return vals


def _check_finite(X, what):
    bad = np.argwhere(~np.isfinite(X))
    if bad.size:
        i, k = bad[0]
        raise SimulationError(f"{what} state blew up at step {k}, particle {i}")


def run_meanfield(coeffs, zeta, u2, grid, dB, backend=None):
    """Mean-field ensemble; returns (states (M, steps+1), per-step joint laws or features)."""
    x0 = np.asarray(zeta, dtype=float)
    if coeffs.sine_params is not None:
        X, feats = kernels.run_meanfield(coeffs.sine_params, grid.origin, grid.h, grid.start_index, x0, u2, dB,
                                         backend=backend)
        _check_finite(X, "mean-field")
        return X, feats
    M, S = u2.shape
    X = np.empty((M, S + 1))
    X[:, 0] = x0
    laws = []
    for k in range(S):
        t = grid.time(k)
        g = JointEmpiricalMeasure(X[:, k], u2[:, k], u_bounds=coeffs.u_bounds)
        laws.append(g)
        X[:, k + 1] = X[:, k] + coeffs.b1(t, X[:, k], u2[:, k], g) * grid.h + coeffs.sigma1(t, X[:, k], u2[:, k], g) * dB[:, k]
        _check_finite(X[:, k + 1:k + 2], "mean-field")
    return X, laws


def run_individual(coeffs, x0, u1, grid, dB, flow, backend=None):
    x0 = np.asarray(x0, dtype=float)
    if coeffs.sine_params is not None:
        X = kernels.run_individual(coeffs.sine_params, grid.origin, grid.h, grid.start_index, x0, u1, dB, flow,
                                   backend=backend)
        _check_finite(X, "individual")
        return X
    K, S = u1.shape
    X = np.empty((K, S + 1))
    X[:, 0] = x0
    for k in range(S):
        t = grid.time(k)
        g = flow[k]
        X[:, k + 1] = X[:, k] + coeffs.b2(t, X[:, k], u1[:, k], g) * grid.h + coeffs.sigma2(t, X[:, k], u1[:, k], g) * dB[:, k]
    _check_finite(X, "individual")
    return X


def simulate_pair(coeffs, zeta, theta, controls, grid, dB_mf, dB_ind, history=None, backend=None):
    """Joint Euler-Maruyama run of both populations on ``grid``.

    ``controls`` is (u1, u2). ``history`` optionally maps "mf"/"ind" to a
    ControlHistory so that controls anchored earlier continue unchanged.
    """
    u1, u2 = controls
    zeta = np.asarray(zeta, dtype=float).ravel()
    theta = np.asarray(theta, dtype=float).ravel()
    if zeta.size < 1 or theta.size < 1:
        raise SimulationError("both populations need at least one particle")
    dB_mf = np.asarray(dB_mf, dtype=float)
    dB_ind = np.asarray(dB_ind, dtype=float)
    if dB_mf.shape != (zeta.size, grid.steps) or dB_ind.shape != (theta.size, grid.steps):
        raise SimulationError(f"increment arrays {dB_mf.shape}, {dB_ind.shape} do not match "
                              f"({zeta.size}|{theta.size}, {grid.steps})")
    history = history or {}
    v2 = realize_controls(u2, grid, zeta, dB_mf, history.get("mf"), "u2")
    v1 = realize_controls(u1, grid, theta, dB_ind, history.get("ind"), "u1")
    Xmf, flow = run_meanfield(coeffs, zeta, v2, grid, dB_mf, backend)
    Xind = run_individual(coeffs, theta, v1, grid, dB_ind, flow, backend)
    return EnsembleTrajectory(grid, Xmf, v2, Xind, v1, coeffs.u_bounds)


def simulate(coeffs, zeta, theta, controls, cfg, t, t_end=None):
    """``simulate_pair`` on the config lattice from ``t`` using the "mf"/"ind" banks."""
    grid = cfg.grid(t, t_end)
    zeta = np.asarray(zeta, dtype=float).ravel()
    theta = np.asarray(theta, dtype=float).ravel()
    return simulate_pair(coeffs, zeta, theta, controls, grid,
                         cfg.increments("mf", zeta.size, grid), cfg.increments("ind", theta.size, grid),
                         backend=cfg.backend)


def flow_check(coeffs, zeta, theta, controls, cfg, t, delta, restart_seed=None):
    """Max terminal discrepancy between a run on [t, T] and its restart at t + delta.

    The restart reuses the intermediate states, the control histories and
    the same increment columns, so the discrepancy is exactly 0. With
    ``restart_seed`` the restart draws fresh increments instead (negative
    control).
    """
    full = simulate(coeffs, zeta, theta, controls, cfg, t)
    grid = full.grid
    kd = grid.index_of(t + delta)
    g2 = grid.sub(kd)
    zeta = np.asarray(zeta, dtype=float).ravel()
    theta = np.asarray(theta, dtype=float).ravel()
    dB_mf = cfg.increments("mf", zeta.size, grid)
    dB_ind = cfg.increments("ind", theta.size, grid)
    hist = {
        "mf": ControlHistory(grid.t_start, zeta, dB_mf[:, :kd]),
        "ind": ControlHistory(grid.t_start, theta, dB_ind[:, :kd]),
    }
    if restart_seed is None:
        r_mf, r_ind = dB_mf[:, kd:], dB_ind[:, kd:]
    else:
        other = cfg.with_seed(restart_seed)
        r_mf = other.increments("mf", zeta.size, grid)[:, kd:]
        r_ind = other.increments("ind", theta.size, grid)[:, kd:]
    rest = simulate_pair(coeffs, full.meanfield_states[:, kd], full.individual_states[:, kd], controls, g2,
                         r_mf, r_ind, history=hist, backend=cfg.backend)
    d_mf = np.max(np.abs(full.meanfield_states[:, -1] - rest.meanfield_states[:, -1]))
    d_ind = np.max(np.abs(full.individual_states[:, -1] - rest.individual_states[:, -1]))
    return float(max(d_mf, d_ind))


def _paired_ratios(coeffs, zeta, zeta_p, theta, theta_p, controls, grid, dB_mf, dB_ind, backend):
    a = simulate_pair(coeffs, zeta, theta, controls, grid, dB_mf, dB_ind, backend=backend)
    b = simulate_pair(coeffs, zeta_p, theta_p, controls, grid, dB_mf, dB_ind, backend=backend)
    num_mf = float(np.mean(np.max((a.meanfield_states - b.meanfield_states) ** 2, axis=1)))
    num_ind = float(np.mean(np.max((a.individual_states - b.individual_states) ** 2, axis=1)))
    dz = float(np.mean((zeta - zeta_p) ** 2))
    dx = float(np.mean((theta - theta_p) ** 2))
    return num_ind, num_mf, dx, dz


def stability_check(coeffs, zeta, zeta_prime, x, x_prime, controls, cfg, t=0.0, max_change=0.2):
    """Lipschitz ratios of the solution map at step h and h/2.

    Individual ratio E[sup|dX|^2] / (|dx|^2 + E|dzeta|^2), mean-field ratio
    E[sup|dX_bar|^2] / E|dzeta|^2. Both runs of a pair share increments;
    the h-run uses pairwise sums of the h/2 increments.
    """
    zeta = np.asarray(zeta, dtype=float).ravel()
    zeta_p = np.asarray(zeta_prime, dtype=float).ravel()
    if zeta.shape != zeta_p.shape:
        raise SimulationError("zeta and zeta_prime need the same number of samples")
    K = cfg.K
    theta = np.broadcast_to(np.asarray(x, dtype=float), (K,)).copy()
    theta_p = np.broadcast_to(np.asarray(x_prime, dtype=float), (K,)).copy()
    fine_cfg = cfg.refined()
    fine_grid = fine_cfg.grid(t)
    fine_mf = fine_cfg.bank("mf", zeta.size)
    fine_ind = fine_cfg.bank("ind", K)
    coarse_grid = cfg.grid(t)
    coarse_mf = fine_mf.coarsen().columns(coarse_grid.start_index, coarse_grid.start_index + coarse_grid.steps)
    coarse_ind = fine_ind.coarsen().columns(coarse_grid.start_index, coarse_grid.start_index + coarse_grid.steps)
    fmf = fine_mf.columns(fine_grid.start_index, fine_grid.start_index + fine_grid.steps)
    find = fine_ind.columns(fine_grid.start_index, fine_grid.start_index + fine_grid.steps)
    out = {"h": cfg.h, "h_half": fine_cfg.h}
    for tag, grid, dmf, dind in (("h", coarse_grid, coarse_mf, coarse_ind), ("h_half", fine_grid, fmf, find)):
        num_ind, num_mf, dx, dz = _paired_ratios(coeffs, zeta, zeta_p, theta, theta_p, controls, grid, dmf, dind,
                                                 cfg.backend)
        den_ind = dx + dz
        out[tag] = {
            "numerator_individual": num_ind,
            "numerator_meanfield": num_mf,
            "ratio_individual": num_ind / den_ind if den_ind > 0 else (0.0 if num_ind == 0 else math.inf),
            "ratio_meanfield": num_mf / dz if dz > 0 else (0.0 if num_mf == 0 else math.inf),
        }
    changes = {}
    for key in ("ratio_individual", "ratio_meanfield"):
        a, b = out["h"][key], out["h_half"][key]
        changes[key] = 0.0 if a == b else abs(b - a) / max(abs(a), 1e-300)
    out["relative_change"] = changes
    out["finite"] = all(math.isfinite(out[g][k]) for g in ("h", "h_half") for k in changes)
    out["pass"] = out["finite"] and all(c < max_change for c in changes.values())
    return out


def invariance_check(coeffs, mu1, mu2, controls, cfg, params, t=0.0, tol=0.0):
    """Exponential-moment margins of both populations along the grid.

    ``mu1`` seeds the individual population, ``mu2`` the mean-field one.
    Per grid time s: bound N e^{K* s}, moment <law_s, e_delta>, its MC
    standard error. ``margin`` is min(bound - moment - 3 SE); the run passes
    iff margin >= -tol. ``min_excess_over_se`` is min((bound - moment) / SE)
    over points with SE > 0, for the -3 SE reading of the same check.
    """
    if not in_O_N(t, mu1, mu2, params):
        raise SimulationError(f"initial pair is outside O_N at t = {t} for N = {params.n_level}")
    traj = simulate(coeffs, mu2.atoms, mu1.atoms, controls, cfg, t)
    times = traj.grid.times
    rows = []
    margin = math.inf
    excess = math.inf
    for k, s in enumerate(times):
        bound = params.bound(s)
        row = {"time": float(s), "bound": bound}
        for pop, X in (("individual", traj.individual_states[:, k]), ("meanfield", traj.meanfield_states[:, k])):
            w = exp_weight(X, params.delta)
            m = float(np.mean(w))
            se = float(np.std(w, ddof=1) / math.sqrt(w.size)) if w.size > 1 else 0.0
            row[f"moment_{pop}"] = m
            row[f"se_{pop}"] = se
            margin = min(margin, bound - m - 3.0 * se)
            if se > 0:
                excess = min(excess, (bound - m) / se)
            elif bound < m:
                excess = -math.inf
        rows.append(row)
    return {
        "k_star": params.k_star,
        "n_level": params.n_level,
        "delta": params.delta,
        "margin": margin,
        "min_excess_over_se": excess,
        "rows": rows,
        "pass": margin >= -tol,
        "pass_3se": excess >= -3.0,
    }
