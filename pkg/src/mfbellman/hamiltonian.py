"""Generator operators and the coupling-infimum Hamiltonian on a control grid.

Couplings are supported on (atoms of mu) x (grid values). For a fixed
gamma2 the gamma1 part is linear in the conditional rows, so each atom of
mu1 takes its best grid value. gamma2 is searched over Dirac-conditional
couplings: exhaustively when the candidate count fits the budget, otherwise
by multi-start coordinate descent (result flagged "local").
"""

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .measures import EmpiricalMeasure, JointEmpiricalMeasure


class HamiltonianError(ValueError):
    pass


@dataclass(frozen=True)
class ControlGrid:
    values: tuple

    def __init__(self, values, u_bounds=None):
        vals = tuple(float(v) for v in values)
        if not vals:
            raise HamiltonianError("control grid is empty")
        if list(vals) != sorted(vals):
            raise HamiltonianError("control grid must be ascending")
        if u_bounds is not None and (vals[0] < u_bounds[0] or vals[-1] > u_bounds[1]):
            raise HamiltonianError(f"control grid leaves U = [{u_bounds[0]}, {u_bounds[1]}]")
        object.__setattr__(self, "values", vals)

    @classmethod
    def uniform(cls, lo, hi, n):
        return cls(np.linspace(lo, hi, n) if n > 1 else [lo])

    def __len__(self):
        return len(self.values)

    @property
    def array(self):
        return np.array(self.values)

    def refined(self):
        v = self.array
        mids = (v[1:] + v[:-1]) / 2
        return ControlGrid(np.sort(np.concatenate([v, mids])))


@dataclass(frozen=True)
class Coupling:
    """Row-stochastic conditional control law over ``grid`` for each atom of ``base``."""

    base: EmpiricalMeasure
    grid: ControlGrid
    rows: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rows, dtype=float)
        if r.shape != (self.base.size, len(self.grid)):
            raise HamiltonianError(f"coupling rows have shape {r.shape}, expected {(self.base.size, len(self.grid))}")
        if np.any(r < 0) or np.any(np.abs(r.sum(axis=1) - 1.0) > 1e-12):
            raise HamiltonianError("coupling rows must be non-negative and sum to 1")
        r = r.copy()
        r.setflags(write=False)
        object.__setattr__(self, "rows", r)

    @classmethod
    def dirac(cls, base, grid, indices):
        idx = np.asarray(indices, dtype=int)
        rows = np.zeros((base.size, len(grid)))
        rows[np.arange(base.size), idx] = 1.0
        return cls(base, grid, rows)

    def is_dirac(self):
        return bool(np.all((self.rows == 0) | (self.rows == 1)))

    def indices(self):
        return np.argmax(self.rows, axis=1)

    def state_marginal(self):
        """Mass per atom (exactly 1/n each for a valid coupling)."""
        return self.rows.sum(axis=1) / self.base.size

    def to_joint(self, u_bounds=(-math.inf, math.inf)):
        if self.is_dirac():
            return JointEmpiricalMeasure(self.base.atoms, self.grid.array[self.indices()], u_bounds=u_bounds)
        n, g = self.rows.shape
        w = (self.rows / n).ravel()
        keep = w > 0
        states = np.repeat(self.base.atoms, g)[keep]
        controls = np.tile(self.grid.array, n)[keep]
        w = w[keep]
        return JointEmpiricalMeasure(states, controls, w / w.sum(), u_bounds=u_bounds)

    def to_dict(self):
        return {"atoms": self.base.atoms.tolist(), "grid": list(self.grid.values), "rows": self.rows.tolist()}


@dataclass(frozen=True)
class GradientField:
    p: object
    dp: object

    @classmethod
    def zero(cls):
        return cls(lambda y: np.zeros_like(np.asarray(y, dtype=float)),
                   lambda y: np.zeros_like(np.asarray(y, dtype=float)))

    @classmethod
    def constant(cls, c):
        return cls(lambda y: np.full_like(np.asarray(y, dtype=float), c),
                   lambda y: np.zeros_like(np.asarray(y, dtype=float)))

    @classmethod
    def polynomial(cls, poly):
        d = poly.derivative()
        return cls(poly, d)

    def __call__(self, y):
        return np.asarray(self.p(y), dtype=float) + np.zeros_like(np.asarray(y, dtype=float))

    def grad(self, y):
        return np.asarray(self.dp(y), dtype=float) + np.zeros_like(np.asarray(y, dtype=float))


def _joint(gamma, u_bounds):
    if isinstance(gamma, Coupling):
        return gamma.to_joint(u_bounds)
    return gamma


def _gen(b, s, t, p, y, v, g):
    y = np.asarray(y, dtype=float)
    v = np.broadcast_to(np.asarray(v, dtype=float), y.shape)
    sig = np.asarray(s(t, y, v, g), dtype=float)
    return p(y) * np.asarray(b(t, y, v, g), dtype=float) + 0.5 * p.grad(y) * sig * sig


def op_L(coeffs, t, p1, y, v, gamma2):
    """p1(y) b2(t, y, v, gamma2) + 1/2 p1'(y) sigma2(t, y, v, gamma2)^2."""
    g = _joint(gamma2, coeffs.u_bounds)
    return _gen(coeffs.b2, coeffs.sigma2, t, p1, y, v, g)


def op_Lbar(coeffs, t, p2, y, v, gamma2):
    """p2(y) b1(t, y, v, gamma2) + 1/2 p2'(y) sigma1(t, y, v, gamma2)^2."""
    g = _joint(gamma2, coeffs.u_bounds)
    return _gen(coeffs.b1, coeffs.sigma1, t, p2, y, v, g)


def _matrices(coeffs, t, mu1, mu2, p1, p2, grid, g):
    """L over (mu1 atoms x grid) and L_bar over (mu2 atoms x grid) at law g."""
    v = grid.array
    y1 = np.repeat(mu1.atoms, v.size)
    y2 = np.repeat(mu2.atoms, v.size)
    A = op_L(coeffs, t, p1, y1, np.tile(v, mu1.size), g).reshape(mu1.size, v.size)
    B = op_Lbar(coeffs, t, p2, y2, np.tile(v, mu2.size), g).reshape(mu2.size, v.size)
    return A, B


def _objective_dirac(coeffs, t, mu1, mu2, p1, p2, grid, idx2):
    """Value with gamma2 fixed at Dirac indices and gamma1 optimal; returns (value, gamma1 indices)."""
    g = JointEmpiricalMeasure(mu2.atoms, grid.array[np.asarray(idx2)], u_bounds=coeffs.u_bounds)
    A, B = _matrices(coeffs, t, mu1, mu2, p1, p2, grid, g)
    i1 = np.argmin(A, axis=1)
    term1 = A[np.arange(mu1.size), i1].mean()
    term2 = B[np.arange(mu2.size), np.asarray(idx2)].mean()
    return float(term1 + term2), i1


def hamiltonian(coeffs, t, mu1, mu2, p1, p2, grid, budget=50000, restarts=8, seed=0):
    """Infimum over Dirac-conditional couplings of <gamma1, L[p1]> + <gamma2, L_bar[p2]>.

    Returns a dict with ``value``, ``gamma1``, ``gamma2`` (Coupling) and
    ``status`` ("exhaustive" or "local").
    """
    n2, G = mu2.size, len(grid)
    if G == 1 or n2 * math.log(G) <= math.log(budget):
        best, best_idx, best_i1 = math.inf, None, None
        for idx2 in itertools.product(range(G), repeat=n2):
            val, i1 = _objective_dirac(coeffs, t, mu1, mu2, p1, p2, grid, idx2)
            if val < best:
                best, best_idx, best_i1 = val, idx2, i1
        status = "exhaustive"
    else:
        rng = np.random.default_rng(seed)
        starts = [np.zeros(n2, dtype=int)] + [rng.integers(0, G, n2) for _ in range(restarts - 1)]
        best, best_idx, best_i1 = math.inf, None, None
        for s in starts:
            idx = s.copy()
            val, i1 = _objective_dirac(coeffs, t, mu1, mu2, p1, p2, grid, idx)
            improved = True
            while improved:
                improved = False
                for k in range(n2):
                    for gv in range(G):
                        if gv == idx[k]:
                            continue
                        trial = idx.copy()
                        trial[k] = gv
                        tv, ti1 = _objective_dirac(coeffs, t, mu1, mu2, p1, p2, grid, trial)
                        if tv < val - 1e-15:
                            idx, val, i1, improved = trial, tv, ti1, True
            if val < best:
                best, best_idx, best_i1 = val, tuple(int(i) for i in idx), i1
        status = "local"
    return {
        "value": best,
        "gamma1": Coupling.dirac(mu1, grid, best_i1),
        "gamma2": Coupling.dirac(mu2, grid, best_idx),
        "status": status,
    }


def coupling_objective(coeffs, t, mu1, mu2, p1, p2, gamma1, gamma2):
    """<gamma1, L[p1]> + <gamma2, L_bar[p2]> for explicit couplings (any rows)."""
    grid = gamma1.grid
    g = gamma2.to_joint(coeffs.u_bounds)
    A, B = _matrices(coeffs, t, mu1, mu2, p1, p2, grid, g)
    return float((gamma1.rows * A).sum() / mu1.size + (gamma2.rows * B).sum() / mu2.size)


def hamiltonian_bruteforce(coeffs, t, mu1, mu2, p1, p2, grid, n_interior=100, seed=0, guard_tol=1e-12):
    """Minimum over every pair of Dirac-conditional couplings, plus an interior guard.

    The guard draws ``n_interior`` random interior gamma2 (Dirichlet rows),
    pairs each with its best gamma1, and reports whether any beats the
    vertex minimum by more than ``guard_tol``.
    """
    if mu1.size > 4 or mu2.size > 4 or len(grid) > 5:
        raise HamiltonianError("brute force is capped at 4 atoms per measure and 5 grid points")
    G = len(grid)
    v = grid.array
    best = math.inf
    for idx2 in itertools.product(range(G), repeat=mu2.size):
        g = JointEmpiricalMeasure(mu2.atoms, v[list(idx2)], u_bounds=coeffs.u_bounds)
        # each entry evaluated on its own: no shared matrices with the main path
        L2 = math.fsum(float(op_Lbar(coeffs, t, p2, np.array([y]), np.array([v[i]]), g)[0])
                       for y, i in zip(mu2.atoms, idx2)) / mu2.size
        L1 = {}
        for k, y in enumerate(mu1.atoms):
            for gi in range(G):
                L1[k, gi] = float(op_L(coeffs, t, p1, np.array([y]), np.array([v[gi]]), g)[0])
        for idx1 in itertools.product(range(G), repeat=mu1.size):
            val = math.fsum(L1[k, gi] for k, gi in enumerate(idx1)) / mu1.size + L2
            if val < best:
                best = val
    rng = np.random.default_rng(seed)
    interior_best = math.inf
    for _ in range(n_interior):
        rows = rng.dirichlet(np.ones(G), size=mu2.size)
        g2 = Coupling(mu2, grid, rows)
        gj = g2.to_joint(coeffs.u_bounds)
        A, B = _matrices(coeffs, t, mu1, mu2, p1, p2, grid, gj)
        val = float(A.min(axis=1).mean() + (rows * B).sum() / mu2.size)
        interior_best = min(interior_best, val)
    return {
        "value": best,
        "interior_best": interior_best,
        "interior_beats_vertex": bool(interior_best < best - guard_tol),
    }


def _flatten_jet(jet):
    return GradientField(jet.pi_mu1, jet.dpi_mu1), GradientField(jet.pi_mu2, jet.dpi_mu2)


def continuity_probe_H(coeffs, sequence, limit, testfn, grid):
    """H along (t_n, mu1_n, mu2_n) -> (t, mu1, mu2) with p_i the L-derivatives of ``testfn``.

    ``testfn`` only needs a ``jet(t, mu1, mu2)`` method. Reports the
    differences to the limit value, successive contraction ratios, and for
    time-only perturbations the bound kappa0 |dt| (<mu1, |p1| + C0 |p1'|> +
    <mu2, |p2| + C0 |p2'|>).
    """
    t, m1, m2 = limit
    p1, p2 = _flatten_jet(testfn.jet(t, m1, m2))
    H_lim = hamiltonian(coeffs, t, m1, m2, p1, p2, grid)["value"]
    diffs, bounds = [], []
    for tn, a, b in sequence:
        q1, q2 = _flatten_jet(testfn.jet(tn, a, b))
        Hn = hamiltonian(coeffs, tn, a, b, q1, q2, grid)["value"]
        diffs.append(abs(Hn - H_lim))
        if a == m1 and b == m2:
            c0 = coeffs.declared_bound_c0
            w1 = float(np.mean(np.abs(p1(m1.atoms)) + c0 * np.abs(p1.grad(m1.atoms))))
            w2 = float(np.mean(np.abs(p2(m2.atoms)) + c0 * np.abs(p2.grad(m2.atoms))))
            bounds.append(coeffs.declared_kappa0 * abs(tn - t) * (w1 + w2))
        else:
            bounds.append(None)
    ratios = [diffs[i + 1] / diffs[i] if diffs[i] > 0 else (0.0 if diffs[i + 1] == 0 else math.inf)
              for i in range(len(diffs) - 1)]
    envelope = [max(diffs[i:]) for i in range(len(diffs))]
    within = [d <= b * (1 + 1e-9) + 1e-14 for d, b in zip(diffs, bounds) if b is not None]
    return {
        "limit_value": H_lim,
        "differences": diffs,
        "ratios": ratios,
        "observed_rate": float(np.exp(np.mean(np.log([r for r in ratios if 0 < r < math.inf])))) if any(
            0 < r < math.inf for r in ratios) else 0.0,
        "envelope_nonincreasing": all(envelope[i + 1] <= envelope[i] for i in range(len(envelope) - 1)),
        "time_bounds": bounds,
        "within_time_bound": all(within),
        "converges": diffs[-1] <= diffs[0] * 0.5 + 1e-14 if diffs else True,
    }


def _probe_control_free(coeffs, names=("b1", "sigma1"), n=32, seed=0):
    """True iff the named coefficients ignore v and all coefficients ignore the control law."""
    if coeffs.sine_params is not None:
        p = coeffs.sine_params
        rows = {"b1": 0, "b2": 1, "sigma1": 2, "sigma2": 3}
        if any(p[rows[nm], 2] != 0 for nm in names):
            return False, "control enters " + "/".join(nm for nm in names if p[rows[nm], 2] != 0)
        if np.any(p[:, 4] != 0):
            return False, "coefficients depend on the control marginal of the law"
        return True, ""
    rng = np.random.default_rng(seed)
    lo, hi = coeffs.u_bounds
    y = rng.normal(0, 2, n)
    states = rng.normal(0, 1, 6)
    g_a = JointEmpiricalMeasure(states, np.full(6, lo), u_bounds=coeffs.u_bounds)
    g_b = JointEmpiricalMeasure(states, rng.uniform(lo, hi, 6), u_bounds=coeffs.u_bounds)
    for nm in names:
        f = coeffs.coeff(nm)
        if not np.allclose(f(0.3, y, np.full(n, lo), g_a), f(0.3, y, np.full(n, hi), g_a), rtol=0, atol=0):
            return False, f"control enters {nm}"
    for nm in ("b1", "b2", "sigma1", "sigma2"):
        f = coeffs.coeff(nm)
        v = rng.uniform(lo, hi, n)
        if not np.array_equal(f(0.3, y, v, g_a), f(0.3, y, v, g_b)):
            return False, "coefficients depend on the control marginal of the law"
    return True, ""


def reduced_generator(coeffs, t, x, mu, dV, d2V, dmuV, dydmuV, grid):
    """inf_u {dV b2 + 1/2 d2V sigma2^2}(x) + <mu, dmuV b1> + 1/2 <mu, dydmuV sigma1^2>.

    ``dmuV`` and ``dydmuV`` are callables of y. Requires b1, sigma1 free of
    the control and no coefficient depending on the control law.
    """
    ok, why = _probe_control_free(coeffs)
    if not ok:
        raise HamiltonianError(f"reduced generator precondition failed: {why}")
    v = grid.array
    g = JointEmpiricalMeasure(mu.atoms, np.full(mu.size, v[0]), u_bounds=coeffs.u_bounds)
    xs = np.full(v.size, float(x))
    s2 = np.asarray(coeffs.sigma2(t, xs, v, g), dtype=float)
    ind = dV * np.asarray(coeffs.b2(t, xs, v, g), dtype=float) + 0.5 * d2V * s2 * s2
    y = mu.atoms
    v0 = np.full(y.size, v[0])
    s1 = np.asarray(coeffs.sigma1(t, y, v0, g), dtype=float)
    mf = np.mean(np.asarray(dmuV(y), dtype=float) * np.asarray(coeffs.b1(t, y, v0, g), dtype=float)
                 + 0.5 * np.asarray(dydmuV(y), dtype=float) * s1 * s1)
    return float(np.min(ind) + mf)
