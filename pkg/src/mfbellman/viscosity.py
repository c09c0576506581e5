"""Cylindrical test functions, generator residuals along simulated law flows,
viscosity residuals at sampled touching points and the doubling-of-variables
diagnostic.

A point is a triple (t, mu1, mu2) of a time and two EmpiricalMeasures.
"""

import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .hamiltonian import ControlGrid, GradientField, hamiltonian
from .measures import EmpiricalMeasure, in_O_N
from .polynomials import Polynomial, dist_d


class ViscosityError(ValueError):
    pass


class CoefficientWarning(UserWarning):
    pass


def _poly(p):
    if isinstance(p, Polynomial):
        return p
    return Polynomial(p)


@dataclass(frozen=True)
class Term:
    """F(t, z1, z2) = sum c_{ijk} t^i z1^j z2^k applied to z1 = <mu1, f1>, z2 = <mu2, f2>."""

    coeffs: tuple
    f1: Polynomial
    f2: Polynomial

    @classmethod
    def make(cls, coeffs, f1=(0, 1), f2=(0, 1)):
        items = tuple(sorted((tuple(int(e) for e in k), float(c)) for k, c in dict(coeffs).items() if c != 0))
        return cls(items, _poly(f1), _poly(f2))

    def _eval(self, t, z1, z2, dt=0, d1=0, d2=0):
        total = 0.0
        for (i, j, k), c in self.coeffs:
            if i < dt or j < d1 or k < d2:
                continue
            fac = math.perm(i, dt) * math.perm(j, d1) * math.perm(k, d2)
            total += c * fac * t ** (i - dt) * z1 ** (j - d1) * z2 ** (k - d2)
        return total

    def moments(self, mu1, mu2):
        return float(np.mean(self.f1(mu1.atoms))), float(np.mean(self.f2(mu2.atoms)))


@dataclass(frozen=True)
class Jet:
    pi_t: float
    pi_mu1: object
    pi_mu2: object
    dpi_mu1: object
    dpi_mu2: object

    def fields(self):
        return GradientField(self.pi_mu1, self.dpi_mu1), GradientField(self.pi_mu2, self.dpi_mu2)


def _combine(pairs):
    """y -> sum_j a_j * g_j(y) for pairs (a_j, g_j)."""
    pairs = [(a, g) for a, g in pairs if a != 0 and not g.is_zero()]

    def f(y):
        y = np.asarray(y, dtype=float)
        out = np.zeros_like(y)
        for a, g in pairs:
            out = out + a * g(y)
        return out

    return f


@dataclass(frozen=True)
class CylindricalTestFunction:
    terms: tuple = ()
    tail_bound: float = None

    @classmethod
    def of(cls, *terms):
        return cls(tuple(terms))

    def __add__(self, other):
        return CylindricalTestFunction(self.terms + other.terms)

    def scaled(self, a):
        return CylindricalTestFunction(tuple(
            Term(tuple((k, a * c) for k, c in tm.coeffs), tm.f1, tm.f2) for tm in self.terms))

    def __neg__(self):
        return self.scaled(-1.0)

    def __call__(self, t, mu1, mu2):
        total = 0.0
        for tm in self.terms:
            z1, z2 = tm.moments(mu1, mu2)
            total += tm._eval(t, z1, z2)
        return total

    def tail_ok(self):
        """Finite sums satisfy the tail condition; a declared bound is checked on the last term."""
        if self.tail_bound is None:
            return True
        if not self.terms:
            return True
        last = self.terms[-1]
        return sum(abs(c) for _, c in last.coeffs) <= self.tail_bound

    def jet(self, t, mu1, mu2):
        pt = 0.0
        p1, p2, q1, q2 = [], [], [], []
        for tm in self.terms:
            z1, z2 = tm.moments(mu1, mu2)
            pt += tm._eval(t, z1, z2, dt=1)
            a1 = tm._eval(t, z1, z2, d1=1)
            a2 = tm._eval(t, z1, z2, d2=1)
            p1.append((a1, tm.f1.derivative()))
            q1.append((a1, tm.f1.derivative(2)))
            p2.append((a2, tm.f2.derivative()))
            q2.append((a2, tm.f2.derivative(2)))
        return Jet(pt, _combine(p1), _combine(p2), _combine(q1), _combine(q2))

    def to_dict(self):
        return {"terms": [{"F": [[list(k), c] for k, c in tm.coeffs],
                           "f1": [str(c) for c in tm.f1.coeffs], "f2": [str(c) for c in tm.f2.coeffs]}
                          for tm in self.terms]}

    @classmethod
    def from_dict(cls, d):
        terms = []
        for tm in d["terms"]:
            F = {tuple(k): c for k, c in tm["F"]}
            terms.append(Term.make(F, Polynomial.from_json(tm.get("f1", [0, 1])),
                                   Polynomial.from_json(tm.get("f2", [0, 1]))))
        return cls(tuple(terms), d.get("tail_bound"))


def lderiv(phi, t, mu1, mu2):
    return phi.jet(t, mu1, mu2)


def moment_term(coeff=1.0, f1=None, f2=None, power_t=0):
    """Shortcut: coeff * t^power_t * <mu1, f1> (or <mu2, f2>)."""
    if f1 is not None:
        return Term.make({(power_t, 1, 0): coeff}, f1=f1)
    if f2 is not None:
        return Term.make({(power_t, 0, 1): coeff}, f2=f2)
    return Term.make({(power_t, 0, 0): coeff})


# -- generator residual -----------------------------------------------------

def _generator_terms(coeffs, phi, t, X1, U1, X2, U2, g):
    mu1, mu2 = EmpiricalMeasure(X1), EmpiricalMeasure(X2)
    jet = phi.jet(t, mu1, mu2)
    p1, p2 = jet.fields()
    b2 = np.asarray(coeffs.b2(t, X1, U1, g), dtype=float) + np.zeros_like(X1)
    s2 = np.asarray(coeffs.sigma2(t, X1, U1, g), dtype=float) + np.zeros_like(X1)
    b1 = np.asarray(coeffs.b1(t, X2, U2, g), dtype=float) + np.zeros_like(X2)
    s1 = np.asarray(coeffs.sigma1(t, X2, U2, g), dtype=float) + np.zeros_like(X2)
    # measure part only; the time part is integrated exactly by the caller
    gen = (float(np.mean(p1(X1) * b2 + 0.5 * p1.grad(X1) * s2 * s2))
           + float(np.mean(p2(X2) * b1 + 0.5 * p2.grad(X2) * s1 * s1)))
    return gen, p1, p2, b1, b2


def ito_residual_report(coeffs, phi, traj):
    """phi(end) - phi(start) - sum_k (time increment + h * measure generator at step k), with a Monte-Carlo SE.

    mu1 is the individual population, mu2 the mean-field one; coefficients
    are evaluated at the joint law the simulator used at each step. The time
    part of each step is integrated exactly, phi(t_{k+1}, mu_k) - phi(t_k,
    mu_k), so step k contributes phi(t_{k+1}, mu_{k+1}) - phi(t_{k+1}, mu_k)
    - h * generator. The SE comes from the per-particle stochastic-integral
    increments p(X_k) (X_{k+1} - X_k - b_k h).
    """
    if traj.meanfield_controls is None or traj.individual_controls is None:
        raise ViscosityError("trajectory carries no per-step law record")
    grid = traj.grid
    h = grid.h
    X1, U1 = traj.individual_states, traj.individual_controls
    X2, U2 = traj.meanfield_states, traj.meanfield_controls
    parts = []
    m1 = np.zeros(X1.shape[0])
    m2 = np.zeros(X2.shape[0])
    for k in range(grid.steps):
        t, t_next = grid.time(k), grid.time(k + 1)
        g = traj.law(k)
        gen, p1, p2, b1, b2 = _generator_terms(coeffs, phi, t, X1[:, k], U1[:, k], X2[:, k], U2[:, k], g)
        after = phi(t_next, EmpiricalMeasure(X1[:, k + 1]), EmpiricalMeasure(X2[:, k + 1]))
        before = phi(t_next, EmpiricalMeasure(X1[:, k]), EmpiricalMeasure(X2[:, k]))
        parts.append((after - before) - h * gen)
        m1 += p1(X1[:, k]) * (X1[:, k + 1] - X1[:, k] - b2 * h)
        m2 += p2(X2[:, k]) * (X2[:, k + 1] - X2[:, k] - b1 * h)
    resid = math.fsum(parts)
    se = 0.0
    for m in (m1, m2):
        if m.size > 1:
            se += float(np.var(m, ddof=1)) / m.size
    return {"residual": float(resid), "se": math.sqrt(se), "h": h, "steps": grid.steps}


def ito_residual(coeffs, phi, traj):
    return ito_residual_report(coeffs, phi, traj)["residual"]


# -- touching and viscosity residuals ----------------------------------------

def touching_search(valuefn, phi, points):
    """Max and min of valuefn - phi over the sampled points (lowest index on ties)."""
    if not points:
        raise ViscosityError("empty point grid")
    gaps = np.array([valuefn(*p) - phi(*p) for p in points], dtype=float)
    return int(np.argmax(gaps)), int(np.argmin(gaps)), gaps


def _residual(coeffs, phi, point, grid):
    t, mu1, mu2 = point
    jet = phi.jet(t, mu1, mu2)
    p1, p2 = jet.fields()
    H = hamiltonian(coeffs, t, mu1, mu2, p1, p2, grid)
    return -jet.pi_t - H["value"], H


def _require_extremum(valuefn, phi, point, points, kind, tol):
    i_max, i_min, gaps = touching_search(valuefn, phi, points)
    here = valuefn(*point) - phi(*point)
    if kind == "max" and gaps[i_max] > here + tol:
        raise ViscosityError(f"point is not a sampled maximiser of value - phi; grid point {i_max} is higher by "
                             f"{gaps[i_max] - here:.3g}")
    if kind == "min" and gaps[i_min] < here - tol:
        raise ViscosityError(f"point is not a sampled minimiser of value - phi; grid point {i_min} is lower by "
                             f"{here - gaps[i_min]:.3g}")
    return gaps


def subsolution_residual(coeffs, valuefn, phi, point, points, grid, tol=1e-9):
    """r = -pi_t - H at a sampled maximiser of valuefn - phi; passes iff r <= tol."""
    _require_extremum(valuefn, phi, point, points, "max", tol)
    r, H = _residual(coeffs, phi, point, grid)
    return {"residual": float(r), "hamiltonian": H["value"], "status": H["status"], "grid_points": len(points),
            "pass": bool(r <= tol)}


def supersolution_residual(coeffs, valuefn, phi, point, points, grid, tol=1e-9):
    """r = -pi_t - H at a sampled minimiser of valuefn - phi; passes iff r >= -tol."""
    _require_extremum(valuefn, phi, point, points, "min", tol)
    r, H = _residual(coeffs, phi, point, grid)
    return {"residual": float(r), "hamiltonian": H["value"], "status": H["status"], "grid_points": len(points),
            "pass": bool(r >= -tol)}


def viscosity_check(coeffs, valuefn, phi, points, grid, tol=1e-9, side="both"):
    """Residuals at every sampled maximiser (sub) and minimiser (super) of valuefn - phi."""
    _, _, gaps = touching_search(valuefn, phi, points)
    out = {"grid_points": len(points), "sub": [], "super": []}
    if side in ("both", "sub"):
        for i in np.flatnonzero(gaps >= gaps.max() - tol):
            r, H = _residual(coeffs, phi, points[i], grid)
            out["sub"].append({"index": int(i), "residual": float(r), "pass": bool(r <= tol)})
    if side in ("both", "super"):
        for i in np.flatnonzero(gaps <= gaps.min() + tol):
            r, H = _residual(coeffs, phi, points[i], grid)
            out["super"].append({"index": int(i), "residual": float(r), "pass": bool(r >= -tol)})
    out["pass"] = all(r["pass"] for r in out["sub"] + out["super"])
    return out


# -- sampling grids on O_N ----------------------------------------------------

def measure_templates(base_atoms, locations, scales):
    base = np.asarray(base_atoms, dtype=float)
    return [EmpiricalMeasure(loc + s * base) for loc in locations for s in scales]


def on_grid(times, mu1_list, mu2_list, params):
    """All (t, mu1, mu2) in the product that lie inside O_N."""
    return [(float(t), a, b) for t, a, b in itertools.product(times, mu1_list, mu2_list) if in_O_N(t, a, b, params)]


# -- doubling of variables -----------------------------------------------------

@dataclass
class DoublingConfig:
    epsilon: float
    eta: float
    theta: object
    points: list
    T: float = 1.0
    eta0: float = 1.0
    params: object = None
    ladder: tuple = field(default=(1.0, 0.3, 0.1, 0.03, 0.01))

    def __post_init__(self):
        if not (self.epsilon > 0 and self.eta > 0):
            raise ViscosityError("epsilon and eta must be positive")
        if self.eta > self.eta0:
            raise ViscosityError(f"eta {self.eta} exceeds eta0 {self.eta0}")
        if self.params is not None:
            bad = [i for i, p in enumerate(self.points) if not in_O_N(p[0], p[1], p[2], self.params)]
            if bad:
                raise ViscosityError(f"grid point {bad[0]} lies outside O_N")


def _penalty(theta, p, q):
    return (p[0] - q[0]) ** 2 + dist_d(p[1], q[1], theta) + dist_d(p[2], q[2], theta)


def doubling_objective(u_fn, v_fn, cfg, p, q, epsilon=None):
    eps = cfg.epsilon if epsilon is None else epsilon
    return (u_fn(*p) - v_fn(*q) - _penalty(cfg.theta, p, q) / eps
            - cfg.eta * (cfg.T - p[0] + cfg.T - q[0]))


def comparison_probe(u_fn, v_fn, cfg, coeffs=None, tol=1e-12):
    """Maximise the doubled objective over grid pairs for each epsilon of the ladder.

    Per rung: maximiser, penalised distance zeta (time gap squared plus both
    measure distances), zeta / eps against max u - min v - l with l the best
    diagonal value, and whether the maximiser time is below T.
    """
    if coeffs is not None and coeffs.depends_on_state_control():
        warnings.warn("coefficients depend on (y, v); the comparison diagnostics assume they do not",
                      CoefficientWarning, stacklevel=2)
    pts = cfg.points
    T = cfg.T
    uvals = np.array([u_fn(*p) for p in pts])
    vvals = np.array([v_fn(*p) for p in pts])
    for i, p in enumerate(pts):
        if abs(p[0] - T) < 1e-12 and uvals[i] > vvals[i] + tol:
            raise ViscosityError(f"terminal inequality u <= v fails at grid point {i}: {uvals[i]!r} > {vvals[i]!r}")
    n = len(pts)
    pen = np.array([[_penalty(cfg.theta, pts[i], pts[j]) for j in range(n)] for i in range(n)])
    tt = np.array([p[0] for p in pts])
    lin = cfg.eta * ((T - tt)[:, None] + (T - tt)[None, :])
    diag = uvals - vvals - 2 * cfg.eta * (T - tt)
    ell = float(diag.max())
    bound = float(uvals.max() - vvals.min() - ell)
    rungs = []
    for eps in cfg.ladder:
        obj = uvals[:, None] - vvals[None, :] - pen / eps - lin
        flat = int(np.argmax(obj))
        i, j = divmod(flat, n)
        zeta = float(pen[i, j])
        rungs.append({
            "epsilon": eps, "value": float(obj[i, j]), "pair": [i, j], "zeta": zeta,
            "zeta_over_eps": zeta / eps, "bound": bound, "within_bound": bool(zeta / eps <= bound + 1e-12),
            "t_star_below_T": bool(tt[i] < T and tt[j] < T),
            "measure_distance": float(dist_d(pts[i][1], pts[j][1], cfg.theta) + dist_d(pts[i][2], pts[j][2], cfg.theta)),
        })
    zetas = [r["zeta"] for r in rungs]
    sup_diag = float((uvals - vvals).max())
    anomalies = [f"rung {k}: zeta/eps above bound" for k, r in enumerate(rungs) if not r["within_bound"]]
    return {
        "rungs": rungs,
        "sup_u_minus_v": sup_diag,
        "positive_supremum": bool(sup_diag > tol),
        "zeta_nonincreasing": all(zetas[k + 1] <= zetas[k] + 1e-15 for k in range(len(zetas) - 1)),
        "zeta_final": zetas[-1] if zetas else None,
        "anomalies": anomalies,
        "theta_truncation": cfg.theta.j_root,
    }


__all__ = [
    "Term", "Jet", "CylindricalTestFunction", "ControlGrid", "DoublingConfig", "ViscosityError",
    "CoefficientWarning", "lderiv", "moment_term", "ito_residual", "ito_residual_report", "touching_search",
    "subsolution_residual", "supersolution_residual", "viscosity_check", "measure_templates", "on_grid",
    "doubling_objective", "comparison_probe",
]
