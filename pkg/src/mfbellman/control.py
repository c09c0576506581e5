"""Cost functional, value functions W, V, theta-value over finite control
families, and numerical checks of their dynamic programming identities.

All value functions share one evaluator: for each u2 candidate the mean-field
population is simulated once, and every initial state (atom) of the
individual population is pushed through each u1 candidate with the same K
rows of the "ind" increment bank (common random numbers). W at an atom is
the minimum over u1, V the minimum of W over u2, and the theta-value the
minimum over u2 of the atom average of W. With a single atom the last two
coincide bit for bit.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .controls import ControlError, ControlFamily, distinct_on, restricted
from .dynamics import (ControlHistory, EmpiricalMeasure, realize_controls, run_individual, run_meanfield)


class FamilyWarning(UserWarning):
    pass


@dataclass
class ValueEstimate:
    value: float
    std_error: float
    argmin: tuple
    fingerprint: str
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.std_error >= 0:
            raise ValueError("standard error must be non-negative")


def _fingerprint(coeffs, cfg, t, extra=""):
    return f"{coeffs.name}|{cfg.fingerprint()}|t={t!r}{extra}"


def _as_family(f):
    if isinstance(f, ControlFamily):
        return f
    if isinstance(f, (list, tuple)):
        return ControlFamily(list(f))
    return ControlFamily([f])


def _unique_atoms(atoms):
    atoms = np.asarray(atoms, dtype=float).ravel()
    if atoms.size == 0:
        raise ValueError("need at least one initial state")
    u, inv, counts = np.unique(atoms, return_inverse=True, return_counts=True)
    return u, inv, counts


def _atom_average(vals, counts):
    if vals.size == 1:
        return float(vals[0])
    return float(np.dot(counts, vals) / counts.sum())


def _meanfield(coeffs, zeta, u2, grid, cfg, history=None):
    """Mean-field run on ``grid``; returns (law flow, terminal empirical law)."""
    zeta = np.asarray(zeta, dtype=float).ravel()
    dB = cfg.increments("mf", zeta.size, grid)
    v2 = realize_controls(u2, grid, zeta, dB, history, "u2")
    X, flow = run_meanfield(coeffs, zeta, v2, grid, dB, cfg.backend)
    return flow, EmpiricalMeasure(X[:, -1]), X


def _atom_costs(coeffs, atoms, flow, mu_T, members, grid, cfg, K):
    """Per-member, per-atom Monte-Carlo cost and its standard error, shape (n_members, n_atoms)."""
    n = atoms.size
    phi = coeffs.phi_terminal
    costs = np.empty((len(members), n))
    ses = np.empty((len(members), n))
    if grid.steps == 0:
        # terminal time: the cost is Phi itself, no simulation
        val = np.asarray(phi(atoms, mu_T), dtype=float) + np.zeros(n)
        costs[:] = val
        ses[:] = 0.0
        return costs, ses
    rows = cfg.increments("ind", K, grid)
    x0 = np.repeat(atoms, K)
    dB = np.tile(rows, (n, 1))
    for m, law in enumerate(members):
        v1 = realize_controls(law, grid, x0, dB, None, "u1")
        X = run_individual(coeffs, x0, v1, grid, dB, flow, cfg.backend)
        c = np.asarray(phi(X[:, -1], mu_T), dtype=float).reshape(n, K)
        # shifted by the first sample so that constant costs average exactly
        ref = c[:, :1]
        d = c - ref
        costs[m] = ref[:, 0] + d.mean(axis=1)
        ses[m] = d.std(axis=1, ddof=1) / math.sqrt(K) if K > 1 else 0.0
    return costs, ses


def _value_table(coeffs, t, atoms, zeta, fam1, fam2, cfg, grid=None, mf_history=None):
    """W for every (u2, unique atom): dict with arrays of shape (n_u2, n_unique)."""
    grid = cfg.grid(t) if grid is None else grid
    fam1, fam2 = _as_family(fam1), _as_family(fam2)
    ua, inv, counts = _unique_atoms(atoms)
    W = np.empty((len(fam2), ua.size))
    SE = np.empty_like(W)
    AM = np.empty(W.shape, dtype=int)
    for j, u2 in enumerate(fam2.members):
        flow, mu_T, _ = _meanfield(coeffs, zeta, u2, grid, cfg, mf_history)
        costs, ses = _atom_costs(coeffs, ua, flow, mu_T, fam1.members, grid, cfg, cfg.K)
        am = np.argmin(costs, axis=0)  # first minimiser: lowest index wins ties
        AM[j] = am
        W[j] = costs[am, np.arange(ua.size)]
        SE[j] = ses[am, np.arange(ua.size)]
    return {"atoms": ua, "inverse": inv, "counts": counts, "W": W, "se": SE, "argmin_u1": AM}


def _theta_from_table(tab):
    counts = tab["counts"]
    per_u2 = np.array([_atom_average(row, counts) for row in tab["W"]])
    se_u2 = np.array([_atom_average(row, counts) for row in tab["se"]])
    j = int(np.argmin(per_u2))
    return per_u2, se_u2, j


def cost_J(coeffs, t, x, zeta, u, cfg):
    """Monte-Carlo E[Phi(X_T, law of X_bar_T)] for the control pair u = (u1, u2)."""
    u1, u2 = u
    tab = _value_table(coeffs, t, [x], zeta, [u1], [u2], cfg)
    return ValueEstimate(float(tab["W"][0, 0]), float(tab["se"][0, 0]), (0, 0), _fingerprint(coeffs, cfg, t))


def W_eval(coeffs, t, x, zeta, u2, family_u1, cfg):
    fam1 = _as_family(family_u1)
    tab = _value_table(coeffs, t, [x], zeta, fam1, [u2], cfg)
    return ValueEstimate(float(tab["W"][0, 0]), float(tab["se"][0, 0]), (int(tab["argmin_u1"][0, 0]),),
                         _fingerprint(coeffs, cfg, t))


def V_eval(coeffs, t, x, zeta, families, cfg):
    return vartheta_eval(coeffs, t, EmpiricalMeasure([x]), zeta, families, cfg)


def vartheta_eval(coeffs, t, mu1, zeta, families, cfg):
    """min over u2 of the mu1-average of the per-atom minimum over u1."""
    fam1, fam2 = _as_family(families[0]), _as_family(families[1])
    atoms = mu1.atoms if isinstance(mu1, EmpiricalMeasure) else np.asarray(mu1, dtype=float)
    tab = _value_table(coeffs, t, atoms, zeta, fam1, fam2, cfg)
    per_u2, se_u2, j = _theta_from_table(tab)
    am1 = tab["argmin_u1"][j][tab["inverse"]]
    return ValueEstimate(float(per_u2[j]), float(se_u2[j]), (tuple(int(a) for a in am1), j),
                         _fingerprint(coeffs, cfg, t),
                         {"per_u2": per_u2.tolist(), "per_atom": tab["W"][j].tolist(), "atoms": tab["atoms"].tolist()})


def _check_closed(fam, what):
    if not _as_family(fam).concat_closed:
        warnings.warn(f"{what} family is not closed under concatenation; only one side of the DPP gap is meaningful",
                      FamilyWarning, stacklevel=3)
        return False
    return True


def _outer_individual(coeffs, x0, law, grid, cfg, flow):
    rows = cfg.increments("ind", x0.size, grid)
    v1 = realize_controls(law, grid, x0, rows, None, "u1")
    return run_individual(coeffs, x0, v1, grid, rows, flow, cfg.backend)[:, -1]


def _combined_se(*parts):
    return float(math.sqrt(sum(p * p for p in parts)))


def _tolerance(se, c_disc, h, n_sigma=3.0):
    return n_sigma * se + c_disc * h


def calibrate_c_disc(cfg, t=0.0, delta=None, x=0.0):
    """Discretisation allowance per unit step, fitted on the zero-dynamics case.

    Both sides of the W-identity are built from identical arithmetic there,
    so the fitted allowance is |gap| / h (which is 0).
    """
    from .coefficients import make_preset
    from .controls import piecewise_constants

    delta = cfg.h * max(1, cfg.steps // 4) if delta is None else delta
    zero = make_preset("zero")
    fam = piecewise_constants([-1.0, 1.0], [t + delta])
    zeta = np.linspace(-1.0, 1.0, 8)
    rep = dpp_check_W(zero, t, delta, x, zeta, fam[0], (fam,), cfg, c_disc=0.0, K_out=8)
    return abs(rep["gap"]) / cfg.h


def dpp_check_W(coeffs, t, delta, x, zeta, u2, families, cfg, c_disc=0.0, K_out=None, n_sigma=3.0):
    """W(t, x) against min over first pieces of E[W(t + delta, X_{t+delta}, law X_bar_{t+delta})].

    ``u2`` is a fixed control anchored at t; on [t + delta, T] it continues
    with its own history. The u1 family is cut at t + delta: first pieces are
    its distinct restrictions to [t, t + delta), tails its members re-anchored
    at t + delta.
    """
    fam1 = _as_family(families[0])
    closed = _check_closed(fam1, "u1")
    K_out = cfg.K if K_out is None else K_out
    zeta = np.asarray(zeta, dtype=float).ravel()
    grid = cfg.grid(t)
    kd = grid.index_of(t + delta)
    g1, g2 = grid.sub(0, kd), grid.sub(kd)
    lhs = W_eval(coeffs, t, x, zeta, u2, fam1, cfg)

    # mean-field population on [t, t+delta], then restarted with its control history
    flow1, _, Xmf1 = _meanfield(coeffs, zeta, u2, g1, cfg)
    zeta_d = Xmf1[:, -1]
    hist = ControlHistory(t, zeta, cfg.increments("mf", zeta.size, grid)[:, :kd])
    tails = restricted(fam1, t + delta, cfg.h, g2.steps) if g2.steps else fam1
    firsts = distinct_on(fam1, t, cfg.h, kd) if kd else [0]
    rows = []
    for i in firsts:
        if kd == 0:
            atoms = np.array([float(x)])
        else:
            atoms = _outer_individual(coeffs, np.full(K_out, float(x)), fam1[i], g1, cfg, flow1)
        tab = _value_table(coeffs, t + delta, atoms, zeta_d, tails, [u2], cfg, grid=g2, mf_history=hist)
        Wa = tab["W"][0]
        per_path = Wa[tab["inverse"]]
        val = _atom_average(Wa, tab["counts"])
        outer_var = float(np.var(per_path, ddof=1) / per_path.size) if per_path.size > 1 else 0.0
        inner_se = float(math.sqrt(np.mean(tab["se"][0][tab["inverse"]] ** 2)))
        rows.append({"first_piece": int(i), "value": val, "outer_se": math.sqrt(outer_var), "inner_se": inner_se})
    best = min(range(len(rows)), key=lambda r: (rows[r]["value"], r))
    rhs = rows[best]
    se = _combined_se(lhs.std_error, rhs["outer_se"], rhs["inner_se"])
    gap = lhs.value - rhs["value"]
    tol = _tolerance(se, c_disc, cfg.h, n_sigma)
    ok = abs(gap) <= tol if closed else gap <= tol
    return {
        "check": "dpp_W", "lhs": lhs.value, "rhs": rhs["value"], "gap": gap, "se_combined": se,
        "c_disc": c_disc, "h": cfg.h, "tolerance": tol, "concat_closed": closed,
        "first_pieces": rows, "argmin_first_piece": rhs["first_piece"], "pass": bool(ok),
    }


def _population(atoms, K_out, kd):
    if kd == 0:
        return np.asarray(atoms, dtype=float)
    reps = max(1, math.ceil(K_out / atoms.size))
    return np.repeat(np.asarray(atoms, dtype=float), reps)


def dpp_check_vartheta(coeffs, t, delta, mu1, zeta, families, cfg, c_disc=0.0, K_out=None, n_sigma=3.0):
    """theta-value at t against min over first pieces of the theta-value at t + delta
    of the pushed-forward pair of laws."""
    fam1, fam2 = _as_family(families[0]), _as_family(families[1])
    closed = _check_closed(fam1, "u1") & _check_closed(fam2, "u2")
    K_out = cfg.K if K_out is None else K_out
    zeta = np.asarray(zeta, dtype=float).ravel()
    grid = cfg.grid(t)
    kd = grid.index_of(t + delta)
    g1, g2 = grid.sub(0, kd), grid.sub(kd)
    lhs = vartheta_eval(coeffs, t, mu1, zeta, (fam1, fam2), cfg)

    tails1 = restricted(fam1, t + delta, cfg.h, g2.steps) if g2.steps else fam1
    tails2 = restricted(fam2, t + delta, cfg.h, g2.steps) if g2.steps else fam2
    firsts1 = distinct_on(fam1, t, cfg.h, kd) if kd else [0]
    firsts2 = distinct_on(fam2, t, cfg.h, kd) if kd else [0]
    pop0 = _population(mu1.atoms, K_out, kd)
    rows = []
    for j in firsts2:
        flow1, _, Xmf1 = _meanfield(coeffs, zeta, fam2[j], g1, cfg)
        zeta_d = Xmf1[:, -1]
        for i in firsts1:
            atoms = pop0 if kd == 0 else _outer_individual(coeffs, pop0, fam1[i], g1, cfg, flow1)
            tab = _value_table(coeffs, t + delta, atoms, zeta_d, tails1, tails2, cfg, grid=g2)
            per_u2, se_u2, jj = _theta_from_table(tab)
            per_path = tab["W"][jj][tab["inverse"]]
            outer = float(np.std(per_path, ddof=1) / math.sqrt(per_path.size)) if per_path.size > 1 else 0.0
            rows.append({"first_u1": int(i), "first_u2": int(j), "value": float(per_u2[jj]),
                         "inner_se": float(se_u2[jj]), "outer_se": outer})
    best = min(range(len(rows)), key=lambda r: (rows[r]["value"], r))
    rhs = rows[best]
    se = _combined_se(lhs.std_error, rhs["inner_se"], rhs["outer_se"])
    gap = lhs.value - rhs["value"]
    tol = _tolerance(se, c_disc, cfg.h, n_sigma)
    ok = abs(gap) <= tol if closed else gap <= tol
    return {
        "check": "dpp_vartheta", "lhs": lhs.value, "rhs": rhs["value"], "gap": gap, "se_combined": se,
        "c_disc": c_disc, "h": cfg.h, "tolerance": tol, "concat_closed": bool(closed),
        "first_pieces": rows, "argmin": [rhs["first_u1"], rhs["first_u2"]], "pass": bool(ok),
    }


def one_sided_dpp_V(coeffs, t, delta, x, zeta, families, cfg, c_disc=0.0, K_out=None, n_sigma=3.0):
    """V(t, x) >= min over first pieces of E[V(t + delta, X_{t+delta}, law X_bar_{t+delta})].

    V at t + delta minimises over u2 tails separately for every outer state,
    so the right side can be strictly smaller; only ``slack >= -tol`` is
    checked.
    """
    fam1, fam2 = _as_family(families[0]), _as_family(families[1])
    K_out = cfg.K if K_out is None else K_out
    zeta = np.asarray(zeta, dtype=float).ravel()
    grid = cfg.grid(t)
    kd = grid.index_of(t + delta)
    g1, g2 = grid.sub(0, kd), grid.sub(kd)
    lhs = V_eval(coeffs, t, x, zeta, (fam1, fam2), cfg)
    tails1 = restricted(fam1, t + delta, cfg.h, g2.steps) if g2.steps else fam1
    tails2 = restricted(fam2, t + delta, cfg.h, g2.steps) if g2.steps else fam2
    firsts1 = distinct_on(fam1, t, cfg.h, kd) if kd else [0]
    firsts2 = distinct_on(fam2, t, cfg.h, kd) if kd else [0]
    rows = []
    for j in firsts2:
        flow1, _, Xmf1 = _meanfield(coeffs, zeta, fam2[j], g1, cfg)
        for i in firsts1:
            atoms = np.array([float(x)]) if kd == 0 else _outer_individual(
                coeffs, np.full(K_out, float(x)), fam1[i], g1, cfg, flow1)
            tab = _value_table(coeffs, t + delta, atoms, Xmf1[:, -1], tails1, tails2, cfg, grid=g2)
            jj = np.argmin(tab["W"], axis=0)
            cols = np.arange(tab["W"].shape[1])
            Vatom = tab["W"][jj, cols]
            se_atom = tab["se"][jj, cols]
            per_path = Vatom[tab["inverse"]]
            outer = float(np.std(per_path, ddof=1) / math.sqrt(per_path.size)) if per_path.size > 1 else 0.0
            inner = float(math.sqrt(np.mean(se_atom[tab["inverse"]] ** 2)))
            rows.append({"first_u1": int(i), "first_u2": int(j), "value": _atom_average(Vatom, tab["counts"]),
                         "inner_se": inner, "outer_se": outer})
    best = min(range(len(rows)), key=lambda r: (rows[r]["value"], r))
    rhs = rows[best]
    se = _combined_se(lhs.std_error, rhs["inner_se"], rhs["outer_se"])
    slack = lhs.value - rhs["value"]
    tol = _tolerance(se, c_disc, cfg.h, n_sigma)
    return {
        "check": "one_sided_dpp_V", "lhs": lhs.value, "rhs": rhs["value"], "slack": slack,
        "se_combined": se, "tolerance": tol, "strictly_positive": bool(slack > tol),
        "first_pieces": rows, "pass": bool(slack >= -tol),
    }


def _l2_norm(mu):
    return math.sqrt(mu.second_moment())


def continuity_probe(coeffs, pairs, families, cfg):
    """Empirical moduli of the theta-value between paired queries.

    Each pair is ((t, mu1, mu2), (t', mu1', mu2')) with mu1 an
    EmpiricalMeasure and mu2 an EmpiricalMeasure of mean-field samples.
    Same-time pairs feed the measure-Lipschitz ratio, same-measure pairs the
    time ratio |dtheta| / ((1 + |mu1|_2 + |mu2|_2) |dt|^(1/2)).
    """
    from .measures import wasserstein2

    out = []
    for (t, m1, m2), (s, n1, n2) in pairs:
        a = vartheta_eval(coeffs, t, m1, m2.atoms, families, cfg)
        b = vartheta_eval(coeffs, s, n1, n2.atoms, families, cfg)
        dv = abs(a.value - b.value)
        row = {"t": t, "s": s, "theta_t": a.value, "theta_s": b.value, "diff": dv,
               "se": _combined_se(a.std_error, b.std_error)}
        dist = wasserstein2(m1, n1) + wasserstein2(m2, n2)
        dt = abs(t - s)
        if dt == 0:
            row["lipschitz_ratio"] = 0.0 if dv == 0 else (dv / dist if dist > 0 else math.inf)
        if m1 == n1 and m2 == n2 or dist == 0:
            scale = (1.0 + _l2_norm(m1) + _l2_norm(m2)) * math.sqrt(dt)
            row["holder_ratio"] = 0.0 if dv == 0 else (dv / scale if scale > 0 else math.inf)
        out.append(row)
    lip = [r["lipschitz_ratio"] for r in out if "lipschitz_ratio" in r]
    hol = [r["holder_ratio"] for r in out if "holder_ratio" in r]
    return {
        "rows": out,
        "lipschitz_constant": max(lip) if lip else None,
        "holder_constant": max(hol) if hol else None,
        "finite": all(math.isfinite(v) for v in lip + hol),
    }


def holder_ladder(coeffs, mu1, mu2, dts, families, cfg, t_end=None, band=0.25):
    """Time ratios for pairs (t_end - dt, t_end); stable iff each is within ``band`` of the median."""
    t_end = cfg.T if t_end is None else t_end
    pairs = [((t_end - dt, mu1, mu2), (t_end, mu1, mu2)) for dt in dts]
    rep = continuity_probe(coeffs, pairs, families, cfg)
    ratios = [r["holder_ratio"] for r in rep["rows"]]
    med = float(np.median(ratios))
    dev = [abs(r - med) / med if med > 0 else (0.0 if r == 0 else math.inf) for r in ratios]
    rep.update({"dts": list(dts), "ratios": ratios, "median": med, "max_relative_deviation": max(dev),
                "stable": bool(max(dev) <= band and rep["finite"])})
    return rep


__all__ = [
    "ValueEstimate", "FamilyWarning", "ControlError", "cost_J", "W_eval", "V_eval", "vartheta_eval",
    "dpp_check_W", "dpp_check_vartheta", "one_sided_dpp_V", "continuity_probe", "holder_ladder",
    "calibrate_c_disc",
]
