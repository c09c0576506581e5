"""Coefficient sets for the coupled mean-field / individual dynamics.

A coefficient is a vectorised callable ``phi(t, y, v, gamma)`` returning one
value per entry of ``y`` (and ``v``), where ``gamma`` is the joint law of the
mean-field state and its control (a ``JointEmpiricalMeasure``). The terminal
cost is ``phi_terminal(x, mu)`` with ``mu`` an ``EmpiricalMeasure``.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .kernels import N_PARAMS, eval_sine
from .measures import EmpiricalMeasure, JointEmpiricalMeasure, wasserstein2

COEFF_NAMES = ("b1", "b2", "sigma1", "sigma2")


@dataclass
class CoefficientSet:
    b1: object
    b2: object
    sigma1: object
    sigma2: object
    phi_terminal: object
    declared_bound_c0: float = 1.0
    declared_lipschitz: float = 1.0
    declared_delta: float = 1.0
    declared_kappa0: float = 0.0
    moment_index_set: tuple = (1,)
    u_bounds: tuple = (-1.0, 1.0)
    declared_growth_c: float = math.inf
    name: str = "custom"
    # (4, 6) parameter block when the coefficients belong to the sine family
    sine_params: np.ndarray = field(default=None, repr=False)

    def coeff(self, name):
        return getattr(self, name)

    def depends_on_state_control(self):
        """False iff every coefficient ignores (y, v) (checked on the sine block)."""
        if self.sine_params is None:
            return True
        return bool(np.any(self.sine_params[:, 1:3] != 0))


def _sine_callable(p):
    p = np.asarray(p, dtype=float)

    def phi(t, y, v, gamma):
        y = np.asarray(y, dtype=float)
        v = np.broadcast_to(np.asarray(v, dtype=float), y.shape)
        return eval_sine(p, t, y, v, gamma.mean_state(), gamma.mean_control()) + np.zeros_like(y)

    phi.params = p
    return phi


def sine_bound(p, u_bounds):
    umax = max(abs(u_bounds[0]), abs(u_bounds[1]))
    p = np.abs(np.asarray(p, dtype=float))
    return float(p[0] + p[1] + p[2] * umax + p[3] + p[4] + p[5])


@dataclass(frozen=True)
class TerminalCost:
    """Phi(x, mu) = const + a*x + b*x^2 + c*|x| + d*mean + e*x*mean + f*|x - mean| + g*sin(x)."""

    const: float = 0.0
    x: float = 0.0
    x2: float = 0.0
    abs: float = 0.0
    mean: float = 0.0
    x_mean: float = 0.0
    abs_dev: float = 0.0
    sin: float = 0.0
    exp_abs: float = 0.0
    exp_rate: float = 0.0

    def __call__(self, x, mu):
        x = np.asarray(x, dtype=float)
        m = mu.mean() if isinstance(mu, EmpiricalMeasure) else float(np.mean(mu))
        out = (self.const + self.x * x + self.x2 * x * x + self.abs * np.abs(x) + self.mean * m
               + self.x_mean * x * m + self.abs_dev * np.abs(x - m) + self.sin * np.sin(x))
        if self.exp_abs:
            out = out + self.exp_abs * np.exp(self.exp_rate * np.abs(x))
        return out + np.zeros_like(x)

    def lipschitz(self):
        if self.x2 or self.x_mean or self.exp_abs:
            return math.inf
        state = abs(self.x) + abs(self.abs) + abs(self.abs_dev) + abs(self.sin)
        law = abs(self.mean) + abs(self.abs_dev)
        return max(state, law)


def sine_coefficients(b1=None, b2=None, sigma1=None, sigma2=None, phi=None, u_bounds=(-1.0, 1.0),
                      delta=1.0, name="sine"):
    """Build a CoefficientSet from the sine family; missing blocks are zero."""
    zero = np.zeros(N_PARAMS)
    params = np.array([zero if p is None else np.asarray(p, dtype=float) for p in (b1, b2, sigma1, sigma2)])
    if params.shape != (4, N_PARAMS):
        raise ValueError(f"each coefficient needs {N_PARAMS} parameters")
    if phi is None:
        phi = TerminalCost(x=1.0)
    elif isinstance(phi, dict):
        phi = TerminalCost(**phi)
    c0 = max(max(sine_bound(p, u_bounds) for p in params), 1e-12)
    lip_state = float(np.max(np.abs(params[:, 1])))
    lip_law = float(np.max(np.abs(params[:, 3])))
    lip = max(lip_state, lip_law)
    if isinstance(phi, TerminalCost):
        lip = max(lip, phi.lipschitz())
    kappa0 = float(max(np.max(np.abs(params[:, 5])), lip_law))
    return CoefficientSet(
        b1=_sine_callable(params[0]), b2=_sine_callable(params[1]),
        sigma1=_sine_callable(params[2]), sigma2=_sine_callable(params[3]),
        phi_terminal=phi, declared_bound_c0=c0, declared_lipschitz=max(lip, 1e-12),
        declared_delta=delta, declared_kappa0=kappa0, moment_index_set=(1,),
        u_bounds=tuple(float(u) for u in u_bounds), declared_growth_c=_growth_c(phi, delta),
        name=name, sine_params=params,
    )


def _growth_c(phi, delta):
    if not isinstance(phi, TerminalCost):
        return math.inf
    if phi.exp_abs and phi.exp_rate > delta:
        return math.inf
    # polynomial-type terms: sup_x |poly(x)| e^{-delta|x|} is finite; scan it
    xs = np.linspace(-60.0 / delta, 60.0 / delta, 20001)
    probe = EmpiricalMeasure([0.0])
    return float(np.max(np.abs(phi(xs, probe)) * np.exp(-delta * np.abs(xs)))) * 1.01 + abs(phi.mean) + 1e-12


def _p(const=0.0, sin_y=0.0, v=0.0, sin_mean=0.0, cos_mean_control=0.0, sin_t=0.0):
    return [const, sin_y, v, sin_mean, cos_mean_control, sin_t]


def random_sine_params(rng, c0, *, law_control=True, control_in_meanfield=True, scale_y=1.0):
    """Random (4, 6) sine block whose coefficient bounds equal ``c0`` (|U| <= 1)."""
    out = np.empty((4, N_PARAMS))
    for i in range(4):
        w = rng.uniform(0.1, 1.0, N_PARAMS) * rng.choice([-1.0, 1.0], N_PARAMS)
        w[1] *= scale_y
        if not law_control:
            w[4] = 0.0
        if not control_in_meanfield and i in (0, 2):
            w[2] = 0.0
        out[i] = c0 * w / np.abs(w).sum()
    return out


PRESETS = {}


def preset(name):
    def deco(fn):
        PRESETS[name] = fn
        return fn
    return deco


@preset("zero")
def _zero(phi=None, u_bounds=(-1.0, 1.0), delta=1.0):
    return sine_coefficients(phi=phi or TerminalCost(x=1.0), u_bounds=u_bounds, delta=delta, name="zero")


@preset("drift_control")
def _drift_control(phi=None, u_bounds=(-1.0, 1.0), delta=1.0, gain=1.0):
    """Individual drift equals its control; everything else zero."""
    return sine_coefficients(b2=_p(v=gain), phi=phi or TerminalCost(x=1.0), u_bounds=u_bounds,
                             delta=delta, name="drift_control")


@preset("constant_drift")
def _constant_drift(c0=1.0, phi=None, u_bounds=(-1.0, 1.0), delta=1.0):
    return sine_coefficients(b1=_p(const=c0), b2=_p(const=c0), phi=phi, u_bounds=u_bounds, delta=delta,
                             name="constant_drift")


@preset("constant_noise")
def _constant_noise(c0=1.0, phi=None, u_bounds=(-1.0, 1.0), delta=1.0):
    return sine_coefficients(sigma1=_p(const=c0), sigma2=_p(const=c0), phi=phi, u_bounds=u_bounds,
                             delta=delta, name="constant_noise")


@preset("brownian")
def _brownian(sigma=1.0, phi=None, u_bounds=(-1.0, 1.0), delta=1.0):
    """Unit-drift-free individual noise; mean-field population frozen."""
    return sine_coefficients(sigma2=_p(const=sigma), phi=phi, u_bounds=u_bounds, delta=delta, name="brownian")


@preset("controlled_noise")
def _controlled_noise(gain=0.5, sigma=0.5, sin_y=0.2, mf_sigma=0.3, mf_drift=0.2, coupling=0.2,
                      phi=None, u_bounds=(-1.0, 1.0), delta=1.0):
    """Stochastic preset with a control-monotone individual drift.

    The individual drift is increasing in the control and the terminal cost
    is increasing in x, so the lowest control is optimal path by path.
    """
    return sine_coefficients(
        b1=_p(const=mf_drift, sin_y=-0.2, v=0.2),
        b2=_p(v=gain, sin_y=sin_y, sin_mean=coupling),
        sigma1=_p(const=mf_sigma),
        sigma2=_p(const=sigma, sin_mean=0.1),
        phi=phi or TerminalCost(x=1.0, mean=0.5), u_bounds=u_bounds, delta=delta, name="controlled_noise",
    )


@preset("sine")
def _sine(params=None, phi=None, u_bounds=(-1.0, 1.0), delta=1.0, seed=0, c0=1.0):
    if params is None:
        params = random_sine_params(np.random.default_rng(seed), c0)
    p = np.asarray(params, dtype=float)
    return sine_coefficients(*p, phi=phi, u_bounds=u_bounds, delta=delta, name="sine")


def make_preset(name, **kwargs):
    if name not in PRESETS:
        raise KeyError(f"unknown coefficient preset {name!r}; known: {sorted(PRESETS)}")
    phi = kwargs.get("phi")
    if isinstance(phi, dict):
        kwargs["phi"] = TerminalCost(**phi)
    if "u_bounds" in kwargs:
        kwargs["u_bounds"] = tuple(kwargs["u_bounds"])
    return PRESETS[name](**kwargs)


def _joint_w2(g1, g2):
    """Exact W2 between two uniform joint measures of equal size (assignment problem)."""
    a = np.column_stack([g1.states, g1.controls])
    b = np.column_stack([g2.states, g2.controls])
    cost = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    r, c = linear_sum_assignment(cost)
    return float(np.sqrt(cost[r, c].mean()))


def assumption_probe(coeffs, n_samples=200, seed=0, horizon=1.0, atoms=8):
    """Random-point check of boundedness, Lipschitz and growth conditions.

    Returns a dict with the worst observed constant per condition and a
    ``violations`` list; nothing is raised.
    """
    rng = np.random.default_rng(seed)
    lo, hi = coeffs.u_bounds
    worst = {f"bound_{n}": 0.0 for n in COEFF_NAMES}
    worst.update({f"lipschitz_{n}": 0.0 for n in COEFF_NAMES})
    worst.update({f"kappa0_{n}": 0.0 for n in COEFF_NAMES})
    worst["phi_lipschitz"] = 0.0
    for _ in range(n_samples):
        t = rng.uniform(0, horizon)
        s2 = rng.uniform(0, horizon)
        controls = rng.uniform(lo, hi, atoms)
        zs = rng.normal(0, rng.uniform(0.2, 3.0), atoms)
        zs2 = zs + rng.normal(0, rng.uniform(0.01, 1.0), atoms)
        g = JointEmpiricalMeasure(zs, controls, u_bounds=coeffs.u_bounds)
        g2 = JointEmpiricalMeasure(zs2, controls, u_bounds=coeffs.u_bounds)
        y = rng.normal(0, 3.0, 4)
        y2 = y + rng.normal(0, 0.5, 4)
        v = rng.uniform(lo, hi, 4)
        w2 = _joint_w2(g, g2)
        mdiff = sum(abs(np.mean(zs ** i) - np.mean(zs2 ** i)) for i in coeffs.moment_index_set)
        for n in COEFF_NAMES:
            f = coeffs.coeff(n)
            a = np.asarray(f(t, y, v, g))
            worst[f"bound_{n}"] = max(worst[f"bound_{n}"], float(np.max(np.abs(a))))
            b = np.asarray(f(t, y2, v, g2))
            den = np.abs(y - y2) + w2
            worst[f"lipschitz_{n}"] = max(worst[f"lipschitz_{n}"], float(np.max(np.abs(a - b) / den)))
            c = np.asarray(f(s2, y, v, g2))
            den_k = abs(t - s2) + mdiff
            if den_k > 0:
                worst[f"kappa0_{n}"] = max(worst[f"kappa0_{n}"], float(np.max(np.abs(a - c)) / den_k))
        mu, mu2 = EmpiricalMeasure(zs), EmpiricalMeasure(zs2)
        x = rng.normal(0, 3.0, 4)
        x2 = x + rng.normal(0, 0.5, 4)
        pa = np.asarray(coeffs.phi_terminal(x, mu))
        pb = np.asarray(coeffs.phi_terminal(x2, mu2))
        den = np.abs(x - x2) + wasserstein2(mu, mu2)
        worst["phi_lipschitz"] = max(worst["phi_lipschitz"], float(np.max(np.abs(pa - pb) / den)))

    # growth of Phi relative to exp(delta |x|) on widening shells
    delta = coeffs.declared_delta
    probe_mu = EmpiricalMeasure(rng.normal(0, 1.0, atoms))
    shells = []
    for R in (5.0 / delta, 10.0 / delta, 20.0 / delta, 40.0 / delta):
        xs = np.linspace(-R, R, 2001)
        with np.errstate(over="ignore", invalid="ignore"):
            r = np.abs(np.asarray(coeffs.phi_terminal(xs, probe_mu), dtype=float)) * np.exp(-delta * np.abs(xs))
        shells.append(float(np.nanmax(np.where(np.isfinite(r), r, np.inf))))
    worst["phi_growth"] = shells[-1]
    # a bounded ratio has stopped growing by the outer shells
    growth_unbounded = (not np.isfinite(shells[-1])) or shells[-1] > 2.0 * shells[-2]

    violations = []
    c0 = coeffs.declared_bound_c0 * (1 + 1e-9)
    for n in COEFF_NAMES:
        if worst[f"bound_{n}"] > c0:
            violations.append(f"bound_{n}")
        if worst[f"lipschitz_{n}"] > coeffs.declared_lipschitz * (1 + 1e-9):
            violations.append(f"lipschitz_{n}")
        if worst[f"kappa0_{n}"] > coeffs.declared_kappa0 * (1 + 1e-9) + 1e-12:
            violations.append(f"kappa0_{n}")
    if worst["phi_lipschitz"] > coeffs.declared_lipschitz * (1 + 1e-9):
        violations.append("phi_lipschitz")
    if growth_unbounded or shells[-1] > coeffs.declared_growth_c:
        violations.append("phi_growth")
    return {
        "preset": coeffs.name,
        "samples": n_samples,
        "worst": worst,
        "growth_shells": shells,
        "declared": {
            "c0": coeffs.declared_bound_c0, "lipschitz": coeffs.declared_lipschitz,
            "delta": coeffs.declared_delta, "kappa0": coeffs.declared_kappa0,
            "growth_c": coeffs.declared_growth_c, "moment_index_set": list(coeffs.moment_index_set),
        },
        "violations": violations,
        "pass": not violations,
    }
