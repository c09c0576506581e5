"""Empirical measures on the line and on state x control pairs.

All measures carry uniform atom weights except the joint measures built
from non-Dirac couplings, which keep explicit weights.
"""

import json
import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

_LOG_MAX = math.log(np.finfo(float).max)


class MeasureError(ValueError):
    pass


class SaturationWarning(RuntimeWarning):
    """exp_weight hit the largest finite float."""


class EmpiricalMeasure:
    """Uniform-weight atom list on the real line."""

    __slots__ = ("_atoms",)

    def __init__(self, atoms):
        a = np.array(atoms, dtype=float).ravel()
        if a.size == 0:
            raise MeasureError("empirical measure needs at least one atom")
        bad = np.flatnonzero(~np.isfinite(a))
        if bad.size:
            raise MeasureError(f"atom {int(bad[0])} is not finite: {a[bad[0]]!r}")
        a.setflags(write=False)
        self._atoms = a

    @property
    def atoms(self):
        return self._atoms

    @property
    def size(self):
        return self._atoms.size

    def __len__(self):
        return self._atoms.size

    def __repr__(self):
        return f"EmpiricalMeasure(size={self.size}, mean={self.mean():.6g})"

    def __eq__(self, other):
        if not isinstance(other, EmpiricalMeasure):
            return NotImplemented
        return self.size == other.size and np.array_equal(np.sort(self._atoms), np.sort(other._atoms))

    def __hash__(self):
        return hash(np.sort(self._atoms).tobytes())

    @classmethod
    def dirac(cls, x):
        return cls([x])

    def mean(self):
        return float(np.mean(self._atoms))

    def second_moment(self):
        return float(np.mean(self._atoms ** 2))

    def shifted(self, dx):
        return EmpiricalMeasure(self._atoms + dx)

    def scaled(self, s, center=0.0):
        return EmpiricalMeasure(center + s * (self._atoms - center))

    # serialization
    def to_text(self):
        return "".join(f"{x!r}\n" for x in self._atoms.tolist())

    @classmethod
    def from_text(cls, text):
        vals = []
        for lineno, line in enumerate(text.splitlines(), 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            try:
                vals.append(float(s))
            except ValueError:
                raise MeasureError(f"line {lineno}: not a real number: {s!r}") from None
        return cls(vals)

    def to_json(self):
        return json.dumps(self._atoms.tolist())

    @classmethod
    def from_json(cls, text):
        data = json.loads(text)
        if not isinstance(data, list):
            raise MeasureError("expected a JSON array of atoms")
        return cls(data)


@dataclass(frozen=True)
class JointEmpiricalMeasure:
    """Atoms (state, control) with weights summing to one.

    Built with ``weights=None`` the measure is uniform; couplings with
    non-Dirac conditional rows produce weighted instances.
    """

    states: np.ndarray
    controls: np.ndarray
    weights: np.ndarray = field(default=None)
    u_bounds: tuple = (-math.inf, math.inf)

    def __post_init__(self):
        s = np.asarray(self.states, dtype=float).ravel()
        c = np.asarray(self.controls, dtype=float).ravel()
        if s.size == 0 or s.size != c.size:
            raise MeasureError("joint measure needs matching non-empty state/control arrays")
        if not (np.all(np.isfinite(s)) and np.all(np.isfinite(c))):
            raise MeasureError("joint measure atoms must be finite")
        lo, hi = self.u_bounds
        out = np.flatnonzero((c < lo) | (c > hi))
        if out.size:
            raise MeasureError(f"control atom {int(out[0])} = {c[out[0]]!r} outside U = [{lo}, {hi}]")
        if self.weights is None:
            w = np.full(s.size, 1.0 / s.size)
        else:
            w = np.asarray(self.weights, dtype=float).ravel()
            if w.size != s.size or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
                raise MeasureError("joint measure weights must be non-negative and sum to 1")
        object.__setattr__(self, "states", s)
        object.__setattr__(self, "controls", c)
        object.__setattr__(self, "weights", w)

    @property
    def size(self):
        return self.states.size

    def mean_state(self):
        return float(np.dot(self.weights, self.states))

    def mean_control(self):
        return float(np.dot(self.weights, self.controls))

    def state_marginal(self):
        w = self.weights
        if not np.allclose(w, w[0]):
            raise MeasureError("weighted joint measure has no uniform state marginal")
        return EmpiricalMeasure(self.states)

    def to_csv(self):
        lines = ["state,control"]
        lines += [f"{s!r},{c!r}" for s, c in zip(self.states.tolist(), self.controls.tolist())]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text, u_bounds=(-math.inf, math.inf)):
        rows = [r for r in text.splitlines() if r.strip()]
        if rows and not _is_number(rows[0].split(",")[0]):
            rows = rows[1:]
        states, controls = [], []
        for lineno, r in enumerate(rows, 1):
            parts = r.split(",")
            if len(parts) != 2:
                raise MeasureError(f"row {lineno}: expected two columns (state, control)")
            states.append(float(parts[0]))
            controls.append(float(parts[1]))
        return cls(np.array(states), np.array(controls), u_bounds=u_bounds)


def _is_number(s):
    try:
        float(s)
    except ValueError:
        return False
    return True


@dataclass(frozen=True)
class ExpMomentParams:
    delta: float
    c0: float
    n_level: int

    def __post_init__(self):
        if not (self.delta > 0 and self.c0 > 0):
            raise MeasureError("delta and c0 must be positive")
        if int(self.n_level) != self.n_level or self.n_level < 1:
            raise MeasureError("n_level must be a positive integer")

    @property
    def k_star(self):
        d, c = self.delta, self.c0
        return c * d + 0.5 * c * c * (d + d * d)

    def bound(self, t):
        """Level N * exp(K* t) of the moment class at time t."""
        return self.n_level * math.exp(self.k_star * t)


def k_star_exact(c0, delta):
    """K* in exact rational arithmetic (inputs converted via Fraction)."""
    c, d = Fraction(c0), Fraction(delta)
    return c * d + Fraction(1, 2) * c * c * (d + d * d)


def moment(mu, f):
    """Integral of ``f`` against the empirical measure ``mu``.

    ``f`` is applied to the atom array and must return one finite value per
    atom.
    """
    vals = np.asarray(f(mu.atoms), dtype=float)
    if vals.shape == ():
        vals = np.full(mu.size, float(vals))
    bad = np.flatnonzero(~np.isfinite(vals))
    if bad.size:
        i = int(bad[0])
        raise MeasureError(f"integrand is not finite at atom {i} (x = {mu.atoms[i]!r})")
    return float(np.mean(vals))


def _lcm_resample(a, b):
    m, n = a.size, b.size
    if m == n:
        return a, b
    L = m * n // math.gcd(m, n)
    return np.repeat(a, L // m), np.repeat(b, L // n)


def wasserstein2(mu, nu):
    """Quadratic-cost optimal transport distance between two empirical measures.

    On the line the monotone (sorted) pairing is optimal; different atom
    counts are brought to their least common multiple by replicating atoms,
    which leaves uniform-weight measures unchanged.
    """
    if mu.size == 0 or nu.size == 0:
        raise MeasureError("W2 of an empty measure")
    a, b = _lcm_resample(np.sort(mu.atoms), np.sort(nu.atoms))
    return float(math.sqrt(np.mean((a - b) ** 2)))


def exp_weight(x, delta, *, return_flag=False):
    """exp(delta * (sqrt(x^2 + 1) - 1)).

    Values whose logarithm exceeds the float range saturate at the largest
    finite float; a ``SaturationWarning`` is emitted and, with
    ``return_flag=True``, the flag is returned alongside the value.
    """
    x = np.asarray(x, dtype=float)
    expo = delta * (np.sqrt(x * x + 1.0) - 1.0)
    sat = expo > _LOG_MAX
    with np.errstate(over="ignore"):
        out = np.exp(np.minimum(expo, _LOG_MAX))
    out = np.where(sat, np.finfo(float).max, out)
    flag = bool(np.any(sat))
    if flag:
        warnings.warn("exp_weight saturated at the largest finite float", SaturationWarning, stacklevel=2)
    if out.ndim == 0:
        out = float(out)
    return (out, flag) if return_flag else out


def exp_moment(mu, delta):
    return moment(mu, lambda x: exp_weight(x, delta))


def in_class(mu, delta, b):
    """Membership in the class of measures with exp-moment at most ``b``."""
    return exp_moment(mu, delta) <= b


def in_O_N(t, mu1, mu2, params):
    lvl = params.bound(t)
    return exp_moment(mu1, params.delta) <= lvl and exp_moment(mu2, params.delta) <= lvl


def minimal_level(t, mu1, mu2, delta, c0):
    """Smallest integer N with (t, mu1, mu2) inside O_N."""
    k = ExpMomentParams(delta, c0, 1).k_star
    m = max(exp_moment(mu1, delta), exp_moment(mu2, delta))
    return max(1, math.ceil(m * math.exp(-k * t) - 1e-12))


def law_transfer(zeta, eta, zeta_prime, seed):
    """Re-pair ``eta`` with a relabelled copy ``zeta_prime`` of ``zeta``.

    For every level x of ``zeta`` the samples of ``zeta_prime`` equal to x
    receive eta values through the empirical conditional left-inverse CDF of
    eta given zeta = x, evaluated at stratified uniforms (j + 1 - U_j)/n_x in a
    random order. Each uniform is marginally U(0, 1) and every conditional
    quantile is hit exactly once, so the eta marginal and every conditional
    law are reproduced exactly.
    """
    z = np.asarray(zeta, dtype=float).ravel()
    e = np.asarray(eta, dtype=float).ravel()
    zp = np.asarray(zeta_prime, dtype=float).ravel()
    if z.size != e.size:
        raise MeasureError("zeta and eta must have the same length")
    if z.size != zp.size:
        raise MeasureError(f"zeta has {z.size} samples but zeta_prime has {zp.size}")
    zs, zps = np.sort(z), np.sort(zp)
    mism = np.flatnonzero(zs != zps)
    if mism.size:
        i = int(mism[0])
        raise MeasureError(
            f"marginal mismatch between zeta and zeta_prime at sorted position {i}: {zs[i]!r} != {zps[i]!r}"
        )
    rng = np.random.default_rng(seed)
    out = np.empty_like(e)
    for level in np.unique(z):
        cond = np.sort(e[z == level])
        idx = np.flatnonzero(zp == level)
        n = cond.size
        u = (rng.permutation(n) + 1.0 - rng.random(n)) / n  # in (j/n, (j+1)/n]
        # left inverse: inf{y : F(y) >= u}
        k = np.clip(np.ceil(u * n).astype(int) - 1, 0, n - 1)
        out[idx] = cond[k]
    return out
