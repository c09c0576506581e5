"""Exact univariate polynomials, derivative-closed sets and the weighted
moment distance built on them.
"""

import csv
import io
import json
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.optimize import minimize_scalar

from .measures import MeasureError, exp_moment


class Polynomial:
    """Polynomial with exact rational coefficients, constant term first.

    The zero polynomial has an empty coefficient tuple and degree
    ``-math.inf``.
    """

    __slots__ = ("coeffs", "_float")

    def __init__(self, coeffs=()):
        c = [Fraction(x) for x in coeffs]
        while c and c[-1] == 0:
            c.pop()
        self.coeffs = tuple(c)
        self._float = None

    @classmethod
    def monomial(cls, j, coeff=1):
        return cls([0] * j + [coeff])

    @classmethod
    def constant(cls, c):
        return cls([c])

    @property
    def degree(self):
        return len(self.coeffs) - 1 if self.coeffs else -math.inf

    def is_zero(self):
        return not self.coeffs

    def __eq__(self, other):
        if not isinstance(other, Polynomial):
            return NotImplemented
        return self.coeffs == other.coeffs

    def __hash__(self):
        return hash(self.coeffs)

    def __repr__(self):
        return f"Polynomial({[str(c) for c in self.coeffs]})"

    def __str__(self):
        if not self.coeffs:
            return "0"
        parts = []
        for k, c in enumerate(self.coeffs):
            if c == 0:
                continue
            mono = "" if k == 0 else ("x" if k == 1 else f"x^{k}")
            if k and c == 1:
                parts.append(mono)
            else:
                parts.append(f"{c}{mono}")
        return " + ".join(reversed(parts))

    def __add__(self, other):
        n = max(len(self.coeffs), len(other.coeffs))
        a = list(self.coeffs) + [0] * (n - len(self.coeffs))
        b = list(other.coeffs) + [0] * (n - len(other.coeffs))
        return Polynomial([x + y for x, y in zip(a, b)])

    def __mul__(self, other):
        if not isinstance(other, Polynomial):
            return Polynomial([c * Fraction(other) for c in self.coeffs])
        if self.is_zero() or other.is_zero():
            return Polynomial()
        out = [Fraction(0)] * (len(self.coeffs) + len(other.coeffs) - 1)
        for i, a in enumerate(self.coeffs):
            for j, b in enumerate(other.coeffs):
                out[i + j] += a * b
        return Polynomial(out)

    __rmul__ = __mul__

    def derivative(self, order=1):
        c = list(self.coeffs)
        for _ in range(order):
            if not c:
                break
            c = [k * c[k] for k in range(1, len(c))]
        return Polynomial(c)

    def float_coeffs(self):
        if self._float is None:
            self._float = np.array([float(c) for c in self.coeffs], dtype=float)
        return self._float

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        c = self.float_coeffs()
        out = np.zeros_like(x)
        for a in c[::-1]:
            out = out * x + a
        return out if out.ndim else float(out)

    def to_json(self):
        return json.dumps([_frac_to_json(c) for c in self.coeffs])

    @classmethod
    def from_json(cls, data):
        if isinstance(data, str):
            data = json.loads(data)
        return cls([Fraction(str(x)) if isinstance(x, str) else Fraction(x) for x in data])


def _frac_to_json(c):
    return int(c) if c.denominator == 1 else f"{c.numerator}/{c.denominator}"


def derivative(p, order):
    if order < 0:
        raise ValueError("derivative order must be non-negative")
    return p.derivative(order)


def _chain(g):
    return [g.derivative(i) for i in range(int(g.degree) + 1)]


@dataclass(frozen=True)
class ClosureSet:
    members: tuple
    generator: Polynomial

    def __contains__(self, p):
        return p in self.members

    def __len__(self):
        return len(self.members)

    def as_set(self):
        return frozenset(self.members)


def star_closure(f):
    """Smallest derivative-closed set containing ``f``, by fixed-point iteration."""
    if f.is_zero():
        raise ValueError("closure of the zero polynomial is not defined")
    members = [f]
    seen = {f}
    frontier = [f]
    while frontier:
        new = []
        for g in frontier:
            for d in _chain(g):
                if d not in seen:
                    seen.add(d)
                    members.append(d)
                    new.append(d)
        frontier = new
    return ClosureSet(tuple(members), f)


def has_star_property(s):
    s = set(s)
    return all(d in s for g in s for d in _chain(g))


def sup_ratio(f, delta):
    """Upper estimate of sup_x |f(x)| / e_delta(x).

    The ratio vanishes at infinity, so a dense scan on a bracket that holds
    the maximiser is followed by a bounded local refinement. The result is
    inflated by a relative 1e-9 so that it stays an upper bound.
    """
    if f.is_zero():
        return 0.0
    n = max(int(f.degree), 0)
    coeff = np.abs(f.float_coeffs()).max()
    # |f(x)| <= coeff*(n+1)*|x|^n beyond |x|>=1, and the weight beats it well inside R
    R = 10.0 + 4.0 * (n + 1) / delta + math.log1p(coeff * (n + 1)) / delta
    xs = np.linspace(-R, R, 40001)

    def ratio(x):
        return np.abs(f(x)) * np.exp(-delta * (np.sqrt(np.asarray(x) ** 2 + 1.0) - 1.0))

    r = ratio(xs)
    k = int(np.argmax(r))
    best = float(r[k])
    lo, hi = xs[max(k - 1, 0)], xs[min(k + 1, xs.size - 1)]
    if hi > lo:
        res = minimize_scalar(lambda x: -float(ratio(x)), bounds=(lo, hi), method="bounded",
                              options={"xatol": 1e-12})
        best = max(best, -float(res.fun))
    return best * (1.0 + 1e-9)


@dataclass(frozen=True)
class ThetaEnumeration:
    f_list: tuple
    index_sets: tuple
    s_values: np.ndarray
    c_values: np.ndarray
    j_root: int
    b: float
    delta: float

    def __len__(self):
        return len(self.f_list)

    def index_of(self, p):
        """1-based enumeration index of ``p``."""
        return self.f_list.index(p) + 1

    def moments(self, mu):
        return np.array([float(np.mean(f(mu.atoms))) for f in self.f_list])

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["j", "polynomial", "degree", "s_j", "c_j", "I_j"])
        for j, (f, idx, s, c) in enumerate(zip(self.f_list, self.index_sets, self.s_values, self.c_values), 1):
            w.writerow([j, f.to_json(), int(f.degree), repr(float(s)), repr(float(c)), ";".join(map(str, idx))])
        return buf.getvalue()


def enumerate_theta(j_root=4, b=1.0, delta=1.0):
    """Finite prefix of the union of the closures of x, x^2, ..., x^j_root.

    Order: ascending root power, then derivative order; first occurrence
    wins. Indices in ``index_sets`` are 1-based.
    """
    if j_root < 1:
        raise ValueError("j_root must be at least 1")
    if not (b > 0 and delta > 0):
        raise ValueError("b and delta must be positive")
    f_list = []
    pos = {}
    for j in range(1, j_root + 1):
        for g in star_closure(Polynomial.monomial(j)).members:
            if g not in pos:
                pos[g] = len(f_list) + 1
                f_list.append(g)
    index_sets = tuple(tuple(sorted(pos[g] for g in star_closure(f).members)) for f in f_list)
    s = np.array([1.0 + b * sup_ratio(f, delta) for f in f_list])
    c = np.empty(len(f_list))
    for j, idx in enumerate(index_sets):
        two = math.fsum(2.0 ** k for k in idx)
        ss = math.fsum(s[k - 1] for k in idx)
        c[j] = 1.0 / (two * ss * ss)
    return ThetaEnumeration(tuple(f_list), index_sets, s, c, j_root, float(b), float(delta))


def dist_d(mu, nu, theta, *, check_class=True):
    """Weighted squared-moment distance sum_j c_j <mu - nu, f_j>^2."""
    if check_class:
        for name, m in (("mu", mu), ("nu", nu)):
            em = exp_moment(m, theta.delta)
            if em > theta.b:
                raise MeasureError(f"{name} has exponential moment {em:.6g} > class bound {theta.b:.6g}")
    diff = theta.moments(mu) - theta.moments(nu)
    return float(np.dot(theta.c_values, diff * diff))


def weighted_moment_sum(mu, theta):
    m = theta.moments(mu)
    return float(np.dot(theta.c_values, m * m))


__all__ = [
    "Polynomial", "ClosureSet", "ThetaEnumeration", "derivative", "star_closure",
    "has_star_property", "enumerate_theta", "dist_d", "sup_ratio", "weighted_moment_sum",
]
