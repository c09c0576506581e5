import itertools
import math
import warnings
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfbellman.measures import (EmpiricalMeasure, ExpMomentParams, JointEmpiricalMeasure, MeasureError,
                                SaturationWarning, exp_moment, exp_weight, in_class, in_O_N, k_star_exact,
                                law_transfer, minimal_level, moment, wasserstein2)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def brute_w2(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return min(math.sqrt(np.mean((a - b[list(p)]) ** 2)) for p in itertools.permutations(range(b.size)))


def test_moment_examples():
    assert moment(EmpiricalMeasure([0.0]), lambda x: x ** 2) == 0
    assert moment(EmpiricalMeasure([-1, 1]), lambda x: x ** 2) == 1
    assert moment(EmpiricalMeasure([1, 2, 3]), lambda x: x) == 2


def test_moment_names_bad_atom():
    with pytest.raises(MeasureError, match="atom 1"):
        moment(EmpiricalMeasure([1.0, 0.0]), lambda x: np.where(x == 0, np.inf, x))


def test_measure_rejects_empty_and_nonfinite():
    with pytest.raises(MeasureError):
        EmpiricalMeasure([])
    with pytest.raises(MeasureError, match="atom 2"):
        EmpiricalMeasure([0, 1, np.inf])


def test_w2_examples():
    assert wasserstein2(EmpiricalMeasure([0]), EmpiricalMeasure([1])) == 1
    mu = EmpiricalMeasure([0.3, -2, 5])
    assert wasserstein2(mu, mu) == 0
    # crossed pairing costs sqrt(5), monotone pairing 1
    assert wasserstein2(EmpiricalMeasure([0, 2]), EmpiricalMeasure([1, 3])) == pytest.approx(1.0)
    assert brute_w2([0, 2], [1, 3]) == pytest.approx(1.0)


def test_w2_unequal_sizes_replication():
    # {0} vs {-1, 1}: every unit of mass moves distance 1
    assert wasserstein2(EmpiricalMeasure([0]), EmpiricalMeasure([-1, 1])) == pytest.approx(1.0)
    a = EmpiricalMeasure([0.0, 1.0])
    b = EmpiricalMeasure([0.0, 0.0, 1.0, 1.0, 0.0, 1.0])
    assert wasserstein2(a, b) == 0


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6).flatmap(lambda n: st.tuples(st.lists(finite, min_size=n, max_size=n),
                                                      st.lists(finite, min_size=n, max_size=n))))
def test_w2_matches_bruteforce(ab):
    a, b = ab
    assert wasserstein2(EmpiricalMeasure(a), EmpiricalMeasure(b)) == pytest.approx(brute_w2(a, b), rel=1e-9, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8).flatmap(lambda n: st.tuples(*[st.lists(finite, min_size=n, max_size=n)] * 3)))
def test_w2_metric_axioms(abc):
    a, b, c = (EmpiricalMeasure(x) for x in abc)
    assert wasserstein2(a, b) == pytest.approx(wasserstein2(b, a))
    assert wasserstein2(a, a) == 0
    assert wasserstein2(a, c) <= wasserstein2(a, b) + wasserstein2(b, c) + 1e-9


def test_exp_weight_examples():
    assert exp_weight(0.0, 1.0) == 1.0
    assert exp_weight(1.0, 1.0) == pytest.approx(math.exp(math.sqrt(2) - 1))


def test_exp_weight_sandwich():
    rng = np.random.default_rng(0)
    x = rng.normal(0, 20, 10_000)
    for delta in (0.1, 1.0, 3.0):
        w = exp_weight(x, delta)
        assert np.all(np.exp(delta * (np.abs(x) - 1)) <= w * (1 + 1e-12))
        assert np.all(w <= np.exp(delta * np.abs(x)) * (1 + 1e-12))


def test_exp_weight_saturation_flag():
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        val, flag = exp_weight(1e6, 1.0, return_flag=True)
    assert flag and val == np.finfo(float).max
    assert any(issubclass(r.category, SaturationWarning) for r in rec)
    _, flag = exp_weight(3.0, 1.0, return_flag=True)
    assert not flag


def test_in_class_examples():
    d0 = EmpiricalMeasure([0.0])
    assert in_class(d0, 1.0, 1.0)
    assert not in_class(d0, 1.0, 0.5)
    assert in_class(EmpiricalMeasure([-1, 1]), 1.0, 2.0)


def test_k_star_formula():
    p = ExpMomentParams(0.5, 2.0, 3)
    assert p.k_star == 2.0 * 0.5 + 0.5 * 4.0 * (0.5 + 0.25)
    assert k_star_exact(2, Fraction(1, 2)) == Fraction(5, 2)
    assert p.bound(0.0) == 3


def test_in_O_N_examples_and_monotone():
    p = ExpMomentParams(1.0, 1.0, 1)
    d0 = EmpiricalMeasure([0.0])
    assert in_O_N(0.0, d0, d0, p)
    assert not in_O_N(0.0, EmpiricalMeasure([5.0]), d0, p)
    mu = EmpiricalMeasure([1.0, -0.5])
    ts = np.linspace(0, 2, 21)
    flags = [in_O_N(t, mu, d0, p) for t in ts]
    first = flags.index(True)
    assert all(flags[first:])


def test_minimal_level():
    mu = EmpiricalMeasure([2.0])
    n = minimal_level(0.3, mu, EmpiricalMeasure([0.0]), 1.0, 1.0)
    assert in_O_N(0.3, mu, EmpiricalMeasure([0.0]), ExpMomentParams(1.0, 1.0, n))
    if n > 1:
        assert not in_O_N(0.3, mu, EmpiricalMeasure([0.0]), ExpMomentParams(1.0, 1.0, n - 1))


def test_serialization_roundtrip():
    mu = EmpiricalMeasure([0.1, -3.25, 1e-7])
    assert EmpiricalMeasure.from_text(mu.to_text()) == mu
    assert EmpiricalMeasure.from_json(mu.to_json()) == mu
    g = JointEmpiricalMeasure([0.0, 1.5], [-1.0, 0.5], u_bounds=(-1, 1))
    g2 = JointEmpiricalMeasure.from_csv(g.to_csv(), u_bounds=(-1, 1))
    assert np.array_equal(g.states, g2.states) and np.array_equal(g.controls, g2.controls)
    with pytest.raises(MeasureError, match="line 2"):
        EmpiricalMeasure.from_text("1.0\nabc\n")


def test_joint_measure_validates_u():
    with pytest.raises(MeasureError, match="control atom 1"):
        JointEmpiricalMeasure([0, 0], [0.5, 2.0], u_bounds=(-1, 1))
    g = JointEmpiricalMeasure([1, 3], [0, 1], u_bounds=(-1, 1))
    assert g.state_marginal() == EmpiricalMeasure([1, 3])
    assert g.mean_state() == 2 and g.mean_control() == 0.5


def _conditional(z, e, level):
    return sorted(e[z == level].tolist())


def test_law_transfer_examples():
    z = np.array([0, 0, 1, 1.0])
    e = np.array([5, 6, 7, 8.0])
    zp = np.array([1, 1, 0, 0.0])
    out = law_transfer(z, e, zp, seed=3)
    assert _conditional(zp, out, 0) == [5, 6]
    assert _conditional(zp, out, 1) == [7, 8]
    # identical ordering
    out = law_transfer(z, e, z, seed=1)
    assert _conditional(z, out, 0) == [5, 6] and _conditional(z, out, 1) == [7, 8]
    # constant zeta: a reshuffle of eta
    c = np.zeros(5)
    e5 = np.array([3, 1, 4, 1, 5.0])
    assert sorted(law_transfer(c, e5, c, seed=0)) == sorted(e5)


def test_law_transfer_marginal_mismatch():
    with pytest.raises(MeasureError, match="sorted position 1"):
        law_transfer([0, 1], [1, 2], [0, 2], seed=0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_law_transfer_preserves_laws(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 40))
    z = rng.integers(0, 4, n).astype(float)
    e = rng.integers(0, 6, n).astype(float)
    zp = rng.permutation(z)
    out = law_transfer(z, e, zp, seed=seed)
    assert np.array_equal(np.sort(out), np.sort(e))
    for level in np.unique(z):
        assert _conditional(zp, out, level) == _conditional(z, e, level)


def test_law_transfer_seed_determinism():
    rng = np.random.default_rng(1)
    z = rng.integers(0, 3, 30).astype(float)
    e = rng.normal(size=30)
    zp = rng.permutation(z)
    assert np.array_equal(law_transfer(z, e, zp, 7), law_transfer(z, e, zp, 7))


def test_exp_moment_dirac():
    assert exp_moment(EmpiricalMeasure([0.0]), 2.0) == 1.0
