import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfbellman.coefficients import _p, random_sine_params, sine_coefficients
from mfbellman.hamiltonian import (ControlGrid, Coupling, GradientField, HamiltonianError, coupling_objective,
                                   continuity_probe_H, hamiltonian, hamiltonian_bruteforce, op_L, op_Lbar,
                                   reduced_generator)
from mfbellman.measures import EmpiricalMeasure, JointEmpiricalMeasure
from mfbellman.polynomials import Polynomial
from mfbellman.viscosity import CylindricalTestFunction, Term

PM = ControlGrid([-1.0, 1.0])
Z = GradientField.zero()
ONE = GradientField.constant(1.0)
Y = GradientField(lambda y: np.asarray(y, float), lambda y: np.ones_like(np.asarray(y, float)))
Y2 = GradientField.polynomial(Polynomial([0, 0, 1]))
G0 = JointEmpiricalMeasure([0.0], [0.0])


def test_generator_examples():
    c = sine_coefficients(b2=_p(v=1.0), sigma2=_p(const=2.0))
    assert op_L(c, 0.0, Z, np.array([0.3]), np.array([0.5]), G0)[0] == 0
    assert op_L(c, 0.0, ONE, np.array([0.3]), np.array([0.5]), G0)[0] == 0.5
    c = sine_coefficients(sigma2=_p(const=2.0))
    assert op_L(c, 0.0, Y, np.array([0.3]), np.array([0.0]), G0)[0] == 2.0
    c = sine_coefficients(sigma1=_p(const=1.0))
    assert op_Lbar(c, 0.0, Y2, np.array([0.7]), np.array([0.0]), G0)[0] == pytest.approx(0.7)
    assert op_Lbar(c, 0.0, Z, np.array([0.7]), np.array([0.0]), G0)[0] == 0


def test_op_Lbar_state_drift():
    # b1 = y is outside the sine family, so use a callable coefficient set
    c = sine_coefficients()
    c.b1 = lambda t, y, v, g: np.asarray(y, float)
    y = np.array([-0.4, 2.0])
    assert op_Lbar(c, 0.0, ONE, y, np.zeros(2), G0).tolist() == y.tolist()


def test_hamiltonian_examples():
    mu1 = EmpiricalMeasure([0.0, 1.0, -2.0])
    mu2 = EmpiricalMeasure([0.5, 1.5])
    c = sine_coefficients(b2=_p(const=0.75))
    assert hamiltonian(c, 0.0, mu1, mu2, GradientField.constant(2.0), Z, PM)["value"] == 1.5
    c = sine_coefficients(b2=_p(v=1.0))
    H = hamiltonian(c, 0.0, mu1, mu2, ONE, Z, PM)
    assert H["value"] == -1.0
    assert H["gamma1"].indices().tolist() == [0, 0, 0]
    c = sine_coefficients(b1=_p(v=1.0))
    H = hamiltonian(c, 0.0, mu1, EmpiricalMeasure([0.2]), Z, ONE, ControlGrid([-1, 0, 1]))
    assert H["value"] == -1.0


def test_bruteforce_examples():
    mu = EmpiricalMeasure([0.3])
    c = sine_coefficients(b2=_p(const=0.5, sin_y=1.0), sigma1=_p(const=1.0))
    g = ControlGrid([0.25])
    bf = hamiltonian_bruteforce(c, 0.1, mu, mu, Y, Y2, g)
    gj = JointEmpiricalMeasure([0.3], [0.25])
    direct = (op_L(c, 0.1, Y, np.array([0.3]), np.array([0.25]), gj)[0]
              + op_Lbar(c, 0.1, Y2, np.array([0.3]), np.array([0.25]), gj)[0])
    assert bf["value"] == pytest.approx(direct, abs=1e-15)
    with pytest.raises(HamiltonianError):
        hamiltonian_bruteforce(c, 0.0, EmpiricalMeasure(np.zeros(5)), mu, Y, Y, g)


def _instance(seed):
    rng = np.random.default_rng(seed)
    c = sine_coefficients(*random_sine_params(rng, rng.choice([0.5, 1.0]), law_control=False))
    mu1 = EmpiricalMeasure(rng.normal(size=rng.integers(1, 5)))
    mu2 = EmpiricalMeasure(rng.normal(size=rng.integers(1, 5)))
    grid = ControlGrid(np.sort(rng.uniform(-1, 1, rng.integers(1, 6))))
    p1 = GradientField.polynomial(Polynomial(rng.integers(-3, 4, 3).tolist()))
    p2 = GradientField.polynomial(Polynomial(rng.integers(-3, 4, 3).tolist()))
    return c, float(rng.uniform(0, 1)), mu1, mu2, p1, p2, grid


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000))
def test_main_matches_bruteforce(seed):
    c, t, mu1, mu2, p1, p2, grid = _instance(seed)
    H = hamiltonian(c, t, mu1, mu2, p1, p2, grid)
    bf = hamiltonian_bruteforce(c, t, mu1, mu2, p1, p2, grid, n_interior=20)
    assert H["status"] == "exhaustive"
    assert abs(H["value"] - bf["value"]) <= 1e-10
    assert not bf["interior_beats_vertex"]
    # the returned couplings attain the value
    assert coupling_objective(c, t, mu1, mu2, p1, p2, H["gamma1"], H["gamma2"]) == pytest.approx(H["value"], abs=1e-12)


def test_guard_detects_interior_minimum():
    """b1 = -cos(mean control) on one atom: a split control mass reaches mean 0, no vertex does."""
    c = sine_coefficients(b1=_p(cos_mean_control=-1.0))
    mu = EmpiricalMeasure([0.0])
    bf = hamiltonian_bruteforce(c, 0.0, mu, mu, Z, ONE, PM, n_interior=400)
    assert bf["interior_beats_vertex"]


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 100_000))
def test_couplings_preserve_marginals(seed):
    c, t, mu1, mu2, p1, p2, grid = _instance(seed)
    H = hamiltonian(c, t, mu1, mu2, p1, p2, grid)
    for g, mu in ((H["gamma1"], mu1), (H["gamma2"], mu2)):
        assert np.array_equal(g.state_marginal(), np.full(mu.size, 1.0 / mu.size))
        assert g.to_joint().state_marginal() == mu


def test_grid_refinement_monotone():
    for seed in range(15):
        c, t, mu1, mu2, p1, p2, grid = _instance(seed)
        if len(grid) > 3:
            continue
        a = hamiltonian(c, t, mu1, mu2, p1, p2, grid)["value"]
        b = hamiltonian(c, t, mu1, mu2, p1, p2, grid.refined())["value"]
        assert b <= a + 1e-12


def test_linear_in_gradients_for_fixed_couplings():
    c, t, mu1, mu2, p1, p2, grid = _instance(3)
    H = hamiltonian(c, t, mu1, mu2, p1, p2, grid)
    g1, g2 = H["gamma1"], H["gamma2"]
    f = lambda a, b: coupling_objective(c, t, mu1, mu2, a, b, g1, g2)
    assert f(p1, p2) == pytest.approx(f(p1, Z) + f(Z, p2), abs=1e-12)
    sp1 = GradientField(lambda y: 3 * p1(y), lambda y: 3 * p1.grad(y))
    assert f(sp1, Z) == pytest.approx(3 * f(p1, Z), abs=1e-12)


def test_local_search_flagged():
    c, t, mu1, _, p1, p2, grid = _instance(1)
    mu2 = EmpiricalMeasure(np.linspace(-1, 1, 30))
    H = hamiltonian(c, t, mu1, mu2, p1, p2, ControlGrid([-1, 0, 1]), budget=1000)
    assert H["status"] == "local"


def test_coupling_validation():
    mu = EmpiricalMeasure([0.0, 1.0])
    with pytest.raises(HamiltonianError):
        Coupling(mu, PM, [[0.5, 0.6], [1, 0]])
    with pytest.raises(HamiltonianError):
        ControlGrid([1.0, -1.0])
    with pytest.raises(HamiltonianError):
        ControlGrid([-2.0, 0.0], u_bounds=(-1, 1))


def test_reduced_generator_examples():
    mu = EmpiricalMeasure([0.1, -0.3])
    f = lambda y: np.zeros_like(y)
    assert reduced_generator(sine_coefficients(), 0.0, 0.4, mu, 1.0, 1.0, f, f, PM) == 0
    assert reduced_generator(sine_coefficients(b2=_p(v=1.0)), 0.0, 0.4, mu, 1.0, 0.0, f, f, PM) == -1
    with pytest.raises(HamiltonianError):
        reduced_generator(sine_coefficients(b1=_p(v=1.0)), 0.0, 0.4, mu, 1.0, 0.0, f, f, PM)
    with pytest.raises(HamiltonianError):
        reduced_generator(sine_coefficients(b2=_p(cos_mean_control=1.0)), 0.0, 0.4, mu, 1.0, 0.0, f, f, PM)


def _shifted_poly(x, d1, d2):
    """Polynomial f with f'(x) = d1, f''(x) = d2 (and f(x) = 0)."""
    # d1 (y - x) + d2/2 (y - x)^2
    return Polynomial([-d1 * x + 0.5 * d2 * x * x, d1 - d2 * x, 0.5 * d2])


def dual_path(seed):
    rng = np.random.default_rng(seed)
    c = sine_coefficients(*random_sine_params(rng, 1.0, law_control=False, control_in_meanfield=False))
    x = float(rng.normal())
    mu = EmpiricalMeasure(rng.normal(size=4))
    d1, d2 = rng.normal(size=2)
    g = Polynomial(rng.integers(-2, 3, 4).tolist())
    phi = CylindricalTestFunction.of(Term.make({(0, 1, 0): 1.0}, f1=_shifted_poly(x, d1, d2)),
                                     Term.make({(0, 0, 1): 1.0}, f2=g))
    grid = ControlGrid.uniform(-1, 1, 5)
    t = float(rng.uniform())
    jet = phi.jet(t, EmpiricalMeasure([x]), mu)
    p1, p2 = jet.fields()
    H = hamiltonian(c, t, EmpiricalMeasure([x]), mu, p1, p2, grid)["value"]
    gd, gdd = g.derivative(), g.derivative(2)
    R = reduced_generator(c, t, x, mu, float(p1(np.array([x]))[0]), float(p1.grad(np.array([x]))[0]), gd, gdd, grid)
    return H, R


@pytest.mark.parametrize("seed", range(10))
def test_reduced_generator_dual_path(seed):
    H, R = dual_path(seed)
    assert abs(H - R) <= 1e-12


def _cyl():
    return CylindricalTestFunction.of(Term.make({(1, 1, 0): 1.0, (0, 0, 1): 0.5, (0, 2, 0): 0.3},
                                                f1=[0, 0, 1], f2=[0, 1]))


def test_continuity_probe_H():
    c = sine_coefficients(*random_sine_params(np.random.default_rng(0), 1.0, law_control=False))
    mu1, mu2 = EmpiricalMeasure([0.2, -0.5]), EmpiricalMeasure([0.1, 0.4, 0.9])
    grid = ControlGrid([-1, 0, 1])
    lim = (0.5, mu1, mu2)
    rep = continuity_probe_H(c, [lim] * 3, lim, _cyl(), grid)
    assert rep["differences"] == [0.0, 0.0, 0.0]
    seq = [(0.5, EmpiricalMeasure(mu1.atoms + 2.0 ** -n), EmpiricalMeasure(mu2.atoms - 2.0 ** -n))
           for n in range(4, 12)]
    rep = continuity_probe_H(c, seq, lim, _cyl(), grid)
    assert rep["converges"] and rep["observed_rate"] == pytest.approx(0.5, abs=0.1)
    seq = [(0.5 + 2.0 ** -n, mu1, mu2) for n in range(1, 8)]
    rep = continuity_probe_H(c, seq, lim, _cyl(), grid)
    assert rep["within_time_bound"] and rep["converges"]
