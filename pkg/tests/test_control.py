import math
import warnings

import numpy as np
import pytest

from mfbellman.coefficients import TerminalCost, _p, make_preset, sine_coefficients
from mfbellman.control import (FamilyWarning, V_eval, W_eval, calibrate_c_disc, continuity_probe, cost_J,
                               dpp_check_vartheta, dpp_check_W, holder_ladder, one_sided_dpp_V, vartheta_eval)
from mfbellman.controls import Constant, constants, piecewise_constants
from mfbellman.dynamics import SimConfig
from mfbellman.measures import EmpiricalMeasure

PM = constants([-1.0, 1.0])


def cfg(**kw):
    base = dict(T=1.0, steps=8, M=200, K=50, seed=0)
    base.update(kw)
    return SimConfig(**base)


@pytest.mark.parametrize("t", [0.0, 0.25, 0.5, 1.0])
@pytest.mark.parametrize("x", [-0.4, 0.3])
def test_W_drift_control_closed_form(t, x):
    est = W_eval(make_preset("drift_control"), t, x, np.zeros(10), Constant(0.0), PM, cfg())
    assert est.value == pytest.approx(x - (1.0 - t), abs=1e-12)
    assert est.argmin == (0,)
    assert est.std_error == 0


def test_zero_dynamics_values():
    c = cfg()
    zeta = np.linspace(-1, 1, 20)
    assert cost_J(make_preset("zero"), 0.0, 0.7, zeta, (Constant(1.0), Constant(-1.0)), c).value == 0.7
    assert V_eval(make_preset("zero"), 0.0, 0.7, zeta, (PM, PM), c).value == 0.7
    mu = EmpiricalMeasure([0.0, 2.0])
    assert vartheta_eval(make_preset("zero"), 0.0, mu, zeta, (PM, PM), c).value == 1.0


def test_dirac_consistency_bitwise():
    coeffs = make_preset("controlled_noise")
    c = cfg()
    zeta = np.random.default_rng(0).normal(size=200)
    fams = (PM, constants([-1.0, 0.0, 1.0]))
    for x in (-0.5, 0.0, 1.3):
        a = V_eval(coeffs, 0.25, x, zeta, fams, c)
        b = vartheta_eval(coeffs, 0.25, EmpiricalMeasure([x]), zeta, fams, c)
        assert a.value == b.value and a.argmin == b.argmin


def test_terminal_condition_exact():
    phi = TerminalCost(x2=1.0, x_mean=0.5, sin=1.0)
    coeffs = sine_coefficients(b2=_p(v=1.0), sigma2=_p(const=0.5), phi=phi)
    zeta = np.random.default_rng(3).normal(size=50)
    mu1 = EmpiricalMeasure([0.1, -2.0, 3.5])
    est = vartheta_eval(coeffs, 1.0, mu1, zeta, (PM, PM), cfg())
    assert est.value == pytest.approx(float(np.mean(phi(mu1.atoms, EmpiricalMeasure(zeta)))), rel=0, abs=1e-15)


def test_family_monotonicity():
    coeffs = make_preset("controlled_noise")
    c = cfg()
    zeta = np.random.default_rng(1).normal(size=200)
    small = constants([0.5])
    big = constants([0.5, -0.3, 1.0])
    a = W_eval(coeffs, 0.0, 0.2, zeta, Constant(0.0), small, c)
    b = W_eval(coeffs, 0.0, 0.2, zeta, Constant(0.0), big, c)
    assert b.value <= a.value


def test_calibrated_discretisation_allowance_is_zero():
    assert calibrate_c_disc(cfg()) == 0.0


def test_dpp_W_zero_and_drift():
    c = cfg()
    zeta = np.zeros(10)
    fam = piecewise_constants([-1, 1], [0.5])
    for name in ("zero", "drift_control"):
        rep = dpp_check_W(make_preset(name), 0.0, 0.5, 0.3, zeta, Constant(0.0), (fam,), c, K_out=5)
        assert abs(rep["gap"]) <= 1e-9 and rep["pass"]


def test_dpp_W_warns_when_not_closed():
    with pytest.warns(FamilyWarning):
        rep = dpp_check_W(make_preset("drift_control"), 0.0, 0.5, 0.3, np.zeros(4), Constant(0.0), (PM,), cfg(),
                          K_out=3)
    assert not rep["concat_closed"]


def test_dpp_vartheta_drift_control():
    fam = piecewise_constants([-1, 1], [0.25])
    mu1 = EmpiricalMeasure([0.0, 2.0])
    rep = dpp_check_vartheta(make_preset("drift_control"), 0.0, 0.25, mu1, np.zeros(6), (fam, fam), cfg(), K_out=4)
    assert abs(rep["gap"]) <= 1e-9 and rep["pass"]
    assert rep["lhs"] == pytest.approx(1.0 - 1.0)


def test_dpp_W_stochastic():
    coeffs = make_preset("controlled_noise")
    c = cfg(M=500, K=300)
    fam = piecewise_constants([-1, 1], [0.5])
    zeta = np.random.default_rng(2).normal(size=500)
    rep = dpp_check_W(coeffs, 0.0, 0.5, 0.2, zeta, Constant(0.5), (fam,), c, K_out=100)
    assert rep["pass"], rep


def test_one_sided_V():
    c = cfg()
    zeta = np.zeros(10)
    rep = one_sided_dpp_V(make_preset("zero"), 0.0, 0.5, 0.3, zeta, (PM, PM), c, K_out=5)
    assert rep["slack"] == 0 and rep["pass"]


def test_one_sided_V_strict_gap():
    """Path-wise u2 choice at the midpoint beats any fixed u2: the one-sided identity is strict."""
    coeffs = sine_coefficients(b1=_p(v=1.0), sigma2=_p(const=1.0), phi=TerminalCost(x_mean=1.0), name="strict")
    fam1 = constants([0.0])
    fam2 = piecewise_constants([-1.0, 1.0], [0.5])
    c = cfg(M=20, K=1000, steps=4)
    rep = one_sided_dpp_V(coeffs, 0.0, 0.5, 0.0, np.zeros(20), (fam1, fam2), c, K_out=400)
    assert rep["pass"] and rep["strictly_positive"], rep


def test_continuity_lipschitz_zero_dynamics():
    coeffs = make_preset("zero", phi=TerminalCost(abs=1.0))
    rng = np.random.default_rng(4)
    pairs = []
    for _ in range(10):
        m = EmpiricalMeasure(rng.normal(size=6))
        n = EmpiricalMeasure(rng.normal(size=6))
        z = EmpiricalMeasure(rng.normal(size=20))
        pairs.append(((0.0, m, z), (0.0, n, z)))
    rep = continuity_probe(coeffs, pairs, (PM, PM), cfg())
    assert rep["lipschitz_constant"] <= 1 + 1e-12


def test_holder_ladder_brownian():
    coeffs = make_preset("brownian", phi=TerminalCost(abs=1.0))
    c = SimConfig(T=1.0, steps=100, M=10, K=4000, seed=1)
    rep = holder_ladder(coeffs, EmpiricalMeasure([0.0]), EmpiricalMeasure(np.zeros(10)), (0.04, 0.16, 0.36),
                        (constants([0.0]), constants([0.0])), c)
    assert rep["stable"], rep["ratios"]
    # E|B_dt| = sqrt(2 dt / pi)
    assert rep["median"] == pytest.approx(math.sqrt(2 / math.pi), rel=0.05)
