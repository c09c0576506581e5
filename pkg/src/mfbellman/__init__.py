"""Particle methods, value functions and Bellman-equation diagnostics for
mean-field control with a coupled individual player."""

from .coefficients import CoefficientSet, TerminalCost, assumption_probe, make_preset, sine_coefficients
from .control import (ValueEstimate, V_eval, W_eval, continuity_probe, cost_J, dpp_check_vartheta, dpp_check_W,
                      one_sided_dpp_V, vartheta_eval)
from .controls import (Concat, Constant, ControlFamily, ControlLaw, Elementary, Table, constants,
                       piecewise_constants)
from .dynamics import (BrownianPaths, EnsembleTrajectory, SimConfig, SimulationGrid, flow_check, invariance_check,
                       simulate, simulate_pair, stability_check)
from .hamiltonian import (ControlGrid, Coupling, GradientField, hamiltonian, hamiltonian_bruteforce, op_L, op_Lbar,
                          reduced_generator)
from .measures import (EmpiricalMeasure, ExpMomentParams, JointEmpiricalMeasure, exp_weight, in_class, in_O_N,
                       law_transfer, moment, wasserstein2)
from .polynomials import Polynomial, derivative, dist_d, enumerate_theta, has_star_property, star_closure
from .viscosity import (CylindricalTestFunction, Term, comparison_probe, doubling_objective, ito_residual, lderiv,
                        subsolution_residual, supersolution_residual, touching_search)

__version__ = "0.1.0"
