"""Command line entry point: ``mfbellman <subcommand> --config cfg.json --out dir``.

Exit status: 0 when every check passes, 1 when a check fails, 2 for an
invalid configuration.
"""

import argparse
import csv
import datetime
import io
import json
import os
import sys
import warnings

import numpy as np

from . import control as ctl
from ._accel import set_threads
from .config import ConfigError, Experiment, config_hash, jsonable, load_config
from .controls import ControlError
from .dynamics import GridError, SimulationError, invariance_check, simulate
from .coefficients import assumption_probe
from .hamiltonian import ControlGrid, HamiltonianError, hamiltonian
from .measures import ExpMomentParams, MeasureError, in_O_N, minimal_level
from .polynomials import Polynomial, enumerate_theta, has_star_property, star_closure
from .viscosity import (CylindricalTestFunction, ViscosityError, measure_templates, on_grid,
                        viscosity_check)

COMMANDS = ("simulate", "value", "dpp-check", "hamiltonian", "viscosity-check", "invariance", "closure",
            "probe-assumptions")


def _csv(rows, header):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


def _controls(exp):
    c = exp.check.get("controls", [0, 0])
    return exp.fam1[int(c[0])], exp.fam2[int(c[1])]


def cmd_simulate(exp):
    traj = simulate(exp.coeffs, exp.zeta.atoms, exp.mu1.atoms, _controls(exp), exp.sim, exp.t_start)
    finite = bool(np.all(np.isfinite(traj.meanfield_states)) and np.all(np.isfinite(traj.individual_states)))
    checks = [{"name": "trajectory_finite", "pass": finite}]
    result = {
        "terminal_mean_meanfield": float(traj.meanfield_states[:, -1].mean()),
        "terminal_mean_individual": float(traj.individual_states[:, -1].mean()),
        "terminal_var_meanfield": float(traj.meanfield_states[:, -1].var()),
        "terminal_var_individual": float(traj.individual_states[:, -1].var()),
    }
    return checks, result, {"trajectory.csv": traj.to_csv()}


def cmd_value(exp):
    fam = (exp.fam1, exp.fam2)
    t = exp.t_start
    V = ctl.V_eval(exp.coeffs, t, exp.x, exp.zeta.atoms, fam, exp.sim)
    th = ctl.vartheta_eval(exp.coeffs, t, exp.mu1, exp.zeta.atoms, fam, exp.sim)
    rows = []
    for j, u2 in enumerate(exp.fam2.members):
        for i, u1 in enumerate(exp.fam1.members):
            J = ctl.cost_J(exp.coeffs, t, exp.x, exp.zeta.atoms, (u1, u2), exp.sim)
            rows.append((i, j, repr(u1), repr(u2), J.value, J.std_error))
    result = {
        "V": {"value": V.value, "std_error": V.std_error, "argmin": V.argmin},
        "vartheta": {"value": th.value, "std_error": th.std_error, "argmin_u2": th.argmin[1]},
        "fingerprint": V.fingerprint,
    }
    checks = [{"name": "values_finite", "pass": bool(np.isfinite(V.value) and np.isfinite(th.value))}]
    return checks, result, {"members.csv": _csv(rows, ["u1_index", "u2_index", "u1", "u2", "cost", "std_error"])}


def cmd_dpp(exp):
    c = exp.check
    delta = float(c.get("delta", (exp.sim.T - exp.t_start) / 2))
    c_disc = ctl.calibrate_c_disc(exp.sim, exp.t_start, delta)
    fam = (exp.fam1, exp.fam2)
    kw = dict(c_disc=c_disc, K_out=exp.K_out, n_sigma=exp.n_sigma)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ctl.FamilyWarning)
        w = ctl.dpp_check_W(exp.coeffs, exp.t_start, delta, exp.x, exp.zeta.atoms, exp.fam2[0], (exp.fam1,),
                            exp.sim, **kw)
        v = ctl.dpp_check_vartheta(exp.coeffs, exp.t_start, delta, exp.mu1, exp.zeta.atoms, fam, exp.sim, **kw)
        o = ctl.one_sided_dpp_V(exp.coeffs, exp.t_start, delta, exp.x, exp.zeta.atoms, fam, exp.sim, **kw)
    for r in (w, v):
        if abs(r["gap"]) <= exp.abs_tol:
            r["pass"] = True
    checks = [
        {"name": "dpp_W", "pass": w["pass"], "gap": w["gap"], "tolerance": w["tolerance"]},
        {"name": "dpp_vartheta", "pass": v["pass"], "gap": v["gap"], "tolerance": v["tolerance"]},
        {"name": "one_sided_dpp_V", "pass": o["pass"], "slack": o["slack"], "tolerance": o["tolerance"]},
    ]
    rows = [("W", r["first_piece"], "", r["value"]) for r in w["first_pieces"]]
    rows += [("vartheta", r["first_u1"], r["first_u2"], r["value"]) for r in v["first_pieces"]]
    rows += [("V", r["first_u1"], r["first_u2"], r["value"]) for r in o["first_pieces"]]
    result = {"delta": delta, "c_disc": c_disc, "dpp_W": w, "dpp_vartheta": v, "one_sided_dpp_V": o,
              "warnings": [str(x.message) for x in caught]}
    return checks, result, {"first_pieces.csv": _csv(rows, ["check", "u1_first", "u2_first", "rhs_value"])}


def _test_function(spec):
    if spec is None:
        raise ConfigError("missing test function", field="check/test_function")
    try:
        return CylindricalTestFunction.from_dict(spec)
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"bad test function: {e}", field="check/test_function") from None


def _grid(exp):
    spec = exp.check.get("control_grid", {"n": 3})
    if "values" in spec:
        return ControlGrid(spec["values"], exp.u_bounds)
    return ControlGrid.uniform(exp.u_bounds[0], exp.u_bounds[1], int(spec.get("n", 3)))


def cmd_hamiltonian(exp):
    phi = _test_function(exp.check.get("test_function"))
    t = exp.t_start
    jet = phi.jet(t, exp.mu1, exp.mu2)
    p1, p2 = jet.fields()
    grid = _grid(exp)
    H = hamiltonian(exp.coeffs, t, exp.mu1, exp.mu2, p1, p2, grid)
    result = {"value": H["value"], "status": H["status"], "gamma1": H["gamma1"].to_dict(),
              "gamma2": H["gamma2"].to_dict(), "pi_t": jet.pi_t}
    checks = [{"name": "hamiltonian_exhaustive", "pass": H["status"] == "exhaustive"}]
    return checks, result, {}


def cmd_viscosity(exp):
    c = exp.check
    phi = _test_function(c.get("test_function"))
    side = c.get("side", "both")
    tm = c.get("templates", {})
    base1 = tm.get("base_mu1", [-0.5, 0.5])
    base2 = tm.get("base_mu2", [-0.3, 0.0, 0.3])
    m1s = measure_templates(base1, tm.get("loc_mu1", [-0.5, 0.0, 0.5]), tm.get("scale_mu1", [1.0]))
    m2s = measure_templates(base2, tm.get("loc_mu2", [-0.5, 0.5]), tm.get("scale_mu2", [1.0]))
    times = tm.get("times", [exp.t_start])
    points = on_grid(times, m1s, m2s, exp.params)
    if not points:
        raise ConfigError("no template point lies inside O_N", field="check/templates")
    fam = (exp.fam1, exp.fam2)

    def valuefn(t, m1, m2):
        return ctl.vartheta_eval(exp.coeffs, t, m1, m2.atoms, fam, exp.sim).value

    rep = viscosity_check(exp.coeffs, valuefn, phi, points, _grid(exp), tol=exp.abs_tol, side=side)
    checks = [{"name": f"{s}solution_residual", "index": r["index"], "residual": r["residual"], "pass": r["pass"]}
              for s in ("sub", "super") for r in rep[s]]
    rows = [(i, p[0], p[1].mean(), p[2].mean(), valuefn(*p), phi(*p)) for i, p in enumerate(points)]
    return checks, rep, {"points.csv": _csv(rows, ["index", "t", "mean_mu1", "mean_mu2", "value", "phi"])}


def cmd_invariance(exp):
    n = max(exp.n_level, minimal_level(exp.t_start, exp.mu1, exp.zeta, exp.delta, exp.c0)) \
        if exp.check.get("auto_level", False) else exp.n_level
    params = ExpMomentParams(exp.delta, exp.c0, n)
    if not in_O_N(exp.t_start, exp.mu1, exp.zeta, params):
        raise ConfigError(f"initial pair outside O_N for N = {n}", field="n_level")
    rep = invariance_check(exp.coeffs, exp.mu1, exp.zeta, _controls(exp), exp.sim, params, exp.t_start,
                           tol=exp.abs_tol)
    checks = [{"name": "o_n_invariance", "pass": rep["pass"], "margin": rep["margin"]}]
    rows = [(r["time"], r["bound"], r["moment_individual"], r["se_individual"], r["moment_meanfield"],
             r["se_meanfield"]) for r in rep["rows"]]
    return checks, rep, {"margins.csv": _csv(rows, ["time", "bound", "moment_individual", "se_individual",
                                                     "moment_meanfield", "se_meanfield"])}


def cmd_closure(exp):
    f = Polynomial.from_json(exp.check.get("f", [0, 0, 0, 1]))
    if f.is_zero():
        raise ConfigError("closure of the zero polynomial", field="check/f")
    cl = star_closure(f)
    b = exp.theta_b if exp.theta_b is not None else float(exp.n_level)
    th = enumerate_theta(exp.j_root, b, exp.delta)
    result = {
        "f": str(f),
        "closure": [str(p) for p in cl.members],
        "closure_coefficients": [json.loads(p.to_json()) for p in cl.members],
        "theta": {"j_root": th.j_root, "b": th.b, "delta": th.delta, "size": len(th),
                  "sum_c": float(th.c_values.sum())},
    }
    bounds_ok = all(c <= 2.0 ** -(j + 1) for j, c in enumerate(th.c_values)) and th.c_values.sum() <= 1
    checks = [{"name": "closure_has_star_property", "pass": has_star_property(cl.members)}, {"name": "c_j_bounds", "pass": bool(bounds_ok)}]
    return checks, result, {"theta.csv": th.to_csv()}


def cmd_probe(exp):
    n = int(exp.check.get("samples", 200))
    rep = assumption_probe(exp.coeffs, n_samples=n, seed=exp.seed, horizon=exp.sim.T)
    checks = [{"name": "assumption_probe", "pass": rep["pass"], "violations": rep["violations"]}]
    return checks, rep, {}


HANDLERS = {
    "simulate": cmd_simulate, "value": cmd_value, "dpp-check": cmd_dpp, "hamiltonian": cmd_hamiltonian,
    "viscosity-check": cmd_viscosity, "invariance": cmd_invariance, "closure": cmd_closure,
    "probe-assumptions": cmd_probe,
}


VERIFIES = {
    "trajectory_finite": "every simulated state is finite under bounded coefficients",
    "values_finite": "value estimates are finite",
    "dpp_W": "W at t equals the best expected W at t + delta along the first pieces",
    "dpp_vartheta": "the averaged value at t equals its best continuation at t + delta",
    "one_sided_dpp_V": "V at t is at least its best pathwise continuation at t + delta",
    "hamiltonian_exhaustive": "the coupling search enumerated every Dirac candidate",
    "subsolution_residual": "-d_t phi - H <= tol where value - phi is maximal on the sample",
    "supersolution_residual": "-d_t phi - H >= -tol where value - phi is minimal on the sample",
    "o_n_invariance": "exponential moments of both populations stay under N exp(K* t)",
    "closure_has_star_property": "the derivative closure of f contains all derivatives of its members",
    "c_j_bounds": "weights satisfy c_j <= 2^-j and sum to at most 1",
    "assumption_probe": "sampled coefficients respect the declared bound, Lipschitz and growth constants",
}


def build_report(command, data, exp, checks, result):
    checks = [dict(c, verifies=VERIFIES.get(c["name"], "")) for c in checks]
    report = {
        "command": command,
        "schema_version": data.get("version"),
        "config_hash": config_hash(exp.data),
        "config": exp.echo(),
        "checks": checks,
        "result": result,
        "pass": all(c["pass"] for c in checks),
    }
    return jsonable(report)


def dump_report(report, timestamp=True):
    body = dict(report)
    if timestamp:
        body["timestamp"] = datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")
    return json.dumps(body, sort_keys=True, indent=2) + "\n"


def run(command, config_path, out_dir, seed=None, threads=None, stream=None):
    """Execute one subcommand; returns the exit status."""
    stream = sys.stdout if stream is None else stream
    if threads:
        set_threads(threads)
    try:
        data = load_config(config_path)
        exp = Experiment(data, seed)
        checks, result, tables = HANDLERS[command](exp)
    except ConfigError as e:
        print(f"invalid config: {e}", file=sys.stderr)
        return 2
    except (MeasureError, ControlError, GridError, HamiltonianError, ViscosityError, SimulationError) as e:
        print(f"invalid config: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    report = build_report(command, data, exp, checks, result)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        fh.write(dump_report(report))
    for name, text in tables.items():
        with open(os.path.join(out_dir, name), "w", encoding="utf-8") as fh:
            fh.write(text)
    for c in report["checks"]:
        print(f"{'PASS' if c['pass'] else 'FAIL'} {c['name']}", file=stream)
    if not report["pass"]:
        print(json.dumps(report["checks"], indent=2), file=sys.stderr)
    return 0 if report["pass"] else 1


def main(argv=None):
    ap = argparse.ArgumentParser(prog="mfbellman", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="JSON experiment config")
    ap.add_argument("--out", default="out", help="output directory for report.json and CSV tables")
    ap.add_argument("--seed", type=int, default=None, help="override the master seed")
    ap.add_argument("--threads", type=int, default=None, help="numba worker threads")
    args = ap.parse_args(argv)
    return run(args.command, args.config, args.out, args.seed, args.threads)


if __name__ == "__main__":
    sys.exit(main())
