"""Experiment configuration: JSON schema, validation and object builders."""

import hashlib
import json
import math

import jsonschema
import numpy as np

from .coefficients import PRESETS, make_preset
from .controls import family_from_spec
from .dynamics import SimConfig, derive_seed
from .measures import EmpiricalMeasure, ExpMomentParams

SCHEMA_VERSION = 1

_measure = {
    "type": "object",
    "properties": {
        "atoms": {"type": "array", "items": {"type": "number"}, "minItems": 1},
        "file": {"type": "string"},
        "normal": {"type": "object", "properties": {
            "loc": {"type": "number"}, "scale": {"type": "number", "minimum": 0},
            "n": {"type": "integer", "minimum": 1}, "seed": {"type": "integer"}}, "required": ["n"]},
        "uniform": {"type": "object", "properties": {
            "low": {"type": "number"}, "high": {"type": "number"},
            "n": {"type": "integer", "minimum": 1}, "seed": {"type": "integer"}}, "required": ["n"]},
    },
    "minProperties": 1,
    "maxProperties": 1,
    "additionalProperties": False,
}

_family = {
    "type": "object",
    "properties": {
        "type": {"enum": ["constants", "piecewise", "piecewise_constants", "tables"]},
        "values": {"type": "array", "items": {"type": "number"}, "minItems": 1},
        "breaks": {"type": "array", "items": {"type": "number"}},
        "n": {"type": "integer", "minimum": 1},
        "rows": {"type": "integer", "minimum": 1},
        "depth": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer"},
    },
    "required": ["type"],
    "additionalProperties": False,
}

SCHEMA = {
    "type": "object",
    "properties": {
        "version": {"const": SCHEMA_VERSION},
        "preset": {"type": "object", "properties": {
            "name": {"enum": sorted(PRESETS)}, "params": {"type": "object"}},
            "required": ["name"], "additionalProperties": False},
        "u_bounds": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
        "delta": {"type": "number", "exclusiveMinimum": 0},
        "c0": {"type": "number", "exclusiveMinimum": 0},
        "n_level": {"type": "integer", "minimum": 1},
        "grid": {"type": "object", "properties": {
            "t_start": {"type": "number", "minimum": 0}, "T": {"type": "number", "exclusiveMinimum": 0},
            "steps": {"type": "integer", "minimum": 1}},
            "required": ["T", "steps"], "additionalProperties": False},
        "particles": {"type": "object", "properties": {
            "M": {"type": "integer", "minimum": 1}, "K": {"type": "integer", "minimum": 1},
            "K_out": {"type": "integer", "minimum": 1}}, "additionalProperties": False},
        "family": {"type": "object", "properties": {"u1": _family, "u2": _family}, "additionalProperties": False},
        "theta": {"type": "object", "properties": {
            "j_root": {"type": "integer", "minimum": 1}, "b": {"type": "number", "exclusiveMinimum": 0}},
            "additionalProperties": False},
        "seed": {"type": "integer", "minimum": 0},
        "tolerances": {"type": "object", "properties": {
            "n_sigma": {"type": "number", "minimum": 0}, "abs": {"type": "number", "minimum": 0}},
            "additionalProperties": False},
        "initial": {"type": "object", "properties": {
            "x": {"type": "number"}, "zeta": _measure, "mu1": _measure, "mu2": _measure},
            "additionalProperties": False},
        "check": {"type": "object"},
    },
    "required": ["version", "preset", "grid"],
    "additionalProperties": False,
}


class ConfigError(ValueError):
    """Invalid configuration; ``field`` is a JSON path, ``line`` a source line when known."""

    def __init__(self, message, field=None, line=None):
        self.field = field
        self.line = line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


def _locate(text, path):
    """Best-effort source line of the last key of ``path`` in the raw JSON text."""
    if not path:
        return None
    key = next((p for p in reversed(path) if isinstance(p, str)), None)
    if key is None:
        return None
    needle = f'"{key}"'
    for i, line in enumerate(text.splitlines(), 1):
        if needle in line:
            return i
    return None


def load_config(path=None, text=None):
    if text is None:
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as e:
            raise ConfigError(f"cannot read config: {e}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(e.msg, line=e.lineno) from None
    return validate(data, text)


def validate(data, text=""):
    v = jsonschema.Draft202012Validator(SCHEMA)
    errs = sorted(v.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errs:
        e = errs[0]
        path = list(e.absolute_path)
        field = "/".join(str(p) for p in path) or "<root>"
        raise ConfigError(e.message, field=field, line=_locate(text, path))
    g = data["grid"]
    t0 = g.get("t_start", 0.0)
    if t0 > g["T"]:
        raise ConfigError("t_start exceeds T", field="grid/t_start", line=_locate(text, ["t_start"]))
    h = g["T"] / g["steps"]
    if abs(t0 / h - round(t0 / h)) > 1e-9:
        raise ConfigError("t_start is not a multiple of the step T/steps", field="grid/t_start",
                          line=_locate(text, ["t_start"]))
    ub = data.get("u_bounds", [-1.0, 1.0])
    if ub[0] > ub[1]:
        raise ConfigError("u_bounds must be ascending", field="u_bounds", line=_locate(text, ["u_bounds"]))
    return data


def canonical(data):
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def config_hash(data):
    return hashlib.sha256(canonical(data).encode()).hexdigest()


class Experiment:
    """Objects built from a validated config dictionary."""

    def __init__(self, data, seed_override=None):
        self.data = dict(data)
        if seed_override is not None:
            self.data["seed"] = int(seed_override)
        d = self.data
        self.seed = int(d.get("seed", 0))
        self.u_bounds = tuple(float(u) for u in d.get("u_bounds", (-1.0, 1.0)))
        self.delta = float(d.get("delta", 1.0))
        params = dict(d["preset"].get("params", {}))
        params.setdefault("u_bounds", self.u_bounds)
        params.setdefault("delta", self.delta)
        try:
            self.coeffs = make_preset(d["preset"]["name"], **params)
        except TypeError as e:
            raise ConfigError(str(e), field="preset/params") from None
        self.c0 = float(d.get("c0", self.coeffs.declared_bound_c0))
        self.n_level = int(d.get("n_level", 1))
        self.params = ExpMomentParams(self.delta, self.c0, self.n_level)
        g = d["grid"]
        self.t_start = float(g.get("t_start", 0.0))
        p = d.get("particles", {})
        self.sim = SimConfig(T=float(g["T"]), steps=int(g["steps"]), M=int(p.get("M", 2000)),
                             K=int(p.get("K", 500)), seed=self.seed)
        self.K_out = int(p.get("K_out", min(self.sim.K, 200)))
        fam = d.get("family", {})
        self.fam1 = self._family(fam.get("u1", {"type": "constants", "values": list(self.u_bounds)}), "family/u1")
        self.fam2 = self._family(fam.get("u2", {"type": "constants", "values": [self.u_bounds[0]]}), "family/u2")
        th = d.get("theta", {})
        self.j_root = int(th.get("j_root", 4))
        self.theta_b = th.get("b")
        tol = d.get("tolerances", {})
        self.n_sigma = float(tol.get("n_sigma", 3.0))
        self.abs_tol = float(tol.get("abs", 1e-9))
        init = d.get("initial", {})
        self.x = float(init.get("x", 0.0))
        self.zeta = self._measure(init.get("zeta", {"normal": {"n": self.sim.M}}), "zeta")
        self.mu1 = self._measure(init.get("mu1", {"atoms": [self.x]}), "mu1")
        self.mu2 = self._measure(init["mu2"], "mu2") if "mu2" in init else self.zeta
        self.check = d.get("check", {})

    def _family(self, spec, field):
        try:
            return family_from_spec(spec, self.u_bounds)
        except (ValueError, KeyError) as e:
            raise ConfigError(str(e), field=field) from None

    def _measure(self, spec, label):
        field = f"initial/{label}"
        if "atoms" in spec:
            return EmpiricalMeasure(spec["atoms"])
        if "file" in spec:
            path = spec["file"]
            try:
                with open(path, encoding="utf-8") as fh:
                    text = fh.read()
            except OSError as e:
                raise ConfigError(f"cannot read atom file: {e}", field=field) from None
            if path.endswith(".json"):
                return EmpiricalMeasure.from_json(text)
            return EmpiricalMeasure.from_text(text)
        kind = "normal" if "normal" in spec else "uniform"
        s = spec[kind]
        rng = np.random.default_rng(s.get("seed", derive_seed(self.seed, f"initial:{label}")))
        if kind == "normal":
            return EmpiricalMeasure(rng.normal(s.get("loc", 0.0), s.get("scale", 1.0), s["n"]))
        return EmpiricalMeasure(rng.uniform(s.get("low", -1.0), s.get("high", 1.0), s["n"]))

    def echo(self):
        return {
            "preset": self.coeffs.name,
            "u_bounds": list(self.u_bounds),
            "delta": self.delta, "c0": self.c0, "n_level": self.n_level,
            "k_star": self.params.k_star,
            "T": self.sim.T, "steps": self.sim.steps, "h": self.sim.h, "t_start": self.t_start,
            "M": self.sim.M, "K": self.sim.K, "K_out": self.K_out, "seed": self.seed,
            "family_u1": [repr(m) for m in self.fam1.members],
            "family_u2": [repr(m) for m in self.fam2.members],
            "j_root": self.j_root,
        }


def jsonable(obj):
    """Recursively convert numpy scalars/arrays and non-finite floats for JSON output."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        if math.isnan(f):
            return "nan"
        if math.isinf(f):
            return "inf" if f > 0 else "-inf"
        return f
    return obj
