"""Adapted open-loop control laws and finite control families.

A control law maps (anchor time, anchor state, Brownian increments since the
anchor) to a U-valued sequence on the step grid. The value at step j reads
only the anchor state and the increments with index < j.
"""

import itertools
import math
from dataclasses import dataclass, field

import numpy as np


class ControlError(ValueError):
    pass


_EPS = 1e-9


def _check_in_u(values, u_bounds, what):
    lo, hi = u_bounds
    arr = np.asarray(values, dtype=float)
    bad = np.flatnonzero((arr < lo) | (arr > hi) | ~np.isfinite(arr))
    if bad.size:
        raise ControlError(f"{what}: value {arr.ravel()[bad[0]]!r} outside U = [{lo}, {hi}]")


class ControlLaw:
    u_bounds = (-1.0, 1.0)

    def realize(self, anchor_time, h, n_hist, x_anchor, dB):
        """Control values for steps n_hist .. dB.shape[1]-1 (relative to the anchor).

        ``dB`` holds increments since the anchor, shape (P, n_hist + steps).
        Returns an array (P, steps).
        """
        raise NotImplementedError

    def key(self):
        """Hashable description used for deduplication."""
        raise NotImplementedError

    def __eq__(self, other):
        return isinstance(other, ControlLaw) and self.key() == other.key()

    def __hash__(self):
        return hash(self.key())


class Constant(ControlLaw):
    def __init__(self, value, u_bounds=(-1.0, 1.0)):
        self.value = float(value)
        self.u_bounds = tuple(u_bounds)
        _check_in_u(self.value, self.u_bounds, "Constant")

    def realize(self, anchor_time, h, n_hist, x_anchor, dB):
        P, total = dB.shape
        return np.full((P, total - n_hist), self.value)

    def key(self):
        return ("const", self.value)

    def __repr__(self):
        return f"Constant({self.value:g})"


class Elementary(ControlLaw):
    """Piecewise-in-time control on absolute break times.

    On interval i the value is ``table[x_bin, i, s]`` where ``x_bin`` bins the
    anchor state with ``x_edges`` and ``s`` is 1 if the Brownian increment
    accumulated from the anchor to the start of the interval is >= 0, else 0.
    """

    def __init__(self, breaks, table, x_edges=(), u_bounds=(-1.0, 1.0)):
        self.breaks = tuple(float(b) for b in breaks)
        if list(self.breaks) != sorted(self.breaks):
            raise ControlError("break times must be ascending")
        self.x_edges = tuple(float(e) for e in x_edges)
        tab = np.asarray(table, dtype=float)
        n_int = len(self.breaks) + 1
        if tab.ndim == 1:
            tab = np.repeat(tab.reshape(1, -1, 1), 2, axis=2)
        if tab.shape[:2] != (len(self.x_edges) + 1, n_int) or tab.shape[2] != 2:
            raise ControlError(f"table shape {tab.shape} does not match (x bins, intervals, 2)")
        self.u_bounds = tuple(u_bounds)
        _check_in_u(tab, self.u_bounds, "Elementary table")
        tab.setflags(write=False)
        self.table = tab

    @classmethod
    def piecewise(cls, values, breaks, u_bounds=(-1.0, 1.0)):
        return cls(breaks, np.asarray(values, dtype=float), u_bounds=u_bounds)

    def realize(self, anchor_time, h, n_hist, x_anchor, dB):
        P, total = dB.shape
        steps = total - n_hist
        x_anchor = np.broadcast_to(np.asarray(x_anchor, dtype=float), (P,))
        xb = np.searchsorted(self.x_edges, x_anchor, side="right") if self.x_edges else np.zeros(P, int)
        j = np.arange(n_hist, total)
        times = anchor_time + j * h
        interval = np.searchsorted(self.breaks, times + _EPS * h, side="right")
        # step index (relative to the anchor) at which each interval starts
        starts = [0] + [max(0, math.ceil((b - anchor_time) / h - _EPS)) for b in self.breaks]
        cum = np.concatenate([np.zeros((P, 1)), np.cumsum(dB, axis=1)], axis=1)
        out = np.empty((P, steps))
        for i in np.unique(interval):
            cols = np.flatnonzero(interval == i)
            st = min(starts[i], total)
            sign = (cum[:, st] >= 0).astype(int)
            out[:, cols] = self.table[xb, i, sign][:, None]
        return out

    def key(self):
        return ("elem", self.breaks, self.x_edges, self.table.tobytes())

    def __repr__(self):
        if not self.x_edges and np.all(self.table[..., 0] == self.table[..., 1]):
            return f"Piecewise({self.table[0, :, 0].tolist()}, breaks={list(self.breaks)})"
        return f"Elementary(breaks={list(self.breaks)}, x_edges={list(self.x_edges)})"


class Table(ControlLaw):
    """Lookup on (step since anchor, binned last ``depth`` increments).

    Each increment is binned with ``inc_edges`` into 0..nb; missing history
    (before the anchor) uses the extra symbol nb+1. Rows beyond the table
    reuse the last row.
    """

    def __init__(self, table, inc_edges, depth, u_bounds=(-1.0, 1.0)):
        self.inc_edges = tuple(float(e) for e in inc_edges)
        self.depth = int(depth)
        self.radix = len(self.inc_edges) + 2
        tab = np.asarray(table, dtype=float)
        if tab.ndim != 2 or tab.shape[1] != self.radix ** self.depth:
            raise ControlError(f"table needs {self.radix ** self.depth} columns")
        self.u_bounds = tuple(u_bounds)
        _check_in_u(tab, self.u_bounds, "Table")
        tab.setflags(write=False)
        self.table = tab

    @classmethod
    def random(cls, rng, rows, depth=2, inc_edges=(0.0,), values=(-1.0, 1.0), u_bounds=(-1.0, 1.0)):
        radix = len(inc_edges) + 2
        tab = rng.choice(np.asarray(values, dtype=float), size=(rows, radix ** depth))
        return cls(tab, inc_edges, depth, u_bounds)

    def realize(self, anchor_time, h, n_hist, x_anchor, dB):
        P, total = dB.shape
        steps = total - n_hist
        bins = np.searchsorted(self.inc_edges, dB, side="right") if total else np.zeros((P, 0), int)
        pad = self.radix - 1
        out = np.empty((P, steps))
        for c, j in enumerate(range(n_hist, total)):
            code = np.zeros(P, dtype=np.int64)
            for d in range(self.depth):
                src = j - 1 - d
                digit = bins[:, src] if src >= 0 else np.full(P, pad)
                code = code + digit * self.radix ** d
            out[:, c] = self.table[min(j, self.table.shape[0] - 1), code]
        return out

    def key(self):
        return ("table", self.inc_edges, self.depth, self.table.tobytes())

    def __repr__(self):
        return f"Table(depth={self.depth}, rows={self.table.shape[0]})"


class Concat(ControlLaw):
    """``first`` before ``switch_time``, then ``second`` re-anchored at the switch.

    The re-anchored piece sees the original anchor state and the increments
    accumulated from the switch onwards.
    """

    def __init__(self, first, second, switch_time):
        self.first, self.second = first, second
        self.switch_time = float(switch_time)
        self.u_bounds = first.u_bounds

    def realize(self, anchor_time, h, n_hist, x_anchor, dB):
        P, total = dB.shape
        js = max(0, math.ceil((self.switch_time - anchor_time) / h - _EPS))
        out = np.empty((P, total - n_hist))
        if n_hist < js:
            end = min(js, total)
            out[:, : end - n_hist] = self.first.realize(anchor_time, h, n_hist, x_anchor, dB[:, :end])
        if total > js:
            lo = max(n_hist, js)
            anchor2 = anchor_time + js * h
            out[:, lo - n_hist:] = self.second.realize(anchor2, h, lo - js, x_anchor, dB[:, js:])
        return out

    def key(self):
        return ("concat", self.first.key(), self.second.key(), self.switch_time)

    def __repr__(self):
        return f"Concat({self.first!r} | {self.second!r} @ {self.switch_time:g})"


@dataclass
class ControlFamily:
    members: list
    concat_closed: bool = False
    switch_times: tuple = ()
    name: str = "family"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.members:
            raise ControlError("control family is empty")

    def __len__(self):
        return len(self.members)

    def __getitem__(self, i):
        return self.members[i]

    @property
    def u_bounds(self):
        return self.members[0].u_bounds

    def superset(self, extra):
        return ControlFamily(list(self.members) + list(extra), False, (), self.name + "+")


def constants(values, u_bounds=(-1.0, 1.0)):
    vals = [float(v) for v in values]
    return ControlFamily([Constant(v, u_bounds) for v in vals], concat_closed=len(set(vals)) == 1,
                         name="constants", meta={"values": vals})


def piecewise_constants(values, breaks, u_bounds=(-1.0, 1.0)):
    """Every piecewise-constant control with values in ``values`` on the break partition.

    Closed under concatenation at each break by construction.
    """
    vals = [float(v) for v in values]
    breaks = tuple(sorted(float(b) for b in breaks))
    members = [Elementary.piecewise(combo, breaks, u_bounds)
               for combo in itertools.product(vals, repeat=len(breaks) + 1)]
    return ControlFamily(members, concat_closed=True, switch_times=breaks, name="piecewise",
                         meta={"values": vals, "breaks": list(breaks)})


def random_tables(n, rows, seed, depth=2, values=(-1.0, 1.0), u_bounds=(-1.0, 1.0)):
    rng = np.random.default_rng(seed)
    return ControlFamily([Table.random(rng, rows, depth, values=values, u_bounds=u_bounds) for _ in range(n)],
                         name="tables")


def family_from_spec(spec, u_bounds):
    kind = spec.get("type", "constants")
    if kind == "constants":
        return constants(spec["values"], u_bounds)
    if kind in ("piecewise", "piecewise_constants"):
        return piecewise_constants(spec["values"], spec.get("breaks", []), u_bounds)
    if kind == "tables":
        return random_tables(int(spec.get("n", 2)), int(spec.get("rows", 64)), int(spec.get("seed", 0)),
                             int(spec.get("depth", 2)), spec.get("values", (u_bounds[0], u_bounds[1])), u_bounds)
    raise ControlError(f"unknown family type {kind!r}")


def _probe(seed, P, total):
    rng = np.random.default_rng(seed)
    return rng.uniform(-3, 3, P), rng.normal(0, 0.3, (P, total))


def _signature(law, anchor_time, h, n_hist, x0, dB):
    return law.realize(anchor_time, h, n_hist, x0, dB).tobytes()


def verify_concat_closed(family, switch_time, anchor_time, h, steps, n_probe=16, seed=0):
    """Check on probe paths that every splice at ``switch_time`` is a family member.

    Returns (closed, first failing (i, j) pair or None).
    """
    x0, dB = _probe(seed, n_probe, steps)
    sigs = {_signature(m, anchor_time, h, 0, x0, dB) for m in family.members}
    for i, a in enumerate(family.members):
        for j, b in enumerate(family.members):
            c = Concat(a, b, switch_time)
            if _signature(c, anchor_time, h, 0, x0, dB) not in sigs:
                return False, (i, j)
    return True, None


def distinct_on(family, anchor_time, h, steps, n_probe=16, seed=0):
    """Indices of members that differ on [anchor, anchor + steps*h) (first occurrence kept)."""
    x0, dB = _probe(seed, n_probe, steps)
    seen, keep = set(), []
    for i, m in enumerate(family.members):
        s = _signature(m, anchor_time, h, 0, x0, dB)
        if s not in seen:
            seen.add(s)
            keep.append(i)
    return keep


def restricted(family, anchor_time, h, steps):
    """Family of distinct members seen on the window, re-anchored at ``anchor_time``."""
    keep = distinct_on(family, anchor_time, h, steps)
    return ControlFamily([family.members[i] for i in keep], family.concat_closed, family.switch_times,
                         family.name, dict(family.meta, kept=keep))
