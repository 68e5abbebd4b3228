"""Coefficient data for the linear-quadratic mean-field control problem and game.

A model is a :class:`CoefficientSet`: every time-dependent coefficient is a
*schedule* (constant, exponentially discounted, or tabulated on the time grid)
and ``H``/``Hbar`` are constant matrices.  Names follow the usual LQ notation
with a ``bar`` suffix for the coefficients acting on conditional means.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import StructureError

SYM_TOL = 1e-12
ZERO_TOL = 1e-14

# (name, row dim, col dim) with "d"/"m" placeholders
STATE_MATRICES = ("A", "Abar", "C", "Cbar", "F", "Fbar")
CONTROL_MATRICES = ("B", "Bbar", "D", "Dbar", "G", "Gbar")
SCHEDULE_SHAPES = {
    **{name: ("d", "d") for name in STATE_MATRICES},
    **{name: ("d", "m") for name in CONTROL_MATRICES},
    "Q": ("d", "d"),
    "Qbar": ("d", "d"),
    "R": ("m", "m"),
    "Rbar": ("m", "m"),
    "S": ("m", "d"),
    "Sbar": ("m", "d"),
    "Sbar1": ("m", "d"),
    "Sbar2": ("m", "d"),
    "q": ("d", 1),
    "qbar": ("d", 1),
    "r": ("m", 1),
    "rbar": ("m", 1),
}
CONSTANT_SHAPES = {"H": ("d", "d"), "Hbar": ("d", "d")}
SYMMETRIC = ("Q", "Qbar", "R", "Rbar")
VECTORS = ("q", "qbar", "r", "rbar")
# coefficients that must vanish for the game to reduce to the control problem
MFG_ZERO = ("Abar", "Bbar", "Cbar", "Dbar", "Fbar", "Gbar", "qbar", "rbar")


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    T: float
    n_steps: int

    def __post_init__(self):
        if not self.T > self.t0:
            raise StructureError(f"time grid needs T > t0, got t0={self.t0}, T={self.T}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 2:
            raise StructureError(f"time grid needs an integer n_steps >= 2, got {self.n_steps}")
        object.__setattr__(self, "t0", float(self.t0))
        object.__setattr__(self, "T", float(self.T))
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.n_steps

    @cached_property
    def nodes(self) -> np.ndarray:
        s = self.t0 + self.dt * np.arange(self.n_steps + 1)
        s[-1] = self.T
        s.setflags(write=False)
        return s

    def refined(self, n_steps: int) -> "TimeGrid":
        return TimeGrid(self.t0, self.T, n_steps)

    def contains(self, s) -> bool:
        slack = 1e-12 * (self.T - self.t0)
        s = np.asarray(s)
        return bool(np.all((s >= self.t0 - slack) & (s <= self.T + slack)))


def _as_matrix(value, shape=None) -> np.ndarray:
    a = np.array(value, dtype=float)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(-1, 1)
    if shape is not None and a.shape != shape:
        raise StructureError(f"expected shape {shape}, got {a.shape}")
    return a


class Schedule:
    """Base class for time-dependent coefficients; subclasses implement ``values``."""

    shape: tuple

    def values(self, times, grid: TimeGrid) -> np.ndarray:
        """Evaluate at an array of times; returns ``(len(times), rows, cols)``."""
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class Constant(Schedule):
    matrix: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "matrix", _as_matrix(self.matrix))

    @property
    def shape(self):
        return self.matrix.shape

    def values(self, times, grid):
        times = np.atleast_1d(np.asarray(times, dtype=float))
        return np.broadcast_to(self.matrix, (times.size,) + self.shape).copy()

    def to_dict(self):
        return {"rule": "constant", "value": self.matrix.tolist()}


@dataclass(frozen=True, eq=False)
class ExpDiscount(Schedule):
    """``exp(-rate * (s - t0)) * matrix``."""

    matrix: np.ndarray
    rate: float

    def __post_init__(self):
        object.__setattr__(self, "matrix", _as_matrix(self.matrix))
        if self.rate < 0:
            raise StructureError(f"discount rate must be >= 0, got {self.rate}")
        object.__setattr__(self, "rate", float(self.rate))

    @property
    def shape(self):
        return self.matrix.shape

    def values(self, times, grid):
        times = np.atleast_1d(np.asarray(times, dtype=float))
        w = np.exp(-self.rate * (times - grid.t0))
        return w[:, None, None] * self.matrix

    def to_dict(self):
        return {"rule": "exp_discount", "value": self.matrix.tolist(), "rate": self.rate}


@dataclass(frozen=True, eq=False)
class Tabulated(Schedule):
    """One matrix per grid node, linearly interpolated in between."""

    table: np.ndarray

    def __post_init__(self):
        t = np.array(self.table, dtype=float)
        if t.ndim == 1:
            t = t.reshape(-1, 1, 1)
        elif t.ndim == 2:
            t = t.reshape(t.shape[0], -1, 1)
        if t.ndim != 3:
            raise StructureError(f"tabulated schedule needs a (nodes, rows, cols) array, got {t.shape}")
        object.__setattr__(self, "table", t)

    @property
    def shape(self):
        return self.table.shape[1:]

    def values(self, times, grid):
        if self.table.shape[0] != grid.n_steps + 1:
            raise StructureError(
                f"tabulated schedule has {self.table.shape[0]} entries, grid has {grid.n_steps + 1} nodes"
            )
        times = np.atleast_1d(np.asarray(times, dtype=float))
        nodes = grid.nodes
        k = np.clip(np.searchsorted(nodes, times, side="right") - 1, 0, grid.n_steps - 1)
        w = (times - nodes[k]) / (nodes[k + 1] - nodes[k])
        w = w[:, None, None]
        return (1.0 - w) * self.table[k] + w * self.table[k + 1]

    def to_dict(self):
        return {"rule": "tabulated", "value": self.table.tolist()}


def schedule_from_dict(spec: dict) -> Schedule:
    rule = spec["rule"]
    if rule == "constant":
        return Constant(spec["value"])
    if rule == "exp_discount":
        return ExpDiscount(spec["value"], spec["rate"])
    if rule == "tabulated":
        return Tabulated(spec["value"])
    raise StructureError(f"unknown schedule rule {rule!r}")


class CoefficientTable(dict):
    """Coefficients sampled at a batch of times; attribute access by name.

    Matrices have shape ``(n_times, rows, cols)``; ``q, qbar, r, rbar`` are
    flattened to ``(n_times, dim)``.  ``H`` and ``Hbar`` are plain matrices.
    """

    def __getattr__(self, name):
        try:
            return self[name]
        except KeyError:
            raise AttributeError(name) from None

    def at(self, k: int) -> dict:
        return {name: (v if name in CONSTANT_SHAPES else v[k]) for name, v in self.items()}


@dataclass(frozen=True, eq=False)
class CoefficientSet:
    d: int
    m: int
    grid: TimeGrid
    schedules: dict
    H: np.ndarray
    Hbar: np.ndarray

    @classmethod
    def build(cls, grid: TimeGrid, d: int, m: int, **coeffs) -> "CoefficientSet":
        """Assemble a model; unspecified coefficients are zero.

        Values may be schedules, scalars or arrays (wrapped as :class:`Constant`).
        ``Sbar1`` and ``Sbar2`` default to ``Sbar``.
        """
        unknown = set(coeffs) - set(SCHEDULE_SHAPES) - set(CONSTANT_SHAPES)
        if unknown:
            raise StructureError(f"unknown coefficient names: {sorted(unknown)}")
        dims = {"d": d, "m": m, 1: 1}
        schedules = {}
        for name, (r, c) in SCHEDULE_SHAPES.items():
            value = coeffs.get(name)
            if value is None and name in ("Sbar1", "Sbar2") and "Sbar" in schedules:
                schedules[name] = schedules["Sbar"]
                continue
            if value is None:
                value = np.zeros((dims[r], dims[c]))
            schedules[name] = value if isinstance(value, Schedule) else Constant(value)
        const = {}
        for name in CONSTANT_SHAPES:
            value = coeffs.get(name)
            const[name] = np.zeros((d, d)) if value is None else _as_matrix(value)
        return cls(d, m, grid, schedules, const["H"], const["Hbar"])

    def __post_init__(self):
        dims = {"d": self.d, "m": self.m, 1: 1}
        problems = []
        for name, (r, c) in SCHEDULE_SHAPES.items():
            sched = self.schedules.get(name)
            if sched is None:
                problems.append(f"{name} missing")
            elif tuple(sched.shape) != (dims[r], dims[c]):
                problems.append(f"{name} has shape {tuple(sched.shape)}, expected {(dims[r], dims[c])}")
            elif isinstance(sched, Tabulated) and sched.table.shape[0] != self.grid.n_steps + 1:
                problems.append(f"{name} tabulated with {sched.table.shape[0]} entries, need {self.grid.n_steps + 1}")
        for name in CONSTANT_SHAPES:
            if getattr(self, name).shape != (self.d, self.d):
                problems.append(f"{name} has shape {getattr(self, name).shape}, expected {(self.d, self.d)}")
        if problems:
            raise StructureError("; ".join(problems))

    def __getitem__(self, name):
        if name in CONSTANT_SHAPES:
            return getattr(self, name)
        return self.schedules[name]

    def table(self, times) -> CoefficientTable:
        times = np.atleast_1d(np.asarray(times, dtype=float))
        out = CoefficientTable()
        for name, sched in self.schedules.items():
            vals = sched.values(times, self.grid)
            out[name] = vals[..., 0] if name in VECTORS else vals
        out["H"] = self.H
        out["Hbar"] = self.Hbar
        return out

    @cached_property
    def node_table(self) -> CoefficientTable:
        return self.table(self.grid.nodes)

    def on_grid(self, grid: TimeGrid) -> "CoefficientSet":
        """Same model on another grid over the same horizon (tabulated data re-interpolated)."""
        if (grid.t0, grid.T) != (self.grid.t0, self.grid.T):
            raise StructureError("on_grid keeps the horizon fixed")
        schedules = {
            name: Tabulated(s.values(grid.nodes, self.grid)) if isinstance(s, Tabulated) else s
            for name, s in self.schedules.items()
        }
        return CoefficientSet(self.d, self.m, grid, schedules, self.H, self.Hbar)

    def replace(self, **coeffs) -> "CoefficientSet":
        schedules = dict(self.schedules)
        H, Hbar = self.H, self.Hbar
        for name, value in coeffs.items():
            if name == "H":
                H = _as_matrix(value)
            elif name == "Hbar":
                Hbar = _as_matrix(value)
            elif name in SCHEDULE_SHAPES:
                schedules[name] = value if isinstance(value, Schedule) else Constant(value)
            else:
                raise StructureError(f"unknown coefficient {name!r}")
        return CoefficientSet(self.d, self.m, self.grid, schedules, H, Hbar)

    def scaled_cost(self, factor: float) -> "CoefficientSet":
        """Multiply every cost weight (Q..rbar, H, Hbar) by ``factor``."""
        names = ("Q", "Qbar", "R", "Rbar", "S", "Sbar", "Sbar1", "Sbar2", "q", "qbar", "r", "rbar")
        nodes = self.grid.nodes
        coeffs = {n: Tabulated(factor * self.schedules[n].values(nodes, self.grid)) for n in names}
        coeffs["H"] = factor * self.H
        coeffs["Hbar"] = factor * self.Hbar
        return self.replace(**coeffs)


def sample(cs: CoefficientSet, s: float) -> dict:
    """All coefficients at a single time ``s`` in ``[t0, T]``."""
    if not cs.grid.contains(s):
        raise ValueError(f"time {s} outside [{cs.grid.t0}, {cs.grid.T}]")
    s = min(max(float(s), cs.grid.t0), cs.grid.T)
    out = {name: sched.values([s], cs.grid)[0] for name, sched in cs.schedules.items()}
    out["H"] = cs.H.copy()
    out["Hbar"] = cs.Hbar.copy()
    return out


def check_structure(cs: CoefficientSet) -> None:
    """Raise :class:`StructureError` if a weight matrix is not symmetric."""
    tab = cs.node_table
    for name in SYMMETRIC:
        a = tab[name]
        gap = np.max(np.abs(a - np.swapaxes(a, -1, -2)))
        if gap > SYM_TOL:
            node = int(np.argmax(np.max(np.abs(a - np.swapaxes(a, -1, -2)), axis=(1, 2))))
            raise StructureError(f"{name} not symmetric at node {node} (asymmetry {gap:.3e})")
    for name in CONSTANT_SHAPES:
        a = getattr(cs, name)
        if np.max(np.abs(a - a.T)) > SYM_TOL:
            raise StructureError(f"{name} not symmetric")


@dataclass
class AssumptionReport:
    delta1: float
    delta2: float
    h_ok: bool
    q_ok: bool
    r_ok: bool
    s_ok: bool
    s_norm_sq: float
    violations: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.h_ok and self.q_ok and self.r_ok and self.s_ok and self.delta2 > 0

    def summary(self) -> dict:
        return {
            "passed": self.passed,
            "delta1": self.delta1,
            "delta2": self.delta2,
            "s_norm_sq": self.s_norm_sq,
            "h_ok": self.h_ok,
            "q_ok": self.q_ok,
            "r_ok": self.r_ok,
            "s_ok": self.s_ok,
            "violations": len(self.violations),
        }


def _min_eig(stack):
    return np.linalg.eigvalsh(stack)[..., 0]


def validate_assumptions(cs: CoefficientSet) -> AssumptionReport:
    """Check the coercivity/boundedness conditions on the cost weights at every grid node."""
    check_structure(cs)
    tab = cs.node_table
    violations = []
    last = cs.grid.n_steps

    h_ok = True
    for label, mat in (("H >= 0", cs.H), ("H + Hbar >= 0", cs.H + cs.Hbar)):
        lo = float(_min_eig(mat))
        if lo < -SYM_TOL:
            h_ok = False
            violations.append((label, last, lo))

    def node_mins(label, stack, strict):
        lo = _min_eig(stack)
        bad = lo <= 0 if strict else lo < -SYM_TOL
        violations.extend((label, int(k), float(lo[k])) for k in np.flatnonzero(bad))
        return lo

    q_lo = node_mins("Q >= delta1*I", tab.Q, strict=False)
    qq_lo = node_mins("Q + Qbar >= delta1*I", tab.Q + tab.Qbar, strict=False)
    r_lo = node_mins("R >= delta2*I", tab.R, strict=True)
    rr_lo = node_mins("R + Rbar >= delta2*I", tab.R + tab.Rbar, strict=True)
    delta1 = float(min(q_lo.min(), qq_lo.min()))
    delta2 = float(min(r_lo.min(), rr_lo.min()))

    norms = np.concatenate([
        np.linalg.norm(tab.S, ord=2, axis=(1, 2)),
        np.linalg.norm(tab.S + tab.Sbar, ord=2, axis=(1, 2)),
    ]) ** 2
    s_norm_sq = float(norms.max())
    s_zero = max(np.abs(tab.S).max(), np.abs(tab.Sbar).max()) <= ZERO_TOL
    s_ok = bool((delta1 > 0 and s_norm_sq < delta1 * delta2) or s_zero)
    if not s_ok:
        violations.append(("S bound", int(np.argmax(norms) % (last + 1)), delta1 * delta2 - s_norm_sq))

    return AssumptionReport(
        delta1=delta1,
        delta2=delta2,
        h_ok=h_ok,
        q_ok=delta1 >= -SYM_TOL,
        r_ok=delta2 > 0,
        s_ok=s_ok,
        s_norm_sq=s_norm_sq,
        violations=violations,
    )


def is_mfg_reducible(cs: CoefficientSet):
    """Whether the game's equilibrium coincides with the control problem's optimum.

    Returns ``(flag, violations)`` where violations name each offending coefficient.
    """
    tab = cs.node_table
    violations = [name for name in MFG_ZERO if np.abs(tab[name]).max() > ZERO_TOL]
    if np.abs(tab.Sbar - tab.Sbar1).max() > ZERO_TOL:
        violations.append("Sbar != Sbar1")
    if np.abs(tab.Sbar1 - tab.Sbar2).max() > ZERO_TOL:
        violations.append("Sbar1 != Sbar2")
    return not violations, violations
