"""Particle simulation of the controlled dynamics under common noise, and cost estimates.

An ensemble has ``K`` common-noise paths and ``M`` particles per path.  The
conditional mean given the common noise is either the empirical mean over the
``M`` particles sharing a path (``estimated``) or, for the optimal feedback,
the conditional-mean process integrated on its own from the common noise
alone (``exact``).

Random numbers are counter based: each stream is a Philox generator keyed by
``(seed, kind, path)``, and uniforms are mapped to normals by the inverse CDF,
so draw ``(path, particle, step)`` sits at a fixed counter position and the
first ``M`` particles of a path are the same whatever ``M`` is.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats

from .errors import DivergenceError
from .feedback import reconstruct_adjoint
from .model import CoefficientSet, TimeGrid
from .riccati import GainSchedule

ESTIMATED = "estimated"
EXACT = "exact"
MODES = (ESTIMATED, EXACT)

# stream kinds
_COMMON, _IDIO, _INIT = 0, 1, 2


@dataclass(frozen=True)
class InitSpec:
    """Initial-state law, independent of all noise.

    ``kind`` is ``"point"`` (``x0``), ``"normal"`` (``mean``, ``var``, optional
    truncation at zero) or ``"lognormal"`` (``mean_log``, ``sd_log``).
    Parameters are per component; scalars broadcast over the state dimension.
    """

    kind: str = "point"
    x0: tuple = (1.0,)
    mean: tuple = (0.0,)
    var: tuple = (1.0,)
    truncate: bool = False
    mean_log: tuple = (0.0,)
    sd_log: tuple = (1.0,)

    def __post_init__(self):
        for name in ("x0", "mean", "var", "mean_log", "sd_log"):
            object.__setattr__(self, name, tuple(np.atleast_1d(np.asarray(getattr(self, name), dtype=float))))
        if self.kind not in ("point", "normal", "lognormal"):
            raise ValueError(f"unknown initial distribution {self.kind!r}")
        if self.kind == "normal" and min(self.var) <= 0:
            raise ValueError("normal initial law needs var > 0")
        if self.kind == "lognormal" and min(self.sd_log) <= 0:
            raise ValueError("lognormal initial law needs sd_log > 0")

    def _vec(self, name, d):
        v = np.asarray(getattr(self, name))
        if v.size not in (1, d):
            raise ValueError(f"initial {name} has {v.size} components, state dimension is {d}")
        return np.broadcast_to(v, (d,)).astype(float)

    def _truncnorm(self, d):
        mu, sd = self._vec("mean", d), np.sqrt(self._vec("var", d))
        return stats.truncnorm((0.0 - mu) / sd, np.inf, loc=mu, scale=sd)

    def mean_vector(self, d: int) -> np.ndarray:
        if self.kind == "point":
            return self._vec("x0", d)
        if self.kind == "normal":
            return self._truncnorm(d).mean() if self.truncate else self._vec("mean", d)
        return np.exp(self._vec("mean_log", d) + 0.5 * self._vec("sd_log", d) ** 2)

    def ppf(self, u: np.ndarray) -> np.ndarray:
        """Map uniforms of shape ``(..., d)`` to initial states."""
        d = u.shape[-1]
        if self.kind == "point":
            return np.broadcast_to(self._vec("x0", d), u.shape).copy()
        if self.kind == "normal":
            if self.truncate:
                return self._truncnorm(d).ppf(u)
            return self._vec("mean", d) + np.sqrt(self._vec("var", d)) * special.ndtri(u)
        return np.exp(self._vec("mean_log", d) + self._vec("sd_log", d) * special.ndtri(u))

    def to_dict(self) -> dict:
        if self.kind == "point":
            return {"kind": "point", "x0": list(self.x0)}
        if self.kind == "normal":
            return {"kind": "normal", "mean": list(self.mean), "var": list(self.var), "truncate": self.truncate}
        return {"kind": "lognormal", "mean_log": list(self.mean_log), "sd_log": list(self.sd_log)}


def _stream(seed: int, kind: int, path: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(kind, path))
    return np.random.Generator(np.random.Philox(ss))


def _uniform(gen, shape):
    # Generator.random consumes one 64-bit word per value, so positions are fixed;
    # the half-ulp shift keeps values strictly inside (0, 1)
    return gen.random(shape) + 2.0**-54


@dataclass(frozen=True, eq=False)
class NoiseBundle:
    grid: TimeGrid
    seed: int
    K: int
    M: int
    dW0: np.ndarray  # (K, n)
    dW: np.ndarray  # (K, M, n)
    x0: np.ndarray  # (K, M, d)
    init: InitSpec

    def coarsen(self, factor: int) -> "NoiseBundle":
        """Same Brownian paths on a grid with ``factor`` times fewer steps."""
        n = self.grid.n_steps
        if factor < 1 or n % factor:
            raise ValueError(f"cannot coarsen {n} steps by a factor {factor}")
        grid = self.grid.refined(n // factor)
        dW0 = self.dW0.reshape(self.K, n // factor, factor).sum(-1)
        dW = self.dW.reshape(self.K, self.M, n // factor, factor).sum(-1)
        return NoiseBundle(grid, self.seed, self.K, self.M, dW0, dW, self.x0, self.init)

    def subset(self, M: int) -> "NoiseBundle":
        """The first ``M`` particles of every path."""
        return NoiseBundle(self.grid, self.seed, self.K, M, self.dW0, self.dW[:, :M], self.x0[:, :M], self.init)


def generate_noise(grid: TimeGrid, seed: int, K: int, M: int, init: InitSpec | None = None, d: int = 1) -> NoiseBundle:
    """Brownian increments and initial states for ``K`` paths of ``M`` particles."""
    if K < 1 or M < 1:
        raise ValueError(f"need K, M >= 1, got K={K}, M={M}")
    if int(seed) != seed or seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be an integer in [0, 2**64), got {seed}")
    seed = int(seed)
    init = init or InitSpec()
    n = grid.n_steps
    sq = np.sqrt(grid.dt)
    dW0 = np.empty((K, n))
    dW = np.empty((K, M, n))
    x0 = np.empty((K, M, d))
    for k in range(K):
        dW0[k] = sq * special.ndtri(_uniform(_stream(seed, _COMMON, k), n))
        dW[k] = sq * special.ndtri(_uniform(_stream(seed, _IDIO, k), (M, n)))
        x0[k] = init.ppf(_uniform(_stream(seed, _INIT, k), (M, d)))
    return NoiseBundle(grid, seed, K, M, dW0, dW, x0, init)


@dataclass(eq=False)
class EnsembleBatch:
    grid: TimeGrid
    X: np.ndarray  # (n+1, K, M, d)
    v: np.ndarray  # (n+1, K, M, m)
    Xbar: np.ndarray  # (n+1, K, d)
    vbar: np.ndarray  # (n+1, K, m)
    noise: NoiseBundle
    mode: str
    Y: np.ndarray | None = None
    Z: np.ndarray | None = None
    Z0: np.ndarray | None = None
    Ybar: np.ndarray | None = None
    Zbar: np.ndarray | None = None
    Z0bar: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    @property
    def K(self):
        return self.X.shape[1]

    @property
    def M(self):
        return self.X.shape[2]


def _mv(M, x):
    return np.einsum("ij,...j->...i", M, x)


def simulate_ensemble(
    cs: CoefficientSet,
    gs: GainSchedule | None,
    noise: NoiseBundle,
    mode: str = ESTIMATED,
    *,
    policy=None,
    control=None,
) -> EnsembleBatch:
    """Euler-Maruyama simulation of the controlled state.

    The control is, in order of precedence, an open-loop array ``control`` of
    shape ``(n+1, K, M, m)``, a callable ``policy(X, Xbar, k)`` returning
    ``(K, M, m)``, or the optimal feedback from ``gs``.  ``exact`` mode
    requires the optimal feedback.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    grid = cs.grid
    if noise.grid != grid or (gs is not None and gs.grid != grid):
        raise ValueError("noise, gains and coefficients must share one grid")
    if mode == EXACT and (policy is not None or control is not None or gs is None):
        raise ValueError("exact-mean mode is only defined for the optimal feedback")
    if control is None and policy is None and gs is None:
        raise ValueError("need gains, a policy or an open-loop control")
    n, dt = grid.n_steps, grid.dt
    K, M, d, m = noise.K, noise.M, cs.d, cs.m
    if control is not None:
        control = np.asarray(control, dtype=float)
        if control.shape != (n + 1, K, M, m):
            raise ValueError(f"open-loop control must have shape {(n + 1, K, M, m)}, got {control.shape}")

    t = cs.node_table
    X = np.empty((n + 1, K, M, d))
    v = np.empty((n + 1, K, M, m))
    Xbar = np.empty((n + 1, K, d))
    vbar = np.empty((n + 1, K, m))
    X[0] = noise.x0
    if mode == EXACT:
        Xbar[0] = noise.init.mean_vector(d)

    for k in range(n + 1):
        x = X[k]
        if mode == ESTIMATED:
            Xbar[k] = x.mean(axis=1)
        xb = Xbar[k][:, None, :]
        if control is not None:
            v[k] = control[k]
        elif policy is not None:
            v[k] = policy(x, Xbar[k], k)
        else:
            v[k] = -_mv(gs.K0[k], x - xb) - _mv(gs.K1[k], xb) - gs.c[k]
        if mode == EXACT:
            vbar[k] = -_mv(gs.K1[k], Xbar[k]) - gs.c[k]
        else:
            vbar[k] = v[k].mean(axis=1)
        if k == n:
            break
        vb = vbar[k][:, None, :]
        drift = _mv(t.A[k], x) + _mv(t.Abar[k], xb) + _mv(t.B[k], v[k]) + _mv(t.Bbar[k], vb)
        vol = _mv(t.C[k], x) + _mv(t.Cbar[k], xb) + _mv(t.D[k], v[k]) + _mv(t.Dbar[k], vb)
        vol0 = _mv(t.F[k], x) + _mv(t.Fbar[k], xb) + _mv(t.G[k], v[k]) + _mv(t.Gbar[k], vb)
        X[k + 1] = x + drift * dt + vol * noise.dW[:, :, k, None] + vol0 * noise.dW0[:, None, k, None]
        if mode == EXACT:
            xb0, vb0 = Xbar[k], vbar[k]
            mdrift = _mv(t.A[k] + t.Abar[k], xb0) + _mv(t.B[k] + t.Bbar[k], vb0)
            mvol0 = _mv(t.F[k] + t.Fbar[k], xb0) + _mv(t.G[k] + t.Gbar[k], vb0)
            Xbar[k + 1] = xb0 + mdrift * dt + mvol0 * noise.dW0[:, k, None]
        if not np.all(np.isfinite(X[k + 1])):
            raise DivergenceError(f"state became non-finite at node {k + 1}", k + 1)
    return EnsembleBatch(grid, X, v, Xbar, vbar, noise, mode)


def attach_adjoints(batch: EnsembleBatch, rs, gs: GainSchedule, cs: CoefficientSet) -> EnsembleBatch:
    """Fill ``Y, Z, Z0`` and their conditional means from the Riccati ansatz."""
    n = batch.grid.n_steps
    shape = batch.X.shape
    Y, Z, Z0 = np.empty(shape), np.empty(shape), np.empty(shape)
    mshape = batch.Xbar.shape
    Yb, Zb, Z0b = np.empty(mshape), np.empty(mshape), np.empty(mshape)
    for k in range(n + 1):
        xb = batch.Xbar[k]
        adj = reconstruct_adjoint(rs, gs, cs, batch.X[k], xb[:, None, :], k=k)
        Y[k], Z[k], Z0[k] = adj.Y, adj.Z, adj.Z0
        if batch.mode == EXACT:
            # the ansatz is affine in X, so conditional means are the ansatz at Xbar
            mean = reconstruct_adjoint(rs, gs, cs, xb, xb, k=k)
            Yb[k], Zb[k], Z0b[k] = mean.Y, mean.Z, mean.Z0
        else:
            Yb[k], Zb[k], Z0b[k] = adj.Y.mean(1), adj.Z.mean(1), adj.Z0.mean(1)
    batch.Y, batch.Z, batch.Z0 = Y, Z, Z0
    batch.Ybar, batch.Zbar, batch.Z0bar = Yb, Zb, Z0b
    return batch


# ---------------------------------------------------------------- costs


def _bil(y, W, x):
    """<W x, y> over the last axis, with ``W`` stacked per node along axis 0.

    ``x`` and ``y`` broadcast against each other, so conditional means can be
    passed with a singleton particle axis.
    """
    return (y * np.einsum("kij,k...j->k...i", W, x)).sum(axis=-1)


def _quad(x, W):
    return _bil(x, W, x)


def _lin(w, x):
    return np.einsum("ki,k...i->k...", w, x)


def trapezoid_weights(grid: TimeGrid) -> np.ndarray:
    w = np.full(grid.n_steps + 1, grid.dt)
    w[0] = w[-1] = 0.5 * grid.dt
    return w


def particle_costs(X, v, Xbar, vbar, cs: CoefficientSet, grid: TimeGrid | None = None):
    """Per-particle ``(J_lq, J_mfg)`` sample values, each shaped ``(K, M)``.

    ``X, v`` are ``(n+1, K, M, .)``; ``Xbar, vbar`` are ``(n+1, K, .)`` and
    enter both the control-problem cost and, as the frozen aggregate flows,
    the game cost.
    """
    grid = grid or cs.grid
    t = cs.table(grid.nodes)
    xb, vb = Xbar[:, :, None, :], vbar[:, :, None, :]
    common = (
        _quad(X, t.Q) + _quad(v, t.R) + 2 * _bil(v, t.S, X)
        + 2 * _lin(t.q, X) + 2 * _lin(t.qbar, xb) + 2 * _lin(t.r, v) + 2 * _lin(t.rbar, vb)
    )
    run_lq = common + _quad(xb, t.Qbar) + _quad(vb, t.Rbar) + 2 * _bil(vb, t.Sbar, xb)
    run_mfg = (
        common + 2 * _bil(X, t.Qbar, xb) + 2 * _bil(v, t.Rbar, vb)
        + 2 * _bil(v, t.Sbar1, xb) + 2 * _bil(vb, t.Sbar2, X)
    )
    w = trapezoid_weights(grid)
    xT, xbT = X[-1], xb[-1]
    term_x = (xT * (xT @ cs.H.T)).sum(axis=-1)
    term_lq = term_x + (xbT * (xbT @ cs.Hbar.T)).sum(axis=-1)
    term_mfg = term_x + 2 * (xT * (xbT @ cs.Hbar.T)).sum(axis=-1)
    j_lq = np.tensordot(w, run_lq, axes=1) + term_lq
    j_mfg = np.tensordot(w, run_mfg, axes=1) + term_mfg
    return j_lq, j_mfg


def mean_and_se(samples: np.ndarray):
    """Mean of ``(K, M)`` samples, with the standard error across common paths.

    With a single common path the particles are used instead.
    """
    samples = np.asarray(samples, dtype=float)
    per_path = samples.mean(axis=-1) if samples.ndim > 1 else samples
    if per_path.size > 1:
        return float(per_path.mean()), float(per_path.std(ddof=1) / np.sqrt(per_path.size))
    flat = samples.ravel()
    if flat.size < 2:
        return float(flat.mean()), float("nan")
    return float(flat.mean()), float(flat.std(ddof=1) / np.sqrt(flat.size))


@dataclass
class CostReport:
    j_lq: float
    j_lq_se: float
    j_mfg: float
    j_mfg_se: float
    poa: float
    poa_se: float
    lq_samples: np.ndarray  # (K, M)
    mfg_samples: np.ndarray
    quadrature: str = "trapezoid"

    def rows(self):
        return [
            ("j_lq", self.j_lq, self.j_lq_se),
            ("j_mfg", self.j_mfg, self.j_mfg_se),
            ("poa", self.poa, self.poa_se),
        ]


def evaluate_costs(batch: EnsembleBatch, cs: CoefficientSet) -> CostReport:
    """Trapezoid-rule estimates of the control-problem and game costs along a batch."""
    lq, mfg = particle_costs(batch.X, batch.v, batch.Xbar, batch.vbar, cs, batch.grid)
    j_lq, se_lq = mean_and_se(lq)
    j_mfg, se_mfg = mean_and_se(mfg)
    poa, se_poa = mean_and_se(mfg - lq)
    return CostReport(j_lq, se_lq, j_mfg, se_mfg, poa, se_poa, lq, mfg)


# ---------------------------------------------------------------- export


def _header(fh, header):
    if header:
        fh.write(f"# {header}\n")


def write_trajectory_csv(path, batch: EnsembleBatch, header: str | None = None, max_particles: int | None = None) -> None:
    """Columns: common_path, particle, step, s, X_*, v_*, Xbar_*."""
    d, m = batch.X.shape[-1], batch.v.shape[-1]
    M = batch.M if max_particles is None else min(batch.M, max_particles)
    s = batch.grid.nodes
    with open(path, "w", newline="") as fh:
        _header(fh, header)
        w = csv.writer(fh)
        w.writerow(["common_path", "particle", "step", "s"]
                   + [f"X_{i}" for i in range(d)] + [f"v_{i}" for i in range(m)] + [f"Xbar_{i}" for i in range(d)])
        for k in range(batch.K):
            for i in range(M):
                for j in range(batch.grid.n_steps + 1):
                    vals = [s[j], *batch.X[j, k, i], *batch.v[j, k, i], *batch.Xbar[j, k]]
                    w.writerow([k, i, j] + [repr(float(x)) for x in vals])


def write_cost_csv(path, report: CostReport, header: str | None = None, extra=()) -> None:
    with open(path, "w", newline="") as fh:
        _header(fh, header)
        w = csv.writer(fh)
        w.writerow(["quantity", "estimate", "std_error"])
        for name, est, se in list(report.rows()) + list(extra):
            w.writerow([name, repr(float(est)), repr(float(se))])
