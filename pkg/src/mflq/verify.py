"""Numerical checks of the optimality system along simulated optimal paths.

* ``coupling_residual``: the first-order condition linking control and
  adjoint.  Given the Riccati solution this is an algebraic identity, so it
  vanishes to rounding under the terminal-zero offset.
* ``bsde_residual``: one-step residual of the adjoint equation, accumulated
  along each path; shrinks at order one in the step size.
* ``gateaux_test``: directional derivative of the cost at the computed optimum
  with common random numbers.
* ``dp_oracle``: discrete-time dynamic-programming recursion for the classical
  LQ sub-case, an independent cross-check of ``P``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import StructureError
from .model import CoefficientSet, TimeGrid
from .riccati import TERMINAL_ZERO, GainSchedule, RiccatiSolution, compute_gains, solve_riccati
from .simulate import (
    ESTIMATED,
    EXACT,
    NoiseBundle,
    attach_adjoints,
    generate_noise,
    mean_and_se,
    particle_costs,
    simulate_ensemble,
)

COUPLING_TOL = 1e-9
TERMINAL_TOL = 1e-12
SLOPE_RANGE = (0.9, 1.1)
N_SE = 3.0
R2_MIN = 0.99
NEGATIVE_N_SE = 5.0


@dataclass
class ResidualReport:
    name: str
    rms: float
    max_abs: float
    profile: np.ndarray
    n_steps: int
    terminal_mismatch: float | None = None
    slope: float | None = None
    resolutions: list = field(default_factory=list)


def _tmv(M, x):
    """``M^T x`` over the last axis with ``M`` (r, c) and ``x`` (..., r)."""
    return np.einsum("ji,...j->...i", M, x)


def _mv(M, x):
    return np.einsum("ij,...j->...i", M, x)


def _ensure_adjoints(batch, rs, gs, cs):
    if batch.Y is None:
        attach_adjoints(batch, rs, gs, cs)
    return batch


def coupling_residual(batch, rs: RiccatiSolution, gs: GainSchedule, cs: CoefficientSet) -> ResidualReport:
    """Stationarity of the Hamiltonian in the control, at every particle and node."""
    _ensure_adjoints(batch, rs, gs, cs)
    t = cs.table(batch.grid.nodes)
    n = batch.grid.n_steps
    res = np.empty(batch.v.shape)
    for k in range(n + 1):
        c = t.at(k)
        Yb, Zb, Z0b = (a[k][:, None, :] for a in (batch.Ybar, batch.Zbar, batch.Z0bar))
        xb, vb = batch.Xbar[k][:, None, :], batch.vbar[k][:, None, :]
        res[k] = (
            _tmv(c["B"], batch.Y[k]) + _tmv(c["Bbar"], Yb)
            + _tmv(c["D"], batch.Z[k]) + _tmv(c["Dbar"], Zb)
            + _tmv(c["G"], batch.Z0[k]) + _tmv(c["Gbar"], Z0b)
            + _mv(c["R"], batch.v[k]) + _mv(c["Rbar"], vb)
            + _mv(c["S"], batch.X[k]) + _mv(c["Sbar"], xb)
            + c["r"] + c["rbar"]
        )
    sq = np.sum(res**2, axis=-1)
    profile = np.sqrt(sq.mean(axis=(1, 2)))
    return ResidualReport("coupling", float(np.sqrt(sq.mean())), float(np.abs(res).max()), profile, n)


def bsde_residual(batch, rs: RiccatiSolution, gs: GainSchedule, cs: CoefficientSet) -> ResidualReport:
    """Accumulated one-step residual of the adjoint equation.

    ``rho_k = Y_{k+1} - Y_k + f_k dt - Z_k dW_k - Z0_k dW0_k`` with ``f`` the
    adjoint driver; the profile holds the RMS over particles of the running
    sum of ``rho`` after each step, and ``rms`` is its RMS over all steps.
    Use an ``exact``-mode batch: with estimated means the empirical mean
    carries idiosyncratic noise that the adjoint's martingale part does not
    represent.
    """
    _ensure_adjoints(batch, rs, gs, cs)
    t = cs.table(batch.grid.nodes)
    n, dt = batch.grid.n_steps, batch.grid.dt
    dW = batch.noise.dW[..., None]  # (K, M, n, 1)
    dW0 = batch.noise.dW0[:, None, :, None]
    acc = np.zeros(batch.Y.shape[1:])
    profile = np.empty(n)
    for k in range(n):
        c = t.at(k)
        Yb, Zb, Z0b = (a[k][:, None, :] for a in (batch.Ybar, batch.Zbar, batch.Z0bar))
        xb, vb = batch.Xbar[k][:, None, :], batch.vbar[k][:, None, :]
        f = (
            _tmv(c["A"], batch.Y[k]) + _tmv(c["Abar"], Yb)
            + _tmv(c["C"], batch.Z[k]) + _tmv(c["Cbar"], Zb)
            + _tmv(c["F"], batch.Z0[k]) + _tmv(c["Fbar"], Z0b)
            + _mv(c["Q"], batch.X[k]) + _mv(c["Qbar"], xb)
            + _tmv(c["S"], batch.v[k]) + _tmv(c["Sbar"], vb)
            + c["q"] + c["qbar"]
        )
        rho = batch.Y[k + 1] - batch.Y[k] + f * dt - batch.Z[k] * dW[:, :, k] - batch.Z0[k] * dW0[:, :, k]
        acc += rho
        profile[k] = np.sqrt(np.mean(np.sum(acc**2, axis=-1)))
    target = _mv(cs.H, batch.X[-1]) + _mv(cs.Hbar, batch.Xbar[-1][:, None, :])
    mismatch = float(np.abs(batch.Y[-1] - target).max())
    return ResidualReport("bsde", float(np.sqrt(np.mean(profile**2))), float(profile.max()), profile, n, mismatch)


def fit_slope(steps, values) -> float:
    """Least-squares slope of log(value) against log(step size)."""
    steps, values = np.asarray(steps, float), np.asarray(values, float)
    return float(np.polyfit(np.log(steps), np.log(values), 1)[0])


def bsde_convergence(cs: CoefficientSet, noise: NoiseBundle, factors=(8, 4, 2, 1), convention: str = TERMINAL_ZERO) -> ResidualReport:
    """BSDE residual on nested grids driven by the same Brownian paths.

    ``noise`` lives on the finest grid; each entry of ``factors`` coarsens it.
    The returned report is the finest one, with ``slope`` fitted across all.
    """
    reports = []
    for f in factors:
        nz = noise.coarsen(f)
        c = cs.on_grid(nz.grid)
        rs = solve_riccati(c, convention)
        gs = compute_gains(c, rs)
        batch = simulate_ensemble(c, gs, nz, EXACT)
        reports.append(bsde_residual(batch, rs, gs, c))
    dts = [(cs.grid.T - cs.grid.t0) / r_.n_steps for r_ in reports]
    out = reports[-1]
    out.slope = fit_slope(dts, [r_.rms for r_ in reports])
    out.resolutions = [(r_.n_steps, r_.rms) for r_ in reports]
    return out


# ---------------------------------------------------------------- Gateaux test


def constant_direction(value=1.0):
    """``v_tilde`` identically equal to ``value``."""

    def make(batch):
        return np.full(batch.v.shape, float(value))

    make.label = f"constant({value:g})"
    return make


def state_direction():
    """``v_tilde = X`` along the reference path (first state component per control)."""

    def make(batch):
        return np.repeat(batch.X[..., :1], batch.v.shape[-1], axis=-1).copy()

    make.label = "state"
    return make


def common_noise_direction():
    """``v_tilde(s) = W0(s)``, the running common Brownian motion."""

    def make(batch):
        W0 = np.concatenate([np.zeros((batch.K, 1)), np.cumsum(batch.noise.dW0, axis=1)], axis=1)
        return np.broadcast_to(W0.T[:, :, None, None], batch.v.shape).copy()

    make.label = "common_noise"
    return make


def idiosyncratic_direction():
    """``v_tilde(s) = W(s)``, each particle's own Brownian motion."""

    def make(batch):
        W = np.concatenate([np.zeros((batch.K, batch.M, 1)), np.cumsum(batch.noise.dW, axis=2)], axis=2)
        return np.broadcast_to(np.moveaxis(W, 2, 0)[..., None], batch.v.shape).copy()

    make.label = "idiosyncratic"
    return make


def default_directions():
    return [constant_direction(1.0), state_direction(), common_noise_direction(), idiosyncratic_direction()]


@dataclass
class GateauxResult:
    direction: str
    slope: float
    slope_se: float
    curvature: float
    curvature_se: float
    r2: float
    min_second_diff: float
    second_diff_se: float
    h_values: np.ndarray
    delta_j: np.ndarray  # J(v + h v_tilde) - J(v) on the signed h grid
    delta_se: np.ndarray

    @property
    def slope_z(self) -> float:
        if self.slope_se > 0:
            return abs(self.slope) / self.slope_se
        return 0.0 if self.slope == 0 else np.inf


def gateaux_test(cs: CoefficientSet, gs: GainSchedule, noise: NoiseBundle, directions=None, h_values=(0.05, 0.1, 0.15, 0.2)) -> list:
    """Directional derivative of the control-problem cost at the feedback ``gs``.

    The reference control is recorded along the reference run and held
    fixed as a process, so ``h -> J(v + h v_tilde)`` is exactly quadratic and
    the central difference isolates the first-order term.  The state
    equation is linear and homogeneous in ``(X, v)``, so the perturbed state
    is ``X + h dX`` with ``dX`` the response to ``v_tilde`` from a zero
    initial state; one tangent run per direction serves every ``h``.  All
    runs share ``noise`` and use empirical conditional means.  Per sample the
    cost difference is ``a h + b h^2``, read off from ``h = +-1``.
    """
    directions = default_directions() if directions is None else directions
    h = np.asarray(sorted(h_values), dtype=float)
    ref = simulate_ensemble(cs, gs, noise, ESTIMATED)
    j0, _ = particle_costs(ref.X, ref.v, ref.Xbar, ref.vbar, cs)
    signed = np.concatenate([-h[::-1], h])
    still = replace(noise, x0=np.zeros_like(noise.x0))
    out = []
    for make in directions:
        vt = make(ref)
        tan = simulate_ensemble(cs, None, still, ESTIMATED, control=vt)
        jp, jm = (particle_costs(ref.X + e * tan.X, ref.v + e * vt, ref.Xbar + e * tan.Xbar, ref.vbar + e * tan.vbar, cs)[0]
                  for e in (1.0, -1.0))
        a, b = (jp - jm) / 2, (jp + jm) / 2 - j0
        diffs = signed[:, None, None] * a + (signed**2)[:, None, None] * b  # (2H, K, M)
        est = np.array([mean_and_se(x) for x in diffs])
        # first-order term from the smallest symmetric pair, second-order by least squares
        lo_m, lo_p = diffs[len(h) - 1], diffs[len(h)]
        slope, slope_se = mean_and_se((lo_p - lo_m) / (2 * h[0]))
        sym = (diffs[len(h):] + diffs[len(h) - 1::-1]) / 2  # (H, K, M) even part
        a_samples = np.tensordot(h**2, sym, axes=1) / np.sum(h**4)
        curv, curv_se = mean_and_se(a_samples)
        X = np.column_stack([signed, signed**2])
        coef, *_ = np.linalg.lstsq(X, est[:, 0], rcond=None)
        resid = est[:, 0] - X @ coef
        tot = np.sum((est[:, 0] - est[:, 0].mean()) ** 2)
        r2 = 1.0 - np.sum(resid**2) / tot if tot > 0 else 1.0
        full = np.concatenate([diffs[: len(h)], np.zeros((1,) + diffs.shape[1:]), diffs[len(h):]])
        sd = full[2:] - 2 * full[1:-1] + full[:-2]
        sd_est = np.array([mean_and_se(x) for x in sd])
        worst = int(np.argmin(sd_est[:, 0]))
        out.append(GateauxResult(
            direction=getattr(make, "label", repr(make)),
            slope=slope, slope_se=slope_se,
            curvature=curv, curvature_se=curv_se,
            r2=float(r2),
            min_second_diff=float(sd_est[worst, 0]), second_diff_se=float(sd_est[worst, 1]),
            h_values=signed, delta_j=est[:, 0], delta_se=est[:, 1],
        ))
    return out


# ---------------------------------------------------------------- DP oracle


def dp_oracle(cs: CoefficientSet, grid: TimeGrid | None = None) -> np.ndarray:
    """Backward recursion of the time-discretized classical LQ problem.

    The discrete dynamics are one Euler-Maruyama step
    ``x' = x + (A x + B v) dt + (C x + D v) dW + (F x + G v) dW0`` with
    running cost ``(x'Qx + v'Rv) dt`` and terminal ``x'Hx``; coefficients are
    frozen at the left node of each step.  Returns the value matrices
    ``(n+1, d, d)``.
    """
    bars = ("Abar", "Bbar", "Cbar", "Dbar", "Fbar", "Gbar", "Qbar", "Rbar", "Sbar", "S")
    tab = cs.node_table
    bad = [name for name in bars if np.abs(tab[name]).max() > 0]
    if np.abs(cs.Hbar).max() > 0:
        bad.append("Hbar")
    if bad:
        raise StructureError(f"dynamic-programming oracle needs a classical LQ model; nonzero: {bad}")
    grid = grid or cs.grid
    t = cs.table(grid.nodes)
    n, dt, d = grid.n_steps, grid.dt, cs.d
    I = np.eye(d)
    P = np.empty((n + 1, d, d))
    P[n] = cs.H
    for k in range(n - 1, -1, -1):
        Pn = P[k + 1]
        Ad, Bd = I + dt * t.A[k], dt * t.B[k]
        C, D, F, G = t.C[k], t.D[k], t.F[k], t.G[k]
        Sig = t.R[k] * dt + Bd.T @ Pn @ Bd + dt * (D.T @ Pn @ D + G.T @ Pn @ G)
        Lam = Bd.T @ Pn @ Ad + dt * (D.T @ Pn @ C + G.T @ Pn @ F)
        Pk = t.Q[k] * dt + Ad.T @ Pn @ Ad + dt * (C.T @ Pn @ C + F.T @ Pn @ F) - Lam.T @ np.linalg.solve(Sig, Lam)
        P[k] = 0.5 * (Pk + Pk.T)
    return P


# ---------------------------------------------------------------- report


@dataclass
class Check:
    name: str
    value: float
    threshold: str
    passed: bool


def write_report(path, checks) -> None:
    """Structured text, one record per check."""
    with open(path, "w") as fh:
        for c in checks:
            fh.write(f"check={c.name} value={c.value!r} threshold={c.threshold} pass={str(c.passed).lower()}\n")


def write_profile_csv(path, report: ResidualReport, grid: TimeGrid, header: str | None = None) -> None:
    s = grid.nodes if report.profile.size == grid.n_steps + 1 else grid.nodes[1:]
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh)
        w.writerow(["s", f"{report.name}_rms"])
        for si, val in zip(s, report.profile):
            w.writerow([repr(float(si)), repr(float(val))])


def run_checks(cs: CoefficientSet, convention: str, seed: int, init=None, *, coupling_size=(8, 64),
               bsde_steps=(250, 500, 1000, 2000), bsde_size=(16, 64), gateaux_steps=800, gateaux_size=(320, 32)):
    """The standard verification battery; returns ``(checks, artifacts)``.

    Sizes are ``(paths, particles)``.  The coupling check runs on the model's
    own grid, the BSDE convergence study on the ``bsde_steps`` grids (each
    dividing the finest), and the Gateaux tests on ``gateaux_steps``.
    """
    def model_on(n):
        return cs if n == cs.grid.n_steps else cs.on_grid(cs.grid.refined(n))

    rs = solve_riccati(cs, convention)
    gs = compute_gains(cs, rs)
    checks = []

    noise = generate_noise(cs.grid, seed, *coupling_size, init, cs.d)
    batch = simulate_ensemble(cs, gs, noise, EXACT)
    cpl = coupling_residual(batch, rs, gs, cs)
    checks.append(Check("coupling_rms", cpl.rms, f"<= {COUPLING_TOL:g}", cpl.rms <= COUPLING_TOL))

    finest = max(bsde_steps)
    fine_cs = model_on(finest)
    fine_noise = generate_noise(fine_cs.grid, seed + 1, *bsde_size, init, cs.d)
    bsde = bsde_convergence(fine_cs, fine_noise, [finest // n for n in sorted(bsde_steps)], convention)
    checks.append(Check("bsde_terminal_mismatch", bsde.terminal_mismatch, f"<= {TERMINAL_TOL:g}",
                        bsde.terminal_mismatch <= TERMINAL_TOL))
    checks.append(Check("bsde_slope", bsde.slope, f"in [{SLOPE_RANGE[0]}, {SLOPE_RANGE[1]}]",
                        SLOPE_RANGE[0] <= bsde.slope <= SLOPE_RANGE[1]))

    g_cs = model_on(gateaux_steps)
    g_gs = compute_gains(g_cs, solve_riccati(g_cs, convention))
    g_noise = generate_noise(g_cs.grid, seed + 2, *gateaux_size, init, cs.d)
    results = gateaux_test(g_cs, g_gs, g_noise)
    for r_ in results:
        checks.append(Check(f"gateaux_slope_z[{r_.direction}]", r_.slope_z, f"<= {N_SE:g}", r_.slope_z <= N_SE))
        checks.append(Check(f"gateaux_curvature[{r_.direction}]", r_.curvature, "> 0", r_.curvature > 0))
        checks.append(Check(f"gateaux_r2[{r_.direction}]", r_.r2, f">= {R2_MIN:g}", r_.r2 >= R2_MIN))
        dip = float(np.max((-r_.delta_j) / np.maximum(r_.delta_se, 1e-300)))
        checks.append(Check(f"gateaux_convexity_z[{r_.direction}]", dip, f"<= {N_SE:g}", dip <= N_SE))
    neg = gateaux_test(g_cs, g_gs.perturbed(K1_scale=1.1), g_noise, [constant_direction(1.0)])[0]
    checks.append(Check("negative_control_slope_z", neg.slope_z, f">= {NEGATIVE_N_SE:g}", neg.slope_z >= NEGATIVE_N_SE))
    artifacts = {"rs": rs, "gs": gs, "coupling": cpl, "bsde": bsde, "gateaux": results, "negative": neg}
    return checks, artifacts
