"""Backward Riccati integration and feedback gains.

``P`` drives the feedback on the idiosyncratic part ``X - Xbar``, ``Pi`` the
feedback on the conditional mean, and ``phi`` is the affine offset of the
adjoint.  All three are integrated together with a fixed-step RK4 scheme run
backward from ``T``.

Two offset conventions are provided:

``terminal-zero`` (default)
    ``phi`` solves the linear ODE obtained from the drift matching with every
    ``phi`` term kept, ending at ``phi(T) = 0``.  This is what makes the
    adjoint hit its terminal condition.
``paper-forward-integral``
    ``phi(s) = int_t0^s (Lambda1' Sigma1^{-1} (r + rbar) + q + qbar)``, the
    forward quadrature of the published formula, together with the published
    closed-loop affine term ``Sigma1^{-1} (r + rbar)``.  Kept so the verifier
    can show that it does not satisfy the optimality system.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np
from scipy import linalg

from .errors import AssumptionError, SingularityError
from .model import CoefficientSet, TimeGrid, validate_assumptions

TERMINAL_ZERO = "terminal-zero"
PAPER_FORWARD = "paper-forward-integral"
CONVENTIONS = (TERMINAL_ZERO, PAPER_FORWARD)
COND_LIMIT = 1e12


@dataclass(frozen=True, eq=False)
class RiccatiSolution:
    grid: TimeGrid
    P: np.ndarray  # (n+1, d, d)
    Pi: np.ndarray  # (n+1, d, d)
    phi: np.ndarray  # (n+1, d)
    phi_convention: str = TERMINAL_ZERO

    def at(self, s: float):
        """Linear interpolation of ``(P, Pi, phi)`` at an arbitrary time."""
        k, w = _locate(self.grid, s)
        lerp = lambda a: (1 - w) * a[k] + w * a[k + 1]  # noqa: E731
        return lerp(self.P), lerp(self.Pi), lerp(self.phi)


@dataclass(frozen=True, eq=False)
class GainSchedule:
    """Per-node feedback data.

    The optimal control is ``v = -K0 (X - Xbar) - K1 Xbar - c``.
    """

    grid: TimeGrid
    Lambda0: np.ndarray  # (n+1, m, d)
    Lambda1: np.ndarray
    Sigma0: np.ndarray  # (n+1, m, m)
    Sigma1: np.ndarray
    K0: np.ndarray  # (n+1, m, d)
    K1: np.ndarray
    c: np.ndarray  # (n+1, m)
    cond0: np.ndarray  # (n+1,)
    cond1: np.ndarray
    phi_convention: str = TERMINAL_ZERO

    def at(self, s: float):
        """``(K0, K1, c)`` linearly interpolated at ``s``."""
        k, w = _locate(self.grid, s)
        lerp = lambda a: (1 - w) * a[k] + w * a[k + 1]  # noqa: E731
        return lerp(self.K0), lerp(self.K1), lerp(self.c)

    def perturbed(self, K0_scale=1.0, K1_scale=1.0, c_shift=0.0) -> "GainSchedule":
        """Deliberately wrong gains, for negative-control runs."""
        return replace(self, K0=self.K0 * K0_scale, K1=self.K1 * K1_scale, c=self.c + c_shift)


def _locate(grid: TimeGrid, s: float):
    if not grid.contains(s):
        raise ValueError(f"time {s} outside [{grid.t0}, {grid.T}]")
    nodes = grid.nodes
    k = int(np.clip(np.searchsorted(nodes, s, side="right") - 1, 0, grid.n_steps - 1))
    w = (s - nodes[k]) / (nodes[k + 1] - nodes[k])
    return k, float(np.clip(w, 0.0, 1.0))


def _solve(S, rhs, node, what):
    # definiteness and conditioning are checked per node in compute_gains
    if S.shape == (1, 1):
        if S[0, 0] == 0:
            raise SingularityError(f"{what} singular near node {node}", node)
        return rhs / S[0, 0]
    try:
        return np.linalg.solve(S, rhs)
    except np.linalg.LinAlgError:
        raise SingularityError(f"{what} singular near node {node}", node) from None


def _prepare(cf):
    """Pre-combine one node's coefficients; zero diffusion-in-control terms are dropped."""
    out = dict(cf)
    out["Ah"] = cf["A"] + cf["Abar"]
    out["Bh"] = cf["B"] + cf["Bbar"]
    out["Ch"] = cf["C"] + cf["Cbar"]
    out["Dh"] = cf["D"] + cf["Dbar"]
    out["Fh"] = cf["F"] + cf["Fbar"]
    out["Gh"] = cf["G"] + cf["Gbar"]
    out["Qh"] = cf["Q"] + cf["Qbar"]
    out["Rh"] = cf["R"] + cf["Rbar"]
    out["Sh"] = cf["S"] + cf["Sbar"]
    out["rh"] = cf["r"] + cf["rbar"]
    out["qh"] = cf["q"] + cf["qbar"]
    for name in ("D", "G", "Dh", "Gh"):
        out["has_" + name] = bool(np.any(out[name]))
    return out


def _rhs(P, Pi, phi, cf, node):
    """Time derivatives of ``(P, Pi, phi, psi)``; ``psi`` accumulates the forward-integral integrand."""
    A, B, C, F = cf["A"], cf["B"], cf["C"], cf["F"]
    Ah, Bh, Ch, Fh = cf["Ah"], cf["Bh"], cf["Ch"], cf["Fh"]

    PC, PF = P @ C, P @ F
    Lam0 = B.T @ P + cf["S"]
    Sig0 = cf["R"]
    if cf["has_D"]:
        D = cf["D"]
        Lam0 = Lam0 + D.T @ PC
        Sig0 = Sig0 + D.T @ P @ D
    if cf["has_G"]:
        G = cf["G"]
        Lam0 = Lam0 + G.T @ PF
        Sig0 = Sig0 + G.T @ P @ G
    K0 = _solve(Sig0, Lam0, node, "Sigma0")
    AP = A.T @ P
    dP = -(AP + AP.T + C.T @ PC + F.T @ PF + cf["Q"] - Lam0.T @ K0)

    PiFh = Pi @ Fh
    Lam1 = Bh.T @ Pi + cf["Sh"]
    Sig1 = cf["Rh"]
    if cf["has_Dh"]:
        Dh = cf["Dh"]
        Lam1 = Lam1 + Dh.T @ P @ Ch
        Sig1 = Sig1 + Dh.T @ P @ Dh
    if cf["has_Gh"]:
        Gh = cf["Gh"]
        Lam1 = Lam1 + Gh.T @ PiFh
        Sig1 = Sig1 + Gh.T @ Pi @ Gh
    K1 = _solve(Sig1, Lam1, node, "Sigma1")
    APi = Ah.T @ Pi
    dPi = -(APi + APi.T + Ch.T @ P @ Ch + Fh.T @ PiFh + cf["Qh"] - Lam1.T @ K1)

    gain_r = K1.T @ cf["rh"]
    dphi = -Ah.T @ phi + K1.T @ (Bh.T @ phi) + gain_r - cf["qh"]
    return dP, dPi, dphi, -(gain_r + cf["qh"])


_SCALAR_KEYS = ("A", "B", "C", "D", "F", "G", "Q", "R", "S", "Ah", "Bh", "Ch", "Dh", "Fh", "Gh", "Qh", "Rh", "Sh", "rh", "qh")


def _rhs_scalar(P, Pi, phi, c, node):
    """``_rhs`` for d = m = 1 on plain floats; ``c`` is a tuple in ``_SCALAR_KEYS`` order."""
    A, B, C, D, F, G, Q, R, S, Ah, Bh, Ch, Dh, Fh, Gh, Qh, Rh, Sh, rh, qh = c
    Lam0 = B * P + S + D * P * C + G * P * F
    Sig0 = R + (D * D + G * G) * P
    if Sig0 == 0:
        raise SingularityError(f"Sigma0 singular near node {node}", node)
    dP = -((2 * A + C * C + F * F) * P + Q - Lam0 * Lam0 / Sig0)
    Lam1 = Bh * Pi + Sh + Dh * P * Ch + Gh * Pi * Fh
    Sig1 = Rh + Dh * Dh * P + Gh * Gh * Pi
    if Sig1 == 0:
        raise SingularityError(f"Sigma1 singular near node {node}", node)
    K1 = Lam1 / Sig1
    dPi = -((2 * Ah + Fh * Fh) * Pi + Ch * Ch * P + Qh - Lam1 * K1)
    gain_r = K1 * rh
    dphi = (K1 * Bh - Ah) * phi + gain_r - qh
    return dP, dPi, dphi, -(gain_r + qh)


def solve_riccati(cs: CoefficientSet, convention: str = TERMINAL_ZERO, *, check: bool = True) -> RiccatiSolution:
    """Integrate ``P``, ``Pi`` and ``phi`` backward from ``T`` on the model's grid.

    Parameters
    ----------
    cs : CoefficientSet
    convention : {"terminal-zero", "paper-forward-integral"}
        Which offset ``phi`` to return; see the module docstring.
    check : bool
        Run :func:`validate_assumptions` first and raise
        :class:`AssumptionError` when it fails.
    """
    if convention not in CONVENTIONS:
        raise ValueError(f"unknown phi convention {convention!r}; expected one of {CONVENTIONS}")
    if check:
        report = validate_assumptions(cs)
        if not report.passed:
            names = sorted({v[0] for v in report.violations})
            raise AssumptionError(f"coefficient assumptions violated: {names}", report)

    grid = cs.grid
    n, d = grid.n_steps, cs.d
    h = grid.dt
    # coefficients at nodes and step midpoints, indexed by half-steps
    half = grid.t0 + 0.5 * h * np.arange(2 * n + 1)
    half[::2] = grid.nodes
    tab = cs.table(half)
    cf = [_prepare(tab.at(j)) for j in range(2 * n + 1)]

    P = np.empty((n + 1, d, d))
    Pi = np.empty((n + 1, d, d))
    phi = np.empty((n + 1, d))
    psi = np.empty((n + 1, d))
    P[n], Pi[n] = cs.H, cs.H + cs.Hbar
    phi[n] = 0.0
    psi[n] = 0.0

    if d == 1 and cs.m == 1:
        cf = [tuple(float(np.ravel(c[key])[0]) for key in _SCALAR_KEYS) for c in cf]
        y = (float(P[n, 0, 0]), float(Pi[n, 0, 0]), 0.0, 0.0)
        rhs, sym = _rhs_scalar, False
    else:
        y = (P[n].copy(), Pi[n].copy(), phi[n].copy(), psi[n].copy())
        rhs, sym = _rhs, True
    with np.errstate(over="ignore", invalid="ignore"):
        _integrate(rhs, sym, y, cf, h, n, P, Pi, phi, psi)

    if convention == PAPER_FORWARD:
        phi = psi[0] - psi
    return RiccatiSolution(grid, P, Pi, phi, convention)


def _integrate(rhs, sym, y, cf, h, n, P, Pi, phi, psi):
    for k in range(n - 1, -1, -1):
        c_hi, c_mid, c_lo = cf[2 * k + 2], cf[2 * k + 1], cf[2 * k]
        k1 = rhs(*y[:3], c_hi, k + 1)
        y2 = tuple(a - 0.5 * h * b for a, b in zip(y, k1))
        k2 = rhs(*y2[:3], c_mid, k)
        y3 = tuple(a - 0.5 * h * b for a, b in zip(y, k2))
        k3 = rhs(*y3[:3], c_mid, k)
        y4 = tuple(a - h * b for a, b in zip(y, k3))
        k4 = rhs(*y4[:3], c_lo, k)
        y = tuple(a - h / 6.0 * (b1 + 2 * b2 + 2 * b3 + b4) for a, b1, b2, b3, b4 in zip(y, k1, k2, k3, k4))
        if sym:
            y = (0.5 * (y[0] + y[0].T), 0.5 * (y[1] + y[1].T), y[2], y[3])
        if not np.isfinite(np.sum(y[0]) + np.sum(y[1]) + np.sum(y[2]) + np.sum(y[3])):
            raise SingularityError(f"Riccati solution blew up between nodes {k} and {k + 1}", k)
        P[k], Pi[k], phi[k], psi[k] = y


def solve_P(cs: CoefficientSet, *, check: bool = True) -> np.ndarray:
    """Node values of ``P`` alone, shape ``(n+1, d, d)``."""
    return solve_riccati(cs, TERMINAL_ZERO, check=check).P


def compute_gains(cs: CoefficientSet, rs: RiccatiSolution) -> GainSchedule:
    """Feedback matrices at every grid node."""
    if rs.grid != cs.grid:
        raise ValueError("Riccati solution and coefficients live on different grids")
    t = cs.node_table
    P, Pi, phi = rs.P, rs.Pi, rs.phi
    tr = lambda a: np.swapaxes(a, -1, -2)  # noqa: E731
    Bh, Ch, Dh = t.B + t.Bbar, t.C + t.Cbar, t.D + t.Dbar
    Fh, Gh = t.F + t.Fbar, t.G + t.Gbar

    Lam0 = tr(t.B) @ P + tr(t.D) @ P @ t.C + tr(t.G) @ P @ t.F + t.S
    Sig0 = t.R + tr(t.D) @ P @ t.D + tr(t.G) @ P @ t.G
    Lam1 = tr(Bh) @ Pi + tr(Dh) @ P @ Ch + tr(Gh) @ Pi @ Fh + t.S + t.Sbar
    Sig1 = t.R + t.Rbar + tr(Dh) @ P @ Dh + tr(Gh) @ Pi @ Gh
    Sig0 = 0.5 * (Sig0 + tr(Sig0))
    Sig1 = 0.5 * (Sig1 + tr(Sig1))

    cond0 = np.linalg.cond(Sig0)
    cond1 = np.linalg.cond(Sig1)
    for name, cond in (("Sigma0", cond0), ("Sigma1", cond1)):
        bad = np.flatnonzero(~(cond <= COND_LIMIT))
        if bad.size:
            node = int(bad[0])
            raise SingularityError(f"{name} numerically singular at node {node} (cond={cond[node]:.3e})", node)

    rh = t.r + t.rbar
    if rs.phi_convention == TERMINAL_ZERO:
        affine = rh + np.einsum("kdm,kd->km", Bh, phi)
    else:
        affine = rh
    n1 = P.shape[0]
    K0 = np.empty_like(Lam0)
    K1 = np.empty_like(Lam1)
    c = np.empty_like(rh)
    for k in range(n1):
        f0 = linalg.cho_factor(Sig0[k])
        f1 = linalg.cho_factor(Sig1[k])
        K0[k] = linalg.cho_solve(f0, Lam0[k])
        K1[k] = linalg.cho_solve(f1, Lam1[k])
        c[k] = linalg.cho_solve(f1, affine[k])
    return GainSchedule(cs.grid, Lam0, Lam1, Sig0, Sig1, K0, K1, c, cond0, cond1, rs.phi_convention)


def _flat(a):
    return a.reshape(a.shape[0], -1)


def write_solution_csv(path, rs: RiccatiSolution, gs: GainSchedule, header: str | None = None) -> None:
    """One row per node: ``s``, then row-major entries of P, Pi, phi, Sigma0, Sigma1."""
    blocks = {"P": rs.P, "Pi": rs.Pi, "phi": rs.phi, "Sigma0": gs.Sigma0, "Sigma1": gs.Sigma1}
    cols = ["s"]
    for name, arr in blocks.items():
        if arr.ndim == 2:
            cols += [f"{name}_{i}" for i in range(arr.shape[1])]
        else:
            cols += [f"{name}_{i}{j}" for i in range(arr.shape[1]) for j in range(arr.shape[2])]
    data = np.column_stack([rs.grid.nodes] + [_flat(a) for a in blocks.values()])
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh)
        w.writerow(cols)
        for row in data:
            w.writerow([repr(float(x)) for x in row])
