"""Optimal feedback law and the adjoint triple implied by the Riccati solution.

State arrays carry the dimension in the last axis, so ``X`` may be ``(d,)``
for one particle or ``(..., M, d)`` for an ensemble; ``Xbar`` must broadcast
against ``X``.  Time is given either as a grid-node index ``k`` (exact) or a
time ``s`` (gains linearly interpolated between nodes).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import CoefficientSet
from .riccati import GainSchedule, RiccatiSolution


@dataclass
class AdjointState:
    Y: np.ndarray
    Z: np.ndarray
    Z0: np.ndarray


def _node_or_time(grid, k, s):
    if k is not None:
        return int(k), None
    if s is None:
        raise ValueError("give either a node index k or a time s")
    nodes = grid.nodes
    hit = np.flatnonzero(np.isclose(nodes, s, rtol=0, atol=1e-13 * (grid.T - grid.t0)))
    return (int(hit[0]), None) if hit.size else (None, float(s))


def _mv(M, x):
    """Apply matrix ``M`` (r, c) to the last axis of ``x`` (..., c)."""
    return np.einsum("ij,...j->...i", M, x)


def _gains(gs, k, s):
    if k is not None:
        return gs.K0[k], gs.K1[k], gs.c[k]
    return gs.at(s)


def optimal_control(gs: GainSchedule, X, Xbar, s=None, *, k=None):
    """``v = -K0 (X - Xbar) - K1 Xbar - c``."""
    k, s = _node_or_time(gs.grid, k, s)
    K0, K1, c = _gains(gs, k, s)
    X = np.asarray(X, dtype=float)
    Xbar = np.asarray(Xbar, dtype=float)
    return -_mv(K0, X - Xbar) - _mv(K1, Xbar) - c


def mean_control(gs: GainSchedule, Xbar, s=None, *, k=None):
    """Conditional mean of the optimal control, ``-K1 Xbar - c``."""
    k, s = _node_or_time(gs.grid, k, s)
    _, K1, c = _gains(gs, k, s)
    return -_mv(K1, np.asarray(Xbar, dtype=float)) - c


def reconstruct_adjoint(rs: RiccatiSolution, gs: GainSchedule, cs: CoefficientSet, X, Xbar, s=None, *, k=None):
    """Adjoint ``(Y, Z, Z0)`` along a state, built from the Riccati ansatz.

    ``Y = P (X - Xbar) + Pi Xbar + phi`` and ``Z``, ``Z0`` are the diffusion
    coefficients of ``Y`` once the feedback control is substituted.  The affine
    part of the control uses the same ``phi`` convention as ``gs``.
    """
    k, s = _node_or_time(gs.grid, k, s)
    if k is not None:
        P, Pi, phi = rs.P[k], rs.Pi[k], rs.phi[k]
        cf = cs.node_table.at(k)
    else:
        P, Pi, phi = rs.at(s)
        cf = cs.table([s]).at(0)
    X = np.asarray(X, dtype=float)
    Xbar = np.asarray(Xbar, dtype=float)
    dev = X - Xbar
    v = optimal_control(gs, X, Xbar, s, k=k)
    vbar = mean_control(gs, Xbar, s, k=k)
    dv = v - vbar

    Y = _mv(P, dev) + _mv(Pi, Xbar) + phi
    Z = _mv(P, _mv(cf["C"], dev) + _mv(cf["C"] + cf["Cbar"], Xbar) + _mv(cf["D"], dv) + _mv(cf["D"] + cf["Dbar"], vbar))
    Z0 = _mv(P, _mv(cf["F"], dev) + _mv(cf["G"], dv)) + _mv(
        Pi, _mv(cf["F"] + cf["Fbar"], Xbar) + _mv(cf["G"] + cf["Gbar"], vbar)
    )
    return AdjointState(Y, Z, Z0)
