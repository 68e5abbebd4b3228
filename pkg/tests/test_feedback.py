import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mflq.exhaustible import ExhaustibleParams, to_coefficients
from mflq.feedback import mean_control, optimal_control, reconstruct_adjoint
from mflq.model import CoefficientSet, TimeGrid
from mflq.riccati import compute_gains, solve_riccati


@pytest.fixture(scope="module")
def exhaustible():
    p = ExhaustibleParams(epsilon=2.0)
    cs = to_coefficients(p, 100)
    rs = solve_riccati(cs)
    return p, cs, rs, compute_gains(cs, rs)


@pytest.fixture(scope="module")
def rich(rich_model):
    rs = solve_riccati(rich_model)
    return rich_model, rs, compute_gains(rich_model, rs)


def test_zero_state_zero_control():
    grid = TimeGrid(0.0, 1.0, 10)
    cs = CoefficientSet.build(grid, 2, 1, A=np.eye(2), B=[[1.0], [0.0]], Q=np.eye(2), R=1.0, H=np.eye(2))
    gs = compute_gains(cs, solve_riccati(cs))
    assert np.array_equal(optimal_control(gs, np.zeros(2), np.zeros(2), k=3), np.zeros(1))


def test_symmetric_state_ignores_k0(rich):
    cs, rs, gs = rich
    x = np.array([0.4, -1.2])
    v = optimal_control(gs, x, x, k=7)
    assert v == pytest.approx(-gs.K1[7] @ x - gs.c[7], abs=1e-15)
    bent = gs.perturbed(K0_scale=3.0)
    assert np.array_equal(optimal_control(bent, x, x, k=7), v)


def test_exhaustible_control_formula(exhaustible):
    p, cs, rs, gs = exhaustible
    k = 40
    s = cs.grid.nodes[k]
    X, Xb = np.array([[0.7], [1.3]]), np.array([1.0])
    P, Pi, phi = rs.P[k, 0, 0], rs.Pi[k, 0, 0], rs.phi[k, 0]
    b = p.beta
    expect = np.exp(p.mu * s) * (P * (X - Xb) + (Pi * Xb + phi) / (1 + b)) + p.alpha / (1 + b)
    assert optimal_control(gs, X, Xb, k=k) == pytest.approx(expect, rel=1e-13)


def test_time_and_node_agree(exhaustible):
    _, cs, _, gs = exhaustible
    s = cs.grid.nodes[25]
    x = np.array([0.3])
    assert np.array_equal(optimal_control(gs, x, x, s), optimal_control(gs, x, x, k=25))
    with pytest.raises(ValueError):
        optimal_control(gs, x, x)


def test_terminal_adjoint(rich):
    cs, rs, gs = rich
    X = np.array([[0.3, -0.4], [1.1, 0.2]])
    Xb = X.mean(axis=0)
    adj = reconstruct_adjoint(rs, gs, cs, X, Xb, k=cs.grid.n_steps)
    assert adj.Y == pytest.approx(X @ cs.H.T + Xb @ cs.Hbar.T, abs=1e-15)


def test_common_noise_adjoint_vanishes():
    grid = TimeGrid(0.0, 1.0, 20)
    cs = CoefficientSet.build(grid, 1, 1, A=0.2, B=1.0, C=0.3, Q=1.0, Qbar=0.5, R=1.0, H=1.0)
    rs = solve_riccati(cs)
    gs = compute_gains(cs, rs)
    x = np.array([0.8])
    assert np.array_equal(reconstruct_adjoint(rs, gs, cs, x, x, k=5).Z0, np.zeros(1))


def test_exhaustible_adjoint_noise(exhaustible):
    p, cs, rs, gs = exhaustible
    k = 30
    X, Xb = np.array([[0.5], [1.5]]), np.array([1.0])
    adj = reconstruct_adjoint(rs, gs, cs, X, Xb, k=k)
    P, Pi = rs.P[k, 0, 0], rs.Pi[k, 0, 0]
    assert adj.Z == pytest.approx(p.nu * P * X, rel=1e-14)
    assert adj.Z0 == pytest.approx(p.nu0 * (P * (X - Xb) + Pi * Xb), rel=1e-14)


@settings(max_examples=30, deadline=None)
@given(X=arrays(float, (7, 2), elements=st.floats(-5, 5)), k=st.integers(0, 50))
def test_mean_of_control_is_control_of_mean(X, k, rich):
    cs, rs, gs = rich
    xb = X.mean(axis=0)
    v = optimal_control(gs, X, xb, k=k)
    assert np.abs(v.mean(axis=0) - mean_control(gs, xb, k=k)).max() <= 1e-12
