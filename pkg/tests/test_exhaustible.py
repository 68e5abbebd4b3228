from types import SimpleNamespace

import numpy as np
import pytest

from mflq.exhaustible import (
    ExhaustibleParams,
    closed_form_p,
    closed_form_p_pi,
    closed_form_pi,
    epsilon_sweep,
    market_price_curve,
    mean_reserve_curves,
    poa_check,
    reserve_positivity_check,
    to_coefficients,
    write_sweep_csv,
)
from mflq.feedback import mean_control
from mflq.model import is_mfg_reducible
from mflq.riccati import compute_gains, solve_riccati
from mflq.simulate import EXACT, InitSpec, generate_noise, simulate_ensemble


def test_monopoly_parameters():
    p = ExhaustibleParams(epsilon=0.0)
    assert p.alpha == 0.5 and p.beta == 0.0
    cs = to_coefficients(p, 10)
    assert np.all(cs.node_table.Rbar == 0)


def test_duopoly_like_parameters():
    p = ExhaustibleParams(epsilon=2.0)
    assert p.beta == pytest.approx(1.0)
    t = to_coefficients(p, 10).node_table
    assert t.Rbar == pytest.approx(t.R, rel=1e-15)


@pytest.mark.parametrize("eps", [0.0, 0.5, 2.0, 10.0])
def test_always_reducible(eps):
    assert is_mfg_reducible(to_coefficients(ExhaustibleParams(epsilon=eps), 10))[0]


def test_gamma_delta_parametrisation():
    p = ExhaustibleParams(epsilon=None, gamma=0.5, delta=0.25)
    assert p.alpha == pytest.approx(1 / 3) and p.beta == pytest.approx(1 / 6)
    with pytest.raises(ValueError):
        ExhaustibleParams(epsilon=1.0, gamma=0.5, delta=0.5)
    with pytest.raises(ValueError):
        ExhaustibleParams(epsilon=-1.0)


def test_closed_form_values():
    p = ExhaustibleParams(mu=0.1)
    assert closed_form_p(p, p.T) == pytest.approx(np.exp(-0.1))
    flat = ExhaustibleParams(mu=0.0, nu=0.0, nu0=0.0)
    assert closed_form_p(flat, 0.0) == pytest.approx(0.5)
    duo = ExhaustibleParams(mu=0.0, nu=0.0, nu0=0.0, epsilon=2.0)
    assert closed_form_pi(duo, 0.0) == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        closed_form_pi(ExhaustibleParams(nu=0.3), 0.0)
    p_, pi_ = closed_form_p_pi(ExhaustibleParams(nu=0.3), 0.5, with_pi=False)
    assert pi_ is None and p_ > 0


def test_control_and_price_identity():
    p = ExhaustibleParams(epsilon=3.0)
    cs = to_coefficients(p, 100)
    gs = compute_gains(cs, solve_riccati(cs))
    batch = simulate_ensemble(cs, gs, generate_noise(cs.grid, 1, 6, 1, p.init), EXACT)
    curve = market_price_curve(p, batch)
    vbar0 = mean_control(gs, np.array([p.mean_reserve]), k=0)[0]
    assert curve.expected_price[0] == pytest.approx(2 * p.alpha - (1 + 2 * p.beta) * vbar0, abs=1e-12)
    # the leading constant of the competition form
    assert p.alpha / (1 + p.beta) == pytest.approx(1 / (2 + 3.0))
    assert (1 + 2 * p.beta) / (1 + p.beta) == pytest.approx((2 + 6.0) / (2 + 3.0))


def test_monopoly_without_production_prices_at_one():
    p = ExhaustibleParams(epsilon=0.0)
    grid = to_coefficients(p, 10).grid
    fake = SimpleNamespace(vbar=np.zeros((11, 3, 1)), X=np.ones((11, 3, 2, 1)), grid=grid)
    assert np.all(market_price_curve(p, fake).expected_price == 1.0)


def test_analytic_display_against_offset_free_dynamics():
    # along chi_plain the offset-free price is 2 alpha - (1 + 2 beta) vbar; the
    # display carries an extra running integral of pi on top of it
    p = ExhaustibleParams(epsilon=2.0)
    cs = to_coefficients(p, 400)
    rs = solve_riccati(cs)
    batch = simulate_ensemble(cs, compute_gains(cs, rs), generate_noise(cs.grid, 0, 2, 1, p.init), EXACT)
    curve = market_price_curve(p, batch)
    s = cs.grid.nodes
    Pi = rs.Pi[:, 0, 0]
    a, b = p.alpha, p.beta
    consistent = 2 * a - (1 + 2 * b) * (np.exp(p.mu * s) * Pi * curve.chi_plain + a) / (1 + b)
    assert curve.analytic_price[0] == pytest.approx(consistent[0], abs=1e-12)
    int_pi = np.concatenate([[0.0], np.cumsum(0.5 * cs.grid.dt * (Pi[1:] + Pi[:-1]))])
    extra = np.exp(p.mu * s) * a * (1 + 2 * b) / (1 + b) ** 2 * int_pi
    assert consistent - curve.analytic_price == pytest.approx(extra, abs=1e-6)


def test_reserve_bound_examples():
    zero = reserve_positivity_check(ExhaustibleParams(init=InitSpec("point", x0=0.0)), 50)
    assert zero.bound == 0.0 and not zero.holds
    flat = ExhaustibleParams(mu=0.0, nu=0.0, nu0=0.0, epsilon=0.0)
    rep = reserve_positivity_check(flat, 50)
    assert rep.kappa == 1.0
    # alpha is 1/2 here, so the bound is ln(1 + 2)
    assert rep.bound == pytest.approx(np.log(3.0))


def test_positive_reserves_under_small_horizon():
    p = ExhaustibleParams(mu=0.1, nu=0.3, nu0=0.2, epsilon=10.0)
    rep = reserve_positivity_check(p, 200)
    assert rep.holds and rep.pi_positive
    assert rep.chi_plain.min() >= 0
    cs = to_coefficients(p, 200)
    batch = simulate_ensemble(cs, compute_gains(cs, solve_riccati(cs)), generate_noise(cs.grid, 5, 64, 32, p.init), EXACT)
    curve = market_price_curve(p, batch)
    assert np.all(curve.chi >= -3 * curve.chi_se)
    _, corrected = mean_reserve_curves(p, 200)
    assert np.max(np.abs(curve.chi - corrected)) <= 4 * curve.chi_se.max() + 1e-3


def test_sweep_and_csv(tmp_path):
    pts = epsilon_sweep(ExhaustibleParams(), [0.0, 2.0], 50, 3, 16)
    assert [pt.epsilon for pt in pts] == [0.0, 2.0]
    assert pts[0].curve.expected_price[0] > pts[1].curve.expected_price[0]
    write_sweep_csv(tmp_path / "e.csv", pts, "h")
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[1] == "epsilon,s,expected_price,std_error,chi,pi,p,analytic_price"
    assert len(lines) == 2 + 2 * 51


def test_poa_check_estimated_mode_is_exact():
    p = ExhaustibleParams(epsilon=2.0)
    nz = generate_noise(to_coefficients(p, 50).grid, 2, 8, 16, p.init)
    r = poa_check(p, nz, mode="estimated")
    assert r.poa == pytest.approx(r.direct, rel=1e-10)
