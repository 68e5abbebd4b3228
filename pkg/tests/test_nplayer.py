import numpy as np
import pytest

from mflq.errors import AssumptionError
from mflq.exhaustible import ExhaustibleParams, to_coefficients
from mflq.model import CoefficientSet, TimeGrid
from mflq.nplayer import (
    candidates,
    deviation_gain,
    deviation_slope,
    equilibrium_policy,
    live_average_policy,
    nash_sweep,
    player_cost,
    player_cost_samples,
    simulate_game,
    write_sweep_csv,
)
from mflq.riccati import compute_gains, solve_riccati
from mflq.simulate import EXACT, InitSpec, evaluate_costs, generate_noise, particle_costs, simulate_ensemble


@pytest.fixture(scope="module")
def market():
    cs = to_coefficients(ExhaustibleParams(epsilon=2.0), 50)
    gs = compute_gains(cs, solve_riccati(cs))
    nz = generate_noise(cs.grid, 31, 400, 64)
    return cs, gs, nz


def test_noise_free_players_coincide():
    cs = to_coefficients(ExhaustibleParams(nu=0.0, nu0=0.0), 20)
    gs = compute_gains(cs, solve_riccati(cs))
    b = simulate_game(cs, gs, generate_noise(cs.grid, 0, 1, 2))
    assert np.array_equal(b.X[:, :, 0], b.X[:, :, 1])


def test_leave_one_out_mean_converges(market):
    cs, gs, nz = market
    gaps = []
    for N in (4, 16, 64):
        b = simulate_game(cs, gs, nz.subset(N))
        LX, _ = b.loo(0)
        gaps.append(np.sqrt(np.mean((LX - b.Xbar) ** 2)))
    ratios = np.array(gaps[:-1]) / np.array(gaps[1:])
    assert np.all((ratios > 1.5) & (ratios < 2.7)), ratios


def test_equilibrium_deviation_changes_nothing(market):
    cs, gs, nz = market
    nz = nz.subset(5)
    a = simulate_game(cs, gs, nz)
    b = simulate_game(cs, gs, nz, 2, equilibrium_policy(gs))
    assert np.array_equal(a.X, b.X) and np.array_equal(a.v, b.v)


def test_two_players_without_interaction():
    grid = TimeGrid(0.0, 1.0, 30)
    cs = CoefficientSet.build(grid, 1, 1, A=0.2, B=1.0, C=0.3, F=0.2, Q=1.0, R=1.0, H=1.0, q=0.1, r=0.2)
    gs = compute_gains(cs, solve_riccati(cs))
    b = simulate_game(cs, gs, generate_noise(grid, 2, 10, 2, InitSpec("normal", mean=1.0, var=0.2)))
    # without bar weights the interaction arguments drop out
    own, _ = particle_costs(b.X[:, :, :1], b.v[:, :, :1], np.zeros((31, 10, 1)), np.zeros((31, 10, 1)), cs)
    assert player_cost_samples(b, cs, 0) == pytest.approx(own[:, 0], rel=1e-14)


def test_players_are_exchangeable(market):
    cs, gs, nz = market
    b = simulate_game(cs, gs, nz.subset(8))
    costs = np.array([player_cost_samples(b, cs, i) for i in range(8)])
    diff = costs - costs.mean(axis=0)
    se = diff.std(axis=1, ddof=1) / np.sqrt(diff.shape[1])
    assert np.all(np.abs(diff.mean(axis=1)) <= 3.5 * se)


def test_large_game_cost_near_mean_field(market):
    cs, gs, nz = market
    b = simulate_game(cs, gs, nz)
    est, se = player_cost(b, cs, 0)
    mf = evaluate_costs(simulate_ensemble(cs, gs, generate_noise(cs.grid, 77, 400, 64), EXACT), cs)
    assert abs(est - mf.j_mfg) <= 3 * np.hypot(se, mf.j_mfg_se)


def test_equilibrium_family_gains_nothing(market):
    cs, gs, nz = market
    rep = deviation_gain(cs, gs, nz.subset(4), family="equilibrium")
    assert rep.gain == 0.0 and rep.std_error == 0.0


def test_small_game_has_profitable_deviation(market):
    cs, gs, nz = market
    rep = deviation_gain(cs, gs, nz.subset(2), family="live_average")
    assert rep.gain >= 5 * rep.std_error
    assert rep.best == "live_average"


def test_relabeling_others_keeps_gain(market):
    cs, gs, nz = market
    nz = nz.subset(6)
    perm = np.array([0, 3, 5, 1, 2, 4])
    shuffled = type(nz)(nz.grid, nz.seed, nz.K, nz.M, nz.dW0, nz.dW[:, perm], nz.x0[:, perm], nz.init)
    a = deviation_gain(cs, gs, nz, 0, "scaled")
    b = deviation_gain(cs, gs, shuffled, 0, "scaled")
    assert a.gain == pytest.approx(b.gain, rel=1e-9, abs=1e-15)


def test_candidate_families(market):
    _, gs, _ = market
    assert len(candidates(gs, "scaled")) == 4
    assert len(candidates(gs, "shift")) == 4
    assert candidates(gs, "live_average")[0].label == live_average_policy(gs).label
    with pytest.raises(ValueError):
        candidates(gs, "random")


def test_sweep_and_csv(tmp_path, market):
    cs, gs, nz = market
    reps = nash_sweep(cs, gs, nz.subset(16), (4, 16), ("live_average", "shift"))
    assert [(r.N, r.family) for r in reps] == [(4, "live_average"), (4, "shift"), (16, "live_average"), (16, "shift")]
    write_sweep_csv(tmp_path / "n.csv", reps, "h")
    lines = (tmp_path / "n.csv").read_text().splitlines()
    assert lines[1] == "N,family,best_gain,std_error" and len(lines) == 6
    with pytest.raises(ValueError):
        nash_sweep(cs, gs, nz.subset(4), (8,))


def test_game_needs_reducible_model(unit_grid):
    cs = CoefficientSet.build(unit_grid, 1, 1, B=1.0, Bbar=0.5, R=1.0)
    gs = compute_gains(cs, solve_riccati(cs))
    with pytest.raises(AssumptionError):
        simulate_game(cs, gs, generate_noise(unit_grid, 0, 1, 3))


def test_deviation_slope_is_exact_central_difference(market):
    cs, gs, nz = market
    sub = nz.subset(4)
    a = deviation_slope(cs, gs, sub, h=0.05)
    b = deviation_slope(cs, gs, sub, h=0.3)
    assert a == pytest.approx(b, rel=1e-9, abs=1e-12)
    zero = deviation_slope(cs, gs, sub, direction=lambda x, lx, lv, xb, k: np.zeros(x.shape[:-1] + (1,)))
    assert zero == (0.0, 0.0)


def test_deviation_slope_vanishes_without_interaction():
    # epsilon = 0 removes every interaction term, so each player solves its own control problem
    cs = to_coefficients(ExhaustibleParams(epsilon=0.0), 200)
    gs = compute_gains(cs, solve_riccati(cs))
    nz = generate_noise(cs.grid, 8, 400, 2)
    slope, se = deviation_slope(cs, gs, nz)
    assert abs(slope) <= 3 * se
    slope, se = deviation_slope(cs, gs.perturbed(K1_scale=1.3), nz)
    assert abs(slope) >= 5 * se
