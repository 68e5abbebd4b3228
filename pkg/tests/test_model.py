import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mflq.errors import StructureError
from mflq.exhaustible import ExhaustibleParams, to_coefficients
from mflq.model import (
    CoefficientSet,
    Constant,
    ExpDiscount,
    Tabulated,
    TimeGrid,
    check_structure,
    is_mfg_reducible,
    sample,
    validate_assumptions,
)


def test_grid_rejects_bad_input():
    with pytest.raises(StructureError):
        TimeGrid(1.0, 1.0, 10)
    with pytest.raises(StructureError):
        TimeGrid(0.0, 1.0, 1)
    g = TimeGrid(0.0, 2.0, 4)
    assert g.dt == 0.5
    assert g.nodes[-1] == 2.0


def test_constant_schedule(unit_grid):
    M = np.array([[1.0, 2.0], [3.0, 4.0]])
    vals = Constant(M).values([0.0, 0.37, 1.0], unit_grid)
    assert np.array_equal(vals, np.broadcast_to(M, (3, 2, 2)))


def test_exp_discount_value(unit_grid):
    val = ExpDiscount(1.0, 0.1).values([1.0], unit_grid)[0, 0, 0]
    assert val == pytest.approx(0.904837, abs=1e-6)
    assert val == pytest.approx(np.exp(-0.1), rel=1e-15)


def test_tabulated_midpoint():
    g = TimeGrid(0.0, 1.0, 2)
    sched = Tabulated([0.0, 0.5, 1.0])
    assert sched.values([0.25], g)[0, 0, 0] == pytest.approx(0.25)
    one_step = Tabulated([[0.0], [1.0]])
    g2 = TimeGrid(0.0, 1.0, 2)
    with pytest.raises(StructureError):
        one_step.values([0.5], g2)


def test_identity_case_passes(unit_grid):
    cs = CoefficientSet.build(unit_grid, 2, 2, Q=np.eye(2), R=np.eye(2), H=np.eye(2))
    rep = validate_assumptions(cs)
    assert rep.passed
    assert rep.delta1 == pytest.approx(1.0)
    assert rep.delta2 == pytest.approx(1.0)


def test_discounted_r_delta2(unit_grid):
    cs = CoefficientSet.build(unit_grid, 1, 1, R=ExpDiscount(1.0, 0.1), H=1.0)
    rep = validate_assumptions(cs)
    assert rep.passed
    assert rep.delta2 == pytest.approx(np.exp(-0.1), rel=1e-12)


def test_negative_rbar_fails(unit_grid):
    cs = CoefficientSet.build(unit_grid, 1, 1, R=1.0, Rbar=-2.0, H=1.0)
    rep = validate_assumptions(cs)
    assert not rep.passed
    assert any(v[0] == "R + Rbar >= delta2*I" for v in rep.violations)


def test_s_bound_violation(unit_grid):
    cs = CoefficientSet.build(unit_grid, 1, 1, Q=1.0, R=1.0, S=2.0, H=1.0)
    rep = validate_assumptions(cs)
    assert not rep.s_ok and not rep.passed


def test_asymmetric_weight_rejected(unit_grid):
    cs = CoefficientSet.build(unit_grid, 2, 1, Q=[[1.0, 0.5], [0.0, 1.0]], R=1.0)
    with pytest.raises(StructureError):
        check_structure(cs)


def test_shape_mismatch_rejected(unit_grid):
    with pytest.raises(StructureError):
        CoefficientSet.build(unit_grid, 2, 1, B=np.ones((1, 2)))
    with pytest.raises(StructureError):
        CoefficientSet.build(unit_grid, 1, 1, Xi=1.0)


def test_reducibility():
    cs = to_coefficients(ExhaustibleParams(), 20)
    assert is_mfg_reducible(cs) == (True, [])
    grid = cs.grid
    flag, why = is_mfg_reducible(CoefficientSet.build(grid, 1, 1, R=1.0, Abar=1.0))
    assert not flag and why == ["Abar"]
    flag, why = is_mfg_reducible(CoefficientSet.build(grid, 1, 1, R=1.0, Sbar1=0.0, Sbar2=1.0))
    assert not flag and "Sbar1 != Sbar2" in why


def test_sample_matches_schedules(unit_grid):
    cs = CoefficientSet.build(unit_grid, 1, 1, R=ExpDiscount(2.0, 0.5), H=3.0)
    c = sample(cs, 0.4)
    assert c["R"][0, 0] == pytest.approx(2.0 * np.exp(-0.2))
    assert c["H"][0, 0] == 3.0
    with pytest.raises(ValueError):
        sample(cs, 1.5)


def test_on_grid_keeps_horizon(unit_grid):
    cs = CoefficientSet.build(unit_grid, 1, 1, R=Tabulated(np.linspace(1, 2, 101)))
    fine = cs.on_grid(unit_grid.refined(200))
    assert fine.node_table.R[::2, 0, 0] == pytest.approx(cs.node_table.R[:, 0, 0], abs=1e-14)
    with pytest.raises(StructureError):
        cs.on_grid(TimeGrid(0.0, 2.0, 10))


@settings(max_examples=30, deadline=None)
@given(c=st.floats(1.0, 50.0), r=st.floats(0.1, 5.0), mu=st.floats(0.0, 2.0))
def test_scaling_r_never_lowers_delta2(c, r, mu):
    grid = TimeGrid(0.0, 1.0, 20)
    base = CoefficientSet.build(grid, 1, 1, R=ExpDiscount(r, mu), Rbar=0.1 * r)
    scaled = base.replace(R=ExpDiscount(c * r, mu))
    assert validate_assumptions(scaled).delta2 >= validate_assumptions(base).delta2 - 1e-12


@settings(max_examples=30, deadline=None)
@given(n=st.integers(2, 40), data=st.data())
def test_tabulated_exact_at_nodes(n, data):
    grid = TimeGrid(0.0, 1.0, n)
    vals = np.array(data.draw(st.lists(st.floats(-1e3, 1e3), min_size=n + 1, max_size=n + 1)))
    cs = CoefficientSet.build(grid, 1, 1, q=Tabulated(vals))
    k = data.draw(st.integers(0, n))
    assert sample(cs, grid.nodes[k])["q"][0, 0] == vals[k]
