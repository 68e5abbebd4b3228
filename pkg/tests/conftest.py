import numpy as np
import pytest

from mflq.exhaustible import ExhaustibleParams, to_coefficients
from mflq.model import CoefficientSet, TimeGrid


@pytest.fixture
def unit_grid():
    return TimeGrid(0.0, 1.0, 100)


@pytest.fixture
def scalar_lq(unit_grid):
    """Classical scalar problem with every bar term zero."""
    return CoefficientSet.build(unit_grid, 1, 1, A=0.3, B=1.0, C=0.2, F=0.1, Q=1.0, R=1.0, H=1.0, q=0.1, r=-0.2)


@pytest.fixture
def exhaustible_cs():
    return to_coefficients(ExhaustibleParams(), 100)


@pytest.fixture(scope="session")
def rich_model():
    """Two-dimensional model touching every coefficient family."""
    grid = TimeGrid(0.0, 1.0, 50)
    rng = np.random.default_rng(0)
    small = lambda *s: 0.2 * rng.standard_normal(s)  # noqa: E731
    return CoefficientSet.build(
        grid, 2, 1,
        A=small(2, 2), Abar=small(2, 2), B=small(2, 1) + 1.0, Bbar=small(2, 1),
        C=small(2, 2), Cbar=small(2, 2), D=small(2, 1), Dbar=small(2, 1),
        F=small(2, 2), Fbar=small(2, 2), G=small(2, 1), Gbar=small(2, 1),
        Q=np.eye(2), Qbar=0.5 * np.eye(2), R=1.0, Rbar=0.5, S=small(1, 2), Sbar=small(1, 2),
        q=small(2), qbar=small(2), r=small(1), rbar=small(1),
        H=np.eye(2), Hbar=0.3 * np.eye(2),
    )
