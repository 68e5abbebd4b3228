"""Finite N-player game in the regime where the game reduces to the control problem.

Dynamics have no mean-field terms there, so players interact only through
the cost, via leave-one-out averages of the other players' states and
controls.  Every player except possibly one uses the mean-field strategy
``v*_j``: the optimal feedback evaluated at the conditional-mean process
driven by the common noise alone.  A ``NoiseBundle`` with ``K`` replications
and ``M = N`` particles supplies the randomness; because streams are
prefix-shared, player ``j`` sees the same noise for every ``N > j``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import AssumptionError
from .model import CoefficientSet, is_mfg_reducible
from .riccati import GainSchedule
from .simulate import NoiseBundle, mean_and_se, particle_costs

FAMILIES = ("scaled", "live_average", "shift")
SCALES = (0.9, 0.95, 1.05, 1.1)
SHIFTS = (-0.1, -0.05, 0.05, 0.1)


@dataclass(eq=False)
class GameBatch:
    N: int
    X: np.ndarray  # (n+1, K, N, d)
    v: np.ndarray  # (n+1, K, N, m)
    Xbar: np.ndarray  # (n+1, K, d) mean-field conditional mean
    noise: NoiseBundle
    deviator: int | None = None

    def loo(self, i: int):
        """Leave-one-out averages of states and controls for player ``i``."""
        N = self.N
        LX = (self.X.sum(axis=2) - self.X[:, :, i]) / (N - 1)
        Lv = (self.v.sum(axis=2) - self.v[:, :, i]) / (N - 1)
        return LX, Lv


def _mv(M, x):
    return np.einsum("ij,...j->...i", M, x)


def _feedback(gs, k, x, xb):
    return -_mv(gs.K0[k], x - xb) - _mv(gs.K1[k], xb) - gs.c[k]


def _require_reducible(cs):
    ok, bad = is_mfg_reducible(cs)
    if not ok:
        raise AssumptionError(f"N-player simulation needs a reducible game; offending coefficients: {bad}")


def simulate_game(cs: CoefficientSet, gs: GainSchedule, noise: NoiseBundle, i: int = 0, policy=None) -> GameBatch:
    """Euler-Maruyama run of the N-player game, ``N = noise.M``.

    ``policy(x_i, loo_X, loo_v, Xbar, k)`` (arrays over replications) replaces
    player ``i``'s control; everyone else plays the mean-field strategy.
    """
    _require_reducible(cs)
    N = noise.M
    if N < 2:
        raise ValueError("the game needs N >= 2 players")
    if noise.grid != cs.grid or gs.grid != cs.grid:
        raise ValueError("noise, gains and coefficients must share one grid")
    grid = cs.grid
    n, dt = grid.n_steps, grid.dt
    K, d, m = noise.K, cs.d, cs.m
    t = cs.node_table
    X = np.empty((n + 1, K, N, d))
    v = np.empty((n + 1, K, N, m))
    Xbar = np.empty((n + 1, K, d))
    X[0] = noise.x0
    Xbar[0] = noise.init.mean_vector(d)
    for k in range(n + 1):
        xb = Xbar[k]
        v[k] = _feedback(gs, k, X[k], xb[:, None, :])
        if policy is not None:
            others = np.delete(np.arange(N), i)
            loo_x = X[k][:, others].mean(axis=1)
            loo_v = v[k][:, others].mean(axis=1)
            v[k][:, i] = policy(X[k][:, i], loo_x, loo_v, xb, k)
        if k == n:
            break
        x = X[k]
        drift = _mv(t.A[k], x) + _mv(t.B[k], v[k])
        vol = _mv(t.C[k], x) + _mv(t.D[k], v[k])
        vol0 = _mv(t.F[k], x) + _mv(t.G[k], v[k])
        X[k + 1] = x + drift * dt + vol * noise.dW[:, :, k, None] + vol0 * noise.dW0[:, None, k, None]
        vb = -_mv(gs.K1[k], xb) - gs.c[k]
        Xbar[k + 1] = xb + (_mv(t.A[k], xb) + _mv(t.B[k], vb)) * dt + (_mv(t.F[k], xb) + _mv(t.G[k], vb)) * noise.dW0[:, k, None]
    return GameBatch(N, X, v, Xbar, noise, i if policy is not None else None)


def player_cost_samples(batch: GameBatch, cs: CoefficientSet, i: int) -> np.ndarray:
    """Per-replication cost of player ``i`` with leave-one-out interaction terms, shape ``(K,)``."""
    LX, Lv = batch.loo(i)
    _, j = particle_costs(batch.X[:, :, i:i + 1], batch.v[:, :, i:i + 1], LX, Lv, cs)
    return j[:, 0]


def player_cost(batch: GameBatch, cs: CoefficientSet, i: int):
    """``(estimate, std_error)`` of player ``i``'s cost."""
    return mean_and_se(player_cost_samples(batch, cs, i))


# ---------------------------------------------------------------- deviations


def equilibrium_policy(gs):
    def pol(x, loo_x, loo_v, xb, k):
        return _feedback(gs, k, x, xb)

    pol.label = "equilibrium"
    return pol


def scaled_policy(gs, scale):
    def pol(x, loo_x, loo_v, xb, k):
        return scale * _feedback(gs, k, x, xb)

    pol.label = f"scaled({scale:g})"
    return pol


def shift_policy(gs, theta):
    def pol(x, loo_x, loo_v, xb, k):
        return _feedback(gs, k, x, xb) + theta

    pol.label = f"shift({theta:g})"
    return pol


def live_average_policy(gs):
    """Equilibrium feedback with the conditional mean replaced by the others' live average."""

    def pol(x, loo_x, loo_v, xb, k):
        return _feedback(gs, k, x, loo_x)

    pol.label = "live_average"
    return pol


def candidates(gs, family: str):
    if family == "scaled":
        return [scaled_policy(gs, c) for c in SCALES]
    if family == "shift":
        return [shift_policy(gs, th) for th in SHIFTS]
    if family == "live_average":
        return [live_average_policy(gs)]
    if family == "equilibrium":
        return [equilibrium_policy(gs)]
    raise ValueError(f"unknown candidate family {family!r}")


def deviation_slope(cs: CoefficientSet, gs: GainSchedule, noise: NoiseBundle, i: int = 0, direction=None, h: float = 0.05):
    """Derivative of player ``i``'s cost at ``h = 0`` along ``v*_i + h v_tilde``.

    ``direction(x, loo_x, loo_v, Xbar, k)`` gives ``v_tilde`` (default: the
    constant 1 in every control component).  The other players' states do
    not react to player ``i``, so the cost is quadratic in ``h`` and the
    central difference is exact per replication.  Returns ``(slope, se)``.
    """
    if direction is None:
        def direction(x, loo_x, loo_v, xb, k):
            return np.ones(x.shape[:-1] + (cs.m,))

    def bumped(sign):
        def pol(x, loo_x, loo_v, xb, k):
            return _feedback(gs, k, x, xb) + sign * h * direction(x, loo_x, loo_v, xb, k)
        return pol

    jp, jm = (player_cost_samples(simulate_game(cs, gs, noise, i, bumped(sg)), cs, i) for sg in (1.0, -1.0))
    return mean_and_se((jp - jm) / (2 * h))


@dataclass
class DeviationReport:
    N: int
    player: int
    family: str
    gain: float
    std_error: float
    best: str
    base_cost: float
    table: list = field(default_factory=list)  # (label, cost, gain, gain_se)


def deviation_gain(cs: CoefficientSet, gs: GainSchedule, noise: NoiseBundle, i: int = 0, family="live_average") -> DeviationReport:
    """Largest cost reduction player ``i`` obtains within a candidate family.

    ``family`` is a name from ``FAMILIES`` (or ``"equilibrium"``) or a list of
    policies.  All candidates share ``noise``, so the gain's standard error
    is that of a paired difference across replications.
    """
    pols = candidates(gs, family) if isinstance(family, str) else list(family)
    label = family if isinstance(family, str) else "custom"
    base = player_cost_samples(simulate_game(cs, gs, noise), cs, i)
    table = []
    best = None
    for pol in pols:
        alt = player_cost_samples(simulate_game(cs, gs, noise, i, pol), cs, i)
        g, se = mean_and_se(base - alt)
        table.append((getattr(pol, "label", repr(pol)), float(alt.mean()), g, se))
        if best is None or g > best[2]:
            best = table[-1]
    return DeviationReport(noise.M, i, label, best[2], best[3], best[0], float(base.mean()), table)


def nash_sweep(cs, gs, noise: NoiseBundle, Ns=(4, 16, 64, 256), families=("live_average",), i: int = 0):
    """Deviation gains over player counts; ``noise`` must hold at least ``max(Ns)`` players."""
    if max(Ns) > noise.M:
        raise ValueError(f"noise has {noise.M} players, sweep needs {max(Ns)}")
    return [deviation_gain(cs, gs, noise.subset(N), i, fam) for N in Ns for fam in families]


def write_sweep_csv(path, reports, header: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh)
        w.writerow(["N", "family", "best_gain", "std_error"])
        for r in reports:
            w.writerow([r.N, r.family, repr(float(r.gain)), repr(float(r.std_error))])
