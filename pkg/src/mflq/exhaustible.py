"""Exhaustible-resource production under competition as a scalar instance of the model.

A producer's reserves ``X`` are depleted at the production rate ``v`` and are
hit by idiosyncratic (``nu``) and common (``nu0``) multiplicative noise.  Linear
demand with competition parameter ``epsilon`` gives the market price
``kbar = 2 alpha - (1 + 2 beta) vbar`` and a discounted quadratic profit, which
maps onto the LQ coefficients

    B = -1, C = nu, F = nu0, R = e^{-mu (s - t)}, Rbar = beta R,
    r = -alpha e^{-mu (s - t)}, H = e^{-mu (T - t)}.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .model import CoefficientSet, ExpDiscount, TimeGrid
from .riccati import TERMINAL_ZERO, compute_gains, solve_riccati
from .simulate import EXACT, InitSpec, evaluate_costs, generate_noise, mean_and_se, simulate_ensemble, trapezoid_weights

LAMBDA_ZERO_TOL = 1e-10


@dataclass(frozen=True)
class ExhaustibleParams:
    """Model parameters.  Give ``epsilon``, or ``gamma`` and ``delta`` directly."""

    mu: float = 0.1
    nu: float = 0.3
    nu0: float = 0.2
    epsilon: float | None = 2.0
    gamma: float | None = None
    delta: float | None = None
    t0: float = 0.0
    T: float = 1.0
    init: InitSpec = InitSpec("point", x0=(1.0,))

    def __post_init__(self):
        if self.epsilon is not None:
            if self.gamma is not None or self.delta is not None:
                raise ValueError("give either epsilon or (gamma, delta), not both")
            if self.epsilon < 0:
                raise ValueError("epsilon must be >= 0")
            object.__setattr__(self, "gamma", 1.0 / (1.0 + self.epsilon))
            object.__setattr__(self, "delta", self.epsilon / (1.0 + self.epsilon))
        elif self.gamma is None or self.delta is None:
            raise ValueError("need epsilon or both gamma and delta")
        if not (0 < self.gamma <= 1 and 0 <= self.delta < 1):
            raise ValueError(f"need gamma in (0, 1] and delta in [0, 1), got {self.gamma}, {self.delta}")
        if self.mu < 0:
            raise ValueError("discount rate mu must be >= 0")
        if not self.T > self.t0:
            raise ValueError("need T > t0")

    @property
    def alpha(self):
        return self.gamma / (2 * (1 - self.delta))

    @property
    def beta(self):
        return self.delta / (2 * (1 - self.delta))

    @property
    def lam(self):
        return self.mu - (self.nu**2 + self.nu0**2)

    @property
    def kappa(self):
        return 1 + 0.25 * ((1 + self.beta) * (self.nu0**2 - self.mu) ** 2 + 4 * self.nu**2) * self.T

    @property
    def mean_reserve(self) -> float:
        return float(self.init.mean_vector(1)[0])

    def with_epsilon(self, epsilon) -> "ExhaustibleParams":
        return ExhaustibleParams(self.mu, self.nu, self.nu0, epsilon, None, None, self.t0, self.T, self.init)


def to_coefficients(params: ExhaustibleParams, n_steps: int) -> CoefficientSet:
    grid = TimeGrid(params.t0, params.T, n_steps)
    mu = params.mu
    return CoefficientSet.build(
        grid, 1, 1,
        B=-1.0, C=params.nu, F=params.nu0,
        R=ExpDiscount(1.0, mu),
        Rbar=ExpDiscount(params.beta, mu),
        r=ExpDiscount(-params.alpha, mu),
        H=np.exp(-mu * (params.T - params.t0)),
    )


def _riccati_closed_form(scale, lam, params, s):
    # scalar Riccati with terminal value e^{-mu(T-t)}; scale = 1 gives p, scale = 1 + beta gives pi (nu = 0)
    s = np.asarray(s, dtype=float)
    disc = np.exp(-params.mu * (s - params.t0))
    tau = params.T - s
    if abs(lam) <= LAMBDA_ZERO_TOL:
        return scale * disc / (scale + tau)
    return scale * lam * disc / ((scale * lam + 1) * np.exp(lam * tau) - 1)


def closed_form_p(params: ExhaustibleParams, s):
    return _riccati_closed_form(1.0, params.lam, params, s)


def closed_form_pi(params: ExhaustibleParams, s):
    """Only available without idiosyncratic noise (``nu = 0``)."""
    if params.nu != 0:
        raise ValueError("pi has no closed form when nu != 0")
    return _riccati_closed_form(1.0 + params.beta, params.lam, params, s)


def closed_form_p_pi(params: ExhaustibleParams, s, with_pi: bool = True):
    """``(p, pi)``; ``pi`` requires ``nu = 0`` when requested, else it is ``None``."""
    p = closed_form_p(params, s)
    return p, (closed_form_pi(params, s) if with_pi else None)


# ---------------------------------------------------------------- prices


def _rk4_linear(grid, a, b, y0):
    """RK4 for ``y' = a(s) y + b(s)`` with ``a, b`` given at half-steps (2n+1 values)."""
    n, h = grid.n_steps, grid.dt
    y = np.empty(n + 1)
    y[0] = y0
    for k in range(n):
        f = lambda j, yy: a[j] * yy + b[j]  # noqa: E731
        k1 = f(2 * k, y[k])
        k2 = f(2 * k + 1, y[k] + 0.5 * h * k1)
        k3 = f(2 * k + 1, y[k] + 0.5 * h * k2)
        k4 = f(2 * k + 2, y[k] + h * k3)
        y[k + 1] = y[k] + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return y


def _half_step_solution(params, n_steps):
    """``Pi`` and terminal-zero ``phi`` on the doubled grid (nodes and midpoints)."""
    fine = to_coefficients(params, 2 * n_steps)
    rs = solve_riccati(fine, TERMINAL_ZERO)
    return fine.grid.nodes, rs.Pi[:, 0, 0], rs.phi[:, 0]


def mean_reserve_curves(params: ExhaustibleParams, n_steps: int):
    """Expected reserves from the mean ODE, without and with the ``phi`` feedback.

    Returns ``(chi_plain, chi_corrected)`` on the ``n_steps`` grid.  The
    plain curve drops the offset term, the corrected one keeps it; the
    simulated expected reserves follow the corrected curve.
    """
    grid = TimeGrid(params.t0, params.T, n_steps)
    s, Pi, phi = _half_step_solution(params, n_steps)
    scale = np.exp(params.mu * (s - params.t0)) / (1 + params.beta)
    const = -params.alpha / (1 + params.beta)
    x0 = params.mean_reserve
    plain = _rk4_linear(grid, -scale * Pi, np.full_like(s, const), x0)
    corrected = _rk4_linear(grid, -scale * Pi, const - scale * phi, x0)
    return plain, corrected


@dataclass
class PriceCurve:
    s: np.ndarray
    expected_price: np.ndarray
    price_se: np.ndarray
    price_paths: np.ndarray  # (n+1, K)
    chi: np.ndarray  # simulated E[X]
    chi_se: np.ndarray
    analytic_price: np.ndarray  # closed-form display using the offset-free mean ODE
    chi_plain: np.ndarray


def market_price_curve(params: ExhaustibleParams, batch) -> PriceCurve:
    """Market price ``kbar = 2 alpha - (1 + 2 beta) vbar`` along each common path."""
    a, b = params.alpha, params.beta
    price = 2 * a - (1 + 2 * b) * batch.vbar[..., 0]  # (n+1, K)
    n1 = price.shape[0]
    stats = np.array([mean_and_se(price[k]) for k in range(n1)])
    per_path = batch.X[..., 0].mean(axis=2)  # (n+1, K)
    chi = np.array([mean_and_se(per_path[k]) for k in range(n1)])

    grid = batch.grid
    s_half, Pi_half, _ = _half_step_solution(params, grid.n_steps)
    Pi = Pi_half[::2]
    # running integral of Pi by Simpson on each step
    h = grid.dt
    int_pi = np.concatenate([[0.0], np.cumsum(h / 6 * (Pi_half[:-2:2] + 4 * Pi_half[1::2] + Pi_half[2::2]))])
    chi_plain, _ = mean_reserve_curves(params, grid.n_steps)
    s = grid.nodes
    analytic = a / (1 + b) - np.exp(params.mu * (s - params.t0)) * (
        (1 + 2 * b) / (1 + b) * Pi * chi_plain + a * (1 + 2 * b) / (1 + b) ** 2 * int_pi
    )
    return PriceCurve(s, stats[:, 0], stats[:, 1], price, chi[:, 0], chi[:, 1], analytic, chi_plain)


@dataclass
class PositivityReport:
    holds: bool
    bound: float
    kappa: float
    pi_positive: bool
    pi_min: float
    chi_plain: np.ndarray
    chi_corrected: np.ndarray

    @property
    def chi_plain_min(self):
        return float(self.chi_plain.min())


def reserve_positivity_check(params: ExhaustibleParams, n_steps: int = 1000) -> PositivityReport:
    """Small-horizon condition for nonnegative expected reserves, with the supporting curves."""
    a, b, kappa = params.alpha, params.beta, params.kappa
    ex = params.mean_reserve
    bound = (1 + b) / kappa * np.log1p(kappa / a * ex) if ex > -a / kappa else -np.inf
    holds = bool(params.T - params.t0 < bound)
    _, Pi, _ = _half_step_solution(params, n_steps)
    plain, corrected = mean_reserve_curves(params, n_steps)
    return PositivityReport(holds, float(bound), float(kappa), bool(np.all(Pi > 0)), float(Pi.min()), plain, corrected)


# ---------------------------------------------------------------- epsilon sweep


@dataclass
class SweepPoint:
    epsilon: float
    curve: PriceCurve
    P: np.ndarray
    Pi: np.ndarray


def epsilon_sweep(params: ExhaustibleParams, epsilons, n_steps: int, seed: int, K: int, M: int = 1):
    """Price curves across competition levels with common random numbers.

    Runs in exact-mean mode: the price depends on the common noise only, so
    ``M`` particles per path only matter for the reserve estimate.
    """
    grid = TimeGrid(params.t0, params.T, n_steps)
    noise = generate_noise(grid, seed, K, M, params.init)
    out = []
    for eps in epsilons:
        p = params.with_epsilon(eps)
        cs = to_coefficients(p, n_steps)
        rs = solve_riccati(cs)
        gs = compute_gains(cs, rs)
        batch = simulate_ensemble(cs, gs, noise, EXACT)
        out.append(SweepPoint(float(eps), market_price_curve(p, batch), rs.P[:, 0, 0], rs.Pi[:, 0, 0]))
    return out


def write_sweep_csv(path, points, header: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh)
        w.writerow(["epsilon", "s", "expected_price", "std_error", "chi", "pi", "p", "analytic_price"])
        for pt in points:
            c = pt.curve
            for j in range(c.s.size):
                w.writerow([repr(pt.epsilon)] + [repr(float(x)) for x in (
                    c.s[j], c.expected_price[j], c.price_se[j], c.chi[j], pt.Pi[j], pt.P[j], c.analytic_price[j])])


# ---------------------------------------------------------------- price of anarchy


@dataclass
class PoaCheck:
    epsilon: float
    poa: float
    poa_se: float
    direct: float
    direct_se: float
    j_lq: float
    j_lq_se: float
    j_mfg: float
    j_mfg_se: float

    @property
    def combined_se(self):
        return float(np.hypot(self.poa_se, self.direct_se))


def poa_check(params: ExhaustibleParams, noise, mode: str = EXACT) -> PoaCheck:
    """Price of anarchy from the two cost functionals, next to its direct form.

    Here the gap between the game cost and the control cost reduces to
    ``beta * int e^{-mu (s - t)} vbar^2 ds``, evaluated per common path from
    the ``vbar`` field of the same batch.
    """
    cs = to_coefficients(params, noise.grid.n_steps)
    if cs.grid != noise.grid:
        raise ValueError("noise grid does not match the model horizon")
    gs = compute_gains(cs, solve_riccati(cs))
    batch = simulate_ensemble(cs, gs, noise, mode)
    rep = evaluate_costs(batch, cs)
    s = cs.grid.nodes
    w = trapezoid_weights(cs.grid) * np.exp(-params.mu * (s - params.t0))
    direct = params.beta * np.tensordot(w, batch.vbar[..., 0] ** 2, axes=1)  # (K,)
    d, d_se = mean_and_se(direct)
    return PoaCheck(params.epsilon, rep.poa, rep.poa_se, d, d_se, rep.j_lq, rep.j_lq_se, rep.j_mfg, rep.j_mfg_se)
