"""Frictionless optimizers, pricing measures and hedges for the supported markets.

Interest rates are zero throughout; dynamics are in discounted units. Use
:func:`discounted_risk_aversion` to fold a constant rate into ``p``.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import ndtr

from .errors import GridMismatchError, ParameterError, UnsupportedModelError
from .sde_core import GBMParams, PathSet, TimeGrid, simulate_correlated_pair, simulate_gbm
from .stats import Estimate, mean_estimate

SQRT_2PI = np.sqrt(2.0 * np.pi)
FD_BUMP = 1e-4
# equally spaced normal nodes: payoffs with kinks defeat Gauss-Hermite
_GH_NODES = np.linspace(-9.0, 9.0, 1441)
_GH_WEIGHTS = np.exp(-0.5 * _GH_NODES**2)
_GH_WEIGHTS = _GH_WEIGHTS / _GH_WEIGHTS.sum()


def norm_pdf(x):
    return np.exp(-0.5 * np.square(x)) / SQRT_2PI


# --- markets and preferences --------------------------------------------------


@dataclass(frozen=True)
class BlackScholesMarket:
    S0: float
    mu: float
    sigma: float

    def __post_init__(self):
        GBMParams(self.S0, self.mu, self.sigma)

    @property
    def market_price_of_risk(self) -> float:
        return self.mu / self.sigma

    def c_S(self, S):
        return self.sigma**2 * np.square(S)

    def simulate(self, grid: TimeGrid, n_paths: int, seed: int, measure: str = "P", **kw) -> PathSet:
        """Paths under ``P`` or under the minimal-entropy measure ``Q``."""
        mkt = self if measure == "P" else entropy_measure_shift(self).apply(self)
        return simulate_gbm(mkt.S0, mkt.mu, mkt.sigma, grid, n_paths, seed, measure_tag=measure, **kw)


@dataclass(frozen=True)
class BasisRiskMarket:
    """Traded asset ``S`` and a correlated non-traded asset ``Y``, both log-normal."""

    S0: float
    mu_S: float
    sigma_S: float
    Y0: float
    mu_Y: float
    sigma_Y: float
    rho: float

    def __post_init__(self):
        GBMParams(self.S0, self.mu_S, self.sigma_S)
        GBMParams(self.Y0, self.mu_Y, self.sigma_Y)
        if not -1.0 <= self.rho <= 1.0:
            raise ParameterError(f"correlation must lie in [-1, 1], got {self.rho}")

    @property
    def market_price_of_risk(self) -> float:
        return self.mu_S / self.sigma_S

    @property
    def traded(self) -> BlackScholesMarket:
        return BlackScholesMarket(self.S0, self.mu_S, self.sigma_S)

    def simulate(self, grid: TimeGrid, n_paths: int, seed: int, measure: str = "P", **kw) -> PathSet:
        mkt = self if measure == "P" else entropy_measure_shift(self).apply(self)
        return simulate_correlated_pair(
            (mkt.S0, mkt.mu_S, mkt.sigma_S),
            (mkt.Y0, mkt.mu_Y, mkt.sigma_Y),
            mkt.rho,
            grid,
            n_paths,
            seed,
            measure_tag=measure,
            **kw,
        )


@dataclass(frozen=True)
class ExponentialPreference:
    p: float
    x0: float = 0.0

    def __post_init__(self):
        if not self.p > 0.0:
            raise ParameterError(f"risk aversion must be positive, got {self.p}")

    def utility(self, x):
        return -np.exp(-self.p * np.asarray(x))

    def marginal_utility(self, x):
        return self.p * np.exp(-self.p * np.asarray(x))


def discounted_risk_aversion(p: float, r: float, T: float) -> float:
    """Risk aversion to use with discounted dynamics when cash earns rate ``r``."""
    return p * float(np.exp(r * T))


# --- claims -------------------------------------------------------------------

Greeks = Callable[[np.ndarray, np.ndarray, float], tuple[np.ndarray, np.ndarray, np.ndarray]]


@dataclass(frozen=True)
class ClaimSpec:
    """A European claim; greeks and payoff are per unit, ``n`` is the quantity sold.

    ``kind="custom"`` takes a vectorised ``payoff``. An optional ``greeks``
    callable ``(t, S, sigma) -> (delta, gamma, value)`` replaces the numerical
    quadrature used otherwise.
    """

    kind: str
    maturity: float
    strike: float | None = None
    underlying: str = "traded"
    n: float = 1.0
    payoff_fn: Callable[[np.ndarray], np.ndarray] | None = field(default=None, compare=False)
    greeks: Greeks | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in ("call", "put", "custom"):
            raise ParameterError(f"unknown claim kind {self.kind!r}")
        if self.underlying not in ("traded", "non-traded"):
            raise ParameterError(f"underlying must be 'traded' or 'non-traded', got {self.underlying!r}")
        if self.kind in ("call", "put") and not (self.strike is not None and self.strike > 0.0):
            raise ParameterError("calls and puts need a positive strike")
        if self.kind == "custom" and self.payoff_fn is None:
            raise ParameterError("custom claims need a payoff function")
        if not self.maturity > 0.0:
            raise ParameterError("maturity must be positive")

    def payoff(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "call":
            return np.maximum(x - self.strike, 0.0)
        if self.kind == "put":
            return np.maximum(self.strike - x, 0.0)
        return np.asarray(self.payoff_fn(x), dtype=float)

    def scaled(self, n: float) -> "ClaimSpec":
        return replace(self, n=n)


def power_claim(exponent: float, notional: float, maturity: float, S_ref: float) -> ClaimSpec:
    """Claim paying ``notional * S_ref * (S_T / S_ref) ** exponent`` with closed-form greeks."""
    a = float(exponent)

    def payoff(x):
        return notional * S_ref * (np.asarray(x) / S_ref) ** a

    def greeks(t, S, sigma):
        tau = np.maximum(maturity - np.asarray(t, dtype=float), 0.0)
        V = payoff(S) * np.exp(0.5 * a * (a - 1.0) * sigma**2 * tau)
        return a * V / S, a * (a - 1.0) * V / np.square(S), V

    return ClaimSpec("custom", maturity, underlying="traded", payoff_fn=payoff, greeks=greeks)


def _lognormal_greeks(payoff, x, drift_tau, vol_sqrt_tau):
    """Value, dV/dx and d2V/dx2 of E[payoff(x exp(m - v^2/2 + v Z))].

    Derivatives use likelihood-ratio weights in Z, so kinked payoffs keep
    their gamma. Integration is a fine trapezoid rule in Z.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(vol_sqrt_tau, dtype=float)[..., None]
    grow = np.exp(np.asarray(drift_tau)[..., None] - 0.5 * v * v + v * _GH_NODES)
    f = payoff(x[..., None] * grow) * _GH_WEIGHTS
    value = f.sum(axis=-1)
    d1 = np.sum(f * _GH_NODES, axis=-1) / v[..., 0]
    d2 = np.sum(f * (_GH_NODES**2 - 1.0), axis=-1) / v[..., 0] ** 2
    return value, d1 / x, (d2 - d1) / (x * x)


def _black(kind, F, K, vol_sqrt_tau):
    """Undiscounted Black value and dV/dF for a call or put on forward ``F``."""
    d1 = (np.log(F / K) + 0.5 * vol_sqrt_tau**2) / vol_sqrt_tau
    d2 = d1 - vol_sqrt_tau
    if kind == "call":
        return F * ndtr(d1) - K * ndtr(d2), ndtr(d1), d1
    return K * ndtr(-d2) - F * ndtr(-d1), ndtr(d1) - 1.0, d1


# --- operations -----------------------------------------------------------------


def bs_pure_investment(market: BlackScholesMarket, pref: ExponentialPreference, t, S):
    """Frictionless optimal share holding ``mu / (p sigma^2 S)``."""
    S = np.asarray(S, dtype=float)
    if np.any(S <= 0.0):
        raise ParameterError("prices must be positive")
    return market.mu / (pref.p * market.sigma**2 * S) + 0.0 * np.asarray(t, dtype=float)


def bs_delta_gamma(claim: ClaimSpec, t, S, sigma: float):
    """Black-Scholes ``(delta, gamma, value)`` per unit of the claim, zero rate.

    At or after maturity the payoff is returned with intrinsic delta and zero gamma.
    """
    t = np.asarray(t, dtype=float)
    S = np.asarray(S, dtype=float)
    if np.any(S <= 0.0):
        raise ParameterError("prices must be positive")
    t, S = np.broadcast_arrays(t, S)
    tau = claim.maturity - t
    live = tau > 0.0
    delta = np.zeros(S.shape)
    gamma = np.zeros(S.shape)
    value = np.array(claim.payoff(S), dtype=float)

    if claim.greeks is not None:
        d, g, v = claim.greeks(t[live], S[live], sigma)
        delta[live], gamma[live], value[live] = d, g, v
    elif claim.kind in ("call", "put"):
        s, vt = S[live], sigma * np.sqrt(tau[live])
        v, d, d1 = _black(claim.kind, s, claim.strike, vt)
        value[live], delta[live] = v, d
        gamma[live] = norm_pdf(d1) / (s * vt)
    else:
        s, vt = S[live], sigma * np.sqrt(tau[live])
        value[live], delta[live], gamma[live] = _lognormal_greeks(claim.payoff, s, 0.0, vt)

    dead = ~live
    if np.any(dead):
        if claim.kind == "call":
            delta[dead] = (S[dead] > claim.strike).astype(float)
        elif claim.kind == "put":
            delta[dead] = -(S[dead] < claim.strike).astype(float)
        else:
            h = FD_BUMP * S[dead]
            delta[dead] = (claim.payoff(S[dead] + h) - claim.payoff(S[dead] - h)) / (2.0 * h)
    return delta, gamma, value


@dataclass(frozen=True, eq=False)
class StrategyDecomposition:
    """``d(strategy) = gamma dS + a dt`` along each path; ``cash_gamma = gamma S^2``."""

    grid: TimeGrid
    gamma: np.ndarray
    a: np.ndarray
    cash_gamma: np.ndarray
    undefined: np.ndarray

    @property
    def any_undefined(self) -> bool:
        return bool(self.undefined.any())


def decompose_strategy(
    strategy,
    pathset: PathSet,
    c_S,
    *,
    factor: str = "S",
    window: int | None = None,
) -> StrategyDecomposition:
    """Split a strategy into its price sensitivity and residual drift.

    ``strategy`` is either a function ``f(t, S)`` of time and price (Itô's formula
    with central differences), or a path matrix on the grid of ``pathset``
    (rolling-window regression of strategy increments on price increments).
    """
    from .sde_core import _window_sums

    S = pathset[factor]
    grid = pathset.grid
    c_S = np.broadcast_to(np.asarray(getattr(c_S, "c", c_S), dtype=float), S.shape)
    undefined = c_S <= 0.0
    t = np.broadcast_to(grid.points, S.shape)

    if callable(strategy):
        h = FD_BUMP * S
        up, mid, dn = strategy(t, S + h), strategy(t, S), strategy(t, S - h)
        gamma = (up - dn) / (2.0 * h)
        f_SS = (up - 2.0 * mid + dn) / (h * h)
        dt = 1e-6 * max(grid.T - grid.t0, 1e-12)
        lo = np.maximum(t - dt, grid.t0)
        hi = np.minimum(t + dt, grid.T)
        f_t = (strategy(hi, S) - strategy(lo, S)) / (hi - lo)
        a = f_t + 0.5 * f_SS * c_S
    else:
        X = np.asarray(strategy, dtype=float)
        if X.shape != S.shape:
            raise GridMismatchError(f"strategy shape {X.shape} does not match path shape {S.shape}")
        if window is None:
            window = max(2, int(round(0.01 * grid.n_steps)))
        if not 1 <= window <= grid.n_steps:
            raise ParameterError(f"window must lie in [1, {grid.n_steps}], got {window}")
        dX, dS = np.diff(X, axis=1), np.diff(S, axis=1)
        sxs = _window_sums(dX * dS, window)
        sss = _window_sums(dS * dS, window)
        undefined = undefined | (sss <= 0.0)
        with np.errstate(invalid="ignore", divide="ignore"):
            gamma = sxs / sss
            a = (_window_sums(dX, window) - gamma * _window_sums(dS, window)) / _window_sums(grid.dt, window)

    gamma = np.where(undefined, np.nan, gamma)
    a = np.where(undefined, np.nan, a)
    return StrategyDecomposition(grid, gamma, a, gamma * S * S, undefined)


def combined_target(phi, delta_H, n: float = 1.0):
    """Frictionless holding with ``n`` claims sold: ``phi + n * delta_H``."""
    phi = np.asarray(phi, dtype=float)
    delta_H = np.asarray(delta_H, dtype=float)
    if phi.shape != delta_H.shape:
        raise GridMismatchError(f"shape mismatch {phi.shape} vs {delta_H.shape}")
    return phi + n * delta_H


@dataclass(frozen=True)
class MeasureShift:
    """Drift rates under the minimal-entropy martingale measure."""

    drifts: dict
    market_price_of_risk: float

    def apply(self, market):
        if isinstance(market, BlackScholesMarket):
            return replace(market, mu=self.drifts["S"])
        if isinstance(market, BasisRiskMarket):
            return replace(market, mu_S=self.drifts["S"], mu_Y=self.drifts["Y"])
        raise UnsupportedModelError(type(market).__name__)


def entropy_measure_shift(market) -> MeasureShift:
    """Girsanov shift removing the traded asset's risk premium.

    Only the traded Brownian motion is shifted; the orthogonal component of the
    non-traded driver keeps its ``P`` drift.
    """
    if isinstance(market, BlackScholesMarket):
        return MeasureShift({"S": 0.0}, market.market_price_of_risk)
    if isinstance(market, BasisRiskMarket):
        lam = market.market_price_of_risk
        return MeasureShift({"S": 0.0, "Y": market.mu_Y - market.rho * market.sigma_Y * lam}, lam)
    raise UnsupportedModelError(f"no pricing measure for {type(market).__name__}")


def bs_density(market: BlackScholesMarket, pathset: PathSet) -> np.ndarray:
    """``dQ/dP`` on ``F_t`` along each path: ``exp(-lam W_t - lam^2 t / 2)``."""
    lam = market.market_price_of_risk
    t = pathset.grid.points - pathset.grid.t0
    return np.exp(-lam * pathset["W"] - 0.5 * lam * lam * t)


def _q_drift_Y(market: BasisRiskMarket) -> float:
    return entropy_measure_shift(market).drifts["Y"]


def basis_claim_value_hedge(market: BasisRiskMarket, claim: ClaimSpec, t, S, Y):
    """Q-value ``V`` of a claim on ``Y`` and its mean-variance hedge ``xi`` in ``S``."""
    if claim.underlying != "non-traded":
        raise ParameterError("basis-risk hedging needs a claim on the non-traded asset")
    t, S, Y = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (t, S, Y)))
    m = _q_drift_Y(market)
    tau = np.maximum(claim.maturity - t, 0.0)
    live = tau > 0.0
    V = np.array(claim.payoff(Y), dtype=float)
    dVdY = np.zeros(Y.shape)
    if np.any(live):
        y, tl = Y[live], tau[live]
        vt = market.sigma_Y * np.sqrt(tl)
        grow = np.exp(m * tl)
        if claim.kind in ("call", "put"):
            v, dv, _ = _black(claim.kind, y * grow, claim.strike, vt)
            V[live], dVdY[live] = v, dv * grow
        else:
            V[live], dVdY[live], _ = _lognormal_greeks(claim.payoff, y, m * tl, vt)
    dead = ~live
    if np.any(dead):
        h = FD_BUMP * Y[dead]
        dVdY[dead] = (claim.payoff(Y[dead] + h) - claim.payoff(Y[dead] - h)) / (2.0 * h)
    xi = market.rho * market.sigma_Y * Y * dVdY / (market.sigma_S * S)
    return V, xi


def basis_hedge_sensitivities(market: BasisRiskMarket, claim: ClaimSpec, t, S, Y):
    """Central-difference ``(dxi/dS, dxi/dY)``, relative bump 1e-4."""
    hs, hy = FD_BUMP * np.asarray(S), FD_BUMP * np.asarray(Y)
    xs = (basis_claim_value_hedge(market, claim, t, S + hs, Y)[1] - basis_claim_value_hedge(market, claim, t, S - hs, Y)[1]) / (2 * hs)
    xy = (basis_claim_value_hedge(market, claim, t, S, Y + hy)[1] - basis_claim_value_hedge(market, claim, t, S, Y - hy)[1]) / (2 * hy)
    return xs, xy


def xi_variation_ratio(market: BasisRiskMarket, claim: ClaimSpec, t, S, Y):
    """``d<xi>/d<S>`` from the hedge's price sensitivities."""
    xs, xy = basis_hedge_sensitivities(market, claim, t, S, Y)
    S, Y = np.asarray(S), np.asarray(Y)
    cS = market.sigma_S**2 * S * S
    cY = market.sigma_Y**2 * Y * Y
    cSY = market.rho * market.sigma_S * market.sigma_Y * S * Y
    return (xs * xs * cS + xy * xy * cY + 2.0 * xs * xy * cSY) / cS


def phi_xi_covariation_ratio(market: BasisRiskMarket, pref: ExponentialPreference, claim: ClaimSpec, t, S, Y):
    """``d<phi, xi>/d<phi>`` for the pure-investment holding ``phi(S)``."""
    if market.mu_S == 0.0:
        raise ParameterError("the pure-investment strategy is identically zero when mu_S = 0")
    xs, xy = basis_hedge_sensitivities(market, claim, t, S, Y)
    S, Y = np.asarray(S), np.asarray(Y)
    phi_S = -market.mu_S / (pref.p * market.sigma_S**2 * S * S)
    cS = market.sigma_S**2 * S * S
    cSY = market.rho * market.sigma_S * market.sigma_Y * S * Y
    return (xs * cS + xy * cSY) / (phi_S * cS)


def claim_q_moments(market: BasisRiskMarket, claim: ClaimSpec) -> tuple[float, float]:
    """``(E_Q[H], Var_Q[H])`` at time zero for a claim on ``Y``."""
    m = _q_drift_Y(market)
    T = claim.maturity
    mean_log = np.log(market.Y0) + (m - 0.5 * market.sigma_Y**2) * T
    s = market.sigma_Y * np.sqrt(T)
    if claim.kind in ("call", "put"):
        K = claim.strike

        def partial(n, above):
            # E[Y^n 1{Y > K}] (or 1{Y < K}) for log-normal Y
            z = (mean_log + n * s * s - np.log(K)) / s
            return np.exp(n * mean_log + 0.5 * n * n * s * s) * ndtr(z if above else -z)

        above = claim.kind == "call"
        sign = 1.0 if above else -1.0
        m1 = sign * (partial(1, above) - K * partial(0, above))
        m2 = partial(2, above) - 2 * K * partial(1, above) + K * K * partial(0, above)
    else:
        x = np.exp(mean_log + s * _GH_NODES)
        h = claim.payoff(x)
        m1 = float(np.sum(h * _GH_WEIGHTS))
        m2 = float(np.sum(h * h * _GH_WEIGHTS))
    return float(m1), float(m2 - m1 * m1)


def basis_hedge_residual(market: BasisRiskMarket, claim: ClaimSpec, pathset: PathSet) -> np.ndarray:
    """Per-path ``H - E_Q[H] - int xi dS`` with the hedge held from the left grid point."""
    grid = pathset.grid
    if abs(grid.T - claim.maturity) > 1e-12:
        raise GridMismatchError("the grid must end at the claim's maturity")
    S, Y = pathset["S"], pathset["Y"]
    V0 = float(basis_claim_value_hedge(market, claim, grid.t0, S[0, 0], Y[0, 0])[0])
    _, xi = basis_claim_value_hedge(market, claim, grid.points[:-1], S[:, :-1], Y[:, :-1])
    gains = np.sum(xi * np.diff(S, axis=1), axis=1)
    return claim.payoff(Y[:, -1]) - V0 - gains


def hedging_error_second_moment(
    market: BasisRiskMarket,
    claim: ClaimSpec,
    n_paths: int,
    seed: int,
    grid: TimeGrid | None = None,
    *,
    chunk_size: int = 2048,
    threads: int | None = None,
) -> Estimate:
    """Monte-Carlo ``E_Q[(H - E_Q[H] - int xi dS)^2]``; default grid has 2000 steps."""
    grid = grid or TimeGrid.uniform(claim.maturity, 2000)
    errs = []
    for a in range(0, n_paths, chunk_size):
        ps = market.simulate(grid, min(chunk_size, n_paths - a), seed, "Q", first_path=a, threads=threads)
        errs.append(basis_hedge_residual(market, claim, ps))
    e = np.concatenate(errs)
    return mean_estimate(e * e)
