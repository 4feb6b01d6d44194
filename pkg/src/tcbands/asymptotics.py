"""Leading-order no-trade bands, welfare losses and price corrections.

Integrals over time use the left-point rule on the simulation grid. Inputs given
as "series" may be per-grid-point vectors or ``n_paths x (n_steps + 1)`` matrices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import BracketError, DegenerateMarketError, GridMismatchError, MeasureError, ParameterError
from .frictionless import (
    BasisRiskMarket,
    BlackScholesMarket,
    ClaimSpec,
    ExponentialPreference,
    basis_hedge_residual,
    bs_density,
    claim_q_moments,
    hedging_error_second_moment,
    xi_variation_ratio,
)
from .sde_core import PathSet, TimeGrid
from .stats import Estimate, influence_se, left_point_integral, mean_estimate

REGIMES = ("general", "complete", "marginal_investment", "marginal_option", "incomplete_martingale", "incomplete_smalln")
SEARCH_INTERVAL = (-10.0, 10.0)


def _abs43(x):
    # |x|^{4/3} without sign trouble at zero crossings
    return np.power(np.square(x), 2.0 / 3.0)


def _series(x, pathset: PathSet):
    x = np.asarray(getattr(x, "c", x), dtype=float)
    shape = (pathset.n_paths, pathset.grid.n_steps + 1)
    try:
        return np.broadcast_to(x, shape)
    except ValueError:
        raise GridMismatchError(f"series of shape {x.shape} does not fit paths of shape {shape}") from None


def _require_pricing_measure(pathset: PathSet):
    if pathset.measure_tag not in ("Q", "QH"):
        raise MeasureError(f"expectation needs paths under Q or QH, got {pathset.measure_tag!r}")


def _check_p_eps(p, eps):
    if not p > 0.0:
        raise ParameterError(f"risk aversion must be positive, got {p}")
    if not eps >= 0.0:
        raise ParameterError(f"eps must be nonnegative, got {eps}")


@dataclass(frozen=True, eq=False)
class BandSpec:
    """No-trade band ``[center - halfwidth, center + halfwidth]`` in shares."""

    grid: TimeGrid
    center: np.ndarray
    halfwidth: np.ndarray

    def __post_init__(self):
        center = np.asarray(self.center, dtype=float)
        hw = np.asarray(self.halfwidth, dtype=float)
        if center.shape[-1] != self.grid.n_steps + 1 or hw.shape[-1] != self.grid.n_steps + 1:
            raise GridMismatchError("band series must have one value per grid point")
        if np.any(hw < 0.0) or not np.all(np.isfinite(hw)):
            raise ParameterError("band halfwidth must be finite and nonnegative")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "halfwidth", hw)

    @property
    def lower(self):
        return self.center - self.halfwidth

    @property
    def upper(self):
        return self.center + self.halfwidth


@dataclass(frozen=True, eq=False)
class LossEstimate:
    value: float
    std_error: float
    measure_tag: str
    trace: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.std_error >= 0.0:
            raise ParameterError("standard error must be nonnegative")


@dataclass(frozen=True)
class PriceQuote:
    frictionless: float
    correction: float
    regime: str = "general"
    std_error: float = 0.0
    components: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ParameterError(f"unknown pricing regime {self.regime!r}")

    @property
    def total(self) -> float:
        return self.frictionless + self.correction


# --- bands -------------------------------------------------------------------


def band_halfwidth(p: float, eps: float, S, c_phi, c_S):
    """Halfwidth ``(3/(2p) * c_phi/c_S * eps S)^{1/3}`` in shares."""
    _check_p_eps(p, eps)
    S, c_phi, c_S = (np.asarray(v, dtype=float) for v in (S, c_phi, c_S))
    if np.any(c_S <= 0.0):
        raise DegenerateMarketError("the traded asset's local variance vanishes")
    if np.any(c_phi < 0.0):
        raise ParameterError("c_phi must be nonnegative")
    return np.cbrt(1.5 / p * (c_phi / c_S) * eps * S)


def band_halfwidth_with_claim(p: float, eps: float, S, c_phiH, c_S):
    """Same formula around the hedged target ``phi + n Delta^H``."""
    return band_halfwidth(p, eps, S, c_phiH, c_S)


def monetary_halfwidth_cash_gamma(p: float, eps: float, S, cash_gamma_total):
    """Monetary halfwidth ``(3/(2p))^{1/3} |cash gamma|^{2/3} eps^{1/3}``.

    ``S`` is accepted for signature symmetry with :func:`band_halfwidth`; the
    monetary band depends on the price only through the cash gamma.
    """
    _check_p_eps(p, eps)
    cg = np.asarray(cash_gamma_total, dtype=float)
    return np.cbrt(1.5 / p * eps) * np.cbrt(np.square(cg)) + 0.0 * np.asarray(S, dtype=float)


def pure_investment_band(market: BlackScholesMarket, pref: ExponentialPreference, eps: float, grid: TimeGrid, S) -> BandSpec:
    """Band around ``phi = mu / (p sigma^2 S)`` along given prices."""
    S = np.asarray(S, dtype=float)
    k = market.mu / (pref.p * market.sigma**2)
    c_S = market.c_S(S)
    c_phi = k * k * market.sigma**2 / np.square(S)
    return BandSpec(grid, k / S, band_halfwidth(pref.p, eps, S, c_phi, c_S))


def bs_closed_form_loss(market: BlackScholesMarket, pref: ExponentialPreference, eps: float, T: float) -> float:
    """Welfare loss for the pure investment problem in the Black-Scholes model."""
    k = market.mu / (pref.p * market.sigma**2)
    return 0.5 * pref.p * (1.5 * eps / pref.p) ** (2.0 / 3.0) * abs(k) ** (4.0 / 3.0) * market.sigma**2 * T


# --- losses and prices -------------------------------------------------------


def welfare_loss(p: float, band: BandSpec, c_S, pathset: PathSet) -> LossEstimate:
    """``(p/2) E_Q[int halfwidth^2 d<S>]`` from paths under the pricing measure."""
    _require_pricing_measure(pathset)
    if band.grid != pathset.grid:
        raise GridMismatchError("band and paths must share the time grid")
    integrand = np.square(_series(band.halfwidth, pathset)) * _series(c_S, pathset)
    per_path = 0.5 * p * left_point_integral(integrand, pathset.grid.dt)
    est = mean_estimate(per_path)
    return LossEstimate(est.value, est.std_error, pathset.measure_tag, 0.5 * p * integrand.mean(axis=0))


def indifference_price(p: float, loss_with: LossEstimate, loss_without: LossEstimate, pi0: float) -> PriceQuote:
    """Frictionless price plus the loss difference caused by the claim.

    Standard errors are combined as if independent, which is conservative when
    both losses come from the same paths.
    """
    if loss_with.measure_tag not in ("Q", "QH") or loss_without.measure_tag not in ("Q", "QH"):
        raise MeasureError("losses must be estimated under Q or QH")
    corr = loss_with.value - loss_without.value
    se = float(np.hypot(loss_with.std_error, loss_without.std_error))
    return PriceQuote(pi0, corr, "general", se, {"loss_with": loss_with.value, "loss_without": loss_without.value})


def _variation_weight(c_S, pathset: PathSet):
    """``d<S>/S^2`` rate along the paths."""
    return _series(c_S, pathset) / np.square(pathset["S"])


def complete_price_correction(p: float, eps: float, cash_gamma_phi, cash_gamma_H, c_S, pathset: PathSet) -> Estimate:
    """``(9p/32)^{1/3} eps^{2/3} E_Q int (|cg_phi + cg_H|^{4/3} - |cg_phi|^{4/3}) d<S>/S^2``.

    ``cash_gamma_H`` is the total cash gamma of the claims sold (quantity included).
    """
    _check_p_eps(p, eps)
    _require_pricing_measure(pathset)
    g_phi = _series(cash_gamma_phi, pathset)
    g_H = _series(cash_gamma_H, pathset)
    integrand = (_abs43(g_phi + g_H) - _abs43(g_phi)) * _variation_weight(c_S, pathset)
    scale = (9.0 * p / 32.0) ** (1.0 / 3.0) * eps ** (2.0 / 3.0)
    return mean_estimate(scale * left_point_integral(integrand, pathset.grid.dt))


def marginal_investment_price(
    p: float, n: float, eps: float, cash_gamma_H, c_S, pathset: PathSet, *, pi0: float = 0.0
) -> PriceQuote:
    """Per-claim price when the investor's own cash gamma is negligible.

    ``cash_gamma_H`` is per unit claim.
    """
    _check_p_eps(p, eps)
    _require_pricing_measure(pathset)
    if not n > 0.0:
        raise ParameterError("the number of claims must be positive")
    integrand = _abs43(_series(cash_gamma_H, pathset)) * _variation_weight(c_S, pathset)
    scale = (9.0 * p * n * eps * eps / 32.0) ** (1.0 / 3.0)
    est = mean_estimate(scale * left_point_integral(integrand, pathset.grid.dt))
    return PriceQuote(pi0, est.value, "marginal_investment", est.std_error)


def marginal_option_expansion(
    p: float, eps: float, n: float, cash_gamma_phi, cash_gamma_H, c_S, pathset: PathSet, *, pi0: float = 0.0
):
    """Small-``n`` expansion of the per-claim price and of the band.

    Returns ``(quote, band_factor)``. The quote's components hold the first-order
    (``4/3``) and second-order (``2/9``) terms; ``band_factor`` multiplies the
    pure-investment halfwidth.
    """
    _check_p_eps(p, eps)
    _require_pricing_measure(pathset)
    g_phi = _series(cash_gamma_phi, pathset)
    if np.any(g_phi == 0.0):
        raise ParameterError("the investor's cash gamma vanishes; use marginal_investment_price instead")
    ratio = _series(cash_gamma_H, pathset) / g_phi
    base = _abs43(g_phi) * _variation_weight(c_S, pathset)
    scale = (9.0 * p / 32.0) ** (1.0 / 3.0) * eps ** (2.0 / 3.0)
    dt = pathset.grid.dt
    first = scale * left_point_integral(base * (4.0 / 3.0) * ratio, dt)
    second = scale * left_point_integral(base * (2.0 / 9.0) * n * ratio * ratio, dt)
    est = mean_estimate(first + second)
    quote = PriceQuote(
        pi0,
        est.value,
        "marginal_option",
        est.std_error,
        {"first_order": float(first.mean()), "second_order": float(second.mean())},
    )
    return quote, 1.0 + (2.0 / 3.0) * n * ratio


def semistatic_objective(cash_gamma_H, cash_gamma_Hprime, c_S, pathset: PathSet):
    """The objective ``n' -> E_Q int |cg_H - n' cg_H'|^{4/3} d<S>/S^2`` as a callable."""
    _require_pricing_measure(pathset)
    g = _series(cash_gamma_H, pathset)
    g2 = _series(cash_gamma_Hprime, pathset)
    w = _variation_weight(c_S, pathset)[:, :-1] * pathset.grid.dt
    g, g2 = g[:, :-1], g2[:, :-1]
    n_paths = pathset.n_paths

    def objective(n_prime: float) -> float:
        return float(np.sum(_abs43(g - n_prime * g2) * w) / n_paths)

    return objective


def semistatic_gamma_hedge(
    cash_gamma_H, cash_gamma_Hprime, c_S, S, pathset: PathSet, interval=SEARCH_INTERVAL, *, xatol: float = 1e-12
):
    """Static quantity ``n'`` of a second claim minimising the future cash-gamma cost.

    The objective is convex in ``n'``; bounded Brent search on ``interval``,
    widened tenfold once if the minimiser sits on an edge.
    """
    if S is not None and np.shape(S) != pathset["S"].shape:
        raise GridMismatchError("prices do not match the path set")
    f = semistatic_objective(cash_gamma_H, cash_gamma_Hprime, c_S, pathset)
    lo, hi = map(float, interval)
    if not lo < hi:
        raise ParameterError("search interval must have lo < hi")
    for attempt in range(2):
        res = minimize_scalar(f, bounds=(lo, hi), method="bounded", options={"xatol": xatol, "maxiter": 500})
        edge = 1e-6 * (hi - lo)
        if res.x - lo > edge and hi - res.x > edge:
            return float(res.x), float(res.fun)
        mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
        lo, hi = mid - 10.0 * half, mid + 10.0 * half
    raise BracketError(f"minimiser not bracketed by the widened interval [{lo}, {hi}]")


# --- incomplete markets ------------------------------------------------------


def incomplete_martingale_price(
    p: float,
    n: float,
    eps: float,
    market: BasisRiskMarket,
    claim: ClaimSpec,
    n_paths: int,
    seed: int,
    grid: TimeGrid | None = None,
    *,
    threads: int | None = None,
) -> PriceQuote:
    """Per-claim price for a basis-risk claim when the traded asset has no drift.

    ``frictionless`` is ``E[H]`` plus the hedging-error premium; ``correction`` is
    the transaction-cost term. Both appear in ``components``.
    """
    _check_p_eps(p, eps)
    if market.mu_S != 0.0:
        raise ParameterError("needs mu_S = 0; use incomplete_smalln_corrections when the asset has a risk premium")
    grid = grid or TimeGrid.uniform(claim.maturity, 2000)
    mean_H, var_H = claim_q_moments(market, claim)
    err = hedging_error_second_moment(market, claim, n_paths, seed, grid, threads=threads)
    ps = market.simulate(grid, n_paths, seed, "Q", threads=threads)
    S, Y = ps["S"], ps["Y"]
    q = xi_variation_ratio(market, claim, grid.points, S, Y)
    integrand = np.power(np.abs(q) * S**4, 2.0 / 3.0) * market.sigma_S**2
    scale = (9.0 * p * n * eps * eps / 32.0) ** (1.0 / 3.0)
    cost = mean_estimate(scale * left_point_integral(integrand, grid.dt))
    hedge_term = 0.5 * p * n * err.value
    return PriceQuote(
        mean_H + hedge_term,
        cost.value,
        "incomplete_martingale",
        float(np.hypot(cost.std_error, 0.5 * p * n * err.std_error)),
        {
            "expected_payoff": mean_H,
            "claim_variance": var_H,
            "hedging_error": err.value,
            "hedging_error_se": err.std_error,
            "hedging_term": hedge_term,
            "cost_term": cost.value,
            "cost_term_se": cost.std_error,
        },
    )


@dataclass(frozen=True, eq=False)
class SmallNCorrections:
    band_factor: np.ndarray
    covariation_term: Estimate
    covariance_term: Estimate

    @property
    def price_impact(self) -> float:
        return self.covariation_term.value + self.covariance_term.value


def incomplete_smalln_corrections(
    p: float,
    n: float,
    band: BandSpec,
    c_S,
    pathset: PathSet,
    *,
    phi_xi_ratio,
    hedge_residual,
) -> SmallNCorrections:
    """First-order effect of selling ``n`` basis-risk claims on band and price.

    ``phi_xi_ratio`` is ``d<phi, xi>/d<phi>`` along the paths and
    ``hedge_residual`` is ``H - E_Q[H] - int xi dS`` per path. Paths are under Q.
    """
    _require_pricing_measure(pathset)
    if np.any(band.halfwidth <= 0.0):
        raise DegenerateMarketError("the band must have positive width (c_phi > 0 and eps > 0)")
    ratio = _series(phi_xi_ratio, pathset)
    R = np.asarray(hedge_residual, dtype=float)
    if R.shape != (pathset.n_paths,):
        raise GridMismatchError("need one hedge residual per path")
    hc = np.square(_series(band.halfwidth, pathset)) * _series(c_S, pathset)
    dt = pathset.grid.dt
    cov_path = 0.5 * p * left_point_integral((4.0 * n / 3.0) * hc * ratio, dt)
    L = left_point_integral(hc, dt)
    # centre R so the estimate is a covariance, not a raw product moment
    x = 0.5 * p * n * p * (R - R.mean()) * L
    return SmallNCorrections(1.0 + (2.0 * n / 3.0) * ratio, mean_estimate(cov_path), mean_estimate(x))


def density_expansion_covariance(
    p: float, n: float, market: BasisRiskMarket, claim: ClaimSpec, band_fn, pathset: PathSet
) -> Estimate:
    """Oracle for the covariance term from paths under ``P``.

    Weights every path by ``dQ/dP (1 + n p R)`` and subtracts the unweighted-``Q``
    loss; ``band_fn(S)`` returns the halfwidth along prices.
    """
    if pathset.measure_tag != "P":
        raise MeasureError("the density-expansion oracle reweights paths simulated under P")
    Z = bs_density(market.traded, pathset)[:, -1]
    R_raw = basis_hedge_residual(market, claim, pathset)
    S = pathset["S"]
    L = left_point_integral(np.square(band_fn(S)) * market.sigma_S**2 * S * S, pathset.grid.dt)
    R = R_raw - np.mean(Z * R_raw) / np.mean(Z)
    a = Z * R * L
    b = Z
    ma, mb = a.mean(), b.mean()
    value = 0.5 * p * n * p * ma / mb
    psi = (a - value / (0.5 * p * n * p) * b) / mb
    return Estimate(value, 0.5 * p * n * p * influence_se(psi))

