"""Band-following trading under proportional costs and its welfare statistics.

The policy trades the minimal amount that keeps the share position inside the
band: after each price move the position is projected onto
``[center_k - h_{k-1}, center_k + h_{k-1}]``, buying at ``(1 + eps) S`` and selling
at ``(1 - eps) S``. Using the previous step's halfwidth keeps the rule predictable.
"""

from __future__ import annotations

import csv
import logging
import os
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp
from scipy.stats import linregress

from .asymptotics import BandSpec, bs_closed_form_loss, pure_investment_band
from .errors import GridMismatchError, ParameterError
from .frictionless import BlackScholesMarket, ExponentialPreference
from .sde_core import PathSet, TimeGrid, uniform_draws
from .stats import Estimate, influence_se, mean_estimate

log = logging.getLogger(__name__)

STARTS = ("center", "uniform")


@dataclass(frozen=True, eq=False)
class TradeLedger:
    """Per-path trades (shares, signed) with execution prices and costs on the grid."""

    grid: TimeGrid
    path_ids: np.ndarray
    S: np.ndarray
    center: np.ndarray
    halfwidth: np.ndarray
    positions: np.ndarray
    trades: np.ndarray
    eps: float

    @property
    def execution_price(self) -> np.ndarray:
        return self.S * (1.0 + self.eps * np.sign(self.trades))

    @property
    def costs(self) -> np.ndarray:
        return self.eps * self.S * np.abs(self.trades)

    @property
    def cumulative_cost(self) -> np.ndarray:
        return self.costs.sum(axis=1)

    def entries(self, path: int = 0) -> list[tuple[int, float, float, float]]:
        """``(step, trade, execution price, cost)`` for the executed trades of one path."""
        steps = np.flatnonzero(self.trades[path])
        px, cost = self.execution_price[path], self.costs[path]
        return [(int(k), float(self.trades[path, k]), float(px[k]), float(cost[k])) for k in steps]

    def to_csv(self, path: str | os.PathLike, max_paths: int | None = None) -> Path:
        path = Path(path)
        n = self.positions.shape[0] if max_paths is None else min(max_paths, self.positions.shape[0])
        center = np.broadcast_to(self.center, self.positions.shape)
        hw = np.broadcast_to(self.halfwidth, self.positions.shape)
        costs = self.costs
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["path_id", "step", "t", "S", "phi_center", "halfwidth", "position", "trade", "cost"])
            for i in range(n):
                for k, t in enumerate(self.grid.points):
                    w.writerow(
                        [int(self.path_ids[i]), k, repr(float(t))]
                        + [repr(float(v[i, k])) for v in (self.S, center, hw, self.positions, self.trades, costs)]
                    )
        return path


@dataclass(frozen=True, eq=False)
class PolicyRunResult:
    terminal_wealth: np.ndarray
    total_cost: np.ndarray
    setup_cost: np.ndarray
    gains: np.ndarray
    deviation_gains: np.ndarray
    ergodic: np.ndarray
    positions: np.ndarray | None = field(default=None, repr=False)
    deviation: np.ndarray | None = field(default=None, repr=False)
    effective_halfwidth: np.ndarray | None = field(default=None, repr=False)
    ledger: TradeLedger | None = field(default=None, repr=False)

    @property
    def running_cost(self) -> np.ndarray:
        return self.total_cost - self.setup_cost


def _initial_deviation(start, halfwidth0: np.ndarray, n_paths: int, seed: int, path_ids: np.ndarray) -> np.ndarray:
    if isinstance(start, str):
        if start == "center":
            return np.zeros(n_paths)
        if start == "uniform":
            u = np.array([uniform_draws(seed, int(i), 1)[0] for i in path_ids])
            return (2.0 * u - 1.0) * halfwidth0
        raise ParameterError(f"start must be one of {STARTS} or an array, got {start!r}")
    frac = np.broadcast_to(np.asarray(start, dtype=float), (n_paths,))
    if np.any(np.abs(frac) > 1.0):
        raise ParameterError("initial deviations are fractions of the halfwidth in [-1, 1]")
    return frac * halfwidth0


def run_band_policy(
    pathset: PathSet,
    band: BandSpec,
    eps: float,
    *,
    x0: float = 0.0,
    initial_shares=None,
    start="center",
    record: bool = True,
    factor: str = "S",
) -> PolicyRunResult:
    """Follow the band along every path and account wealth at mid prices minus costs.

    ``start`` places the position at ``t0`` relative to the band: ``"center"``,
    ``"uniform"`` (one uniform draw per path from its own substream) or an array
    of fractions of the halfwidth. Without ``initial_shares`` the investor already
    holds that position; otherwise the setup trade is charged and reported in
    ``setup_cost``. With ``record=False`` only per-path totals are kept.
    """
    if not eps >= 0.0:
        raise ParameterError(f"eps must be nonnegative, got {eps}")
    if band.grid != pathset.grid:
        raise GridMismatchError("band and paths must share the time grid")
    S = pathset[factor]
    n_paths, n_pts = S.shape
    center = np.broadcast_to(band.center, S.shape)
    hw = np.broadcast_to(band.halfwidth, S.shape)
    if not (np.all(np.isfinite(center)) and np.all(np.isfinite(hw))):
        raise ParameterError("band contains non-finite values")
    if not np.any(hw > 0.0):
        log.warning("zero-width band: the policy tracks the target continuously")

    pos = center[:, 0] + _initial_deviation(start, hw[:, 0], n_paths, pathset.seed, pathset.path_ids)
    held = pos.copy() if initial_shares is None else np.broadcast_to(np.asarray(initial_shares, dtype=float), (n_paths,))
    setup = eps * S[:, 0] * np.abs(pos - held)
    cost = setup.copy()
    # x0 is the initial wealth marked at mid, including any shares already held
    cash = x0 - pos * S[:, 0] - setup

    gains = np.zeros(n_paths)
    dev_gains = np.zeros(n_paths)
    erg = np.zeros(n_paths)
    if record:
        positions = np.empty(S.shape)
        trades = np.zeros(S.shape)
        positions[:, 0] = pos
        trades[:, 0] = pos - held
        h_eff = np.empty(S.shape)
        h_eff[:, 0] = hw[:, 0]

    for k in range(1, n_pts):
        dS = S[:, k] - S[:, k - 1]
        gains += pos * dS
        dev_gains += (pos - center[:, k - 1]) * dS
        h = hw[:, k - 1]
        new = np.clip(pos, center[:, k] - h, center[:, k] + h)
        trade = new - pos
        c = eps * S[:, k] * np.abs(trade)
        cost += c
        cash -= trade * S[:, k] + c
        pos = new
        with np.errstate(divide="ignore", invalid="ignore"):
            erg += np.where(h > 0.0, np.square((pos - center[:, k]) / h), 0.0)
        if record:
            positions[:, k] = pos
            trades[:, k] = trade
            h_eff[:, k] = h

    terminal = cash + pos * S[:, -1]
    mark = x0 + gains - cost
    if not np.allclose(terminal, mark, rtol=1e-10, atol=1e-10 * (1.0 + np.abs(x0))):
        raise ArithmeticError("self-financing identity violated")

    result_kw = {}
    if record:
        result_kw = dict(
            positions=positions,
            deviation=positions - center,
            effective_halfwidth=h_eff,
            ledger=TradeLedger(pathset.grid, pathset.path_ids, S, band.center, band.halfwidth, positions, trades, eps),
        )
    return PolicyRunResult(mark, cost, setup, gains, dev_gains, erg / (n_pts - 1), **result_kw)


def certainty_equivalent(wealth, p: float) -> Estimate:
    """``-(1/p) log mean exp(-p X)`` with a delta-method standard error."""
    x = np.asarray(wealth, dtype=float).ravel()
    if x.size == 0:
        raise ParameterError("cannot compute a certainty equivalent from an empty sample")
    if not np.all(np.isfinite(x)):
        raise ParameterError("wealth samples must be finite")
    if not p > 0.0:
        raise ParameterError("risk aversion must be positive")
    lse = logsumexp(-p * x) - np.log(x.size)
    # e^{-pX} / mean e^{-pX}, computed without overflow
    ratio = np.exp(-p * x - lse)
    return Estimate(float(-lse / p), influence_se(ratio) / p)


@dataclass(frozen=True)
class WelfareReport:
    eps: float
    CE_friction: Estimate
    CE_frictionless: Estimate
    loss: Estimate
    displacement_loss: Estimate
    direct_cost_loss: Estimate
    ergodic_ratio: Estimate
    closed_form_loss: float
    expected_cost: Estimate
    n_paths: int

    @property
    def split_ratio(self) -> float:
        return self.direct_cost_loss.value / self.displacement_loss.value


def _cv_loss(B: np.ndarray, G: np.ndarray, D: np.ndarray, p: float):
    """Loss ``(1/p) log E_Q[exp(-p D)]`` with ``G`` (mean zero under Q) as control variate.

    ``B`` is proportional to ``dQ/dP``. Returns the value and influence values.
    """
    w = B / B.mean()
    a = np.exp(-p * D)
    mg, ma = np.mean(w * G), np.mean(w * a)
    beta = np.mean(w * (a - ma) * (G - mg)) / np.mean(w * np.square(G - mg))
    num = ma - beta * mg
    psi = (w * (a - beta * G)) / num - w
    return float(np.log(num) / p), psi / p


def _welfare_pass(
    market: BlackScholesMarket,
    pref: ExponentialPreference,
    eps_list: Sequence[float],
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    *,
    start="uniform",
    chunk_size: int = 2000,
    threads: int | None = None,
):
    """One simulation shared by every eps (common random numbers); per-path totals."""
    p = pref.p
    k = market.mu / (p * market.sigma**2)
    cols = {e: {"G": [], "K": [], "erg": []} for e in eps_list}
    Xs = []
    for a in range(0, n_paths, chunk_size):
        ps = market.simulate(grid, min(chunk_size, n_paths - a), seed, "P", first_path=a, threads=threads)
        S = ps["S"]
        Xs.append(np.sum((k / S[:, :-1]) * np.diff(S, axis=1), axis=1))
        for e in eps_list:
            band = pure_investment_band(market, pref, e, grid, S)
            res = run_band_policy(ps, band, e, start=start, record=False)
            cols[e]["G"].append(res.deviation_gains)
            cols[e]["K"].append(res.running_cost)
            cols[e]["erg"].append(res.ergodic)
    X = np.concatenate(Xs)
    return X, {e: {key: np.concatenate(v) for key, v in d.items()} for e, d in cols.items()}


def _report(market, pref, e, X, d, T, n_paths) -> WelfareReport:
    p = pref.p
    B = np.exp(-p * (X - X.min()))
    G, K = d["G"], d["K"]
    ce0 = pref.x0 + market.mu**2 * T / (2.0 * p * market.sigma**2)
    closed = bs_closed_form_loss(market, pref, e, T)
    if e == 0.0:
        zero = Estimate(0.0, 0.0)
        return WelfareReport(e, Estimate(ce0), Estimate(ce0), zero, zero, zero, zero, 0.0, zero, n_paths)
    tot, psi_t = _cv_loss(B, G, G - K, p)
    disp, psi_d = _cv_loss(B, G, G, p)
    w = B / B.mean()
    return WelfareReport(
        eps=e,
        CE_friction=Estimate(ce0 - tot, influence_se(psi_t)),
        CE_frictionless=Estimate(ce0),
        loss=Estimate(tot, influence_se(psi_t)),
        displacement_loss=Estimate(disp, influence_se(psi_d)),
        direct_cost_loss=Estimate(tot - disp, influence_se(psi_t - psi_d)),
        ergodic_ratio=mean_estimate(d["erg"]),
        closed_form_loss=closed,
        expected_cost=Estimate(float(np.mean(w * K)), influence_se(w * (K - np.mean(w * K)))),
        n_paths=n_paths,
    )


def welfare_experiments(
    market: BlackScholesMarket,
    pref: ExponentialPreference,
    eps_list: Sequence[float],
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    *,
    start="uniform",
    chunk_size: int = 2000,
    threads: int | None = None,
) -> list[WelfareReport]:
    """:func:`welfare_experiment` for several costs on common random numbers."""
    if not isinstance(market, BlackScholesMarket):
        raise ParameterError("welfare experiments need a Black-Scholes market")
    eps_list = [float(e) for e in eps_list]
    if any(e < 0.0 for e in eps_list):
        raise ParameterError("eps must be nonnegative")
    X, cols = _welfare_pass(market, pref, eps_list, grid, n_paths, seed, start=start, chunk_size=chunk_size, threads=threads)
    T = grid.T - grid.t0
    return [_report(market, pref, e, X, cols[e], T, X.size) for e in eps_list]


def welfare_experiment(
    market: BlackScholesMarket,
    pref: ExponentialPreference,
    eps: float,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    **kw,
) -> WelfareReport:
    """Certainty-equivalent loss of the band policy against the frictionless optimum.

    The loss is ``(1/p) log E_Q[exp(-p (G - K))]`` where ``G`` are the gains from
    the deviation ``phi^eps - phi`` and ``K`` the running trading costs; this equals
    the difference of the two certainty equivalents exactly. The displacement loss
    drops ``K``; the direct cost loss is the remainder. The deviation gains have
    zero mean under Q and serve as control variate.
    """
    return welfare_experiments(market, pref, [eps], grid, n_paths, seed, **kw)[0]


@dataclass(frozen=True)
class ScalingResult:
    slope: float
    slope_se: float
    intercept: float
    reports: tuple

    def table(self) -> list[dict]:
        return [
            {
                "eps": r.eps,
                "loss": r.loss.value,
                "loss_se": r.loss.std_error,
                "closed_form": r.closed_form_loss,
                "used": bool(r.eps > 0.0 and r.loss.value > 0.0),
            }
            for r in self.reports
        ]


def scaling_study(
    market: BlackScholesMarket,
    pref: ExponentialPreference,
    eps_list: Sequence[float],
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    **kw,
) -> ScalingResult:
    """OLS slope of log loss on log eps, common random numbers across eps."""
    if len(eps_list) < 3:
        raise ParameterError("a scaling study needs at least 3 eps values")
    reports = welfare_experiments(market, pref, eps_list, grid, n_paths, seed, **kw)
    used = []
    for r in reports:
        if r.eps == 0.0:
            log.warning("eps = 0 row excluded from the scaling fit")
        elif r.loss.value <= 0.0:
            log.warning("nonpositive loss at eps = %g excluded from the scaling fit", r.eps)
        else:
            used.append(r)
    if len(used) < 2:
        raise ParameterError("fewer than 2 usable eps values for the scaling fit")
    fit = linregress(np.log([r.eps for r in used]), np.log([r.loss.value for r in used]))
    se = float(fit.stderr) if len(used) > 2 else float("nan")
    return ScalingResult(float(fit.slope), se, float(fit.intercept), tuple(reports))
