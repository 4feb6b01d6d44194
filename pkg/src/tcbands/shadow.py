"""Cubic shadow price along band-policy paths and numerical checks of its optimality conditions.

The shadow price is ``S + f(dphi)`` with ``f(x) = alpha x^3 - gamma x``; it equals the
bid at the upper band edge, the ask at the lower edge, and pastes smoothly there.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import linregress

from .asymptotics import pure_investment_band
from .band_simulator import PolicyRunResult, run_band_policy
from .errors import DegenerateMarketError, GridMismatchError, ParameterError, UnsupportedModelError
from .frictionless import BlackScholesMarket, ExponentialPreference, bs_density
from .sde_core import PathSet, TimeGrid
from .stats import Estimate, mean_estimate

log = logging.getLogger(__name__)

N_BUCKETS = 10
SLACK_SIGMAS = 3.0


@dataclass(frozen=True, eq=False)
class ShadowCoefficients:
    alpha: np.ndarray
    gamma: np.ndarray

    @property
    def halfwidth(self) -> np.ndarray:
        return np.sqrt(self.gamma / (3.0 * self.alpha))

    def f(self, dphi):
        return self.alpha * dphi**3 - self.gamma * dphi

    def f_prime(self, dphi):
        return 3.0 * self.alpha * np.square(dphi) - self.gamma


def shadow_coefficients(p: float, eps: float, S, c_S, c_phi) -> ShadowCoefficients:
    """``alpha = (p/3) c_S/c_phi`` and ``gamma = 3 alpha^{1/3} (eps S / 2)^{2/3}``."""
    if not p > 0.0:
        raise ParameterError("risk aversion must be positive")
    if not eps >= 0.0:
        raise ParameterError("eps must be nonnegative")
    S, c_S, c_phi = (np.asarray(v, dtype=float) for v in (S, c_S, c_phi))
    if np.any(c_phi <= 0.0):
        raise DegenerateMarketError("c_phi vanishes: the target does not move and no cubic exists")
    alpha = (p / 3.0) * c_S / c_phi
    gamma = np.cbrt(np.square(0.5 * eps * S)) * 3.0 * np.cbrt(alpha)
    return ShadowCoefficients(alpha, gamma)


@dataclass(frozen=True, eq=False)
class ShadowPath:
    delta_S: np.ndarray
    S_shadow: np.ndarray
    containment_fraction: float
    sell_match_error: float
    buy_match_error: float
    flagged: np.ndarray
    slack: np.ndarray | None = field(default=None, repr=False)
    Z_proxy: np.ndarray | None = field(default=None, repr=False)


def _deviation_gains_path(dev: np.ndarray, S: np.ndarray) -> np.ndarray:
    G = np.zeros(S.shape)
    np.cumsum(dev[:, :-1] * np.diff(S, axis=1), axis=1, out=G[:, 1:])
    return G


def shadow_path(
    policy: PolicyRunResult,
    coeffs: ShadowCoefficients,
    eps: float,
    S,
    *,
    c_phi=None,
    grid: TimeGrid | None = None,
    Z=None,
    p: float | None = None,
) -> ShadowPath:
    """Shadow price along recorded policy paths with containment and matching statistics.

    A step is flagged when ``|delta_S| > eps S`` and the deviation exceeds the band
    by more than ``3 sqrt(c_phi dt)``; this needs ``c_phi`` and ``grid``. With the
    density ``Z`` and ``p`` the proxy ``Z (1 - p int dphi dS)`` is attached.
    """
    if policy.deviation is None:
        raise ParameterError("the policy run must be recorded")
    dev = policy.deviation
    S = np.asarray(S, dtype=float)
    if S.shape != dev.shape:
        raise GridMismatchError("prices and deviations must have the same shape")
    dS = coeffs.f(dev)
    bound = eps * S
    inside = np.abs(dS) <= bound * (1.0 + 1e-12)
    frac = float(inside.mean())

    trades = policy.ledger.trades if policy.ledger is not None else np.diff(policy.positions, axis=1, prepend=np.nan)
    trades = trades.copy()
    trades[:, 0] = 0.0  # setup trades are not band trades
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.where(bound > 0.0, dS / bound, 0.0)
    sells, buys = trades < 0.0, trades > 0.0
    sell_err = float(np.max(np.abs(rel[sells] + 1.0))) if sells.any() else 0.0
    buy_err = float(np.max(np.abs(rel[buys] - 1.0))) if buys.any() else 0.0

    slack = None
    flagged = np.empty((0, 2), dtype=np.int64)
    if c_phi is not None and grid is not None:
        dt = np.append(grid.dt, grid.dt[-1])
        slack = SLACK_SIGMAS * np.sqrt(np.broadcast_to(c_phi, S.shape) * dt)
        over = np.abs(dev) > coeffs.halfwidth + slack
        flagged = np.argwhere(~inside & over)
        if flagged.size:
            log.warning("%d steps leave the spread beyond the one-step slack", len(flagged))

    Zp = None
    if Z is not None and p is not None:
        Zp = np.asarray(Z) * (1.0 - p * _deviation_gains_path(dev, S))
    return ShadowPath(dS, S + dS, frac, sell_err, buy_err, flagged, slack, Zp)


# --- drift estimation ---------------------------------------------------------


@dataclass(frozen=True)
class DriftDiagnostics:
    """Per-bucket drift estimates and their regression on the predicted drift."""

    edges: np.ndarray
    counts: np.ndarray
    predicted: np.ndarray
    estimated: np.ndarray
    std_error: np.ndarray
    coefficient: Estimate
    intercept: float
    sup_residual: Estimate

    def to_csv(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bucket", "lo", "hi", "count", "predicted_drift", "estimated_drift", "se"])
            for i in range(self.counts.size):
                w.writerow(
                    [i, repr(float(self.edges[i])), repr(float(self.edges[i + 1])), int(self.counts[i])]
                    + [repr(float(v[i])) for v in (self.predicted, self.estimated, self.std_error)]
                )
        return path


class DriftAccumulator:
    """Streams samples ``(u, y, x)``: bucket variable ``u`` in ``[-1, 1]``, drift sample ``y``,
    regressor ``x``. The predicted drift is ``scale * x``."""

    def __init__(self, scale: float, n_buckets: int = N_BUCKETS, min_count: int = 100):
        self.scale = float(scale)
        self.n = n_buckets
        self.min_count = min_count
        self.edges = np.linspace(-1.0, 1.0, n_buckets + 1)
        self.cnt = np.zeros(n_buckets)
        self.sy = np.zeros(n_buckets)
        self.syy = np.zeros(n_buckets)
        self.sx = np.zeros(n_buckets)

    def add(self, u, y, x):
        u, y, x = (np.asarray(v, dtype=float).ravel() for v in (u, y, x))
        b = np.clip(((u + 1.0) * 0.5 * self.n).astype(np.int64), 0, self.n - 1)
        self.cnt += np.bincount(b, minlength=self.n)
        self.sy += np.bincount(b, y, self.n)
        self.syy += np.bincount(b, y * y, self.n)
        self.sx += np.bincount(b, x, self.n)

    def result(self) -> DriftDiagnostics:
        ok = self.cnt >= self.min_count
        if not ok.all():
            log.warning("%d drift buckets dropped for low occupancy", int((~ok).sum()))
        cnt = np.where(ok, self.cnt, np.nan)
        my = self.sy / cnt
        mx = self.sx / cnt
        var = np.maximum(self.syy / cnt - my * my, 0.0)
        se = np.sqrt(var / np.maximum(cnt - 1.0, 1.0))
        pred = self.scale * mx
        resid = np.abs(my - pred)

        coef, intercept = Estimate(float("nan")), float("nan")
        use = ok & (se > 0.0)
        if use.sum() >= 2 and np.ptp(mx[use]) > 0.0:
            A = np.column_stack([np.ones(use.sum()), mx[use]])
            W = 1.0 / np.square(se[use])
            cov = np.linalg.inv(A.T @ (A * W[:, None]))
            beta = cov @ (A.T @ (W * my[use]))
            coef, intercept = Estimate(float(beta[1]), float(np.sqrt(cov[1, 1]))), float(beta[0])
        if ok.any():
            i = int(np.nanargmax(np.where(ok, resid, -np.inf)))
            sup = Estimate(float(resid[i]), float(se[i]))
        else:
            sup = Estimate(float("nan"))
        return DriftDiagnostics(self.edges, self.cnt, pred, my, se, coef, intercept, sup)


def _state_buckets(dev: np.ndarray, halfwidth: np.ndarray) -> np.ndarray:
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(halfwidth > 0.0, dev / halfwidth, 0.0)


def add_drift_samples(acc: DriftAccumulator, delta_S, dev, halfwidth, c_S, grid: TimeGrid):
    """Increments of the shadow offset against ``dphi c_S``, bucketed by the state before the step."""
    dt = grid.dt
    y = np.diff(delta_S, axis=1) / dt
    x = dev[:, :-1] * np.broadcast_to(c_S, dev.shape)[:, :-1]
    u = _state_buckets(dev[:, :-1], np.broadcast_to(halfwidth, dev.shape)[:, :-1])
    acc.add(u, y, x)


def drift_condition_residual(shadow: ShadowPath, p: float, dphi, c_S, halfwidth, grid: TimeGrid, **kw) -> DriftDiagnostics:
    """Bucketed drift of ``delta_S`` against the prediction ``p dphi c_S``."""
    acc = DriftAccumulator(p, **kw)
    add_drift_samples(acc, shadow.delta_S, np.asarray(dphi), halfwidth, c_S, grid)
    return acc.result()


# --- optimality conditions ----------------------------------------------------


@dataclass(frozen=True)
class OptimalityChecks:
    density_mean_error: Estimate
    terminal_residual: Estimate
    terminal_residual_abs: Estimate
    frictional_residual_abs: Estimate
    product_drift: DriftDiagnostics
    frictionless_martingale: Estimate


class _OptimalityAccumulator:
    def __init__(self, p: float):
        self.p = p
        self.zeT, self.res, self.fres, self.zs = [], [], [], []
        self.drift = DriftAccumulator(0.0)

    def add(self, market: BlackScholesMarket, policy: PolicyRunResult, shadow: ShadowPath, pathset: PathSet, center, halfwidth):
        p = self.p
        S = pathset["S"]
        dev = policy.deviation
        Z = bs_density(market, pathset)
        Ze = Z * (1.0 - p * _deviation_gains_path(dev, S))
        X = np.sum(center[:, :-1] * np.diff(S, axis=1), axis=1)
        Xe = np.sum(policy.positions[:, :-1] * np.diff(shadow.S_shadow, axis=1), axis=1)
        self.zeT.append(Ze[:, -1])
        self.res.append(Ze[:, -1] - Z[:, -1] * np.exp(-p * (Xe - X)))
        # same with mid-marked wealth net of running costs (no shadow offsets at 0 and T)
        self.fres.append(Ze[:, -1] - Z[:, -1] * np.exp(-p * (policy.deviation_gains - policy.running_cost)))
        self.zs.append(Z[:, -1] * (S[:, -1] - S[:, 0]))
        # drift of Z^eps S^eps: Z^eps S contributes -p Z dphi c_S, the rest comes from Z^eps delta_S
        dt = pathset.grid.dt
        c_S = market.c_S(S)
        y = np.diff(Ze * shadow.delta_S, axis=1) / dt - p * (Z * dev * c_S)[:, :-1]
        u = _state_buckets(dev[:, :-1], np.broadcast_to(halfwidth, dev.shape)[:, :-1])
        self.drift.add(u, y, np.zeros_like(y))

    def result(self) -> OptimalityChecks:
        zeT = np.concatenate(self.zeT)
        res = np.concatenate(self.res)
        return OptimalityChecks(
            mean_estimate(zeT - 1.0),
            mean_estimate(res),
            mean_estimate(np.abs(res)),
            mean_estimate(np.abs(np.concatenate(self.fres))),
            self.drift.result(),
            mean_estimate(np.concatenate(self.zs)),
        )


def optimality_condition_checks(
    shadow: ShadowPath, policy: PolicyRunResult, p: float, x0: float, pathset: PathSet, market=None, band=None
) -> OptimalityChecks:
    """Approximate martingale, terminal and drift conditions of the shadow market.

    ``x0`` cancels in the terminal residual for exponential utility and is kept
    for interface symmetry.
    """
    if not isinstance(market, BlackScholesMarket):
        raise UnsupportedModelError("optimality checks need a Black-Scholes market (closed-form density)")
    if pathset.measure_tag != "P":
        raise ParameterError("optimality checks run on paths under P")
    if band is None:
        raise ParameterError("the band used by the policy is required")
    acc = _OptimalityAccumulator(p)
    acc.add(market, policy, shadow, pathset, np.broadcast_to(band.center, pathset["S"].shape), band.halfwidth)
    return acc.result()


@dataclass(frozen=True)
class ShadowReport:
    eps: float
    n_paths: int
    n_steps: int
    alpha0: float
    gamma0: float
    containment_fraction: float
    sell_match_error: float
    buy_match_error: float
    n_flagged: int
    drift: DriftDiagnostics
    checks: OptimalityChecks


def shadow_experiment(
    market: BlackScholesMarket,
    pref: ExponentialPreference,
    eps: float,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    *,
    start="uniform",
    chunk_size: int = 500,
    threads: int | None = None,
) -> ShadowReport:
    """Band policy, shadow price and all diagnostics, streamed over path chunks."""
    if not isinstance(market, BlackScholesMarket):
        raise UnsupportedModelError("shadow experiments need a Black-Scholes market")
    p = pref.p
    k = market.mu / (p * market.sigma**2)
    if k == 0.0:
        raise DegenerateMarketError("mu = 0: the frictionless target is constant and no cubic exists")
    drift = DriftAccumulator(p)
    opt = _OptimalityAccumulator(p)
    inside, total, sell_err, buy_err, n_flag = 0.0, 0, 0.0, 0.0, 0
    for a in range(0, n_paths, chunk_size):
        ps = market.simulate(grid, min(chunk_size, n_paths - a), seed, "P", first_path=a, threads=threads)
        S = ps["S"]
        band = pure_investment_band(market, pref, eps, grid, S)
        pol = run_band_policy(ps, band, eps, start=start, record=True)
        c_S = market.c_S(S)
        c_phi = k * k * market.sigma**2 / np.square(S)
        co = shadow_coefficients(p, eps, S, c_S, c_phi)
        sh = shadow_path(pol, co, eps, S, c_phi=c_phi, grid=grid)
        inside += sh.containment_fraction * S.size
        total += S.size
        sell_err, buy_err = max(sell_err, sh.sell_match_error), max(buy_err, sh.buy_match_error)
        n_flag += len(sh.flagged)
        add_drift_samples(drift, sh.delta_S, pol.deviation, band.halfwidth, c_S, grid)
        opt.add(market, pol, sh, ps, band.center, band.halfwidth)
        del ps, pol, sh, band, co
    co0 = shadow_coefficients(p, eps, market.S0, market.c_S(market.S0), k * k * market.sigma**2 / market.S0**2)
    return ShadowReport(
        eps, n_paths, grid.n_steps, float(co0.alpha), float(co0.gamma), inside / total,
        sell_err, buy_err, n_flag, drift.result(), opt.result(),
    )


def residual_scaling(eps_values, residuals) -> tuple[float, float]:
    """Log-log slope (and its standard error) of residual magnitudes against eps."""
    eps_values = np.asarray(eps_values, dtype=float)
    residuals = np.asarray(residuals, dtype=float)
    if eps_values.size < 2 or np.any(eps_values <= 0.0) or np.any(residuals <= 0.0):
        raise ParameterError("need at least two positive (eps, residual) pairs")
    fit = linregress(np.log(eps_values), np.log(residuals))
    return float(fit.slope), float(fit.stderr) if eps_values.size > 2 else float("nan")
