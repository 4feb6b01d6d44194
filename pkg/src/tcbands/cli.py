"""Command-line entry point: ``tcbands <experiment> --config FILE [--out DIR] [--threads N] [--seed N]``."""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .asymptotics import (
    BandSpec,
    complete_price_correction,
    incomplete_martingale_price,
    indifference_price,
    marginal_investment_price,
    monetary_halfwidth_cash_gamma,
    pure_investment_band,
    semistatic_gamma_hedge,
    semistatic_objective,
    welfare_loss,
)
from .band_simulator import run_band_policy, scaling_study, welfare_experiment
from .config import KEYS, KINDS, REQUIRED, ExperimentConfig, parse_config
from .errors import ConfigError
from .frictionless import (
    BasisRiskMarket,
    BlackScholesMarket,
    ClaimSpec,
    ExponentialPreference,
    bs_delta_gamma,
    claim_q_moments,
    hedging_error_second_moment,
)
from .sde_core import TimeGrid
from .shadow import shadow_coefficients, shadow_experiment
from .stats import Estimate

log = logging.getLogger("tcbands")


class _Collector(logging.Handler):
    def __init__(self):
        super().__init__(logging.WARNING)
        self.messages: list[str] = []

    def emit(self, record):
        self.messages.append(f"{record.name}: {record.getMessage()}")


def _est(e: Estimate) -> dict:
    return {"value": float(e.value), "std_error": float(e.std_error)}


def _write_csv(path: Path, header, rows):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _bs(cfg: ExperimentConfig):
    m, pr = cfg["market"], cfg["preference"]
    return BlackScholesMarket(m["S0"], m["mu"], m["sigma"]), ExponentialPreference(pr["p"], pr["x0"])


def _grid(cfg: ExperimentConfig, T=None) -> TimeGrid:
    num = cfg["numerics"]
    T = num["T"] if T is None else T
    return TimeGrid.uniform(T, max(1, int(round(num["n_steps"] * T / num["T"]))))


def _claim(cfg: ExperimentConfig, underlying="traded", hedge=False) -> ClaimSpec:
    c = cfg["claim"]
    if hedge:
        return ClaimSpec(c["hedge_kind"], c["maturity"], c["hedge_strike"], underlying)
    return ClaimSpec(c["kind"], c["maturity"], c["strike"], underlying)


# --- experiments ----------------------------------------------------------------


def run_band(cfg, out: Path):
    market, pref = _bs(cfg)
    num = cfg["numerics"]
    eps = num["eps"]
    grid = _grid(cfg)
    ps = market.simulate(grid, 1, num["seed"], threads=num["threads"])
    S = ps["S"][0]
    band = pure_investment_band(market, pref, eps, grid, S)
    k = market.mu / (pref.p * market.sigma**2)
    m_closed = (1.5 * eps / pref.p) ** (1.0 / 3.0) * abs(k) ** (2.0 / 3.0)
    co = shadow_coefficients(pref.p, eps, market.S0, market.c_S(market.S0), k * k * market.sigma**2 / market.S0**2) if k else None
    rows = zip(grid.points, S, band.center * S, band.lower * S, band.upper * S, band.halfwidth)
    _write_csv(out / "band.csv", ["t", "S", "center_value", "lower_value", "upper_value", "halfwidth_shares"], rows)
    results = {
        "monetary_halfwidth": float(band.halfwidth[0] * S[0]),
        "monetary_halfwidth_closed_form": m_closed,
        "monetary_halfwidth_cash_gamma": float(monetary_halfwidth_cash_gamma(pref.p, eps, S[0], -k)),
        "halfwidth_shares_t0": float(band.halfwidth[0]),
        "shadow_halfwidth_shares_t0": float(co.halfwidth) if co is not None else 0.0,
        "alpha_t0": float(co.alpha) if co is not None else None,
        "gamma_t0": float(co.gamma) if co is not None else None,
    }
    return results, ["band.csv"]


def _welfare_results(r):
    return {
        "eps": r.eps,
        "loss": _est(r.loss),
        "closed_form_loss": r.closed_form_loss,
        "displacement_loss": _est(r.displacement_loss),
        "direct_cost_loss": _est(r.direct_cost_loss),
        "split_ratio": r.split_ratio if r.displacement_loss.value else None,
        "ergodic_ratio": _est(r.ergodic_ratio),
        "CE_friction": _est(r.CE_friction),
        "CE_frictionless": _est(r.CE_frictionless),
        "expected_cost": _est(r.expected_cost),
    }


def run_welfare(cfg, out: Path):
    market, pref = _bs(cfg)
    num = cfg["numerics"]
    grid = _grid(cfg)
    r = welfare_experiment(
        market, pref, num["eps"], grid, num["n_paths"], num["seed"],
        start=num["start"], chunk_size=num["chunk_size"], threads=num["threads"],
    )
    files = []
    n_led = min(cfg["output"]["ledger_paths"], num["n_paths"])
    if n_led:
        ps = market.simulate(grid, n_led, num["seed"], threads=num["threads"])
        band = pure_investment_band(market, pref, num["eps"], grid, ps["S"])
        res = run_band_policy(ps, band, num["eps"], x0=pref.x0, start=num["start"])
        res.ledger.to_csv(out / "ledger.csv")
        files.append("ledger.csv")
    results = _welfare_results(r)
    results["n_paths"] = r.n_paths
    return results, files


def run_scaling(cfg, out: Path):
    market, pref = _bs(cfg)
    num = cfg["numerics"]
    res = scaling_study(
        market, pref, num["eps_list"], _grid(cfg), num["n_paths"], num["seed"],
        start=num["start"], chunk_size=num["chunk_size"], threads=num["threads"],
    )
    rows = []
    for row, r in zip(res.table(), res.reports):
        ln_loss = float(np.log(row["loss"])) if row["used"] else ""
        ln_eps = float(np.log(row["eps"])) if row["eps"] > 0 else ""
        rows.append([row["eps"], ln_eps, row["loss"], row["loss_se"], ln_loss, row["closed_form"], int(row["used"])])
    _write_csv(out / "scaling.csv", ["eps", "ln_eps", "loss", "loss_se", "ln_loss", "closed_form_loss", "used"], rows)
    results = {
        "slope": {"value": res.slope, "std_error": res.slope_se},
        "intercept": res.intercept,
        "rows": [_welfare_results(r) for r in res.reports],
    }
    return results, ["scaling.csv"]


def run_price(cfg, out: Path):
    market, pref = _bs(cfg)
    num = cfg["numerics"]
    claim = _claim(cfg)
    n = cfg["claim"]["n"]
    eps, p = num["eps"], pref.p
    grid = _grid(cfg, claim.maturity)
    ps = market.simulate(grid, num["n_paths"], num["seed"], "Q", threads=num["threads"])
    S = ps["S"]
    t = np.broadcast_to(grid.points, S.shape)
    delta, gamma, value = bs_delta_gamma(claim, t, S, market.sigma)
    k = market.mu / (p * market.sigma**2)
    cg_phi = np.full(S.shape, -k)
    cg_H = n * gamma * S * S
    c_S = market.c_S(S)
    pi0 = float(value[0, 0])

    full = complete_price_correction(p, eps, cg_phi, cg_H, c_S, ps)
    with_band = BandSpec(grid, k / S + n * delta, monetary_halfwidth_cash_gamma(p, eps, S, cg_phi + cg_H) / S)
    without = BandSpec(grid, k / S, monetary_halfwidth_cash_gamma(p, eps, S, cg_phi) / S)
    pipe = indifference_price(p, welfare_loss(p, with_band, c_S, ps), welfare_loss(p, without, c_S, ps), pi0)
    marg = marginal_investment_price(p, n, eps, gamma * S * S, c_S, ps, pi0=pi0)

    trace = ((np.square(cg_phi + cg_H) ** (2 / 3) - np.square(cg_phi) ** (2 / 3)) * market.sigma**2).mean(axis=0)
    _write_csv(out / "price_integrand.csv", ["t", "mean_integrand"], zip(grid.points, trace))
    results = {
        "frictionless_price": pi0,
        "n": n,
        "complete_correction_total": _est(full),
        "complete_correction_per_claim": {"value": full.value / n, "std_error": full.std_error / n},
        "indifference_pipeline_correction_total": {"value": pipe.correction, "std_error": pipe.std_error},
        "marginal_investment_correction_per_claim": {"value": marg.correction, "std_error": marg.std_error},
        "price_per_claim": pi0 + full.value / n,
    }
    return results, ["price_integrand.csv"]


def run_hedge(cfg, out: Path):
    m, num = cfg["market"], cfg["numerics"]
    market = BasisRiskMarket(m["S0"], m["mu"], m["sigma"], m["Y0"], m["mu_Y"], m["sigma_Y"], m["rho"])
    claim = _claim(cfg, "non-traded")
    grid = _grid(cfg, claim.maturity)
    mean_H, var_H = claim_q_moments(market, claim)
    err = hedging_error_second_moment(market, claim, num["n_paths"], num["seed"], grid, chunk_size=num["chunk_size"], threads=num["threads"])
    results = {
        "expected_payoff_Q": mean_H,
        "variance_Q": var_H,
        "hedging_error_second_moment": _est(err),
        "hedged_fraction_of_variance": 1.0 - err.value / var_H if var_H > 0 else None,
    }
    if m["mu"] == 0.0 and num["eps"] is not None:
        q = incomplete_martingale_price(
            cfg["preference"]["p"], cfg["claim"]["n"], num["eps"], market, claim, num["n_paths"], num["seed"], grid,
            threads=num["threads"],
        )
        results["price_per_claim"] = q.total
        results["frictionless_price_per_claim"] = q.frictionless
        results["hedging_term"] = q.components["hedging_term"]
        results["cost_term"] = {"value": q.components["cost_term"], "std_error": q.components["cost_term_se"]}
    elif m["mu"] != 0.0:
        log.warning("mu != 0: the separated price formula applies only without a risk premium; price omitted")
    return results, []


def run_semistatic(cfg, out: Path):
    market, pref = _bs(cfg)
    num = cfg["numerics"]
    H, H2 = _claim(cfg), _claim(cfg, hedge=True)
    grid = _grid(cfg, H.maturity)
    ps = market.simulate(grid, num["n_paths"], num["seed"], "Q", threads=num["threads"])
    S = ps["S"]
    t = np.broadcast_to(grid.points, S.shape)
    g1 = bs_delta_gamma(H, t, S, market.sigma)[1] * S * S
    g2 = bs_delta_gamma(H2, t, S, market.sigma)[1] * S * S
    c_S = market.c_S(S)
    n_star, obj = semistatic_gamma_hedge(g1, g2, c_S, S, ps, (num["search_lo"], num["search_hi"]))
    f = semistatic_objective(g1, g2, c_S, ps)
    xs = np.linspace(num["search_lo"], num["search_hi"], 201)
    _write_csv(out / "semistatic.csv", ["n_prime", "objective"], ((x, f(x)) for x in xs))
    return {"n_star": n_star, "objective": obj, "objective_unhedged": f(0.0)}, ["semistatic.csv"]


def run_shadow(cfg, out: Path):
    market, pref = _bs(cfg)
    num = cfg["numerics"]
    r = shadow_experiment(
        market, pref, num["eps"], _grid(cfg), num["n_paths"], num["seed"],
        start=num["start"], chunk_size=min(num["chunk_size"], 500), threads=num["threads"],
    )
    r.drift.to_csv(out / "drift.csv")
    c = r.checks
    results = {
        "eps": r.eps,
        "alpha_t0": r.alpha0,
        "gamma_t0": r.gamma0,
        "containment_fraction": r.containment_fraction,
        "sell_match_error": r.sell_match_error,
        "buy_match_error": r.buy_match_error,
        "flagged_steps": r.n_flagged,
        "drift_coefficient": _est(r.drift.coefficient),
        "drift_sup_residual": _est(r.drift.sup_residual),
        "density_mean_error": _est(c.density_mean_error),
        "terminal_residual": _est(c.terminal_residual),
        "terminal_residual_abs": _est(c.terminal_residual_abs),
        "frictional_residual_abs": _est(c.frictional_residual_abs),
        "product_drift_sup_residual": _est(c.product_drift.sup_residual),
        "frictionless_martingale": _est(c.frictionless_martingale),
    }
    return results, ["drift.csv"]


RUNNERS = {
    "band": run_band,
    "welfare": run_welfare,
    "scaling": run_scaling,
    "price": run_price,
    "hedge": run_hedge,
    "semistatic": run_semistatic,
    "shadow-check": run_shadow,
}


def _clean(x):
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (np.floating, float)):
        return float(x) if np.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    return x


def _text_report(report: dict) -> str:
    lines = [f"tcbands {report['provenance']['version']} - {report['kind']}", ""]

    def emit(prefix, obj):
        if isinstance(obj, dict) and set(obj) == {"value", "std_error"}:
            lines.append(f"{prefix}: {obj['value']!r} +/- {obj['std_error']!r}")
        elif isinstance(obj, dict):
            for k, v in obj.items():
                emit(f"{prefix}.{k}" if prefix else k, v)
        elif isinstance(obj, list):
            for i, v in enumerate(obj):
                emit(f"{prefix}[{i}]", v)
        else:
            lines.append(f"{prefix}: {obj!r}")

    emit("", report["results"])
    if report["warnings"]:
        lines += ["", "warnings:"] + [f"  {w}" for w in report["warnings"]]
    lines += ["", "files: " + ", ".join(report["files"])]
    return "\n".join(lines) + "\n"


def run(cfg: ExperimentConfig, out: Path) -> dict:
    """Run one experiment, write ``report.json``, ``report.txt`` and CSV files; return the report."""
    out.mkdir(parents=True, exist_ok=True)
    collector = _Collector()
    root = logging.getLogger("tcbands")
    root.addHandler(collector)
    try:
        results, files = RUNNERS[cfg.kind](cfg, out)
    finally:
        root.removeHandler(collector)
    report = {
        "kind": cfg.kind,
        "config": cfg.echo(),
        "results": _clean(results),
        "files": files,
        "warnings": collector.messages,
        "provenance": {
            "tool": "tcbands",
            "version": __version__,
            "seed": cfg["numerics"]["seed"],
            "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        },
    }
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    (out / "report.txt").write_text(_text_report(report))
    return report


def _key_help() -> str:
    lines = ["config keys (INI sections):"]
    for sec, keys in KEYS.items():
        lines.append(f"  [{sec}]")
        for name, k in keys.items():
            d = "required" if k.default is REQUIRED else f"default {k.default}"
            lines.append(f"    {name:<13} {d}; {k.help}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tcbands",
        description="No-trade bands, welfare losses and indifference prices under small proportional costs.",
        epilog=_key_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"tcbands {__version__}")
    sub = parser.add_subparsers(dest="kind", required=True, metavar="experiment")
    for kind in KINDS:
        sp = sub.add_parser(kind, help=f"run the {kind} experiment", epilog=_key_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
        sp.add_argument("--config", required=True, help="INI configuration file")
        sp.add_argument("--out", help="output directory (default: [output] dir)")
        sp.add_argument("--threads", type=int, help="worker threads; results do not depend on it")
        sp.add_argument("--seed", type=int, help="override [numerics] seed")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        text = Path(args.config).read_text()
        cfg = parse_config(
            text, args.kind, overrides={("numerics", "threads"): args.threads, ("numerics", "seed"): args.seed}
        )
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out or cfg["output"]["dir"])
    try:
        run(cfg, out)
    except Exception as exc:
        tb = exc.__traceback__
        while tb.tb_next is not None:
            tb = tb.tb_next
        where = tb.tb_frame.f_globals.get("__name__", "?")
        print(f"error in {where}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {out / 'report.txt'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
