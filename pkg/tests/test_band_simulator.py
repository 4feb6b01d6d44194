import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tcbands.asymptotics import BandSpec, pure_investment_band
from tcbands.band_simulator import (
    certainty_equivalent,
    run_band_policy,
    scaling_study,
    welfare_experiment,
    welfare_experiments,
)
from tcbands.errors import GridMismatchError, ParameterError
from tcbands.frictionless import BlackScholesMarket, ExponentialPreference
from tcbands.sde_core import PathSet, TimeGrid

BS = BlackScholesMarket(100.0, 0.08, 0.2)
PREF = ExponentialPreference(1.0)


def _scripted(prices):
    prices = np.atleast_2d(np.asarray(prices, dtype=float))
    grid = TimeGrid.uniform(1.0, prices.shape[1] - 1)
    return PathSet(grid, {"S": prices}, 0)


def test_wide_band_never_trades():
    ps = BS.simulate(TimeGrid.uniform(1.0, 100), 20, 1)
    band = BandSpec(ps.grid, 2.0 / ps["S"], np.full(ps["S"].shape, 1e6))
    res = run_band_policy(ps, band, 0.01)
    assert np.all(res.ledger.trades[:, 1:] == 0.0)
    assert np.all(res.total_cost == 0.0)
    assert np.allclose(res.terminal_wealth, res.positions[:, 0] * (ps["S"][:, -1] - ps["S"][:, 0]))


def test_zero_width_constant_target_single_trade(caplog):
    ps = _scripted([100.0, 101.0, 103.0, 106.0])
    band = BandSpec(ps.grid, np.full(4, 2.0), np.zeros(4))
    with caplog.at_level(logging.WARNING):
        res = run_band_policy(ps, band, 0.01, initial_shares=0.5)
    assert "zero-width" in caplog.text
    assert res.ledger.entries(0) == [(0, 1.5, 101.0, pytest.approx(0.01 * 100 * 1.5))]
    assert res.total_cost[0] == pytest.approx(0.01 * 100.0 * 1.5)
    assert res.setup_cost[0] == res.total_cost[0] and res.running_cost[0] == 0.0
    assert res.terminal_wealth[0] == pytest.approx(2.0 * 6.0 - 1.5)


def test_scripted_five_step_ledger():
    S = np.array([100.0, 101.0, 104.0, 104.0, 103.0, 102.0])
    k, h, eps, x0 = 100.0, 0.02, 0.01, 10.0
    ps = _scripted(S)
    band = BandSpec(ps.grid, k / S, np.full(6, h))
    res = run_band_policy(ps, band, eps, x0=x0)
    # by hand: start at 1 share; only at step 2 does the upper boundary k/104 + h fall below 1
    target = k / 104.0 + h
    pos = np.array([1.0, 1.0, target, target, target, target])
    assert np.allclose(res.positions[0], pos, rtol=0, atol=1e-15)
    sell = target - 1.0
    assert res.ledger.entries(0) == [(2, pytest.approx(sell), pytest.approx(104.0 * (1 - eps)), pytest.approx(eps * 104.0 * -sell))]
    assert res.ledger.cumulative_cost[0] == pytest.approx(eps * 104.0 * (1.0 - target))
    gains = np.sum(pos[:-1] * np.diff(S))
    assert res.terminal_wealth[0] == pytest.approx(x0 + gains - eps * 104.0 * (1.0 - target), rel=1e-14)
    assert res.ergodic[0] == pytest.approx(np.mean(((pos[1:] - k / S[1:]) / h) ** 2))


def test_buy_at_ask_and_inside_band():
    ps = BS.simulate(TimeGrid.uniform(1.0, 500), 50, 3)
    band = pure_investment_band(BS, PREF, 0.01, ps.grid, ps["S"])
    res = run_band_policy(ps, band, 0.01)
    L = res.ledger
    buys, sells = L.trades > 0, L.trades < 0
    assert buys.any() and sells.any()
    assert np.allclose(L.execution_price[buys], 1.01 * L.S[buys])
    assert np.allclose(L.execution_price[sells], 0.99 * L.S[sells])
    assert np.all(L.costs[L.trades == 0] == 0.0)
    # post-trade position within the band enforced at that step
    assert np.all(np.abs(res.deviation) <= res.effective_halfwidth * (1 + 1e-12) + 1e-15)


def test_policy_errors():
    ps = BS.simulate(TimeGrid.uniform(1.0, 10), 2, 1)
    other = BS.simulate(TimeGrid.uniform(1.0, 20), 2, 1)
    band = pure_investment_band(BS, PREF, 0.01, other.grid, other["S"])
    with pytest.raises(GridMismatchError):
        run_band_policy(ps, band, 0.01)
    good = pure_investment_band(BS, PREF, 0.01, ps.grid, ps["S"])
    with pytest.raises(ParameterError):
        run_band_policy(ps, good, -0.01)
    with pytest.raises(ParameterError):
        run_band_policy(ps, BandSpec(ps.grid, np.full(11, np.nan), np.ones(11)), 0.01)
    with pytest.raises(ParameterError):
        run_band_policy(ps, good, 0.01, start=np.full(2, 1.5))
    with pytest.raises(ParameterError):
        run_band_policy(ps, good, 0.01, start="edge")


@settings(max_examples=15, deadline=None)
@given(lam=st.floats(0.1, 10.0), seed=st.integers(0, 10_000), eps=st.floats(1e-4, 0.05))
def test_property_scale_invariance(lam, seed, eps):
    grid = TimeGrid.uniform(1.0, 50)
    ps = BS.simulate(grid, 5, seed)
    ps_l = PathSet(grid, {"S": lam * ps["S"]}, seed)
    a = run_band_policy(ps, pure_investment_band(BS, PREF, eps, grid, ps["S"]), eps, start="uniform")
    mkt_l = BlackScholesMarket(lam * 100.0, 0.08, 0.2)
    band_l = pure_investment_band(mkt_l, ExponentialPreference(1.0 / lam), eps, grid, ps_l["S"])
    b = run_band_policy(ps_l, band_l, eps, start="uniform")
    assert np.allclose(a.positions, b.positions, rtol=1e-10, atol=0)
    assert np.allclose(lam * a.total_cost, b.total_cost, rtol=1e-9, atol=1e-300)
    assert np.allclose(lam * a.terminal_wealth, b.terminal_wealth, rtol=1e-9, atol=1e-12 * lam)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32), eps=st.floats(0.0, 0.05), x0=st.floats(-1e3, 1e3))
def test_property_self_financing(seed, eps, x0):
    ps = BS.simulate(TimeGrid.uniform(1.0, 40), 4, seed)
    band = pure_investment_band(BS, PREF, eps, ps.grid, ps["S"])
    res = run_band_policy(ps, band, eps, x0=x0, initial_shares=0.0, start="uniform")
    S = ps["S"]
    X = x0 + np.sum(res.positions[:, :-1] * np.diff(S, axis=1), axis=1) - res.ledger.cumulative_cost
    assert np.allclose(res.terminal_wealth, X, rtol=1e-10, atol=1e-10)


def test_ledger_csv(tmp_path):
    ps = BS.simulate(TimeGrid.uniform(1.0, 4), 3, 1)
    res = run_band_policy(ps, pure_investment_band(BS, PREF, 0.01, ps.grid, ps["S"]), 0.01)
    lines = res.ledger.to_csv(tmp_path / "l.csv", max_paths=2).read_text().splitlines()
    assert lines[0] == "path_id,step,t,S,phi_center,halfwidth,position,trade,cost"
    assert len(lines) == 1 + 2 * 5


def test_certainty_equivalent_examples():
    for p in (0.5, 1.0, 3.0):
        ce = certainty_equivalent(np.full(10, 2.5), p)
        assert ce.value == pytest.approx(2.5, rel=1e-14) and ce.std_error == pytest.approx(0.0, abs=1e-14)
        two = certainty_equivalent([0.0, np.log(4.0) / p], p)
        assert two.value == pytest.approx(-np.log(0.625) / p, rel=1e-13)
        assert two.value * p == pytest.approx(0.4700, abs=1e-4)
    # overflow-safe
    assert certainty_equivalent([-1e4, -1e4 + 1.0], 1.0).value == pytest.approx(-1e4 - np.log((1 + np.exp(-1)) / 2))
    with pytest.raises(ParameterError):
        certainty_equivalent([], 1.0)
    with pytest.raises(ParameterError):
        certainty_equivalent([np.nan], 1.0)


@settings(max_examples=40, deadline=None)
@given(x=st.lists(st.floats(-100, 100), min_size=1, max_size=30), p=st.floats(0.01, 5.0))
def test_property_ce_below_mean(x, p):
    assert certainty_equivalent(x, p).value <= np.mean(x) + 1e-9 * (1 + np.max(np.abs(x)))


def test_certainty_equivalent_normal_wealth():
    rng = np.random.default_rng(0)
    x = rng.normal(1.0, 0.5, 200_000)
    ce = certainty_equivalent(x, 2.0)
    assert abs(ce.value - (1.0 - 2.0 * 0.25 / 2)) < 3 * ce.std_error


@pytest.fixture(scope="module")
def small_reports():
    grid = TimeGrid.uniform(1.0, 1000)
    return welfare_experiments(BS, PREF, [0.0, 0.02, 0.01], grid, 1000, 5, chunk_size=400)


def test_welfare_report_consistency(small_reports):
    zero, r2, r1 = small_reports
    assert zero.loss.value == 0.0 and zero.CE_friction.value == zero.CE_frictionless.value
    ce0 = 0.08**2 / (2 * 0.04)
    for r in (r2, r1):
        assert r.CE_frictionless.value == pytest.approx(ce0)
        assert r.loss.value == pytest.approx(r.displacement_loss.value + r.direct_cost_loss.value, rel=1e-12)
        assert r.CE_friction.value <= r.CE_frictionless.value + 2 * r.CE_friction.std_error
        assert 0.5 < r.loss.value / r.closed_form_loss < 1.3
        assert 1.3 < r.split_ratio < 2.6
        assert 0.2 < r.ergodic_ratio.value < 0.45
    assert r2.loss.value > r1.loss.value


def test_welfare_single_matches_batch(small_reports):
    grid = TimeGrid.uniform(1.0, 1000)
    one = welfare_experiment(BS, PREF, 0.01, grid, 1000, 5, chunk_size=400)
    assert one.loss.value == small_reports[2].loss.value


def test_loss_scales_inversely_with_p():
    grid = TimeGrid.uniform(1.0, 200)
    a = welfare_experiment(BS, PREF, 0.01, grid, 300, 8)
    b = welfare_experiment(BS, ExponentialPreference(2.0), 0.01, grid, 300, 8)
    assert b.loss.value == pytest.approx(a.loss.value / 2, rel=1e-9)
    assert b.closed_form_loss == pytest.approx(a.closed_form_loss / 2, rel=1e-12)


def test_scaling_study_rows_and_errors(caplog):
    grid = TimeGrid.uniform(1.0, 300)
    with pytest.raises(ParameterError):
        scaling_study(BS, PREF, [0.01, 0.02], grid, 10, 1)
    with caplog.at_level(logging.WARNING):
        res = scaling_study(BS, PREF, [0.0, 0.04, 0.02, 0.01], grid, 300, 2)
    assert "excluded" in caplog.text
    tab = res.table()
    assert tab[0]["used"] is False and tab[0]["loss"] == 0.0
    assert 0.4 < res.slope < 0.9
    with pytest.raises(ParameterError):
        welfare_experiments(BS, PREF, [-0.01], grid, 10, 1)
