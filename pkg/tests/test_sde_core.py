import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tcbands.errors import GridMismatchError, ParameterError
from tcbands.sde_core import (
    CoefficientSeries,
    PathSet,
    TimeGrid,
    euler_maruyama,
    local_coefficients,
    realized_quadratic_variation,
    simulate_correlated_pair,
    simulate_gbm,
    standard_normals,
)


def test_grid_defaults_and_validation():
    g = TimeGrid.uniform(1.0)
    assert g.n_steps == 10_000 and g.t0 == 0.0 and g.T == 1.0
    assert np.allclose(g.dt, 1e-4)
    with pytest.raises(ParameterError):
        TimeGrid.uniform(0.0)
    with pytest.raises(ParameterError):
        TimeGrid.from_points([0.0, 0.5, 0.5, 1.0])
    r = TimeGrid.from_points([0.0, 0.3, 1.0]).refine(2)
    assert np.allclose(r.points, [0.0, 0.15, 0.3, 0.65, 1.0])


def test_pathset_invariants():
    g = TimeGrid.uniform(1.0, 4)
    with pytest.raises(GridMismatchError):
        PathSet(g, {"S": np.ones((2, 4))}, 1)
    with pytest.raises(GridMismatchError):
        PathSet(g, {"S": np.ones((2, 5)), "Y": np.ones((3, 5))}, 1)
    with pytest.raises(ParameterError):
        PathSet(g, {"S": np.full((1, 5), np.nan)}, 1)
    with pytest.raises(ParameterError):
        PathSet(g, {"S": np.ones((1, 5))}, 1, measure_tag="R")
    ps = PathSet(g, {"S": np.ones((1, 5))}, 1)
    with pytest.raises(ValueError):
        ps["S"][0, 0] = 2.0


def test_gbm_martingale_mean():
    ps = simulate_gbm(100.0, 0.0, 0.2, TimeGrid.uniform(1.0, 4), 100_000, 1)
    ST = ps["S"][:, -1]
    assert abs(ST.mean() - 100.0) < 3 * ST.std() / np.sqrt(ST.size)


def test_gbm_deterministic_limit():
    ps = simulate_gbm(100.0, 0.05, 1e-12, TimeGrid.uniform(2.0, 8), 10, 1)
    assert np.allclose(ps["S"][:, -1], 100.0 * np.exp(0.1), rtol=1e-10)


def test_gbm_log_moments():
    n = 100_000
    ps = simulate_gbm(100.0, 0.08, 0.2, TimeGrid.uniform(1.0, 4), n, 2)
    x = np.log(ps["S"][:, -1] / 100.0)
    assert abs(x.mean() - 0.06) < 3 * x.std() / np.sqrt(n)
    # variance SE of a normal sample: sigma^2 sqrt(2/(n-1))
    assert abs(x.var(ddof=1) - 0.04) < 3 * 0.04 * np.sqrt(2.0 / (n - 1))


def test_seed_determinism_and_chunk_independence():
    g = TimeGrid.uniform(1.0, 50)
    a = simulate_gbm(100.0, 0.08, 0.2, g, 600, 9, threads=1)
    b = simulate_gbm(100.0, 0.08, 0.2, g, 600, 9, threads=3)
    assert np.array_equal(a["S"], b["S"])
    c = simulate_gbm(100.0, 0.08, 0.2, g, 100, 9, first_path=250)
    assert np.array_equal(a["S"][250:350], c["S"])
    assert np.array_equal(c.path_ids, np.arange(250, 350))


def test_normals_shape():
    z = standard_normals(1, 0, 3, 7, 2)
    assert z.shape == (3, 2, 7)


def test_gbm_parameter_errors():
    g = TimeGrid.uniform(1.0, 4)
    for args in ((0.0, 0.0, 0.2), (100.0, 0.0, 0.0), (-1.0, 0.0, 0.2)):
        with pytest.raises(ParameterError):
            simulate_gbm(*args, g, 10, 1)


def test_gbm_overflow_flagged(caplog):
    ps = simulate_gbm(1e300, 50.0, 0.2, TimeGrid.uniform(20.0, 10), 5, 1)
    assert ps.n_invalid == 5 and ps.n_paths == 0
    assert "excluded" in caplog.text


def _logret_corr(ps):
    a = np.diff(np.log(ps["S"]), axis=1).ravel()
    b = np.diff(np.log(ps["Y"]), axis=1).ravel()
    return np.corrcoef(a, b)[0, 1], a.size


def test_correlated_pair_identical_at_rho_one():
    ps = simulate_correlated_pair((100, 0.05, 0.2), (100, 0.05, 0.2), 1.0, TimeGrid.uniform(1.0, 20), 50, 4)
    assert np.array_equal(ps["S"], ps["Y"])


@pytest.mark.parametrize("rho", [0.0, 0.8])
def test_correlated_pair_correlation(rho):
    ps = simulate_correlated_pair((100, 0.05, 0.2), (80, 0.0, 0.3), rho, TimeGrid.uniform(1.0, 1), 100_000, 5)
    r, n = _logret_corr(ps)
    se = (1.0 - rho * rho) / np.sqrt(n)
    assert abs(r - rho) < 3 * se


def test_correlated_pair_rejects_bad_rho():
    with pytest.raises(ParameterError):
        simulate_correlated_pair((100, 0, 0.2), (100, 0, 0.2), 1.1, TimeGrid.uniform(1.0, 4), 5, 1)


def test_euler_constant_and_bm_qv():
    g = TimeGrid.uniform(1.0, 10_000)
    const = euler_maruyama(lambda t, x: (0.0 * x, 0.0 * x), 3.0, g, 4, 1)
    assert np.all(const["X"] == 3.0)
    bm = euler_maruyama(lambda t, x: (0.0 * x, 1.0 + 0.0 * x), 0.0, g, 20, 1)
    qv = realized_quadratic_variation(bm, "X")
    assert np.all(np.abs(qv - 1.0) < 0.05)


def test_euler_matches_gbm_noise_and_richardson():
    # terminal-mean discrepancy against exact stepping shrinks like dt
    mu, s = 0.5, 0.4
    errs = []
    for n in (4, 8, 16):
        g = TimeGrid.uniform(1.0, n)
        em = euler_maruyama(lambda t, x: (mu * x, s * x), 1.0, g, 20_000, 3)
        ex = simulate_gbm(1.0, mu, s, g, 20_000, 3)
        errs.append(abs(np.mean(em["X"][:, -1] - ex["S"][:, -1])))
    assert errs[0] > errs[1] > errs[2]
    assert 0.6 < errs[0] / errs[1] / 2 < 1.6


def test_euler_invalid_paths_excluded():
    g = TimeGrid.uniform(1.0, 50)
    ps = euler_maruyama(lambda t, x: (x * x * 1e10, 1.0 + 0 * x), 1.0, g, 10, 1)
    assert ps.n_invalid + ps.n_paths == 10
    assert ps.n_invalid > 0


def test_local_coefficients_analytic_and_estimated():
    g = TimeGrid.uniform(1.0, 10_000)
    ps = simulate_gbm(100.0, 0.08, 0.2, g, 3, 1)
    co = local_coefficients(ps, "S", lambda t, x: (0.08 * x, 0.2 * x))
    assert np.allclose(co.c, 0.04 * ps["S"] ** 2)
    bm = euler_maruyama(lambda t, x: (0.0 * x, 1.0 + 0 * x), 0.0, g, 5, 2)
    est = local_coefficients(bm, "X", window=g.n_steps)
    assert np.all(np.abs(est.c - 1.0) < 0.05)
    flat = PathSet(g, {"X": np.ones((2, g.n_steps + 1))}, 0)
    assert np.all(local_coefficients(flat, "X").c == 0.0)
    with pytest.raises(ParameterError):
        local_coefficients(flat, "X", window=g.n_steps + 1)


def test_cross_coefficients_cauchy_schwarz():
    g = TimeGrid.uniform(1.0, 500)
    ps = simulate_correlated_pair((100, 0.0, 0.2), (100, 0.0, 0.3), -0.6, g, 20, 8)
    co = local_coefficients(ps, "S", cross_with="Y", window=25)
    assert np.all(co.cross**2 <= co.c * co.c_other * (1 + 1e-12))
    with pytest.raises(ParameterError):
        CoefficientSeries(g, np.zeros(3), np.ones(3), np.full(3, 2.0), np.ones(3))


def test_csv_and_npz_roundtrip(tmp_path):
    g = TimeGrid.uniform(1.0, 3)
    ps = simulate_gbm(100.0, 0.0, 0.2, g, 2, 1)
    ps.to_csv(tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "path_id,step,t,S,W" and len(lines) == 1 + 2 * 4
    back = PathSet.load_npz(ps.save_npz(tmp_path / "p.npz"))
    assert np.array_equal(back["S"], ps["S"]) and back.grid == g and back.seed == 1


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**63 - 1), n=st.integers(1, 5))
def test_property_seed_determinism(seed, n):
    g = TimeGrid.uniform(0.5, 7)
    a = simulate_gbm(50.0, 0.1, 0.3, g, n, seed)
    b = simulate_gbm(50.0, 0.1, 0.3, g, n, seed, threads=2)
    assert np.array_equal(a["S"], b["S"])
