"""Seed-reproducible path simulation and local coefficient estimation.

Every path owns an independent random substream keyed by ``(seed, path index)``,
so a block of paths simulated on its own is bitwise identical to the same rows
of a larger run, whatever the number of worker threads.
"""

from __future__ import annotations

import csv
import logging
import os
from collections.abc import Callable, Mapping
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import GridMismatchError, ParameterError

log = logging.getLogger(__name__)

MEASURES = ("P", "Q", "QH")
STEPS_PER_YEAR = 10_000
DEFAULT_WINDOW_FRACTION = 0.01

CoefficientFn = Callable[[float, np.ndarray], tuple[np.ndarray, np.ndarray]]


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TimeGrid:
    points: np.ndarray
    is_uniform: bool = True

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim != 1 or pts.size < 2:
            raise ParameterError("a time grid needs at least two points")
        if not np.all(np.isfinite(pts)):
            raise ParameterError("time grid points must be finite")
        if np.any(np.diff(pts) <= 0.0):
            raise ParameterError("time grid points must be strictly increasing")
        object.__setattr__(self, "points", _readonly(pts))

    @classmethod
    def uniform(cls, T: float, n_steps: int | None = None, t0: float = 0.0) -> "TimeGrid":
        """Uniform grid on ``[t0, T]``; defaults to 10^4 steps per unit year."""
        if not T > t0:
            raise ParameterError(f"need t0 < T, got t0={t0}, T={T}")
        if n_steps is None:
            n_steps = max(1, int(round(STEPS_PER_YEAR * (T - t0))))
        if int(n_steps) < 1:
            raise ParameterError("n_steps must be a positive integer")
        pts = np.linspace(t0, T, int(n_steps) + 1)
        return cls(pts, True)

    @classmethod
    def from_points(cls, points) -> "TimeGrid":
        return cls(np.asarray(points, dtype=float), False)

    @property
    def t0(self) -> float:
        return float(self.points[0])

    @property
    def T(self) -> float:
        return float(self.points[-1])

    @property
    def n_steps(self) -> int:
        return self.points.size - 1

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.points)

    def refine(self, factor: int = 2) -> "TimeGrid":
        """Split every step into ``factor`` equal sub-steps."""
        if self.is_uniform:
            return TimeGrid.uniform(self.T, self.n_steps * factor, self.t0)
        fine = [np.linspace(a, b, factor + 1)[:-1] for a, b in zip(self.points[:-1], self.points[1:])]
        return TimeGrid.from_points(np.concatenate(fine + [self.points[-1:]]))

    def __eq__(self, other) -> bool:
        return isinstance(other, TimeGrid) and np.array_equal(self.points, other.points)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class PathSet:
    """Discretised sample paths, one ``n_paths x (n_steps + 1)`` matrix per factor."""

    grid: TimeGrid
    factors: Mapping[str, np.ndarray]
    seed: int
    measure_tag: str = "P"
    path_ids: np.ndarray | None = None
    n_invalid: int = 0

    def __post_init__(self):
        if self.measure_tag not in MEASURES:
            raise ParameterError(f"measure_tag must be one of {MEASURES}, got {self.measure_tag!r}")
        if not self.factors:
            raise ParameterError("a path set needs at least one factor")
        rows = None
        frozen = {}
        for name, values in self.factors.items():
            values = np.asarray(values, dtype=float)
            if values.ndim != 2 or values.shape[1] != self.grid.n_steps + 1:
                raise GridMismatchError(
                    f"factor {name!r} has shape {values.shape}, grid has {self.grid.n_steps + 1} points"
                )
            if rows is None:
                rows = values.shape[0]
            elif values.shape[0] != rows:
                raise GridMismatchError("all factors must have the same number of paths")
            if not np.all(np.isfinite(values)):
                raise ParameterError(f"factor {name!r} contains non-finite values")
            if values.flags.writeable:
                values.setflags(write=False)
            frozen[name] = values
        object.__setattr__(self, "factors", frozen)
        ids = np.arange(rows) if self.path_ids is None else np.asarray(self.path_ids, dtype=np.int64)
        if ids.shape != (rows,):
            raise GridMismatchError("path_ids must have one entry per path")
        ids.setflags(write=False)
        object.__setattr__(self, "path_ids", ids)

    @property
    def n_paths(self) -> int:
        return next(iter(self.factors.values())).shape[0]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.factors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.factors

    def with_factor(self, name: str, values: np.ndarray) -> "PathSet":
        """Copy with one more factor (e.g. a derived strategy path)."""
        factors = dict(self.factors)
        factors[name] = np.array(values, dtype=float)
        return PathSet(self.grid, factors, self.seed, self.measure_tag, self.path_ids, self.n_invalid)

    def to_csv(self, path: str | os.PathLike, max_paths: int | None = None) -> Path:
        """Long-format dump with columns ``path_id, step, t, <factor>...``."""
        path = Path(path)
        names = list(self.factors)
        n = self.n_paths if max_paths is None else min(max_paths, self.n_paths)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["path_id", "step", "t", *names])
            for i in range(n):
                cols = [self.factors[k][i] for k in names]
                for step, t in enumerate(self.grid.points):
                    w.writerow([int(self.path_ids[i]), step, repr(float(t)), *(repr(float(c[step])) for c in cols)])
        return path

    def save_npz(self, path: str | os.PathLike) -> Path:
        """Columnar binary dump readable by :meth:`load_npz`."""
        path = Path(path)
        np.savez(
            path,
            grid=self.grid.points,
            grid_uniform=np.array(self.grid.is_uniform),
            seed=np.array(self.seed, dtype=np.int64),
            measure_tag=np.array(self.measure_tag),
            path_ids=self.path_ids,
            n_invalid=np.array(self.n_invalid),
            factor_names=np.array(list(self.factors)),
            **{f"factor__{k}": v for k, v in self.factors.items()},
        )
        return path

    @classmethod
    def load_npz(cls, path: str | os.PathLike) -> "PathSet":
        with np.load(path) as data:
            grid = TimeGrid(data["grid"], bool(data["grid_uniform"]))
            factors = {str(k): data[f"factor__{k}"] for k in data["factor_names"]}
            return cls(grid, factors, int(data["seed"]), str(data["measure_tag"]), data["path_ids"], int(data["n_invalid"]))


@dataclass(frozen=True, eq=False)
class CoefficientSeries:
    grid: TimeGrid
    b: np.ndarray
    c: np.ndarray
    cross: np.ndarray | None = None
    c_other: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if np.any(self.c < 0.0):
            raise ParameterError("local quadratic variation must be nonnegative")
        if self.cross is not None and self.c_other is not None:
            slack = 1e-12 * (self.c * self.c_other) + 1e-300
            if np.any(self.cross**2 > self.c * self.c_other + slack):
                raise ParameterError("covariation violates the Cauchy-Schwarz bound")

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(self.c)


@dataclass(frozen=True)
class GBMParams:
    S0: float
    mu: float
    sigma: float

    def __post_init__(self):
        if not self.S0 > 0.0:
            raise ParameterError(f"initial price must be positive, got {self.S0}")
        if not self.sigma > 0.0:
            raise ParameterError(f"volatility must be positive, got {self.sigma}")


# --- random numbers -------------------------------------------------------


def path_rng(seed: int, path_index: int, stream: int = 0) -> np.random.Generator:
    """Generator for one path's substream; ``stream`` separates auxiliary draws."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(path_index), int(stream))))


def default_threads() -> int:
    return max(1, min(8, os.cpu_count() or 1))


def _blocks(n: int, size: int) -> list[tuple[int, int]]:
    return [(a, min(a + size, n)) for a in range(0, n, size)]


def standard_normals(
    seed: int,
    first_path: int,
    n_paths: int,
    n_steps: int,
    n_streams: int = 1,
    threads: int | None = None,
) -> np.ndarray:
    """Standard normals of shape ``(n_paths, n_streams, n_steps)`` from per-path substreams."""
    out = np.empty((n_paths, n_streams, n_steps))

    def fill(block):
        a, b = block
        for i in range(a, b):
            out[i] = path_rng(seed, first_path + i).standard_normal((n_streams, n_steps))

    blocks = _blocks(n_paths, 256)
    threads = threads or 1
    if threads == 1 or len(blocks) == 1:
        for blk in blocks:
            fill(blk)
    else:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(fill, blocks))
    return out


def uniform_draws(seed: int, first_path: int, n_paths: int, stream: int = 1) -> np.ndarray:
    """One U(0,1) draw per path from an auxiliary substream."""
    return np.array([path_rng(seed, first_path + i, stream).random() for i in range(n_paths)])


def _brownian(grid: TimeGrid, z: np.ndarray) -> np.ndarray:
    dW = z * np.sqrt(grid.dt)
    W = np.zeros((z.shape[0], grid.n_steps + 1))
    np.cumsum(dW, axis=1, out=W[:, 1:])
    return W


def _drop_invalid(factors: dict[str, np.ndarray], ids: np.ndarray, what: str):
    ok = np.ones(ids.size, dtype=bool)
    for v in factors.values():
        ok &= np.all(np.isfinite(v), axis=1)
    n_bad = int(ids.size - ok.sum())
    if n_bad:
        log.warning("%s: %d of %d paths produced non-finite values and were excluded", what, n_bad, ids.size)
        factors = {k: v[ok] for k, v in factors.items()}
        ids = ids[ok]
    return factors, ids, n_bad


# --- simulators -------------------------------------------------------------


def simulate_gbm(
    S0: float,
    mu: float,
    sigma: float,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    *,
    first_path: int = 0,
    measure_tag: str = "P",
    threads: int | None = None,
) -> PathSet:
    """Exact log-normal stepping of ``dS = mu S dt + sigma S dW``.

    The driving Brownian motion is stored as factor ``"W"`` next to ``"S"``.
    """
    GBMParams(S0, mu, sigma)
    if n_paths < 1:
        raise ParameterError("n_paths must be at least 1")
    z = standard_normals(seed, first_path, n_paths, grid.n_steps, 1, threads)[:, 0, :]
    W = _brownian(grid, z)
    t = grid.points - grid.t0
    with np.errstate(over="ignore", invalid="ignore"):
        S = S0 * np.exp((mu - 0.5 * sigma**2) * t + sigma * W)
    ids = np.arange(first_path, first_path + n_paths)
    factors, ids, n_bad = _drop_invalid({"S": S, "W": W}, ids, "simulate_gbm")
    return PathSet(grid, factors, seed, measure_tag, ids, n_bad)


def simulate_correlated_pair(
    params_S: GBMParams | tuple,
    params_Y: GBMParams | tuple,
    rho: float,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    *,
    first_path: int = 0,
    measure_tag: str = "P",
    threads: int | None = None,
) -> PathSet:
    """Two geometric Brownian motions with instantaneous correlation ``rho``.

    Factors: ``S``, ``Y``, and their drivers ``W`` and ``W_Y``. For ``|rho| = 1``
    the second noise stream is never used.
    """
    ps = params_S if isinstance(params_S, GBMParams) else GBMParams(*params_S)
    py = params_Y if isinstance(params_Y, GBMParams) else GBMParams(*params_Y)
    if not -1.0 <= rho <= 1.0:
        raise ParameterError(f"correlation must lie in [-1, 1], got {rho}")
    if n_paths < 1:
        raise ParameterError("n_paths must be at least 1")
    z = standard_normals(seed, first_path, n_paths, grid.n_steps, 2, threads)
    W = _brownian(grid, z[:, 0, :])
    if abs(rho) == 1.0:
        WY = rho * W
    else:
        WY = rho * W + np.sqrt(1.0 - rho * rho) * _brownian(grid, z[:, 1, :])
    t = grid.points - grid.t0
    with np.errstate(over="ignore", invalid="ignore"):
        S = ps.S0 * np.exp((ps.mu - 0.5 * ps.sigma**2) * t + ps.sigma * W)
        Y = py.S0 * np.exp((py.mu - 0.5 * py.sigma**2) * t + py.sigma * WY)
    ids = np.arange(first_path, first_path + n_paths)
    factors, ids, n_bad = _drop_invalid({"S": S, "Y": Y, "W": W, "W_Y": WY}, ids, "simulate_correlated_pair")
    return PathSet(grid, factors, seed, measure_tag, ids, n_bad)


def euler_maruyama(
    model: CoefficientFn,
    x0: float,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    *,
    factor: str = "X",
    first_path: int = 0,
    measure_tag: str = "P",
    threads: int | None = None,
) -> PathSet:
    """First-order scheme for ``dX = b(t, X) dt + sigma(t, X) dW``.

    Uses the same per-path normals as :func:`simulate_gbm` for equal seeds,
    which makes the two directly comparable path by path.
    """
    if n_paths < 1:
        raise ParameterError("n_paths must be at least 1")
    z = standard_normals(seed, first_path, n_paths, grid.n_steps, 1, threads)[:, 0, :]
    dW = z * np.sqrt(grid.dt)
    X = np.empty((n_paths, grid.n_steps + 1))
    X[:, 0] = x0
    dt = grid.dt
    with np.errstate(all="ignore"):
        for k in range(grid.n_steps):
            b, s = model(float(grid.points[k]), X[:, k])
            X[:, k + 1] = X[:, k] + b * dt[k] + s * dW[:, k]
    ids = np.arange(first_path, first_path + n_paths)
    factors, ids, n_bad = _drop_invalid({factor: X, "W": _brownian(grid, z)}, ids, "euler_maruyama")
    return PathSet(grid, factors, seed, measure_tag, ids, n_bad)


# --- coefficient estimation -------------------------------------------------


def _window_sums(incr: np.ndarray, window: int) -> np.ndarray:
    """Sums of ``window`` consecutive increments, one per grid point, window centred where possible."""
    n = incr.shape[-1]
    csum = np.concatenate([np.zeros(incr.shape[:-1] + (1,)), np.cumsum(incr, axis=-1)], axis=-1)
    k = np.arange(n + 1)
    start = np.clip(k - window // 2, 0, n - window)
    return csum[..., start + window] - csum[..., start]


def local_coefficients(
    pathset: PathSet,
    factor: str,
    analytic: CoefficientFn | None = None,
    *,
    window: int | None = None,
    cross_with: str | None = None,
) -> CoefficientSeries:
    """Local drift ``b`` and quadratic variation rate ``c`` of one factor.

    With ``analytic`` (a function ``(t, x) -> (b, sigma)``) the coefficients are
    evaluated along the path. Otherwise they are realised-variance estimates over
    a rolling ``window`` of steps (default 1% of the grid).
    """
    X = pathset[factor]
    grid = pathset.grid
    if analytic is not None:
        b = np.empty_like(X)
        c = np.empty_like(X)
        for k, t in enumerate(grid.points):
            bk, sk = analytic(float(t), X[:, k])
            b[:, k] = bk
            c[:, k] = np.asarray(sk) ** 2
        return CoefficientSeries(grid, b, c)

    if window is None:
        window = max(1, int(round(DEFAULT_WINDOW_FRACTION * grid.n_steps)))
    if not 1 <= window <= grid.n_steps:
        raise ParameterError(f"window must lie in [1, {grid.n_steps}], got {window}")
    dX = np.diff(X, axis=1)
    span = _window_sums(grid.dt, window)
    b = _window_sums(dX, window) / span
    c = _window_sums(dX * dX, window) / span
    cross = c_other = None
    if cross_with is not None:
        dY = np.diff(pathset[cross_with], axis=1)
        cross = _window_sums(dX * dY, window) / span
        c_other = _window_sums(dY * dY, window) / span
    return CoefficientSeries(grid, b, c, cross, c_other)


def realized_quadratic_variation(pathset: PathSet, factor: str) -> np.ndarray:
    """Sum of squared increments over the whole grid, per path."""
    return np.sum(np.diff(pathset[factor], axis=1) ** 2, axis=1)
