"""Small Monte-Carlo estimate containers and reductions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError


@dataclass(frozen=True)
class Estimate:
    value: float
    std_error: float = 0.0

    def __post_init__(self):
        if not self.std_error >= 0.0:
            raise ParameterError(f"standard error must be nonnegative, got {self.std_error}")

    def __float__(self) -> float:
        return float(self.value)

    def as_dict(self) -> dict:
        return {"value": float(self.value), "std_error": float(self.std_error)}


def mean_estimate(samples) -> Estimate:
    x = np.asarray(samples, dtype=float).ravel()
    if x.size == 0:
        raise ParameterError("cannot average an empty sample")
    se = float(np.std(x, ddof=1) / np.sqrt(x.size)) if x.size > 1 else 0.0
    return Estimate(float(np.mean(x)), se)


def influence_se(psi) -> float:
    """Standard error of an estimator from its per-sample influence values."""
    psi = np.asarray(psi, dtype=float)
    if psi.size < 2:
        return 0.0
    return float(np.std(psi, ddof=1) / np.sqrt(psi.size))


def left_point_integral(integrand: np.ndarray, dt: np.ndarray) -> np.ndarray:
    """``sum_k f(t_k) (t_{k+1} - t_k)`` along the last axis; ``integrand`` lives on grid points."""
    return np.asarray(integrand)[..., :-1] @ dt
