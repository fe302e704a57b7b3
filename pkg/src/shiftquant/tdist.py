"""Heavy-tailed weight modelling: Student-t density, degrees-of-freedom
estimation from sample kurtosis, and the density's inflection points.

Trained network weights are treated as draws from a standardized Student-t
distribution. The positive inflection point of that density marks where the
bell turns from concave to convex and is used downstream as the raw target
for the inner quantization level.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

DEFAULT_DOF = 3.0
DOF_MAX = 100.0
# Below this excess kurtosis the moment-matched dof explodes; treat the
# sample as effectively Gaussian and fall back to the near-normal cap.
KURTOSIS_FLOOR = 0.05
MIN_ELEMENTS = 100


@dataclass(frozen=True)
class WeightStats:
    """Summary of one layer's weight tensor after standardization."""

    mean: float
    std: float
    excess_kurtosis: float
    dof: float

    def __post_init__(self):
        if not np.isfinite(self.std) or self.std <= 0:
            raise ValueError(f"std must be positive, got {self.std}")
        if not np.isfinite(self.dof) or self.dof <= 0:
            raise ValueError(f"dof must be positive, got {self.dof}")


def t_pdf(x, n):
    """Student-t density with n > 0 degrees of freedom.

    Evaluated in log space via log-gamma so large n does not overflow:
    exp(lgamma((n+1)/2) - lgamma(n/2) - 0.5 log(n pi) - (n+1)/2 log1p(x^2/n)).
    Scalar x returns a float, array x returns an ndarray.
    """
    if not np.isfinite(n) or n <= 0:
        raise ValueError(f"degrees of freedom must be positive, got {n}")
    arr = np.asarray(x, dtype=np.float64)
    logc = gammaln((n + 1.0) / 2.0) - gammaln(n / 2.0) - 0.5 * np.log(n * np.pi)
    out = np.exp(logc - 0.5 * (n + 1.0) * np.log1p(arr * arr / n))
    if np.isscalar(x) or arr.ndim == 0:
        return float(out)
    return out


def excess_kurtosis(values: np.ndarray) -> float:
    """Population excess kurtosis m4/m2^2 - 3 about the sample mean."""
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    m = v.mean()
    d = v - m
    m2 = np.mean(d * d)
    if m2 == 0.0:
        raise ValueError("kurtosis undefined for a constant tensor")
    m4 = np.mean(d ** 4)
    return float(m4 / (m2 * m2) - 3.0)


def dof_from_kurtosis(excess: float, n_max: float = DOF_MAX) -> float:
    """Moment-matched dof: excess kurtosis of t_n is 6/(n-4) for n > 4.

    Inverting gives n = 4 + 6/excess. Samples with excess at or below the
    floor are treated as near-normal and clamped to n_max; the result is
    always inside [1, n_max].
    """
    if n_max <= 1:
        raise ValueError("n_max must exceed 1")
    if not np.isfinite(excess) or excess <= KURTOSIS_FLOOR:
        return float(n_max)
    n = 4.0 + 6.0 / excess
    return float(min(max(n, 1.0), n_max))


def standardize_weights(values: np.ndarray, n_max: float = DOF_MAX) -> tuple[np.ndarray, WeightStats]:
    """Zero-mean unit-variance copy of ``values`` plus its fitted stats.

    Uses the ddof=1 sample standard deviation. Requires at least
    ``MIN_ELEMENTS`` values; a moment fit on fewer is noise.
    """
    v = np.asarray(values, dtype=np.float64)
    flat = v.reshape(-1)
    if flat.size < MIN_ELEMENTS:
        raise ValueError(f"need at least {MIN_ELEMENTS} values to fit, got {flat.size}")
    mean = float(flat.mean())
    std = float(flat.std(ddof=1))
    if std == 0.0:
        raise ValueError("cannot standardize a constant tensor")
    kurt = excess_kurtosis(flat)
    dof = dof_from_kurtosis(kurt, n_max)
    return (v - mean) / std, WeightStats(mean=mean, std=std, excess_kurtosis=kurt, dof=dof)


def estimate_dof(values: np.ndarray, n_max: float = DOF_MAX) -> float:
    """Degrees of freedom fitted to a weight tensor by kurtosis matching."""
    _, stats = standardize_weights(values, n_max)
    return stats.dof


def inflection_points(n) -> tuple[float, float]:
    """Roots of the second derivative of the t density: x = +-sqrt(n/(n+2)).

    Writing the density as exp(g(x)) with
    g(x) = const - (n+1)/2 log(1 + x^2/n), the second derivative vanishes
    where g'' + g'^2 = 0, which reduces to x^2 (n+2) = n.
    """
    if not np.isfinite(n) or n <= 0:
        raise ValueError(f"degrees of freedom must be positive, got {n}")
    x = float(np.sqrt(n / (n + 2.0)))
    return -x, x
