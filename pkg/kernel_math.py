"""
Kernel math: Gaussian kernel, Silverman bandwidth rule and log-domain sums.
"""

import math
import warnings
from typing import Optional, Sequence, Union

import numpy as np
from scipy.special import logsumexp

from errors import DegenerateFeatureWarning, InvariantError

ArrayLike = Union[float, np.ndarray]

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
BANDWIDTH_FLOOR_FACTOR = 1e-8


def _check_finite(u: ArrayLike) -> np.ndarray:
    arr = np.asarray(u, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise InvariantError("Kernel argument must be finite")
    return arr


def gaussian_kernel(u: ArrayLike) -> ArrayLike:
    """Standard normal density K(u) = exp(-u^2/2) / sqrt(2 pi)."""
    arr = _check_finite(u)
    out = INV_SQRT_2PI * np.exp(-0.5 * arr * arr)
    return float(out) if out.ndim == 0 else out


def log_gaussian_kernel(u: ArrayLike) -> ArrayLike:
    """Logarithm of gaussian_kernel, evaluated without leaving log space."""
    arr = _check_finite(u)
    out = -LOG_SQRT_2PI - 0.5 * arr * arr
    return float(out) if out.ndim == 0 else out


def bandwidth_floor(sample_std: float) -> float:
    """Smallest admissible bandwidth for a feature with the given std."""
    scale = sample_std if sample_std > 0 else 1.0
    return BANDWIDTH_FLOOR_FACTOR * scale


def silverman_bandwidth(sample_std: float, n: int, floor: Optional[float] = None) -> float:
    """
    Rule-of-thumb bandwidth h = (4 sigma^5 / (3 n))^(1/5).

    Args:
        sample_std: sample standard deviation of the feature
        n: number of samples
        floor: lower clamp; defaults to bandwidth_floor(sample_std)

    Returns:
        Positive bandwidth
    """
    if n < 2:
        raise InvariantError(f"Silverman bandwidth needs at least 2 samples, insufficient data (n={n})")
    if sample_std < 0 or not math.isfinite(sample_std):
        raise InvariantError(f"Sample std must be a finite nonnegative number, got {sample_std}")
    if floor is None:
        floor = bandwidth_floor(sample_std)
    if sample_std == 0:
        warnings.warn("Degenerate constant feature: bandwidth set to the floor value",
                      DegenerateFeatureWarning, stacklevel=2)
        return floor
    h = (4.0 * sample_std ** 5 / (3.0 * n)) ** 0.2
    return max(h, floor)


def log_sum_exp(values: Sequence[float]) -> float:
    """ln(sum(exp(v))) with the max-shift trick; -inf entries are allowed."""
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        raise InvariantError("log_sum_exp of an empty sequence")
    if arr.size == 1:
        return float(arr.reshape(-1)[0])
    return float(logsumexp(arr))
