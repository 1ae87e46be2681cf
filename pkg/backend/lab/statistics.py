"""
Standard errors, z-scores and two-sample distances shared by the lab modules.
"""
from typing import Tuple

import dcor
import numpy as np
from scipy import stats


def mean_se(values: np.ndarray, axis: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Sample mean and its standard error along `axis`."""
    values = np.asarray(values, dtype=float)
    n = values.shape[axis]
    if n < 2:
        mean = values.mean(axis=axis)
        return mean, np.zeros_like(mean)
    return values.mean(axis=axis), values.std(axis=axis, ddof=1) / np.sqrt(n)


def z_scores(values: np.ndarray) -> np.ndarray:
    """|mean| / SE along the first axis; zero where both vanish, inf for a sure nonzero mean."""
    mean, se = mean_se(values)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(se > 0, np.abs(mean) / se, np.where(np.abs(mean) > 0, np.inf, 0.0))


def gap_z(gap: np.ndarray, se: np.ndarray, atol: float = 1e-12) -> float:
    gap = np.abs(np.asarray(gap, dtype=float))
    se = np.asarray(se, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, gap / se, np.where(gap > atol, np.inf, 0.0))
    return float(np.max(z, initial=0.0))


def bonferroni_critical(level: float, n_tests: int) -> float:
    """Two-sided normal critical value at family-wise `level` over `n_tests` tests."""
    return float(stats.norm.ppf(1.0 - level / (2.0 * max(1, n_tests))))


def covariance_gap(disp: np.ndarray, times: np.ndarray, target: np.ndarray) -> Tuple[float, float]:
    """
    max_t max_kl |Cov-hat(D_t) / t - target| with the SE of the entry attaining it.

    Args:
        disp (np.ndarray): Displacements, shape (P, m, K)
        times (np.ndarray): The m positive times
        target (np.ndarray): Covariance per unit time, (K, K)

    Returns:
        Tuple[float, float]: Gap and its standard error
    """
    best, best_se = 0.0, 0.0
    n = disp.shape[0]
    for i, t in enumerate(times):
        d = disp[:, i] - disp[:, i].mean(axis=0)
        prods = np.einsum("pk,pl->pkl", d, d) / t
        gap = np.abs(prods.mean(axis=0) * n / (n - 1) - target)
        se = prods.std(axis=0, ddof=1) / np.sqrt(n)
        k, l = np.unravel_index(np.argmax(gap), gap.shape)
        if gap[k, l] >= best:
            best, best_se = float(gap[k, l]), float(se[k, l])
    return best, best_se


def ks_statistics(first: np.ndarray, second: np.ndarray) -> Tuple[float, float]:
    """Largest two-sample KS statistic and smallest p-value over the trailing axes of (P, ...) samples."""
    a = np.asarray(first, dtype=float).reshape(len(first), -1)
    b = np.asarray(second, dtype=float).reshape(len(second), -1)
    worst_stat, worst_p = 0.0, 1.0
    for j in range(a.shape[1]):
        result = stats.ks_2samp(a[:, j], b[:, j])
        worst_stat = max(worst_stat, float(result.statistic))
        worst_p = min(worst_p, float(result.pvalue))
    return worst_stat, worst_p


def energy_distance(first: np.ndarray, second: np.ndarray) -> float:
    """Energy distance of the flattened joint vectors, clipped at 0."""
    a = np.asarray(first, dtype=float).reshape(len(first), -1)
    b = np.asarray(second, dtype=float).reshape(len(second), -1)
    return max(float(dcor.energy_distance(a, b)), 0.0)
