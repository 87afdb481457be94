"""Regression scores and a quadrature oracle for product-of-Gaussian moments."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import InputError, MetricError, OracleError
from .fusion import FusedGaussian

__all__ = [
    "MetricReport",
    "smse",
    "snlp",
    "rmse",
    "gaussian_nlp",
    "oracle_product_moments",
]

_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class MetricReport:
    strategy: str
    rule: str
    smse: float
    snlp: float | None
    rmse: float
    n_evaluated: int
    n_skipped: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _pair(predicted, targets, min_len):
    p = np.asarray(predicted, dtype=float).reshape(-1)
    t = np.asarray(targets, dtype=float).reshape(-1)
    if p.shape != t.shape:
        raise InputError(f"{p.shape[0]} predictions for {t.shape[0]} targets")
    if p.shape[0] < min_len:
        raise InputError(f"need at least {min_len} points, got {p.shape[0]}")
    return p, t


def smse(predicted_means, test_targets) -> float:
    """Mean squared error divided by the (population) variance of the targets."""
    p, t = _pair(predicted_means, test_targets, 2)
    var = np.mean((t - t.mean()) ** 2)
    if var <= 0:
        raise MetricError("SMSE is undefined for constant test targets")
    return float(np.mean((p - t) ** 2) / var)


def rmse(predicted_means, test_targets) -> float:
    p, t = _pair(predicted_means, test_targets, 1)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def gaussian_nlp(y, mean, variance) -> np.ndarray:
    """Pointwise negative log density of N(mean, variance) at ``y``."""
    y = np.asarray(y, dtype=float)
    variance = np.asarray(variance, dtype=float)
    return 0.5 * (_LOG_2PI + np.log(variance) + (y - mean) ** 2 / variance)


def snlp(fused, test_targets, train_mean, train_variance):
    """Mean negative log predictive density relative to a Gaussian fitted to
    the training targets. Returns ``None`` when the fused rule has no density."""
    if train_variance <= 0:
        raise MetricError("SNLP baseline needs a positive training variance")
    t = np.asarray(test_targets, dtype=float).reshape(-1)
    items = fused if isinstance(fused, (list, tuple)) else [fused]
    if any(not f.has_density for f in items):
        return None
    if isinstance(fused, FusedGaussian):
        nlp = -np.asarray(fused.log_density(t), dtype=float).reshape(-1)
    else:
        if len(items) != t.shape[0]:
            raise InputError(f"{len(items)} fused predictions for {t.shape[0]} targets")
        nlp = np.array([-float(f.log_density(y)) for f, y in zip(items, t)])
    if nlp.shape != t.shape:
        raise InputError(f"{nlp.shape[0]} densities for {t.shape[0]} targets")
    baseline = gaussian_nlp(t, train_mean, train_variance)
    return float(np.mean(nlp) - np.mean(baseline))


def oracle_product_moments(means, variances, alphas, n_grid: int = 20001):
    """Mean and variance of the renormalized density prod_i N(y; m_i, v_i)^a_i,
    computed by trapezoidal quadrature on a uniform grid.

    The grid spans the precision-weighted mean guess +/- 12 guessed standard
    deviations.
    """
    m = np.atleast_1d(np.asarray(means, dtype=float))
    v = np.atleast_1d(np.asarray(variances, dtype=float))
    a = np.atleast_1d(np.asarray(alphas, dtype=float))
    if not (m.shape == v.shape == a.shape):
        raise InputError("means, variances and alphas must have equal length")
    if np.any(v <= 0) or np.any(a < 0):
        raise InputError("variances must be positive and alphas non-negative")
    prec = a / v
    total = prec.sum()
    if total <= 0:
        raise OracleError("product density is improper: no positive weighted precision")
    guess_mean = (prec * m).sum() / total
    guess_sd = np.sqrt(1.0 / total)
    y = np.linspace(guess_mean - 12 * guess_sd, guess_mean + 12 * guess_sd, max(n_grid, 10_001))
    logp = np.zeros_like(y)
    for mi, vi, ai in zip(m, v, a):
        if ai > 0:
            logp += -0.5 * ai * (np.log(2 * np.pi * vi) + (y - mi) ** 2 / vi)
    logp -= logp.max()
    dens = np.exp(logp)
    if not np.any(dens > 0):
        raise OracleError("density underflowed on the whole grid; widen the grid")
    z = np.trapezoid(dens, y)
    mean = np.trapezoid(y * dens, y) / z
    var = np.trapezoid((y - mean) ** 2 * dens, y) / z
    # mass touching the grid edge means the guessed range missed the density
    if max(dens[0], dens[-1]) > 1e-20:
        raise OracleError("density not contained in the grid; widen the grid")
    return float(mean), float(var)
