"""Fusion rules for per-expert Gaussian predictions.

Every combiner accepts either a list of :class:`ExpertPrediction` (one test
point) or an :class:`ExpertPredictions` stack whose arrays have experts on the
first axis and test points on the second. Sums run over the expert axis in
index order.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import InputError, NumericalError, UsageError
from .experts import Ensemble, Strategy
from .gp_core import PredictiveGaussian, predict_many

__all__ = [
    "Rule",
    "ExpertPrediction",
    "ExpertPredictions",
    "FusedGaussian",
    "entropy_change",
    "normalize_weights",
    "stack_predictions",
    "ensemble_predictions",
    "combine_poe",
    "combine_gpoe",
    "combine_moe",
    "combine_bagging",
    "path_mask",
    "gpoe_predict",
    "fuse",
]

_LOG_2PI = np.log(2.0 * np.pi)
_CLAMP_RTOL = 1e-12


class Rule(str, enum.Enum):
    BAGGING = "bagging"
    MOE = "moe"
    POE = "poe"
    GPOE = "gpoe"
    TREE_GPOE = "tree_gpoe"

    @classmethod
    def parse(cls, value) -> "Rule":
        if isinstance(value, cls):
            return value
        text = str(value).lower().replace("-", "_")
        try:
            return cls(text)
        except ValueError:
            names = ", ".join(r.value for r in cls)
            raise InputError(f"unknown fusion rule {value!r}; expected one of {names}")


def _delta_h(prior_variance, variance):
    prior_variance = np.asarray(prior_variance, dtype=float)
    variance = np.asarray(variance, dtype=float)
    if np.any(variance <= 0) or not np.all(np.isfinite(variance)):
        raise NumericalError("entropy change needs strictly positive finite variances")
    ratio = prior_variance / variance
    if np.any(ratio < 1.0 - _CLAMP_RTOL):
        raise NumericalError("posterior variance exceeds prior variance")
    return 0.5 * np.log(np.maximum(ratio, 1.0))


def entropy_change(pred) -> float:
    """Half the log ratio of prior to posterior predictive variance."""
    return float(_delta_h(pred.prior_variance, pred.variance))


@dataclass(frozen=True)
class ExpertPrediction:
    mean: float
    variance: float
    prior_variance: float
    delta_h: float

    @classmethod
    def from_predictive(cls, pred: PredictiveGaussian) -> "ExpertPrediction":
        return cls(pred.mean, pred.variance, pred.prior_variance, entropy_change(pred))


@dataclass(frozen=True)
class ExpertPredictions:
    """Predictions of E experts at N points, each array shaped ``(E, N)``."""

    mean: np.ndarray
    variance: np.ndarray
    prior_variance: np.ndarray
    delta_h: np.ndarray

    @classmethod
    def from_arrays(cls, mean, variance, prior_variance) -> "ExpertPredictions":
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        variance = np.atleast_1d(np.asarray(variance, dtype=float))
        prior_variance = np.broadcast_to(
            np.asarray(prior_variance, dtype=float), variance.shape
        )
        return cls(mean, variance, prior_variance, _delta_h(prior_variance, variance))

    @property
    def n_experts(self) -> int:
        return self.mean.shape[0]

    def subset(self, keep) -> "ExpertPredictions":
        """Index every array with the same expression ``keep``."""
        return ExpertPredictions(
            self.mean[keep], self.variance[keep], self.prior_variance[keep], self.delta_h[keep]
        )


def stack_predictions(preds) -> ExpertPredictions:
    if isinstance(preds, ExpertPredictions):
        return preds
    preds = list(preds)
    if not preds:
        raise InputError("at least one expert prediction is required")
    return ExpertPredictions(
        np.array([p.mean for p in preds], dtype=float),
        np.array([p.variance for p in preds], dtype=float),
        np.array([p.prior_variance for p in preds], dtype=float),
        np.array([p.delta_h for p in preds], dtype=float),
    )


def ensemble_predictions(ensemble: Ensemble, X) -> ExpertPredictions:
    if len(ensemble) == 0:
        raise InputError("ensemble has no fitted experts")
    outs = [predict_many(e, X) for e in ensemble.experts]
    return ExpertPredictions.from_arrays(
        np.stack([o[0] for o in outs]),
        np.stack([o[1] for o in outs]),
        np.stack([o[2] for o in outs]),
    )


@dataclass(frozen=True)
class FusedGaussian:
    """Fused prediction; ``mean``/``variance`` are scalars or length-N arrays.

    For MoE the predictive density is the gate-weighted mixture kept in
    ``components``; ``variance`` then holds the exact mixture variance.
    ``fallback`` marks points where every weight was zero and the prior was
    returned instead.
    """

    mean: object
    variance: object
    rule: Rule
    has_density: bool = True
    weights: np.ndarray | None = None
    fallback: object = False
    components: ExpertPredictions | None = None

    def log_density(self, y):
        if not self.has_density:
            raise UsageError(f"{self.rule.value} fusion has no predictive density")
        y = np.asarray(y, dtype=float)
        if self.rule is Rule.MOE and self.components is not None:
            c = self.components
            logp = -0.5 * (_LOG_2PI + np.log(c.variance) + (y - c.mean) ** 2 / c.variance)
            with np.errstate(divide="ignore"):
                log_gates = np.log(self.weights)
            return logsumexp(logp + log_gates, axis=0)
        var = np.asarray(self.variance, dtype=float)
        return -0.5 * (_LOG_2PI + np.log(var) + (y - self.mean) ** 2 / var)

    def point(self, j: int) -> "FusedGaussian":
        """Extract test point ``j`` from a vectorized result."""
        take = lambda a: None if a is None else np.asarray(a)[..., j]
        comps = None
        if self.components is not None:
            c = self.components
            comps = ExpertPredictions(
                c.mean[:, j], c.variance[:, j], c.prior_variance[:, j], c.delta_h[:, j]
            )
        return FusedGaussian(
            float(np.asarray(self.mean)[..., j]),
            float(np.asarray(self.variance)[..., j]),
            self.rule,
            self.has_density,
            take(self.weights),
            bool(np.asarray(self.fallback)[..., j]) if np.ndim(self.fallback) else bool(self.fallback),
            comps,
        )


def _squeeze(value, scalar: bool):
    return float(value) if scalar else value


def normalize_weights(raw) -> np.ndarray:
    """Scale non-negative weights to sum to one along the expert axis.

    Columns that sum to zero are returned unchanged (all zero).
    """
    raw = np.asarray(raw, dtype=float)
    if not np.all(np.isfinite(raw)):
        raise InputError("weights must be finite")
    if np.any(raw < 0):
        raise InputError("weights must be non-negative")
    total = raw.sum(axis=0)
    safe = np.where(total > 0, total, 1.0)
    return np.where(total > 0, raw / safe, 0.0)


def combine_poe(preds) -> FusedGaussian:
    p = stack_predictions(preds)
    scalar = p.mean.ndim == 1
    precision = 1.0 / p.variance
    total = precision.sum(axis=0)
    mean = (p.mean * precision).sum(axis=0) / total
    return FusedGaussian(
        _squeeze(mean, scalar),
        _squeeze(1.0 / total, scalar),
        Rule.POE,
        weights=np.ones_like(p.mean),
    )


def combine_gpoe(preds, alphas, rule: Rule = Rule.GPOE) -> FusedGaussian:
    """Precision-scaled product: each expert's precision is multiplied by its
    weight before the product-of-Gaussians update."""
    p = stack_predictions(preds)
    alphas = np.asarray(alphas, dtype=float)
    if alphas.shape != p.mean.shape:
        raise InputError(f"alphas shape {alphas.shape} does not match predictions {p.mean.shape}")
    if np.any(alphas < 0) or not np.all(np.isfinite(alphas)):
        raise InputError("alphas must be finite and non-negative")
    scalar = p.mean.ndim == 1
    scaled = alphas / p.variance
    total = scaled.sum(axis=0)
    fallback = alphas.sum(axis=0) == 0
    safe = np.where(fallback, 1.0, total)
    mean = np.where(fallback, 0.0, (p.mean * scaled).sum(axis=0) / safe)
    variance = np.where(fallback, p.prior_variance.mean(axis=0), 1.0 / safe)
    return FusedGaussian(
        _squeeze(mean, scalar),
        _squeeze(variance, scalar),
        rule,
        weights=alphas,
        fallback=bool(fallback) if scalar else fallback,
    )


def combine_moe(preds, gates) -> FusedGaussian:
    p = stack_predictions(preds)
    gates = np.asarray(gates, dtype=float)
    if gates.shape != p.mean.shape:
        raise InputError(f"gates shape {gates.shape} does not match predictions {p.mean.shape}")
    if np.any(gates < 0):
        raise InputError("gates must be non-negative")
    scalar = p.mean.ndim == 1
    mean = (gates * p.mean).sum(axis=0)
    # central form of the mixture second moment, avoids cancellation
    variance = (gates * (p.variance + (p.mean - mean) ** 2)).sum(axis=0)
    return FusedGaussian(
        _squeeze(mean, scalar),
        _squeeze(variance, scalar),
        Rule.MOE,
        weights=gates,
        components=p,
    )


def combine_bagging(preds) -> FusedGaussian:
    p = stack_predictions(preds)
    scalar = p.mean.ndim == 1
    mean = p.mean.mean(axis=0)
    n = p.n_experts
    return FusedGaussian(
        _squeeze(mean, scalar),
        float("nan") if scalar else np.full_like(mean, np.nan),
        Rule.BAGGING,
        has_density=False,
        weights=np.full_like(p.mean, 1.0 / n),
    )


def path_mask(ensemble: Ensemble, X) -> np.ndarray:
    """Boolean ``(E, N)`` mask of experts on each point's root-to-leaf path."""
    if ensemble.strategy is not Strategy.TREE or ensemble.tree is None:
        raise UsageError("tree-restricted fusion requires a tree-strategy ensemble")
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    lookup = ensemble.node_experts()
    mask = np.zeros((len(ensemble), X.shape[0]), dtype=bool)
    for j, x in enumerate(X):
        for node in ensemble.tree.path_to_leaf(x):
            if node in lookup:
                mask[lookup[node], j] = True
    return mask


def gpoe_predict(ensemble: Ensemble, X, path_only: bool = False,
                 preds: ExpertPredictions | None = None) -> FusedGaussian:
    """Entropy-weighted gPoE at the rows of ``X``; ``preds`` may be passed to
    reuse already computed expert predictions."""
    if path_only and (ensemble.strategy is not Strategy.TREE or ensemble.tree is None):
        raise UsageError("path_only gPoE requires a tree-strategy ensemble")
    if preds is None:
        preds = ensemble_predictions(ensemble, X)
    alphas = preds.delta_h
    if path_only:
        alphas = np.where(path_mask(ensemble, X), alphas, 0.0)
    rule = Rule.TREE_GPOE if path_only else Rule.GPOE
    return combine_gpoe(preds, normalize_weights(alphas), rule=rule)


def fuse(ensemble: Ensemble, X, rule, preds: ExpertPredictions | None = None) -> FusedGaussian:
    """Apply any fusion rule to an ensemble at the rows of ``X``."""
    rule = Rule.parse(rule)
    if preds is None:
        preds = ensemble_predictions(ensemble, X)
    if rule is Rule.BAGGING:
        return combine_bagging(preds)
    if rule is Rule.POE:
        return combine_poe(preds)
    if rule is Rule.MOE:
        gates = normalize_weights(preds.delta_h)
        # no expert informed: mix uniformly, each component is then near its prior
        empty = gates.sum(axis=0) == 0
        if np.any(empty):
            gates = np.where(empty, 1.0 / preds.n_experts, gates)
        return combine_moe(preds, gates)
    return gpoe_predict(ensemble, X, path_only=rule is Rule.TREE_GPOE, preds=preds)
