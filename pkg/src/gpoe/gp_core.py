"""Exact GP regression with an ARD squared-exponential plus white-noise kernel.

Hyperparameters live in the log domain and are ordered as
``[log signal variance, log lengthscale_1 .. log lengthscale_D, log noise variance]``
wherever a flat vector is needed (optimizer, gradient).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.optimize as so

from .errors import InputError, NumericalError

__all__ = [
    "Hyperparams",
    "GPExpert",
    "PredictiveGaussian",
    "OptimizerConfig",
    "OptimizationInfo",
    "kernel_value",
    "kernel_matrix",
    "gp_fit",
    "gp_predict",
    "predict_many",
    "log_marginal_likelihood",
    "lml_gradient",
    "default_hyperparams",
    "optimize_hyperparameters",
]

_JITTER_START = 1e-8
_JITTER_STOP = 1e-2
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Hyperparams:
    """Log-domain kernel hyperparameters."""

    log_signal_variance: float
    log_lengthscales: np.ndarray
    log_noise_variance: float

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.log_lengthscales, dtype=float)).copy()
        ls.setflags(write=False)
        object.__setattr__(self, "log_lengthscales", ls)
        object.__setattr__(self, "log_signal_variance", float(self.log_signal_variance))
        object.__setattr__(self, "log_noise_variance", float(self.log_noise_variance))
        vec = self.to_vector()
        if not np.all(np.isfinite(vec)) or not np.all(np.isfinite(np.exp(vec))):
            raise InputError(f"hyperparameters must be finite in both domains: {vec}")
        if np.any(np.exp(vec) <= 0.0):
            raise InputError(f"hyperparameters underflow to zero: {vec}")

    @classmethod
    def from_natural(cls, signal_variance, lengthscales, noise_variance):
        return cls(
            math.log(signal_variance),
            np.log(np.atleast_1d(np.asarray(lengthscales, dtype=float))),
            math.log(noise_variance),
        )

    @classmethod
    def from_vector(cls, theta):
        theta = np.asarray(theta, dtype=float)
        return cls(theta[0], theta[1:-1], theta[-1])

    def to_vector(self) -> np.ndarray:
        return np.concatenate(
            [[self.log_signal_variance], self.log_lengthscales, [self.log_noise_variance]]
        )

    @property
    def dim(self) -> int:
        return self.log_lengthscales.shape[0]

    @property
    def signal_variance(self) -> float:
        return math.exp(self.log_signal_variance)

    @property
    def noise_variance(self) -> float:
        return math.exp(self.log_noise_variance)

    @property
    def lengthscales(self) -> np.ndarray:
        return np.exp(self.log_lengthscales)

    @property
    def prior_variance(self) -> float:
        """k(x, x) including the white-noise term."""
        return self.signal_variance + self.noise_variance


@dataclass(frozen=True)
class GPExpert:
    """A fitted GP on one training subset. Immutable once built."""

    inputs: np.ndarray
    targets: np.ndarray
    hyper: Hyperparams
    chol_factor: np.ndarray
    weight_vector: np.ndarray
    jitter: float = 0.0
    name: str = field(default="expert", compare=False)

    @property
    def size(self) -> int:
        return self.inputs.shape[0]


@dataclass(frozen=True)
class PredictiveGaussian:
    mean: float
    variance: float
    prior_variance: float


@dataclass(frozen=True)
class OptimizerConfig:
    """Settings for type-II maximum likelihood.

    ``log_bounds`` is a box applied to every log-hyperparameter.
    """

    max_iter: int = 200
    gtol: float = 1e-5
    restarts: int = 2
    restart_scale: float = 1.0
    log_bounds: tuple = (-12.0, 12.0)


@dataclass(frozen=True)
class OptimizationInfo:
    lml_init: float
    lml_final: float
    converged: bool
    n_runs: int
    message: str = ""

    @property
    def warning(self) -> bool:
        return not self.converged


def _as_matrix(x, name="inputs") -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise InputError(f"{name} must be a non-empty 2-D array, got shape {x.shape}")
    return x


def _check_dim(x: np.ndarray, hyper: Hyperparams):
    if x.shape[-1] != hyper.dim:
        raise InputError(
            f"input dimension {x.shape[-1]} does not match {hyper.dim} lengthscales"
        )


def kernel_value(a, b, hyper: Hyperparams, same_point: bool = False) -> float:
    """Evaluate the ARD-SE + white kernel for one pair of points."""
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if a.shape != b.shape or a.shape[0] != hyper.dim:
        raise InputError(
            f"point shapes {a.shape}, {b.shape} incompatible with {hyper.dim} lengthscales"
        )
    r2 = np.sum(((a - b) / hyper.lengthscales) ** 2)
    value = hyper.signal_variance * math.exp(-0.5 * r2)
    if same_point:
        value += hyper.noise_variance
    return float(value)


def _scaled_sqdist(a: np.ndarray, b: np.ndarray, lengthscales: np.ndarray) -> np.ndarray:
    # per-dimension differences avoid the cancellation of the |a|^2+|b|^2-2ab form
    d2 = np.zeros((a.shape[0], b.shape[0]))
    for d, ell in enumerate(lengthscales):
        diff = (a[:, d][:, None] - b[:, d][None, :]) / ell
        d2 += diff * diff
    return d2


def kernel_matrix(a, b, hyper: Hyperparams, add_noise: bool = False) -> np.ndarray:
    """Cross-covariance between the rows of ``a`` and ``b``.

    ``add_noise`` adds the white term on the diagonal and is only meaningful
    when ``a`` and ``b`` are the same point set.
    """
    a = _as_matrix(a, "a")
    b = _as_matrix(b, "b")
    _check_dim(a, hyper)
    _check_dim(b, hyper)
    d2 = _scaled_sqdist(a, b, hyper.lengthscales)
    K = hyper.signal_variance * np.exp(-0.5 * d2)
    if add_noise:
        if K.shape[0] != K.shape[1]:
            raise InputError("white noise only applies to a square training covariance")
        K[np.diag_indices_from(K)] += hyper.noise_variance
    return K


def _cholesky_with_jitter(K: np.ndarray, name: str):
    try:
        return np.linalg.cholesky(K), 0.0
    except np.linalg.LinAlgError:
        pass
    scale = float(np.mean(np.diag(K)))
    jitter = _JITTER_START * scale
    eye = np.eye(K.shape[0])
    while jitter <= _JITTER_STOP * scale * (1 + 1e-12):
        try:
            return np.linalg.cholesky(K + jitter * eye), jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise NumericalError(f"Cholesky failed for {name} even with jitter {jitter / 10:.3g}")


def gp_fit(inputs, targets, hyper: Hyperparams, name: str = "expert") -> GPExpert:
    """Factorize the training covariance and solve for the weight vector."""
    X = _as_matrix(inputs)
    y = np.asarray(targets, dtype=float).reshape(-1)
    if y.shape[0] != X.shape[0]:
        raise InputError(f"{X.shape[0]} input rows but {y.shape[0]} targets")
    if not np.all(np.isfinite(X)):
        raise InputError(f"non-finite inputs passed to {name}")
    if not np.all(np.isfinite(y)):
        raise InputError(f"non-finite targets passed to {name}")
    _check_dim(X, hyper)
    K = kernel_matrix(X, X, hyper, add_noise=True)
    L, jitter = _cholesky_with_jitter(K, name)
    w = sla.cho_solve((L, True), y)
    if not np.all(np.isfinite(w)):
        raise NumericalError(f"non-finite weight vector for {name}")
    X = X.copy()
    X.setflags(write=False)
    y = y.copy()
    y.setflags(write=False)
    L.setflags(write=False)
    w.setflags(write=False)
    return GPExpert(X, y, hyper, L, w, jitter, name)


def predict_many(expert: GPExpert, X):
    """Vectorized prediction; returns ``(mean, variance, prior_variance)`` arrays.

    Variances include the observation noise.
    """
    X = _as_matrix(X, "test inputs")
    _check_dim(X, expert.hyper)
    Ks = kernel_matrix(expert.inputs, X, expert.hyper)
    mean = Ks.T @ expert.weight_vector
    v = sla.solve_triangular(expert.chol_factor, Ks, lower=True, check_finite=False)
    prior = expert.hyper.prior_variance
    variance = prior - np.einsum("ij,ij->j", v, v)
    # Schur complement is nonnegative in exact arithmetic
    variance = np.clip(variance, prior * 1e-15, prior)
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(variance))):
        raise NumericalError(f"non-finite prediction from {expert.name}")
    return mean, variance, np.full(X.shape[0], prior)


def gp_predict(expert: GPExpert, x) -> PredictiveGaussian:
    x = np.atleast_1d(np.asarray(x, dtype=float)).reshape(1, -1)
    mean, var, prior = predict_many(expert, x)
    return PredictiveGaussian(float(mean[0]), float(var[0]), float(prior[0]))


def log_marginal_likelihood(expert: GPExpert) -> float:
    y, w, L = expert.targets, expert.weight_vector, expert.chol_factor
    return float(
        -0.5 * y @ w - np.sum(np.log(np.diag(L))) - 0.5 * y.shape[0] * _LOG_2PI
    )


def lml_gradient(expert: GPExpert) -> np.ndarray:
    """Gradient of the log marginal likelihood w.r.t. the log-hyperparameters."""
    X, hyper, L, w = expert.inputs, expert.hyper, expert.chol_factor, expert.weight_vector
    m = X.shape[0]
    K_se = kernel_matrix(X, X, hyper)
    K_inv = sla.cho_solve((L, True), np.eye(m))
    W = np.outer(w, w) - K_inv
    WK = W * K_se
    grad = np.empty(hyper.dim + 2)
    grad[0] = 0.5 * np.sum(WK)
    for d, ell in enumerate(hyper.lengthscales):
        col = X[:, d] / ell
        sq = (col[:, None] - col[None, :]) ** 2
        grad[1 + d] = 0.5 * np.sum(WK * sq)
    grad[-1] = 0.5 * hyper.noise_variance * np.trace(W)
    return grad


def default_hyperparams(inputs, targets) -> Hyperparams:
    """Scale-aware starting point: lengthscales at the input stds, signal at the
    target variance and noise at a tenth of it."""
    X = _as_matrix(inputs)
    y = np.asarray(targets, dtype=float).reshape(-1)
    std = X.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    var = float(np.var(y)) if y.shape[0] > 1 else 0.0
    var = max(var, 1e-6)
    return Hyperparams(math.log(var), np.log(std), math.log(0.1 * var))


def _objective(theta, X, y):
    try:
        expert = gp_fit(X, y, Hyperparams.from_vector(theta))
    except (NumericalError, InputError):
        return np.inf, np.zeros_like(theta)
    return -log_marginal_likelihood(expert), -lml_gradient(expert)


def _lml_at(theta, X, y) -> float:
    value, _ = _objective(theta, X, y)
    return -value


def optimize_hyperparameters(
    inputs,
    targets,
    init: Hyperparams | None = None,
    config: OptimizerConfig | None = None,
    seed=None,
    return_info: bool = False,
):
    """Maximize the log marginal likelihood with L-BFGS-B and random restarts.

    The first run starts at ``init``; each restart perturbs ``init`` with
    Gaussian noise drawn from ``seed``. The best of all runs is returned and is
    never worse than ``init`` itself. If no run converges ``info.warning`` is
    set but the best point found is still returned.
    """
    X = _as_matrix(inputs)
    y = np.asarray(targets, dtype=float).reshape(-1)
    if y.shape[0] != X.shape[0]:
        raise InputError(f"{X.shape[0]} input rows but {y.shape[0]} targets")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise InputError("non-finite targets or inputs passed to the optimizer")
    if init is None:
        init = default_hyperparams(X, y)
    config = config or OptimizerConfig()
    rng = np.random.default_rng(seed)
    lo, hi = config.log_bounds
    theta0 = np.clip(init.to_vector(), lo, hi)
    bounds = [(lo, hi)] * theta0.shape[0]

    starts = [theta0]
    for _ in range(config.restarts):
        starts.append(
            np.clip(theta0 + config.restart_scale * rng.standard_normal(theta0.shape), lo, hi)
        )

    lml_init = _lml_at(init.to_vector(), X, y)
    best_theta, best_lml = init.to_vector(), lml_init
    converged = False
    messages = []
    for start in starts:
        res = so.minimize(
            _objective,
            start,
            args=(X, y),
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            options={"maxiter": config.max_iter, "gtol": config.gtol},
        )
        messages.append(str(res.message))
        if not np.all(np.isfinite(res.x)) or not np.isfinite(res.fun):
            continue
        lml = -float(res.fun)
        converged = converged or bool(res.success)
        if lml > best_lml:
            best_theta, best_lml = np.asarray(res.x, dtype=float), lml

    hyper = Hyperparams.from_vector(best_theta)
    if not return_info:
        return hyper
    info = OptimizationInfo(
        lml_init=lml_init,
        lml_final=best_lml,
        converged=converged,
        n_runs=len(starts),
        message="; ".join(messages),
    )
    return hyper, info
