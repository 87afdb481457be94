"""Generalized product of experts for independently trained Gaussian processes."""

from .errors import GPoEError, InputError, MetricError, NumericalError, OracleError, UsageError
from .experts import (
    BallTree,
    Ensemble,
    EnsembleConfig,
    Strategy,
    build_ball_tree,
    build_local,
    build_sod,
    build_tree,
    train_ensemble,
    tree_path_experts,
)
from .fusion import (
    ExpertPrediction,
    ExpertPredictions,
    FusedGaussian,
    Rule,
    combine_bagging,
    combine_gpoe,
    combine_moe,
    combine_poe,
    ensemble_predictions,
    entropy_change,
    fuse,
    gpoe_predict,
    normalize_weights,
)
from .gp_core import (
    GPExpert,
    Hyperparams,
    OptimizerConfig,
    PredictiveGaussian,
    gp_fit,
    gp_predict,
    kernel_value,
    lml_gradient,
    log_marginal_likelihood,
    optimize_hyperparameters,
    predict_many,
)
from .metrics import MetricReport, oracle_product_moments, rmse, smse, snlp

__version__ = "0.1.0"
