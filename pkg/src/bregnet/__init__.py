"""Bounded residual gradient networks: a small numpy deep-learning engine."""

from .autodiff import Tensor, backward, grad_check, no_grad, tensor_of
from .bypass import BypassKind, bypass_apply, bypass_eval, bypass_grad
from .data import Dataset, class_frequencies, load_fer2013_csv, load_predictions, synth_generate
from .errors import (
    BregError,
    BuildError,
    ConfigError,
    ContractError,
    DataFormatError,
    NumericalError,
    UndefinedMetricError,
)
from .metrics import (
    ConfusionMatrix,
    MetricReport,
    categorical_metrics,
    cc,
    ccc,
    rmse,
    sagr,
    skew_normalize,
)
from .model import (
    BREG_NET_39,
    DESK_DEFAULT,
    BlockConfig,
    Network,
    NetworkConfig,
    breg_block_forward,
    build_network,
    count_parameters,
    load_checkpoint,
    predict,
    save_checkpoint,
)
from .training import (
    OptimizerState,
    PenaltyMatrix,
    momentum_step,
    mse_loss,
    penalty_matrix,
    train,
    weighted_cross_entropy,
)

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "backward",
    "grad_check",
    "no_grad",
    "tensor_of",
    "BypassKind",
    "bypass_apply",
    "bypass_eval",
    "bypass_grad",
    "Dataset",
    "class_frequencies",
    "load_fer2013_csv",
    "load_predictions",
    "synth_generate",
    "BregError",
    "BuildError",
    "ConfigError",
    "ContractError",
    "DataFormatError",
    "NumericalError",
    "UndefinedMetricError",
    "ConfusionMatrix",
    "MetricReport",
    "categorical_metrics",
    "cc",
    "ccc",
    "rmse",
    "sagr",
    "skew_normalize",
    "BREG_NET_39",
    "DESK_DEFAULT",
    "BlockConfig",
    "Network",
    "NetworkConfig",
    "breg_block_forward",
    "build_network",
    "count_parameters",
    "load_checkpoint",
    "predict",
    "save_checkpoint",
    "OptimizerState",
    "PenaltyMatrix",
    "momentum_step",
    "mse_loss",
    "penalty_matrix",
    "train",
    "weighted_cross_entropy",
]
