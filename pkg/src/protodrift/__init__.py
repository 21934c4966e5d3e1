"""Exemplar-free class-incremental learning for multivariate time series.

Frozen backbone plus shared adapters tuned with feature distillation, a
two-stage drift compensation network that carries stored class prototypes
into each new feature space, and unified classifier retraining on features
sampled from the stored Gaussians.
"""

from .autograd import Tensor, grad, no_grad
from .data import (
    Task,
    TaskStream,
    TimeSeriesSample,
    load_dataset,
    make_synthetic,
    pca_reduce,
    save_dataset,
    split_tasks,
    SyntheticSpec,
)
from .drift import DriftCompensator, drift_loss, refine_compensator
from .errors import ContractError, DataFormatError, ShapeError, UsageError
from .estimators import ChannelPCA, ContinualTimeSeriesClassifier
from .metrics import (
    AccuracyMatrix,
    RunReport,
    avg_accuracy,
    avg_forgetting,
    avg_learning_accuracy,
)
from .model import (
    Adapter,
    CosineHead,
    FrozenBackbone,
    HeadBank,
    ModelState,
    build_model,
    cosine_logits,
    cosine_margin_loss,
    extract_features,
    feature_distillation_loss,
    predict,
    unified_ce_loss,
)
from .optim import SGD, SgdConfig, one_cycle_lr, sgd_step
from .prototypes import (
    ClassPrototype,
    PrototypeStore,
    compute_prototypes,
    prototype_distance,
    sample_features,
    update_with_compensator,
    update_with_sdc,
)
from .protocol import (
    METHODS,
    ModelConfig,
    RunLogger,
    RunState,
    StrategyConfig,
    TrainConfig,
    retrain_unified,
    run_stream,
    run_task,
    sweep,
)

__version__ = "0.1.0"

__all__ = [
    "Adapter",
    "AccuracyMatrix",
    "ChannelPCA",
    "ClassPrototype",
    "ContinualTimeSeriesClassifier",
    "ContractError",
    "CosineHead",
    "DataFormatError",
    "DriftCompensator",
    "FrozenBackbone",
    "HeadBank",
    "METHODS",
    "ModelConfig",
    "ModelState",
    "PrototypeStore",
    "RunLogger",
    "RunReport",
    "RunState",
    "SGD",
    "SgdConfig",
    "ShapeError",
    "StrategyConfig",
    "SyntheticSpec",
    "Task",
    "TaskStream",
    "Tensor",
    "TimeSeriesSample",
    "TrainConfig",
    "UsageError",
    "avg_accuracy",
    "avg_forgetting",
    "avg_learning_accuracy",
    "build_model",
    "compute_prototypes",
    "cosine_logits",
    "cosine_margin_loss",
    "drift_loss",
    "extract_features",
    "feature_distillation_loss",
    "grad",
    "load_dataset",
    "make_synthetic",
    "no_grad",
    "one_cycle_lr",
    "pca_reduce",
    "predict",
    "prototype_distance",
    "refine_compensator",
    "retrain_unified",
    "run_stream",
    "run_task",
    "sample_features",
    "save_dataset",
    "sgd_step",
    "split_tasks",
    "sweep",
    "unified_ce_loss",
    "update_with_compensator",
    "update_with_sdc",
]
