"""No-reference video quality assessment with content-aware features and
hysteresis temporal pooling."""

__version__ = "0.1.0"

from .metrics import EvalReport, evaluate, fit_logistic, krocc, plcc_rmse, rmse, srocc, weighted_overall
from .model import ModelConfig, QualityModel, load_checkpoint, save_checkpoint
from .pooling import PoolingConfig, PooledQuality, average_pool, hysteresis_pool, pool
from .training import TrainConfig, run_protocol, train_one_run

__all__ = [
    "EvalReport", "ModelConfig", "PoolingConfig", "PooledQuality", "QualityModel", "TrainConfig",
    "average_pool", "evaluate", "fit_logistic", "hysteresis_pool", "krocc", "load_checkpoint",
    "plcc_rmse", "pool", "rmse", "run_protocol", "save_checkpoint", "srocc", "train_one_run",
    "weighted_overall",
]
