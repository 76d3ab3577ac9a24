"""Multi-task learning for funnel-shaped (sequentially dependent) binary targets."""

from .data import CascadeDataset, DatasetSchema, SyntheticConfig, generate_cascade, load_csv_dataset
from .models import ModelConfig, forward, init_params, multitask_loss, predict
from .pim import ScheduleConfig, sampling_probability
from .training import TrainConfig, aggregate_runs, compute_auc, train_loop

__version__ = "0.1.0"

__all__ = [
    "CascadeDataset", "DatasetSchema", "SyntheticConfig", "generate_cascade", "load_csv_dataset",
    "ModelConfig", "forward", "init_params", "multitask_loss", "predict",
    "ScheduleConfig", "sampling_probability",
    "TrainConfig", "aggregate_runs", "compute_auc", "train_loop",
]
