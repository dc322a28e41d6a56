"""Fast wind power forecasting: reversible LSH-attention transformer over variate tokens."""
from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("fastpowerformer")
except PackageNotFoundError:  # pragma: no cover
    __version__ = "0.0.0"

from ._kernels import BACKEND
from .data import DataError, SeriesFrame, clean, load_csv, make_windows, prepare, split_7_1_2, synth_wind
from .model import ConfigError, ModelConfig, ablation_grid, build_model, load_checkpoint, save_checkpoint
from .tensor import Tape, Tensor, backward, no_tape
from .train import TrainConfig, TrainReport, mae, mape, mse, persistence_baseline, train

__all__ = [
    "__version__", "BACKEND",
    "DataError", "SeriesFrame", "clean", "load_csv", "make_windows", "prepare", "split_7_1_2", "synth_wind",
    "ConfigError", "ModelConfig", "ablation_grid", "build_model", "load_checkpoint", "save_checkpoint",
    "Tape", "Tensor", "backward", "no_tape",
    "TrainConfig", "TrainReport", "mae", "mape", "mse", "persistence_baseline", "train",
]
