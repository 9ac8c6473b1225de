"""normkit: feature-map normalization kernels (bn/in/ln/gn/pn/bgn) with a
small CNN harness for batch-size robustness experiments."""

from .tensor import Tensor4, reduce_mean, reduce_var
from .normalizers import (
    KINDS,
    NonFiniteError,
    NormCache,
    NormKind,
    NormParams,
    RunningStats,
    StatPartition,
    build_partition,
    norm_backward,
    norm_forward,
    select_group_count,
    update_running,
)
from .gradcheck import GradReport, check_norm_layer, finite_diff
from .data import Dataset, class_balanced_subset, load_cifar10, make_synthetic
from .model import ConvNet, ConvNetSpec, load_checkpoint, save_checkpoint
from .train import TrainConfig, TrainHistory, evaluate, train
from .sweep import SweepSpec, run_sweep
from .report import emit_report

__version__ = "0.1.0"

__all__ = [
    "Tensor4", "reduce_mean", "reduce_var",
    "KINDS", "NonFiniteError", "NormCache", "NormKind", "NormParams",
    "RunningStats", "StatPartition", "build_partition", "norm_backward",
    "norm_forward", "select_group_count", "update_running",
    "GradReport", "check_norm_layer", "finite_diff",
    "Dataset", "class_balanced_subset", "load_cifar10", "make_synthetic",
    "ConvNet", "ConvNetSpec", "load_checkpoint", "save_checkpoint",
    "TrainConfig", "TrainHistory", "evaluate", "train",
    "SweepSpec", "run_sweep", "emit_report",
    "__version__",
]
