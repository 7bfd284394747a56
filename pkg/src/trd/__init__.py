"""Tuned reverse distillation for paired RGB + depth anomaly detection."""
from .config import RunConfig, from_dict, load_config
from .datasets import MultimodalSample, ToyConfig, generate_toy, load_dataset
from .estimator import TRDDetector
from .metrics import MetricsReport, auroc, average_precision, pro
from .model import TRDModel, build_model, load_checkpoint, save_checkpoint
from .trainer import evaluate, train

__version__ = "0.1.0"

__all__ = [
    "RunConfig", "from_dict", "load_config", "MultimodalSample", "ToyConfig", "generate_toy",
    "load_dataset", "TRDDetector", "MetricsReport", "auroc", "average_precision", "pro",
    "TRDModel", "build_model", "load_checkpoint", "save_checkpoint", "evaluate", "train",
]
