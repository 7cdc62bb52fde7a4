"""Multi-modality multi-loss fusion network (MMML) on a minimal autodiff core."""

from .data import (
    Batch,
    ContextConfig,
    GeneratorConfig,
    UtteranceSample,
    assemble_context,
    generate,
    load_jsonl,
    pad_batch,
    split,
    write_jsonl,
)
from .errors import MmmlError
from .metrics import EvalPairs, MetricsReport, full_report
from .model import (
    MmmlModel,
    ModelConfig,
    Prediction,
    apply_restoration,
    forward,
    fusion_branch,
    init_model,
    load_model,
    predict_available,
    save_model,
)
from .tensor import Tensor, backward, finite_diff_check, no_grad
from .training import TrainConfig, TrainHistory, adamw_step, multi_loss, train

__version__ = "0.1.0"

__all__ = [
    "Batch",
    "ContextConfig",
    "EvalPairs",
    "GeneratorConfig",
    "MetricsReport",
    "MmmlError",
    "MmmlModel",
    "ModelConfig",
    "Prediction",
    "Tensor",
    "TrainConfig",
    "TrainHistory",
    "UtteranceSample",
    "adamw_step",
    "apply_restoration",
    "assemble_context",
    "backward",
    "finite_diff_check",
    "forward",
    "full_report",
    "fusion_branch",
    "generate",
    "init_model",
    "load_jsonl",
    "load_model",
    "multi_loss",
    "no_grad",
    "pad_batch",
    "predict_available",
    "save_model",
    "split",
    "train",
    "write_jsonl",
]
