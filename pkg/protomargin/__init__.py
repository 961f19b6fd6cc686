"""
protomargin - Interpretable prototype-based mass-margin classification.

A desk-scale case-based reasoning pipeline: a synthetic lesion corpus with coarse and
fine relevance masks, a prototype network trained with a fine-annotation loss on a
small reverse-mode autodiff engine, evaluation metrics and explanation reports.
"""

# ============================================================================
# Autodiff Core
# ============================================================================
from protomargin.tensor import ShapeError, Tape, Tensor, no_grad
from protomargin.gradcheck import GradCheckConfig, GradCheckReport, grad_check
from protomargin.optim import SGD, Adam

# ============================================================================
# Data
# ============================================================================
from protomargin.synthgen import (
    LesionSpec,
    MarginClass,
    SynthConfig,
    SynthSample,
    augment,
    generate_corpus,
    generate_sample,
    inject_confounder,
)
from protomargin.dataset import (
    DatasetError,
    Manifest,
    read_dataset,
    read_training_samples,
    write_dataset,
)

# ============================================================================
# Model & Training
# ============================================================================
from protomargin.protonet import (
    ModelParams,
    ProtoNet,
    ProtoNetConfig,
    compute_pam,
    init_params,
    malignancy_probability,
)
from protomargin.losses import (
    cluster_cost,
    fine_annotation_loss,
    separation_cost,
    total_objective,
)
from protomargin.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from protomargin.trainer import TrainConfig, Trainer, TrainingDivergedError

# ============================================================================
# Evaluation & Explanation
# ============================================================================
from protomargin.metrics import (
    EvalRecord,
    MetricUndefinedError,
    activation_precision,
    auroc,
    bootstrap_ci,
    cohens_kappa,
    threshold_top,
)
from protomargin.evaluation import EvalConfig, evaluate
from protomargin.explain import (
    CaseExplanation,
    ExplainConfig,
    case_report,
    class_activation_visualization,
    explain_case,
    prototype_gallery,
    render_overlay,
)
from protomargin.config import RunConfig, resolve_config

__version__ = "0.1.0"
__license__ = "MIT"

__all__ = [
    # Autodiff
    "Tensor",
    "Tape",
    "ShapeError",
    "no_grad",
    "grad_check",
    "GradCheckConfig",
    "GradCheckReport",
    "Adam",
    "SGD",

    # Data
    "MarginClass",
    "LesionSpec",
    "SynthConfig",
    "SynthSample",
    "generate_sample",
    "generate_corpus",
    "inject_confounder",
    "augment",
    "Manifest",
    "DatasetError",
    "write_dataset",
    "read_dataset",
    "read_training_samples",

    # Model & training
    "ProtoNet",
    "ProtoNetConfig",
    "ModelParams",
    "init_params",
    "compute_pam",
    "malignancy_probability",
    "cluster_cost",
    "separation_cost",
    "fine_annotation_loss",
    "total_objective",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
    "Trainer",
    "TrainConfig",
    "TrainingDivergedError",

    # Evaluation & explanation
    "EvalRecord",
    "MetricUndefinedError",
    "threshold_top",
    "activation_precision",
    "auroc",
    "cohens_kappa",
    "bootstrap_ci",
    "EvalConfig",
    "evaluate",
    "ExplainConfig",
    "CaseExplanation",
    "explain_case",
    "class_activation_visualization",
    "render_overlay",
    "case_report",
    "prototype_gallery",
    "RunConfig",
    "resolve_config",
]
