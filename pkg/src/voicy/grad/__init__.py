"""Minimal reverse-mode differentiation for the layer set the model needs."""

from .engine import GradError, Parameters, Tape, Var
from .gradcheck import (
    GradCheckReport,
    check_layer_kinds,
    gradient_check,
    gradient_check_report,
    graph_loss,
    layer_kind_cases,
)
from .layers import (
    LAYER_KINDS,
    Activation,
    BiRecurrent,
    Concat,
    Conv1d,
    Downsample,
    GRU,
    LSTM,
    LayerSpec,
    Linear,
    MeanPool,
    Upsample,
    apply_layer,
    backward,
    forward,
    init_params,
    run_graph,
)
from .optim import AdamState, DivergedError, clip_by_global_norm, init_adam, optimizer_step

__all__ = [
    "LAYER_KINDS",
    "Activation",
    "AdamState",
    "BiRecurrent",
    "Concat",
    "Conv1d",
    "DivergedError",
    "Downsample",
    "GRU",
    "GradCheckReport",
    "GradError",
    "LSTM",
    "LayerSpec",
    "Linear",
    "MeanPool",
    "Parameters",
    "Tape",
    "Upsample",
    "Var",
    "apply_layer",
    "backward",
    "check_layer_kinds",
    "clip_by_global_norm",
    "forward",
    "gradient_check",
    "gradient_check_report",
    "graph_loss",
    "init_adam",
    "init_params",
    "layer_kind_cases",
    "optimizer_step",
    "run_graph",
]
