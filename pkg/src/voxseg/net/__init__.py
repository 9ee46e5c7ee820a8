from .checkpoint import load_checkpoint, save_checkpoint
from .model import (
    NetConfig,
    backward,
    forward,
    init_params,
    loss,
    param_shapes,
    residual_unit_backward,
    residual_unit_forward,
    trainable_names,
)
from .train import AdamState, Hyper, optimizer_step, predict_volume, train

__all__ = [
    "NetConfig",
    "init_params",
    "param_shapes",
    "trainable_names",
    "forward",
    "backward",
    "loss",
    "residual_unit_forward",
    "residual_unit_backward",
    "optimizer_step",
    "AdamState",
    "Hyper",
    "train",
    "predict_volume",
    "save_checkpoint",
    "load_checkpoint",
]
