"""A small CNN engine with hand-written backward passes and Adam."""
from .adam import AdamConfig, NonFiniteGradient, adam_step
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import GradCheckReport, grad_check
from .layers import l2_loss
from .net import (
    N_OUTPUTS,
    PRESETS,
    ConvBlock,
    NetConfig,
    NetParams,
    get_preset,
    init_params,
    activation_pattern,
    net_backward,
    net_forward,
    predict,
)

__all__ = [
    "AdamConfig", "NonFiniteGradient", "adam_step", "CheckpointError", "load_checkpoint",
    "save_checkpoint", "GradCheckReport", "grad_check", "l2_loss", "N_OUTPUTS", "PRESETS",
    "ConvBlock", "NetConfig", "NetParams", "activation_pattern", "get_preset", "init_params", "net_backward",
    "net_forward", "predict",
]
