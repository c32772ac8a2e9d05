"""Neural encoder: parameters, forward/backward passes, gradient checking."""

from .encoder import (
    AttentionEdges,
    EncoderCache,
    EncoderError,
    Mode,
    attention_normalize,
    encoder_backward,
    encoder_forward,
    gatv2_layer_backward,
    gatv2_layer_forward,
    gatv2_scores,
    mlp_backward,
    mlp_forward,
)
from .gradcheck import GradCheckError, GradCheckReport, grad_check
from .params import (
    ArchConfig,
    EncoderParams,
    WeightsError,
    load_weights,
    save_weights,
)

__all__ = [
    "ArchConfig",
    "AttentionEdges",
    "EncoderCache",
    "EncoderError",
    "EncoderParams",
    "GradCheckError",
    "GradCheckReport",
    "Mode",
    "WeightsError",
    "attention_normalize",
    "encoder_backward",
    "encoder_forward",
    "gatv2_layer_backward",
    "gatv2_layer_forward",
    "gatv2_scores",
    "grad_check",
    "load_weights",
    "mlp_backward",
    "mlp_forward",
    "save_weights",
]
