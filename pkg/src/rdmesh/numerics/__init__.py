from . import tensor as ops
from .gradcheck import NonDeterministicLoss, check_gradients
from .nn import (
    MLP,
    Attention,
    LayerNorm,
    Linear,
    Module,
    Parameter,
    apply_map,
    attention_map,
    sinusoidal_embedding,
)
from .tensor import Tensor, layer_norm, softmax, softmax_rows

__all__ = [
    "Attention",
    "LayerNorm",
    "Linear",
    "MLP",
    "Module",
    "NonDeterministicLoss",
    "Parameter",
    "Tensor",
    "apply_map",
    "attention_map",
    "check_gradients",
    "layer_norm",
    "ops",
    "sinusoidal_embedding",
    "softmax",
    "softmax_rows",
]
