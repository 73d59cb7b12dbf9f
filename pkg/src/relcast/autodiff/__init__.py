from .functional import (
    feed_forward,
    layer_norm,
    linear,
    mse_loss,
    multi_head_attention,
    positional_encoding,
    relu,
    softmax,
)
from .nn import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, Parameter
from .optim import Adam
from .tensor import Tensor, as_tensor, concatenate, is_grad_enabled, matmul, no_grad, stack

__all__ = [
    "Adam", "FeedForward", "LayerNorm", "Linear", "Module", "MultiHeadAttention",
    "Parameter", "Tensor", "as_tensor", "concatenate", "feed_forward", "is_grad_enabled",
    "layer_norm", "linear", "matmul", "mse_loss", "multi_head_attention", "no_grad",
    "positional_encoding", "relu", "softmax", "stack",
]
