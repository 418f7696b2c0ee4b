from . import functional
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .functional import (
    concat,
    cross_entropy,
    gelu,
    layer_norm,
    linear,
    log_softmax,
    matmul,
    softmax,
)
from .gradcheck import ContractError, grad_check
from .nn import MLP, LayerNorm, Linear, Module, Parameter, mlp_block
from .rng import Rng
from .tensor import (
    NumericError,
    ShapeError,
    Tensor,
    backward_fault,
    get_dtype,
    no_grad,
    precision,
    set_precision,
)

__all__ = [
    "CheckpointError", "ContractError", "LayerNorm", "Linear", "MLP", "Module",
    "NumericError", "Parameter", "Rng", "ShapeError", "Tensor", "backward_fault",
    "concat", "cross_entropy", "functional", "gelu", "get_dtype", "grad_check",
    "layer_norm", "linear", "load_checkpoint", "log_softmax", "matmul", "mlp_block",
    "no_grad", "precision", "save_checkpoint", "set_precision", "softmax",
]
