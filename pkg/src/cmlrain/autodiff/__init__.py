"""Minimal dense-tensor engine with reverse-mode automatic differentiation."""

from cmlrain.autodiff.gradcheck import GradCheckReport, grad_check, relative_error
from cmlrain.autodiff.rng import derive, make_rng, split
from cmlrain.autodiff.serialize import load_tensor, load_tensors, save_tensor, save_tensors
from cmlrain.autodiff.tensor import (
    Tensor,
    add,
    as_tensor,
    concat,
    div,
    dropout,
    exp,
    is_debug,
    layer_norm,
    log,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    power,
    recurrent_scan,
    relu,
    reshape,
    set_debug,
    sigmoid,
    softmax,
    softplus,
    stack,
    sub,
    take,
    tanh,
    transpose,
    tsum,
)

__all__ = [
    "GradCheckReport",
    "Tensor",
    "add",
    "as_tensor",
    "concat",
    "derive",
    "div",
    "dropout",
    "exp",
    "grad_check",
    "is_debug",
    "layer_norm",
    "load_tensor",
    "load_tensors",
    "log",
    "make_rng",
    "matmul",
    "mean",
    "mul",
    "neg",
    "no_grad",
    "power",
    "recurrent_scan",
    "relative_error",
    "relu",
    "reshape",
    "save_tensor",
    "save_tensors",
    "set_debug",
    "sigmoid",
    "softmax",
    "softplus",
    "split",
    "stack",
    "sub",
    "take",
    "tanh",
    "transpose",
    "tsum",
]
