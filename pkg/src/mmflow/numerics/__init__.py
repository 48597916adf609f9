from mmflow.numerics import blob
from mmflow.numerics.gradcheck import grad_check, grad_check_params
from mmflow.numerics.rng import Rng
from mmflow.numerics.autodiff import (
    Tape,
    Tensor,
    active_tape,
    add,
    backward,
    concat,
    embedding_lookup,
    layer_norm,
    matmul,
    mean,
    mul,
    reshape,
    rotary_rotate_pairs,
    scalar_mul,
    silu,
    slice,
    softmax,
    sqrt,
    square,
    sub,
    sum,
    tensor,
    transpose,
)

__all__ = [
    "Rng", "Tape", "Tensor", "active_tape", "add", "backward", "blob", "concat",
    "embedding_lookup", "grad_check", "grad_check_params", "layer_norm", "matmul",
    "mean", "mul", "reshape", "rotary_rotate_pairs", "scalar_mul", "silu", "slice",
    "softmax", "sqrt", "square", "sub", "sum", "tensor", "transpose",
]
