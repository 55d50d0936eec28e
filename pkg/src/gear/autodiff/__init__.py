from gear.autodiff.gradcheck import finite_diff_check, param_gradcheck
from gear.autodiff.optim import Adam, AdamState, adam_step
from gear.autodiff.tensor import (
    Node,
    Tape,
    Tensor,
    abs_,
    add,
    backward,
    concat_last,
    detach,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    row_softmax,
    softplus,
    stack,
    stop_gradient,
    sub,
    sum_,
    take_rows,
    tensor,
    transpose,
)

__all__ = [
    "Adam", "AdamState", "Node", "Tape", "Tensor", "abs_", "adam_step", "add", "backward",
    "concat_last", "detach", "finite_diff_check", "matmul", "mean", "mul", "param_gradcheck",
    "relu", "reshape", "row_softmax", "softplus", "stack", "stop_gradient", "sub", "sum_",
    "take_rows", "tensor", "transpose",
]
