from .tensor import (
    ShapeError,
    Tensor,
    add,
    as_tensor,
    backward,
    clip,
    concat,
    exp,
    gather,
    grad,
    log,
    log_softmax,
    logsumexp,
    matmul,
    mul,
    reduce_sum,
    relu,
    reshape,
    segment_sum,
    sigmoid,
    softmax,
    sub,
    tanh,
)
from .layers import GruParams, MlpParams, gru_cell, mlp_forward, uniform_init
from .optim import AdamState, adam_step, apply_adam, clip_grad_norm, finite_diff_grad
from .checkpoint import load_arrays, save_arrays
