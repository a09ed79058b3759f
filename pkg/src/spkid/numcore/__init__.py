"""Minimal differentiable numerical core: tensors, operators, gradients, Adam."""

from spkid.numcore.gradcheck import grad_check, relative_error
from spkid.numcore.ops import (
    add,
    concat,
    conv1d,
    conv1d_time_major,
    cosine_similarity,
    div,
    exp,
    gelu,
    getitem,
    gumbel_softmax,
    layer_norm,
    linear,
    log,
    log_softmax,
    matmul,
    mean,
    mean_pool,
    mul,
    neg,
    relu,
    reshape,
    softmax,
    sqrt,
    square,
    stack,
    sub,
    swapaxes,
    take_rows,
    tanh,
    transpose,
    unbroadcast,
    weighted_cross_entropy,
)
from spkid.numcore.ops import sum as sum_  # noqa: F401
from spkid.numcore.optim import Adam, AdamState, adam_step
from spkid.numcore.tensor import (
    Tensor,
    as_tensor,
    backward,
    get_dtype,
    is_debug,
    precision,
    set_debug,
    set_dtype,
)
