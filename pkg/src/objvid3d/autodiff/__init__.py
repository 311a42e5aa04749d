"""Minimal reverse-mode autodiff on numpy arrays."""

from . import container
from .functional import (
    avg_pool2x2,
    conv2d,
    conv3d,
    conv_transpose2d,
    group_norm,
    layer_norm,
    upsample_bilinear,
    upsample_nearest,
)
from .gradcheck import max_rel_error, numeric_grad
from .optim import Adam, AdamState, adam_step
from .tensor import (
    GradTape,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    atan2,
    broadcast_to,
    clip,
    concat,
    cos,
    cumsum,
    default_dtype,
    div,
    elu,
    exp,
    get_default_dtype,
    getitem,
    grad_enabled,
    inject_fault,
    log,
    matmul,
    maximum,
    mean,
    minimum,
    mul,
    neg,
    no_grad,
    ones,
    power,
    relu,
    reshape,
    scatter_add,
    set_default_dtype,
    sigmoid,
    sin,
    softplus,
    sqrt,
    stack,
    sub,
    tabs,
    take,
    tanh,
    tensor,
    transpose,
    tsum,
    where,
    zeros,
)

abs = tabs  # noqa: A001
sum = tsum  # noqa: A001
