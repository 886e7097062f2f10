"""Dense tensors with reverse-mode differentiation."""
from .core import (
    GradTape,
    Tensor,
    as_tensor,
    default_dtype,
    get_default_dtype,
    is_grad_enabled,
    no_grad,
    ones,
    set_default_dtype,
    tensor,
    zeros,
)
from . import ops
from .ops import (
    abs,
    add,
    bce_with_logits,
    bilinear_sample,
    clip,
    concat,
    conv2d,
    count_matmul_macs,
    div,
    dropout,
    exp,
    gelu,
    getitem,
    group_norm,
    layer_norm,
    linear,
    log,
    log_sigmoid,
    log_softmax,
    matmul,
    maximum,
    mean,
    minimum,
    mul,
    neg,
    pad,
    power,
    relu,
    repeat_last,
    reshape,
    roll,
    sigmoid,
    sine_encoding_1d,
    sine_encoding_2d,
    softmax,
    sqrt,
    stack,
    sub,
    sum,
    swapaxes,
    take,
    tanh,
    transpose,
    upsample,
    where,
)
from .nn import MLP, Conv2d, Dropout, GroupNorm, LayerNorm, Linear, Module, Parameter
from .serialize import read_tensor, tensor_from_bytes, tensor_to_bytes, write_tensor
