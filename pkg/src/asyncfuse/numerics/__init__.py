from .checkpoint import config_hash, load_checkpoint, save_checkpoint
from .nn import LayerNorm, Linear, Module, parameter, trunc_normal
from .optim import AdamHyper, AdamState, ParameterStore, adam_step
from .tensor import (
    Tensor,
    add,
    attention,
    as_tensor,
    concat,
    div,
    dropout,
    exp,
    expand,
    gelu,
    get_default_dtype,
    getitem,
    layer_norm,
    linear,
    log,
    matmul,
    mean,
    mul,
    no_grad,
    power,
    relu,
    reshape,
    set_default_dtype,
    sigmoid,
    softmax,
    sqrt,
    sub,
    tanh,
    transpose,
    tsum,
)

softmax_lastdim = softmax


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    loss.backward(retain_graph=retain_graph)
