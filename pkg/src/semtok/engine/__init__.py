from .tensor import (
    Tensor,
    Parameter,
    no_grad,
    grad_enabled,
    zeros,
    ones,
    add,
    mul,
    pow,
    matmul,
    getitem,
    reshape,
    transpose,
    concat,
    stack,
    sum_,
    mean,
    exp,
    log,
    sqrt,
    tanh,
    sigmoid,
    relu,
    gelu,
    maximum,
    where_const,
    masked_softmax,
    log_softmax,
    layer_norm,
)
from .functional import masked_attention, attention_weights, softmax_rows
from .gradcheck import fd_gradient, rel_error, grad_check
from .container import (
    save_tensor,
    load_tensor,
    save_bundle,
    load_bundle,
    write_tensor,
    read_tensor,
)
from .optim import Adam, SGD
