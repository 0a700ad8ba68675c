from .nn import (
    attention_params,
    bilstm,
    bilstm_params,
    corrupt_gradient,
    init_uniform,
    lstm_cell,
    lstm_params,
    lstm_sequence,
    self_attention,
)
from .optim import Adam, AdamState, ConfigError, GradCheckFailure, GradCheckReport, adam_step, grad_check
from .tensor import (
    ContractError,
    DimensionError,
    Tape,
    Tensor,
    backward,
    clamp_min,
    concat,
    cosine_matrix,
    cosine_sim,
    default_dtype,
    embedding,
    exp,
    get_default_dtype,
    log,
    log_softmax,
    matmul,
    normalize,
    set_default_dtype,
    sigmoid,
    softmax,
    stack,
    tanh,
    transpose,
    getitem,
    reshape,
    tsum,
    mean,
    add,
    mul,
    sub,
    div,
    sqrt,
)
