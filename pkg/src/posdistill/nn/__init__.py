from .gradcheck import grad_check
from .optim import AdamState, adam_step
from .params import (
    ParamStore,
    component_rng,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
    uniform_init,
)
from .tensor import (
    ContractError,
    Tensor,
    add,
    broadcast_to,
    clip,
    concat,
    dense,
    embedding,
    log,
    masked_softmax,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    sigmoid,
    sub,
    sum_,
)

__all__ = [
    "AdamState",
    "ContractError",
    "ParamStore",
    "Tensor",
    "adam_step",
    "add",
    "broadcast_to",
    "clip",
    "component_rng",
    "concat",
    "dense",
    "embedding",
    "grad_check",
    "load_checkpoint",
    "log",
    "masked_softmax",
    "matmul",
    "mean",
    "mul",
    "read_checkpoint",
    "relu",
    "reshape",
    "save_checkpoint",
    "sigmoid",
    "sub",
    "sum_",
    "uniform_init",
]
