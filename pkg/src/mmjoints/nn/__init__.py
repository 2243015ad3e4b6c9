from .checkpoint import (
    CheckpointError,
    atomic_write_text,
    decode_array,
    decode_state,
    dumps_checkpoint,
    encode_array,
    encode_state,
    load_checkpoint,
    loads_checkpoint,
    save_checkpoint,
)
from .layers import (
    MLP,
    MissingCacheError,
    NetworkSpec,
    SetEncoder,
    backward,
    forward,
    init_params,
    merge_grads,
    sigmoid,
    sigmoid_backward,
    softmax,
    softmax_backward,
    softplus,
    softplus_backward,
)
from .losses import LossBundle, LossTermError, cross_entropy, huber, kl_to_standard_normal, mine_semihard, mse, opl, triplet
from .optim import Adam, AdamState, BestSnapshot, adam_step, holdout_split, minibatches

__all__ = [
    "CheckpointError",
    "atomic_write_text",
    "decode_array",
    "decode_state",
    "dumps_checkpoint",
    "encode_array",
    "encode_state",
    "load_checkpoint",
    "loads_checkpoint",
    "save_checkpoint",
    "MLP",
    "Adam",
    "AdamState",
    "BestSnapshot",
    "LossBundle",
    "LossTermError",
    "MissingCacheError",
    "NetworkSpec",
    "SetEncoder",
    "adam_step",
    "backward",
    "cross_entropy",
    "forward",
    "holdout_split",
    "huber",
    "init_params",
    "kl_to_standard_normal",
    "merge_grads",
    "mine_semihard",
    "minibatches",
    "mse",
    "opl",
    "sigmoid",
    "sigmoid_backward",
    "softmax",
    "softmax_backward",
    "softplus",
    "softplus_backward",
    "triplet",
]
