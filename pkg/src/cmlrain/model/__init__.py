"""TabGRU and the five baseline architectures."""

from cmlrain.model.layers import (
    add_positional,
    attention_pool,
    bigru,
    encoder_layer,
    gru_direction,
    input_project,
    multi_head_attention,
    rnn_direction,
)
from cmlrain.model.network import encode, forward, predict
from cmlrain.model.params import (
    ModelParams,
    init_params,
    load_checkpoint,
    param_count,
    param_shapes,
    save_checkpoint,
)
from cmlrain.model.spec import KINDS, ModelSpec

__all__ = [
    "KINDS",
    "ModelParams",
    "ModelSpec",
    "add_positional",
    "attention_pool",
    "bigru",
    "encode",
    "encoder_layer",
    "forward",
    "gru_direction",
    "init_params",
    "input_project",
    "load_checkpoint",
    "multi_head_attention",
    "param_count",
    "param_shapes",
    "predict",
    "rnn_direction",
    "save_checkpoint",
]
