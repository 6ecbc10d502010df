from .tensor import (Tensor, Parameter, NumericError, ShapeError, no_grad,
                     grad_enabled, as_tensor, concat, layer_norm)
from .layers import (ParameterSet, Linear, MLP, LayerNorm, CrossAttention,
                     timestep_embedding)
from .optim import ScheduleConfig, lr_at, AdamW
from .checkpoint import save_checkpoint, load_checkpoint, CheckpointError

__all__ = [
    "Tensor", "Parameter", "NumericError", "ShapeError", "no_grad",
    "grad_enabled", "as_tensor", "concat", "layer_norm",
    "ParameterSet", "Linear", "MLP", "LayerNorm", "CrossAttention",
    "timestep_embedding",
    "ScheduleConfig", "lr_at", "AdamW",
    "save_checkpoint", "load_checkpoint", "CheckpointError",
]
