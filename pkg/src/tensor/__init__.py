"""
テンソルコアモジュール

自動微分付きテンソル、標準レイヤー、AdamW 最適化を提供。
"""

from src.tensor.tensor import (
    GraphError,
    ShapeMismatchError,
    Tensor,
    TensorError,
    get_dtype,
    get_precision,
    no_grad,
    precision,
    set_precision,
)
from src.tensor.ops import forward_op
from src.tensor.layers import BatchNorm, Conv2d, ConvBlock, Linear, Module, Parameter
from src.tensor.optim import OptimizerError, OptimizerState, ScheduleError, adamw_step, lr_at

__all__ = [
    'Tensor',
    'TensorError',
    'ShapeMismatchError',
    'GraphError',
    'set_precision',
    'get_precision',
    'get_dtype',
    'precision',
    'no_grad',
    'forward_op',
    'Module',
    'Parameter',
    'Linear',
    'Conv2d',
    'BatchNorm',
    'ConvBlock',
    'OptimizerState',
    'OptimizerError',
    'ScheduleError',
    'adamw_step',
    'lr_at',
]
