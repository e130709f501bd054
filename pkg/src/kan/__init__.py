"""
KAN ブロックモジュール

Bスプライン基底、KAN 活性化関数、KAN 層、KAN 畳み込みを提供。
"""

from src.kan.spline import SplineGrid, SplineGridError, bspline_basis, bspline_basis_op
from src.kan.kan_layer import (
    KanActivation,
    KanLayer,
    KanShapeError,
    eval_phi,
    kan_layer_forward,
    param_count,
)
from src.kan.kan_conv import KanConv2d, kan_conv_forward

__all__ = [
    'SplineGrid',
    'SplineGridError',
    'bspline_basis',
    'bspline_basis_op',
    'KanActivation',
    'KanLayer',
    'KanShapeError',
    'eval_phi',
    'kan_layer_forward',
    'param_count',
    'KanConv2d',
    'kan_conv_forward',
]
