"""
KAN 畳み込みモジュール

カーネルの各 (出力チャネル, 入力チャネル, m, n) が独立した φ を持つ畳み込みです。
x_{o,i,j} = Σ_l Σ_m Σ_n φ_{o,l,m,n}(X_{l,i+m,j+n})

SiLU 特徴と基底特徴をチャネル方向に並べ、実効重みとの通常畳み込みとして評価します。
"""

import logging
from typing import Optional

import numpy as np

from src.kan.kan_layer import KanShapeError, init_spline_coeffs
from src.kan.spline import SplineGrid, bspline_basis_op
from src.tensor import ops
from src.tensor.layers import Module, Parameter
from src.tensor.tensor import Tensor, as_tensor

logger = logging.getLogger(__name__)


class KanConv2d(Module):
    """KANConv カーネル（c_in → c_out, k×k）"""

    def __init__(self, c_in: int, c_out: int, kernel_size: int = 3, padding: int = 0,
                 grid: Optional[SplineGrid] = None,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        if min(c_in, c_out, kernel_size) < 1:
            raise KanShapeError(f"カーネル設定が不正です: c_in={c_in} c_out={c_out} k={kernel_size}")
        rng = rng or np.random.default_rng(0)
        self.grid = grid or SplineGrid()
        self.c_in = c_in
        self.c_out = c_out
        self.kernel_size = kernel_size
        self.padding = padding
        shape = (c_out, c_in, kernel_size, kernel_size)
        self.w_b = Parameter(np.ones(shape))
        self.w_s = Parameter(np.ones(shape))
        self.coeffs = Parameter(init_spline_coeffs(shape, self.grid, rng))

    def forward(self, x: Tensor) -> Tensor:
        return kan_conv_forward(x, self, padding=self.padding)


def kan_conv_forward(x: Tensor, kernel: KanConv2d, padding: int = 0) -> Tensor:
    """
    KANConv の順伝播

    Args:
        x: (c_in, h, w) または (b, c_in, h, w)
        kernel: KANConv カーネル
        padding: ゼロ埋め幅（φ はゼロ埋め後の入力に適用）

    Returns:
        (.., c_out, h+2p−k+1, w+2p−k+1)
    """
    x = as_tensor(x)
    unbatched = x.ndim == 3
    if unbatched:
        x = ops.reshape(x, (1,) + x.shape)
    if x.ndim != 4 or x.shape[1] != kernel.c_in:
        raise KanShapeError(f"入力 {x.shape} が c_in={kernel.c_in} と一致しません")

    k = kernel.kernel_size
    if padding:
        x = ops.pad2d(x, padding)
    b, c_in, height, width = x.shape
    if height < k or width < k:
        raise KanShapeError(f"入力 {height}x{width} がカーネル {k}x{k} より小さいです")

    num_basis = kernel.grid.num_basis
    base = ops.conv2d(ops.silu(x), kernel.w_b)

    basis = bspline_basis_op(x, kernel.grid)
    basis = ops.reshape(ops.transpose(basis, (0, 1, 4, 2, 3)), (b, c_in * num_basis, height, width))
    scaled = ops.mul(ops.reshape(kernel.w_s, kernel.w_s.shape + (1,)), kernel.coeffs)
    spline_weight = ops.reshape(ops.transpose(scaled, (0, 1, 4, 2, 3)),
                                (kernel.c_out, c_in * num_basis, k, k))
    out = ops.add(base, ops.conv2d(basis, spline_weight))

    if unbatched:
        out = ops.reshape(out, out.shape[1:])
    return out
