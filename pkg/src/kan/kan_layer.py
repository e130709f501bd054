"""
KAN レイヤーモジュール

各エッジに φ(x) = w_b·SiLU(x) + w_s·Σ c_i·B_i(clamp(x)) を持つ KAN 層を提供します。
出力 q は入力 p についての φ_{q,p}(x_p) の総和です。
"""

import logging
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from src.kan.spline import SplineGrid, bspline_basis_op
from src.tensor import ops
from src.tensor.layers import Module, Parameter
from src.tensor.tensor import Tensor, as_tensor

logger = logging.getLogger(__name__)

Number = Union[float, Tensor]


class KanShapeError(Exception):
    """KAN ブロックの形状エラー"""
    pass


@dataclass
class KanActivation:
    """単一エッジの活性化関数 φ（Tensor または実数を保持）"""
    w_b: Number
    w_s: Number
    coeffs: Union[np.ndarray, Tensor]
    grid: SplineGrid

    def __post_init__(self):
        length = np.shape(self.coeffs.data if isinstance(self.coeffs, Tensor) else self.coeffs)[-1]
        if length != self.grid.num_basis:
            raise KanShapeError(f"係数の長さ {length} が基底数 {self.grid.num_basis} と一致しません")


def eval_phi(x, act: KanActivation) -> Tensor:
    """
    φ(x) を評価

    x, w_b, w_s, coeffs のいずれに関しても微分可能です。
    SiLU 項は生の x、スプライン項はクランプ後の x で評価します。
    """
    x = as_tensor(x)
    basis = bspline_basis_op(x, act.grid)
    spline = ops.reduce_sum(ops.mul(basis, as_tensor(act.coeffs)), axis=-1)
    return ops.add(ops.mul(as_tensor(act.w_b), ops.silu(x)),
                   ops.mul(as_tensor(act.w_s), spline))


def init_spline_coeffs(shape, grid: SplineGrid, rng: np.random.Generator) -> np.ndarray:
    """係数の初期値 N(0, 0.1/√(G+k))"""
    return rng.normal(0.0, 0.1 / np.sqrt(grid.num_basis), size=tuple(shape) + (grid.num_basis,))


class KanLayer(Module):
    """
    KAN 層（n_in → n_out）

    パラメータは w_b, w_s (n_out × n_in) と coeffs (n_out × n_in × (G+k))。
    w_b = w_s = 1 で初期化し、SiLU に近い状態から学習を始めます。
    """

    def __init__(self, n_in: int, n_out: int, grid: Optional[SplineGrid] = None,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        if n_in < 1 or n_out < 1:
            raise KanShapeError(f"入出力次元は正である必要があります: {n_in}→{n_out}")
        rng = rng or np.random.default_rng(0)
        self.grid = grid or SplineGrid()
        self.n_in = n_in
        self.n_out = n_out
        self.w_b = Parameter(np.ones((n_out, n_in)))
        self.w_s = Parameter(np.ones((n_out, n_in)))
        self.coeffs = Parameter(init_spline_coeffs((n_out, n_in), self.grid, rng))

    def activation(self, q: int, p: int) -> KanActivation:
        """エッジ (q, p) の活性化関数を取り出す（値のコピー）"""
        return KanActivation(
            w_b=float(self.w_b.data[q, p]),
            w_s=float(self.w_s.data[q, p]),
            coeffs=self.coeffs.data[q, p].copy(),
            grid=self.grid,
        )

    def forward(self, z: Tensor) -> Tensor:
        return kan_layer_forward(z, self)


def kan_layer_forward(z: Tensor, params: KanLayer) -> Tensor:
    """
    KAN 層の順伝播 out[b, q] = Σ_p φ_{q,p}(z[b, p])

    Args:
        z: (..., n_in)
        params: KAN 層

    Returns:
        (..., n_out)
    """
    z = as_tensor(z)
    if z.ndim < 1 or z.shape[-1] != params.n_in:
        raise KanShapeError(f"入力次元 {z.shape} が n_in={params.n_in} と一致しません")

    lead = z.shape[:-1]
    flat = ops.reshape(z, (-1, params.n_in))
    num_basis = params.grid.num_basis

    base = ops.matmul(ops.silu(flat), ops.transpose(params.w_b))
    basis = ops.reshape(bspline_basis_op(flat, params.grid), (-1, params.n_in * num_basis))
    scaled = ops.mul(ops.reshape(params.w_s, (params.n_out, params.n_in, 1)), params.coeffs)
    spline = ops.matmul(basis, ops.transpose(ops.reshape(scaled, (params.n_out, params.n_in * num_basis))))

    return ops.reshape(ops.add(base, spline), lead + (params.n_out,))


def param_count(params) -> int:
    """
    学習可能スカラー数 edges·(2 + G + k)

    Args:
        params: KanLayer または KanConv2d
    """
    if hasattr(params, 'kernel_size'):
        edges = params.c_out * params.c_in * params.kernel_size * params.kernel_size
    else:
        edges = params.n_out * params.n_in
    return int(edges * (2 + params.grid.num_basis))
