"""
Bスプライン基底モジュール

一様ノット（両端を spline_order 個拡張）上の Cox–de Boor 漸化式をベクトル化して評価します。
基底関数の x に関する微分も同時に求め、自動微分の演算として登録します。
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from src.tensor.ops import register_op
from src.tensor.tensor import Tensor, as_tensor, make_result

logger = logging.getLogger(__name__)


class SplineGridError(Exception):
    """スプライングリッドのエラー"""
    pass


@dataclass(frozen=True)
class SplineGrid:
    """
    スプライングリッド

    knots を省略すると [lower, upper] を grid_size 等分し、
    両端に spline_order 個ずつ拡張した一様ノットを使います。
    """
    lower: float = -1.0
    upper: float = 1.0
    grid_size: int = 5
    spline_order: int = 3
    knots: Optional[Tuple[float, ...]] = field(default=None)

    def __post_init__(self):
        if self.grid_size < 1:
            raise SplineGridError(f"グリッド数は1以上である必要があります: {self.grid_size}")
        if self.spline_order < 0:
            raise SplineGridError(f"スプライン次数は0以上である必要があります: {self.spline_order}")
        if not self.lower < self.upper:
            raise SplineGridError(f"定義域が不正です: [{self.lower}, {self.upper}]")

        if self.knots is None:
            h = (self.upper - self.lower) / self.grid_size
            k = self.spline_order
            generated = self.lower + np.arange(-k, self.grid_size + k + 1) * h
            object.__setattr__(self, 'knots', tuple(float(t) for t in generated))
            return

        knots = np.asarray(self.knots, dtype=np.float64)
        expected = self.grid_size + 2 * self.spline_order + 1
        if knots.shape != (expected,):
            raise SplineGridError(f"ノット数が不正です: {knots.size}（期待値 {expected}）")
        if np.any(np.diff(knots) < 0):
            raise SplineGridError("ノットが単調非減少ではありません")
        k = self.spline_order
        if not (np.isclose(knots[k], self.lower) and np.isclose(knots[-k - 1], self.upper)):
            raise SplineGridError("ノットの内部区間が定義域と一致しません")

    @property
    def num_basis(self) -> int:
        """基底関数の数（G + k）"""
        return self.grid_size + self.spline_order

    @property
    def knot_array(self) -> np.ndarray:
        return np.asarray(self.knots, dtype=np.float64)

    def to_dict(self) -> dict:
        return {
            'lower': float(self.lower),
            'upper': float(self.upper),
            'grid_size': int(self.grid_size),
            'spline_order': int(self.spline_order),
        }


def _safe_ratio(numerator: np.ndarray, denominator: np.ndarray) -> np.ndarray:
    with np.errstate(divide='ignore', invalid='ignore'):
        ratio = numerator / denominator
    return np.where(denominator == 0, 0.0, ratio)


def _order_zero(x: np.ndarray, knots: np.ndarray, spline_order: int) -> np.ndarray:
    bases = ((x >= knots[:-1]) & (x < knots[1:])).astype(np.float64)
    # 上端は最後の内部区間に含める
    last = knots.size - spline_order - 2
    at_upper = (x[..., 0] == knots[last + 1])
    if np.any(at_upper):
        bases[at_upper] = 0.0
        bases[at_upper, last] = 1.0
    return bases


def _raise_order(x: np.ndarray, knots: np.ndarray, bases: np.ndarray, d: int) -> np.ndarray:
    left = _safe_ratio(x - knots[:-(d + 1)], knots[d:-1] - knots[:-(d + 1)]) * bases[..., :-1]
    right = _safe_ratio(knots[d + 1:] - x, knots[d + 1:] - knots[1:-d]) * bases[..., 1:]
    return left + right


def basis_with_derivative(x: np.ndarray, grid: SplineGrid) -> Tuple[np.ndarray, np.ndarray]:
    """
    基底値と x に関する微分を計算

    定義域外の x は境界へクランプして評価し、その位置の微分は 0 とします。

    Args:
        x: 任意形状の配列
        grid: スプライングリッド

    Returns:
        (基底値, 微分)。形状はどちらも x.shape + (G + k,)
    """
    knots = grid.knot_array
    k = grid.spline_order
    raw = np.asarray(x, dtype=np.float64)
    clamped = np.clip(raw, grid.lower, grid.upper)[..., None]

    bases = _order_zero(clamped, knots, k)
    for d in range(1, k):
        bases = _raise_order(clamped, knots, bases, d)

    if k == 0:
        values = bases
        derivative = np.zeros_like(values)
    else:
        lower_order = bases
        values = _raise_order(clamped, knots, lower_order, k)
        left = _safe_ratio(lower_order[..., :-1], knots[k:-1] - knots[:-(k + 1)])
        right = _safe_ratio(lower_order[..., 1:], knots[k + 1:] - knots[1:-k])
        derivative = k * (left - right)

    outside = (raw < grid.lower) | (raw > grid.upper)
    derivative = np.where(outside[..., None], 0.0, derivative)
    return values, derivative


def bspline_basis(x, grid: SplineGrid) -> np.ndarray:
    """
    Bスプライン基底値

    Args:
        x: スカラーまたは配列
        grid: スプライングリッド

    Returns:
        x.shape + (G + k,) の配列。定義域内では和が 1 になる
    """
    values, _ = basis_with_derivative(x, grid)
    return values


@register_op('bspline_basis')
def bspline_basis_op(x, grid: SplineGrid) -> Tensor:
    """Bスプライン基底の微分可能版（x.shape + (G + k,)）"""
    x = as_tensor(x)
    values, derivative = basis_with_derivative(x.data, grid)
    values = values.astype(x.dtype)
    derivative = derivative.astype(x.dtype)

    def backward(g: np.ndarray):
        return ((g * derivative).sum(axis=-1),)

    return make_result('bspline_basis', values, (x,), backward)
