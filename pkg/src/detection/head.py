"""
検出ヘッドモジュール

融合 BEV 特徴から、クラス別ヒートマップと8チャネルの回帰マップを出力します。
各ブランチは 3×3 畳み込み → ReLU → 1×1 畳み込み（バイアスあり）です。
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from src.tensor import ops
from src.tensor.layers import Conv2d, Module
from src.tensor.tensor import Tensor, as_tensor

logger = logging.getLogger(__name__)

# dx, dy, z, log w, log l, log h, sin yaw, cos yaw
REGRESSION_CHANNELS = 8


class HeadShapeError(Exception):
    """検出ヘッドの入出力形状エラー"""
    pass


@dataclass
class HeadOutput:
    """ヘッド出力（heatmap はシグモイド後の (b, C, h, w)、regression は (b, 8, h, w)）"""
    heatmap: Tensor
    regression: Tensor

    def __post_init__(self):
        self.heatmap = as_tensor(self.heatmap)
        self.regression = as_tensor(self.regression)
        if self.heatmap.ndim == 3:
            self.heatmap = ops.reshape(self.heatmap, (1,) + self.heatmap.shape)
        if self.regression.ndim == 3:
            self.regression = ops.reshape(self.regression, (1,) + self.regression.shape)
        if self.regression.shape[1] != REGRESSION_CHANNELS:
            raise HeadShapeError(f"回帰マップは {REGRESSION_CHANNELS} チャネルが必要です: {self.regression.shape}")
        if (self.heatmap.shape[0], self.heatmap.shape[2:]) != (self.regression.shape[0],
                                                                self.regression.shape[2:]):
            raise HeadShapeError(f"ヒートマップ {self.heatmap.shape} と回帰 {self.regression.shape} が一致しません")

    @property
    def num_classes(self) -> int:
        return self.heatmap.shape[1]

    @property
    def batch_size(self) -> int:
        return self.heatmap.shape[0]

    def sample(self, index: int) -> 'HeadOutput':
        """バッチの1サンプル分（勾配なし）"""
        return HeadOutput(Tensor(self.heatmap.data[index:index + 1]),
                          Tensor(self.regression.data[index:index + 1]))


def _branch(c_in: int, hidden: int, c_out: int, rng: np.random.Generator):
    return (Conv2d(c_in, hidden, 3, padding=1, bias=True, rng=rng),
            Conv2d(hidden, c_out, 1, bias=True, rng=rng))


class DetectionHead(Module):
    """CenterNet 形式の2ブランチ検出ヘッド"""

    HEAT_PRIOR = 0.1

    def __init__(self, in_channels: int = 64, num_classes: int = 3, hidden: int = 32,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.heat_hidden, self.heat_out = _branch(in_channels, hidden, num_classes, rng)
        self.reg_hidden, self.reg_out = _branch(in_channels, hidden, REGRESSION_CHANNELS, rng)
        self.heat_out.bias.data[:] = -math.log((1 - self.HEAT_PRIOR) / self.HEAT_PRIOR)
        self.reg_out.weight.data *= 0.01

    def forward(self, fused: Tensor) -> HeadOutput:
        return head_forward(fused, self)


def head_forward(fused: Tensor, head: DetectionHead) -> HeadOutput:
    """
    融合特徴 (b, c, h, w) → HeadOutput

    Raises:
        HeadShapeError: チャネル数の不一致
    """
    fused = as_tensor(fused)
    if fused.ndim == 3:
        fused = ops.reshape(fused, (1,) + fused.shape)
    if fused.ndim != 4 or fused.shape[1] != head.in_channels:
        raise HeadShapeError(f"入力 {fused.shape} のチャネル数が {head.in_channels} と一致しません")
    heat = ops.sigmoid(head.heat_out(ops.relu(head.heat_hidden(fused))))
    reg = head.reg_out(ops.relu(head.reg_hidden(fused)))
    return HeadOutput(heat, reg)
