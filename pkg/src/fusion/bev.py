"""
BEV 特徴モジュール

BEV 特徴マップの型と、平均プーリングによる縮小、系列への埋め込み、
最近傍アップサンプルを提供します。
"""

import logging
from dataclasses import dataclass
from typing import Tuple

from src.tensor import ops
from src.tensor.tensor import Tensor, as_tensor

logger = logging.getLogger(__name__)

BEV_SOURCES = ('lidar', 'camera', 'fused')


class BevShapeError(Exception):
    """BEV 特徴の形状エラー"""
    pass


@dataclass
class BevFeature:
    """BEV 特徴マップ（data は (b, c, h, w)）"""
    data: Tensor
    source: str = 'fused'

    def __post_init__(self):
        self.data = as_tensor(self.data)
        if self.data.ndim == 3:
            self.data = ops.reshape(self.data, (1,) + self.data.shape)
        if self.data.ndim != 4:
            raise BevShapeError(f"BEV 特徴は (b, c, h, w) が必要です: {self.data.shape}")
        if self.source not in BEV_SOURCES:
            raise BevShapeError(f"未知の BEV ソースです: {self.source}")

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[2]

    @property
    def width(self) -> int:
        return self.data.shape[3]


@dataclass
class BevEmbedding:
    """系列化した BEV 特徴（sequence は (b, S, c)、S = h_d·w_d）"""
    sequence: Tensor
    spatial: Tuple[int, int]

    def __post_init__(self):
        if self.sequence.ndim != 3:
            raise BevShapeError(f"埋め込みは (b, S, c) が必要です: {self.sequence.shape}")
        if self.sequence.shape[1] != self.spatial[0] * self.spatial[1]:
            raise BevShapeError(
                f"系列長 {self.sequence.shape[1]} が空間サイズ {self.spatial} と一致しません")

    @property
    def length(self) -> int:
        return self.sequence.shape[1]

    @property
    def channels(self) -> int:
        return self.sequence.shape[2]


def _as_map(f) -> Tensor:
    return f.data if isinstance(f, BevFeature) else as_tensor(f)


def downsample_bev(f, factor: int) -> Tensor:
    """
    平均プーリングで縮小

    Raises:
        BevShapeError: h, w が factor で割り切れない
    """
    x = _as_map(f)
    if factor < 1 or x.shape[2] % factor or x.shape[3] % factor:
        raise BevShapeError(f"BEV サイズ {x.shape[2]}x{x.shape[3]} が縮小率 {factor} で割り切れません")
    return ops.avg_pool2d(x, factor) if factor > 1 else x


def embed_bev(f) -> BevEmbedding:
    """(b, c, h, w) → (b, h·w, c)（行優先、チャネル末尾）"""
    x = _as_map(f)
    b, c, h, w = x.shape
    sequence = ops.reshape(ops.transpose(x, (0, 2, 3, 1)), (b, h * w, c))
    return BevEmbedding(sequence, (h, w))


def unflatten(embedding: BevEmbedding) -> Tensor:
    """embed_bev の逆変換"""
    h, w = embedding.spatial
    b, _, c = embedding.sequence.shape
    return ops.transpose(ops.reshape(embedding.sequence, (b, h, w, c)), (0, 3, 1, 2))


def upsample_bev(f, factor: int) -> Tensor:
    """最近傍アップサンプル（出力サイズは入力の factor 倍）"""
    x = _as_map(f)
    if factor < 1:
        raise BevShapeError(f"拡大率は1以上が必要です: {factor}")
    return ops.upsample_nearest(x, factor) if factor > 1 else x
