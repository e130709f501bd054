"""
カメラ-LiDAR クロスアテンションモジュール

LiDAR 特徴をクエリ、カメラ特徴をキー・バリューとするマルチヘッドクロスアテンションと、
縮小 → 埋め込み → アテンション → 復元 → 拡大をまとめた CrossAttn ブロックを提供します。
位置エンコーディングは持ちません。
"""

import logging
import math
from typing import List, Optional, Tuple

import numpy as np

from src.fusion.bev import BevEmbedding, downsample_bev, embed_bev, unflatten, upsample_bev
from src.tensor import ops
from src.tensor.layers import Module, Parameter
from src.tensor.tensor import Tensor, as_tensor

logger = logging.getLogger(__name__)


class AttentionError(Exception):
    """アテンション設定・入力のエラー"""
    pass


class MultiHeadCrossAttention(Module):
    """
    マルチヘッドクロスアテンションのパラメータ

    wq, wk, wv: (n, d_k, c)、wo: (c, n·d_k)。いずれもバイアスなし。
    """

    def __init__(self, channels: int, heads: int, rng: Optional[np.random.Generator] = None):
        super().__init__()
        if heads < 1 or channels % heads:
            raise AttentionError(f"ヘッド数 {heads} がチャネル数 {channels} を割り切りません")
        rng = rng or np.random.default_rng(0)
        self.channels = channels
        self.heads = heads
        self.d_k = channels // heads
        scale = 1.0 / math.sqrt(channels)
        shape = (heads, self.d_k, channels)
        self.wq = Parameter(rng.normal(0.0, scale, size=shape))
        self.wk = Parameter(rng.normal(0.0, scale, size=shape))
        self.wv = Parameter(rng.normal(0.0, scale, size=shape))
        self.wo = Parameter(rng.normal(0.0, 1.0 / math.sqrt(heads * self.d_k),
                                       size=(channels, heads * self.d_k)))
        self.last_weights: Optional[np.ndarray] = None

    def forward(self, query: BevEmbedding, key_value: BevEmbedding) -> BevEmbedding:
        return multi_head_cross_attention(query, key_value, self)


# 別名
AttentionParams = MultiHeadCrossAttention


def _check_pair(query: BevEmbedding, key_value: BevEmbedding) -> None:
    if query.sequence.shape != key_value.sequence.shape:
        raise AttentionError(
            f"クエリ {query.sequence.shape} とキー/バリュー {key_value.sequence.shape} の形状が一致しません")


def cross_attention_head(query: BevEmbedding, key_value: BevEmbedding,
                         wq: Tensor, wk: Tensor, wv: Tensor) -> Tuple[Tensor, Tensor]:
    """
    1ヘッド分のクロスアテンション softmax(Q Kᵀ / √d_k) V

    Args:
        query: クエリ側の埋め込み (b, S, c)
        key_value: キー・バリュー側の埋め込み (b, S, c)
        wq, wk, wv: (d_k, c)

    Returns:
        (ヘッド出力 (b, S, d_k), アテンション重み (b, S, S))
    """
    _check_pair(query, key_value)
    wq, wk, wv = as_tensor(wq), as_tensor(wk), as_tensor(wv)
    c = query.channels
    if wq.shape[-1] != c or wk.shape != wq.shape or wv.shape != wq.shape:
        raise AttentionError(f"射影行列 {wq.shape} がチャネル数 {c} と一致しません")
    d_k = wq.shape[0]

    q = ops.matmul(query.sequence, ops.transpose(wq))
    k = ops.matmul(key_value.sequence, ops.transpose(wk))
    v = ops.matmul(key_value.sequence, ops.transpose(wv))
    scores = ops.mul(ops.matmul(q, ops.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(d_k))
    weights = ops.softmax(scores, axis=-1)
    return ops.matmul(weights, v), weights


def multi_head_cross_attention(query: BevEmbedding, key_value: BevEmbedding,
                               params: MultiHeadCrossAttention) -> BevEmbedding:
    """
    各ヘッドを独立に計算し、チャネル方向に連結して W^O で射影

    Raises:
        AttentionError: 形状またはチャネル数の不一致
    """
    _check_pair(query, key_value)
    if query.channels != params.channels:
        raise AttentionError(f"埋め込みチャネル {query.channels} が {params.channels} と一致しません")

    outputs: List[Tensor] = []
    weights: List[np.ndarray] = []
    for i in range(params.heads):
        head, attn = cross_attention_head(query, key_value, params.wq[i], params.wk[i], params.wv[i])
        outputs.append(head)
        weights.append(attn.data)
    params.last_weights = np.stack(weights, axis=1)

    merged = ops.concat(outputs, axis=-1) if len(outputs) > 1 else outputs[0]
    projected = ops.matmul(merged, ops.transpose(params.wo))
    return BevEmbedding(projected, query.spatial)


class CameraLidarCrossAttn(Module):
    """縮小 → 埋め込み → クロスアテンション → 復元 → 拡大"""

    def __init__(self, channels: int = 64, heads: int = 4, factor: int = 6,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.factor = factor
        self.attention = MultiHeadCrossAttention(channels, heads, rng=rng)
        self.last_spatial: Optional[Tuple[int, int]] = None

    @property
    def last_weights(self) -> Optional[np.ndarray]:
        """直近の順伝播のアテンション重み (b, n, S, S)"""
        return self.attention.last_weights

    def forward(self, lidar: Tensor, camera: Tensor) -> Tensor:
        """
        Args:
            lidar: LiDAR BEV 特徴 (b, c, h, w)（クエリ）
            camera: カメラ BEV 特徴 (b, c, h, w)（キー・バリュー）

        Returns:
            アテンション済みカメラ特徴 (b, c, h, w)
        """
        lidar, camera = as_tensor(lidar), as_tensor(camera)
        if lidar.shape != camera.shape:
            raise AttentionError(f"LiDAR {lidar.shape} とカメラ {camera.shape} の形状が一致しません")
        e_lidar = embed_bev(downsample_bev(lidar, self.factor))
        e_camera = embed_bev(downsample_bev(camera, self.factor))
        attended = multi_head_cross_attention(e_lidar, e_camera, self.attention)
        self.last_spatial = attended.spatial
        return upsample_bev(unflatten(attended), self.factor)
