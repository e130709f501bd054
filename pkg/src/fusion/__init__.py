"""
融合モジュール

BEV 特徴の縮小・埋め込み、カメラ-LiDAR クロスアテンション、ConvKAN フューザーを提供。
"""

from src.fusion.bev import (
    BevEmbedding,
    BevFeature,
    BevShapeError,
    downsample_bev,
    embed_bev,
    unflatten,
    upsample_bev,
)
from src.fusion.cross_attn import (
    AttentionError,
    AttentionParams,
    CameraLidarCrossAttn,
    MultiHeadCrossAttention,
    cross_attention_head,
    multi_head_cross_attention,
)
from src.fusion.fuser import ConvKanFuser, conv_kan_fuse

__all__ = [
    'BevEmbedding',
    'BevFeature',
    'BevShapeError',
    'downsample_bev',
    'embed_bev',
    'unflatten',
    'upsample_bev',
    'AttentionError',
    'AttentionParams',
    'CameraLidarCrossAttn',
    'MultiHeadCrossAttention',
    'cross_attention_head',
    'multi_head_cross_attention',
    'ConvKanFuser',
    'conv_kan_fuse',
]
