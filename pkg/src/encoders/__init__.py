"""
エンコーダモジュール

LiDAR ブランチ（ピラー化 → PFN → 散布）とカメラブランチ（バックボーン → KANvtransform）を提供。
"""

from src.encoders.pillars import (
    DECORATION_DIM,
    PillarError,
    PillarGrid,
    PillarGridConfig,
    PointCloud,
    pillar_gather,
    pillar_scatter,
    pillarize,
)
from src.encoders.point_encoder import PointEncoder, PointEncoderError, point_encoder_forward
from src.encoders.camera import (
    CameraBackboneStub,
    CameraModel,
    CameraModelError,
    DepthBinConfig,
    KanvTransform,
    LiftError,
    camera_backbone_stub,
    frustum_geometry,
    kanv_transform,
    lift_splat,
)

__all__ = [
    'DECORATION_DIM',
    'PillarError',
    'PillarGrid',
    'PillarGridConfig',
    'PointCloud',
    'pillar_gather',
    'pillar_scatter',
    'pillarize',
    'PointEncoder',
    'PointEncoderError',
    'point_encoder_forward',
    'CameraBackboneStub',
    'CameraModel',
    'CameraModelError',
    'DepthBinConfig',
    'KanvTransform',
    'LiftError',
    'camera_backbone_stub',
    'frustum_geometry',
    'kanv_transform',
    'lift_splat',
]
